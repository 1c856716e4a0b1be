from newsrl.pipeline import fixture_path
from newsrl.synthetic import FIXTURE_BARS, FIXTURE_SEED, build_fixtures


def test_bundled_fixtures_regenerate_byte_for_byte(tmp_path):
    for p in build_fixtures(tmp_path, FIXTURE_BARS, FIXTURE_SEED):
        assert p.read_bytes() == fixture_path(p.name).read_bytes(), p.name
