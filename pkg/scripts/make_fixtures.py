"""Regenerate the bundled fixtures under src/newsrl/fixtures/."""

import argparse
from pathlib import Path

from newsrl.synthetic import FIXTURE_BARS, FIXTURE_SEED, build_fixtures

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "newsrl" / "fixtures"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    ap.add_argument("--bars", type=int, default=FIXTURE_BARS)
    ap.add_argument("--seed", type=int, default=FIXTURE_SEED)
    args = ap.parse_args()
    for path in build_fixtures(args.out, args.bars, args.seed):
        print(path)
