"""Run configuration: a TOML file of flat sections, validated strictly, with flag overrides."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    bars: str = ""
    news: str = ""
    cache: str = "scores.jsonl"
    frames: str = "frames.csv"
    out_dir: str = "runs"


@dataclass
class FeatureSection:
    mode: str = "returns"
    no_llm: bool = False


@dataclass
class EnvSection:
    sltp: float = 0.001
    fee_bps: float = 0.0
    episode_length: int = 3000


@dataclass
class EvalSection:
    count: int = 256
    length: int = 3000
    seed: int = 7


@dataclass
class TunerSection:
    algo: str = "ddqn"
    net: str = "mlp"
    trials: int = 20
    episodes: int = 200
    eval_interval: int = 30000
    n_eval: int = 256
    patience: int = 5
    seed: int = 0
    desk_scale: bool = False


@dataclass
class LlmSection:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gemini-2.5-flash"
    api_key_env: str = "NEWSRL_LLM_API_KEY"
    char_budget: int = 24000
    max_in_flight: int = 2
    max_retries: int = 3
    backoff: float = 1.0
    timeout: float = 60.0
    offline: bool = False
    fixtures: str = ""


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    env: EnvSection = field(default_factory=EnvSection)
    eval: EvalSection = field(default_factory=EvalSection)
    tuner: TunerSection = field(default_factory=TunerSection)
    llm: LlmSection = field(default_factory=LlmSection)

    def validate(self) -> RunConfig:
        if self.features.mode not in ("returns", "raw_scaled"):
            raise ConfigError(f"features.mode must be returns or raw_scaled, got {self.features.mode!r}")
        if self.tuner.algo not in ("ddqn", "grpo"):
            raise ConfigError(f"tuner.algo must be ddqn or grpo, got {self.tuner.algo!r}")
        if self.tuner.net not in ("mlp", "lstm", "transformer"):
            raise ConfigError(f"tuner.net must be mlp, lstm or transformer, got {self.tuner.net!r}")
        if not (self.env.sltp > 0 or math.isinf(self.env.sltp)):
            raise ConfigError("env.sltp must be positive (inf disables SL/TP)")
        for name in ("episode_length",):
            if getattr(self.env, name) < 2:
                raise ConfigError(f"env.{name} must be at least 2")
        for name in ("count", "length"):
            if getattr(self.eval, name) < 1:
                raise ConfigError(f"eval.{name} must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)

    def write_resolved(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / "resolved_config.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_json() + "\n", encoding="utf-8")
        return p


def _coerce(section: str, f, value):
    want = f.type if isinstance(f.type, type) else {"str": str, "int": int, "float": float, "bool": bool}[f.type]
    if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if want is float and isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    if not isinstance(value, want) or (want is int and isinstance(value, bool)):
        raise ConfigError(f"{section}.{f.name}: expected {want.__name__}, got {value!r}")
    return value


def from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: f for f in fields(RunConfig)}
    for name, body in doc.items():
        if name not in sections:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
        target = getattr(cfg, name)
        known = {f.name: f for f in fields(target)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            setattr(target, key, _coerce(name, known[key], value))
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return from_dict(doc)
