"""Command-line entry point: ``newsrl <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import DataError
from .pipeline import (ALL_RUNS, RunSpec, align, backtest_top, budget_from_config, build_report,
                       endpoint_from_config, eval_budget, evaluate_top, ingest_bars, ingest_news, load_dataset, score,
                       tune_run, with_overrides)

log = logging.getLogger("newsrl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ logging


class _JsonEvents(logging.Handler):
    """One JSON object per log record, appended to the run's event log."""

    def __init__(self, path: Path) -> None:
        super().__init__(logging.INFO)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def emit(self, record: logging.LogRecord) -> None:
        event = {"time": record.created, "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        self._fh.write(json.dumps(event) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
        super().close()


def _setup_logging(verbose: bool, events: Path | None) -> list[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    stderr = logging.StreamHandler(sys.stderr)
    stderr.setLevel(logging.DEBUG if verbose else logging.WARNING)
    stderr.setFormatter(logging.Formatter("%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"))
    handlers: list[logging.Handler] = [stderr]
    if events is not None:
        handlers.append(_JsonEvents(events))
    for h in handlers:
        root.addHandler(h)
    return handlers


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration; flags override its values")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs (default 1)")
    p.add_argument("--log-file", type=Path, help="JSON event log (default: events.jsonl in the output directory)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (default: tuner.seed from the config)")


def _run_flags(p: argparse.ArgumentParser, need: bool = True) -> None:
    p.add_argument("--algo", choices=("ddqn", "grpo"), required=need, help="learning algorithm")
    p.add_argument("--net", choices=("mlp", "lstm", "transformer"), required=need, help="network backbone")
    p.add_argument("--no-llm", action="store_true", help="zero the sentiment and risk feature channels")


def _budget_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=Path, help="aligned frames CSV (default: data.frames)")
    p.add_argument("--runs-dir", type=Path, help="trial stores and checkpoints (default: data.out_dir)")
    p.add_argument("--desk-scale", action="store_true", help="shrink episode, evaluation and budget sizes ~20x")
    p.add_argument("--feature-mode", choices=("returns", "raw_scaled"), help="observation features")
    p.add_argument("--sltp", type=float, help="stop-loss/take-profit threshold as a fraction; inf disables")
    p.add_argument("--fee-bps", type=float, help="fee per fill in basis points")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="newsrl", description="News-aware RL trading: data, scoring, tuning, evaluation, reports.")
    ap.add_argument("--version", action="version", version=f"newsrl {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("ingest-bars", help="validate a minute-bar CSV and write the normalized copy")
    _common(p, seed=False)
    p.add_argument("--input", type=Path, required=True, help="CSV with header ts,open,high,low,close,volume")
    p.add_argument("--output", type=Path, help="destination CSV (default: data.bars)")

    p = sub.add_parser("ingest-news", help="validate a news JSONL file and write the deduplicated copy")
    _common(p, seed=False)
    p.add_argument("--input", type=Path, required=True, help="JSONL with ts (ms), title and optional body")
    p.add_argument("--output", type=Path, help="destination JSONL (default: data.news)")

    p = sub.add_parser("score-news", help="score news sentiment and risk with the LLM endpoint into the cache")
    _common(p, seed=False)
    p.add_argument("--news", type=Path, help="news JSONL (default: data.news)")
    p.add_argument("--cache", type=Path, help="score cache JSONL (default: data.cache)")
    p.add_argument("--offline", action="store_true", help="answer prompts from recorded fixture responses")
    p.add_argument("--fixtures", type=Path, help="recorded responses JSONL for --offline (default: bundled)")
    p.add_argument("--model", help="model id (default: llm.model)")

    p = sub.add_parser("align", help="forward-fill cached scores onto bars and write aligned frames")
    _common(p, seed=False)
    p.add_argument("--bars", type=Path, help="bars CSV (default: data.bars)")
    p.add_argument("--news", type=Path, help="news JSONL (default: data.news)")
    p.add_argument("--cache", type=Path, help="score cache JSONL (default: data.cache)")
    p.add_argument("--model", help="model id whose scores to use (default: llm.model)")
    p.add_argument("--output", type=Path, help="frames CSV (default: data.frames)")

    p = sub.add_parser("tune", help="hyperparameter search; appends TrialRecords to the run's trial store")
    _common(p)
    _run_flags(p)
    _budget_flags(p)
    p.add_argument("--trials", type=int, help="number of trials to run (default: tuner.trials)")

    p = sub.add_parser("train", help="train one agent with fixed hyperparameters and save a checkpoint")
    _common(p)
    _run_flags(p)
    _budget_flags(p)
    p.add_argument("--params", help="JSON object (or path to one) of tuner-style parameters; defaults otherwise")
    p.add_argument("--output", type=Path, required=True, help="checkpoint path")

    p = sub.add_parser("evaluate", help="mean sampled-period return of the top-k tuned agents (or a checkpoint)")
    _common(p)
    _run_flags(p, need=False)
    _budget_flags(p)
    p.add_argument("--top-k", type=int, default=1, help="average over the k best trials (default 1)")
    p.add_argument("--split", choices=("train", "validation", "test"), default="test", help="split to sample")
    p.add_argument("--checkpoint", type=Path, help="evaluate this checkpoint instead of tuned trials")
    p.add_argument("--count", type=int, help="number of windows (default: eval.count)")
    p.add_argument("--length", type=int, help="window length in minutes (default: eval.length)")

    p = sub.add_parser("backtest", help="one continuous test-period episode; writes the equity curve CSV")
    _common(p)
    _run_flags(p, need=False)
    _budget_flags(p)
    p.add_argument("--rank", type=int, default=0, help="0-based rank of the tuned trial to use (default 0)")
    p.add_argument("--checkpoint", type=Path, help="backtest this checkpoint instead of a tuned trial")
    p.add_argument("--output", type=Path, required=True, help="curve CSV (ts,equity,side,close)")
    p.add_argument("--trace", type=Path, help="also write the per-step trade trace CSV")

    p = sub.add_parser("report", help="Table 1/Table 2 CSVs, per-run curves, SVG overlay and summary")
    _common(p, seed=False)
    _budget_flags(p)
    p.add_argument("--out", type=Path, help="report directory (default: <runs-dir>/report)")
    p.add_argument("--runs", nargs="+", help="run specs algo:net[:nollm] (default: all with a trial store)")

    p = sub.add_parser("selftest", help="end-to-end desk run on bundled fixtures plus property checks")
    _common(p)
    p.add_argument("--out", type=Path, default=Path("selftest-out"), help="output directory (default ./selftest-out)")
    p.add_argument("--runs", nargs="+", help="run specs algo:net[:nollm] to tune (default: a fast subset)")
    p.add_argument("--trials", type=int, help="trials per run (default 5)")
    return ap


# ---------------------------------------------------------------- commands


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    data, features, env, tuner, llm, ev = {}, {}, {}, {}, {}, {}
    if getattr(args, "frames", None):
        data["frames"] = str(args.frames)
    if getattr(args, "runs_dir", None):
        data["out_dir"] = str(args.runs_dir)
    if getattr(args, "feature_mode", None):
        features["mode"] = args.feature_mode
    if getattr(args, "no_llm", False):
        features["no_llm"] = True
    if getattr(args, "sltp", None) is not None:
        env["sltp"] = args.sltp
    if getattr(args, "fee_bps", None) is not None:
        env["fee_bps"] = args.fee_bps
    for key in ("algo", "net", "trials", "seed"):
        if getattr(args, key, None) is not None:
            tuner[key] = getattr(args, key)
    if getattr(args, "desk_scale", False):
        tuner["desk_scale"] = True
    if getattr(args, "offline", False):
        llm["offline"] = True
    if getattr(args, "fixtures", None):
        llm["fixtures"] = str(args.fixtures)
    if getattr(args, "model", None):
        llm["model"] = args.model
    for key in ("count", "length"):
        if getattr(args, key, None) is not None:
            ev[key] = getattr(args, key)
    return with_overrides(cfg, data=data, features=features, env=env, tuner=tuner, llm=llm, eval=ev)


def _spec(cfg: RunConfig) -> RunSpec:
    return RunSpec(cfg.tuner.algo, cfg.tuner.net, cfg.features.no_llm)


def _events_path(args, cfg: RunConfig) -> Path:
    if args.log_file:
        return args.log_file
    if args.command == "selftest":
        return args.out / "events.jsonl"
    return Path(cfg.data.out_dir) / "events.jsonl"


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_ingest_bars(args, cfg: RunConfig) -> int:
    out = Path(args.output or cfg.data.bars or "bars.csv")
    n = ingest_bars(args.input, out)
    cfg.write_resolved(out.parent)
    log.info("ingested %d bars into %s", n, out)
    _emit({"bars": n, "output": str(out)})
    return EXIT_OK


def cmd_ingest_news(args, cfg: RunConfig) -> int:
    out = Path(args.output or cfg.data.news or "news.jsonl")
    n = ingest_news(args.input, out)
    cfg.write_resolved(out.parent)
    log.info("ingested %d news items into %s", n, out)
    _emit({"news": n, "output": str(out)})
    return EXIT_OK


def cmd_score_news(args, cfg: RunConfig) -> int:
    news = Path(args.news or cfg.data.news)
    cache = Path(args.cache or cfg.data.cache)
    endpoint = endpoint_from_config(cfg)
    added = score(news, cache, endpoint)
    cfg.write_resolved(cache.parent)
    log.info("scored %d new items into %s", added, cache)
    _emit({"newly_scored": added, "cache": str(cache), "model": endpoint.model})
    return EXIT_OK


def cmd_align(args, cfg: RunConfig) -> int:
    out = Path(args.output or cfg.data.frames)
    n = align(args.bars or cfg.data.bars, args.news or cfg.data.news, args.cache or cfg.data.cache, cfg.llm.model, out)
    cfg.write_resolved(out.parent)
    _emit({"frames": n, "output": str(out)})
    return EXIT_OK


def cmd_tune(args, cfg: RunConfig) -> int:
    spec = _spec(cfg)
    runs = Path(cfg.data.out_dir)
    cfg.write_resolved(runs)
    records = tune_run(cfg, spec, runs, cfg.tuner.trials, cfg.tuner.seed)
    _emit({"run": spec.name, "trials": [{"trial_id": r.trial_id, "status": r.status, "best_score": r.best_score}
                                        for r in records]})
    return EXIT_OK


def _load_params(text: str | None) -> dict:
    if not text:
        return {}
    p = Path(text)
    try:
        return json.loads(p.read_text(encoding="utf-8") if p.is_file() else text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is neither a JSON object nor a JSON file: {exc}") from None


def cmd_train(args, cfg: RunConfig) -> int:
    from .training import Trainer, build_net_and_hyper

    spec = _spec(cfg)
    ds = load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm)
    budget = budget_from_config(cfg)
    net, hyper = build_net_and_hyper(spec.algo, spec.net, _load_params(args.params), ds.features.matrix.shape[1],
                                     budget.episode_length)
    agent = Trainer(spec.algo, net, hyper, ds, budget, cfg.tuner.seed).run()
    args.output.parent.mkdir(parents=True, exist_ok=True)
    agent.save(args.output)
    cfg.write_resolved(args.output.parent)
    _emit({"run": spec.name, "checkpoint": str(args.output)})
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .agents import Agent
    from .evaluation import evaluate_periods

    runs = Path(cfg.data.out_dir)
    if args.checkpoint:
        agent = Agent.load(args.checkpoint)
        ds = load_dataset(cfg.data.frames, agent.feature_mode, agent.no_llm)
        count, length = eval_budget(cfg)
        mean, results = evaluate_periods(agent, ds, args.split, count, length, cfg.eval.seed, cfg.env.sltp,
                                         cfg.env.fee_bps)
        out = {"checkpoint": str(args.checkpoint), "split": args.split, "mean_usdt": mean, "windows": len(results)}
    else:
        if not (args.algo and args.net):
            raise UsageError("evaluate needs --algo and --net, or --checkpoint")
        spec = _spec(cfg)
        ds = load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm)
        mean, metrics = evaluate_top(cfg, runs, spec, args.top_k, ds, args.split)
        out = {"run": spec.name, "split": args.split, "top_k": args.top_k, "mean_usdt": mean, "per_agent": metrics}
        path = runs / f"eval_{spec.name}_top{args.top_k}_{args.split}.json"
        path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cfg.write_resolved(runs)
    _emit(out)
    return EXIT_OK


def cmd_backtest(args, cfg: RunConfig) -> int:
    from .agents import Agent
    from .evaluation import full_backtest

    for path in (args.output, args.trace):
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        agent = Agent.load(args.checkpoint)
        ds = load_dataset(cfg.data.frames, agent.feature_mode, agent.no_llm)
        curve = full_backtest(agent, ds, "test", cfg.env.sltp, cfg.env.fee_bps, args.trace)
    else:
        if not (args.algo and args.net):
            raise UsageError("backtest needs --algo and --net, or --checkpoint")
        spec = _spec(cfg)
        ds = load_dataset(cfg.data.frames, cfg.features.mode, spec.no_llm)
        curve = backtest_top(cfg, cfg.data.out_dir, spec, ds, args.rank, args.trace)
    curve.write_csv(args.output)
    cfg.write_resolved(args.output.parent)
    _emit({"output": str(args.output), "pct_return": curve.pct_return, "steps": len(curve.equity) - 1})
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    runs = Path(cfg.data.out_dir)
    specs = [RunSpec.parse(s) for s in args.runs] if args.runs else list(ALL_RUNS)
    out = args.out or runs / "report"
    files = build_report(cfg, runs, out, specs, args.jobs)
    cfg.write_resolved(out)
    _emit({"files": [str(f) for f in files]})
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import DEFAULT_RUNS, run_selftest

    specs = [RunSpec.parse(s) for s in args.runs] if args.runs else list(DEFAULT_RUNS)
    seed = args.seed if args.seed is not None else 1
    checks = run_selftest(args.out, seed, specs, args.jobs, args.trials)
    return EXIT_OK if all(c.ok for c in checks) else EXIT_RUNTIME


COMMANDS = {"ingest-bars": cmd_ingest_bars, "ingest-news": cmd_ingest_news, "score-news": cmd_score_news,
            "align": cmd_align, "tune": cmd_tune, "train": cmd_train, "evaluate": cmd_evaluate,
            "backtest": cmd_backtest, "report": cmd_report, "selftest": cmd_selftest}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("newsrl: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    handlers: list[logging.Handler] = []
    start = time.time()
    try:
        cfg = _resolve(args)
        handlers = _setup_logging(args.verbose, _events_path(args, cfg))
        log.info("start %s argv=%s", args.command, json.dumps(list(argv) if argv is not None else sys.argv[1:]))
        code = COMMANDS[args.command](args, cfg)
        log.info("done %s exit=%d seconds=%.1f", args.command, code, time.time() - start)
        return code
    except UsageError as exc:
        print(f"newsrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, ConfigError) as exc:
        print(f"newsrl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"newsrl {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
