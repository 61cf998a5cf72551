"""Command-line driver.

Every subcommand reads an optional YAML config (unknown keys are rejected),
applies command-line overrides, writes its artifact and a JSON manifest next
to it. Failures print a one-line JSON error on stderr and exit with 2
(validation), 3 (data) or 4 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .estimation import FittedModel, fit_model
from .events import IngestError, ingest_events, log_stats, write_events
from .evaluate import default_methods, run_experiment, split_protocol
from .inference import IntensityMatrix, infer_at, rank_audience
from .kernels import FitDegenerate
from .preprocess import preprocess_log
from .simulate import GroundTruthModel, SimulationError, inject_noise, simulate_logs

_logger = logging.getLogger("audiencetpp")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------


@dataclass
class FilterConfig:
    promo: bool = True
    resellers: bool = True
    reseller_threshold: int = 10
    reseller_window_days: float = 7.0


@dataclass
class SmoothingConfig:
    alpha: float = 3.0
    beta: float = 0.1


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [5, 10])
    segments: int = 7
    segment_days: float = 9.0
    test_days: float = 60.0


@dataclass
class PipelineConfig:
    events: str | None = None
    out_dir: str = "out"
    format: str | None = None
    window_days: float | None = None
    grain_days: float = 1.0
    horizon_days: float = 180.0
    delta_days: float = 9.0
    attribution_window_days: float = 10.0
    K: int = 5
    estimator: str = "LMKV"
    per_user_base: bool = True
    min_samples: int = 30
    reach: int | None = None
    reach_k: int = 5
    category: str | None = None
    seed: int = 0
    threads: int = 1
    filters: FilterConfig = field(default_factory=FilterConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        checks = [
            (self.grain_days > 0, "grain_days must be positive"),
            (self.horizon_days > 0, "horizon_days must be positive"),
            (self.delta_days > 0, "delta_days must be positive"),
            (self.attribution_window_days > 0, "attribution_window_days must be positive"),
            (self.K >= 1, "K must be at least 1"),
            (self.estimator.upper() in ("MKV", "LMKV"), "estimator must be MKV or LMKV"),
            (self.min_samples >= 2, "min_samples must be at least 2"),
            (self.reach is None or self.reach >= 1, "reach must be at least 1"),
            (self.reach_k >= 1, "reach_k must be at least 1"),
            (self.threads >= 1, "threads must be at least 1"),
            (self.window_days is None or self.window_days > 0, "window_days must be positive"),
            (self.format in (None, "csv", "jsonl"), "format must be csv or jsonl"),
            (self.filters.reseller_threshold >= 2, "reseller_threshold must be at least 2"),
            (self.filters.reseller_window_days > 0, "reseller_window_days must be positive"),
            (self.smoothing.alpha >= 0 and self.smoothing.beta > 0, "smoothing out of range"),
            (len(self.eval.ks) > 0 and all(int(k) >= 1 for k in self.eval.ks), "eval.ks must be positive"),
            (self.eval.segments >= 1 and self.eval.segment_days > 0, "eval segments out of range"),
            (self.eval.test_days > 0, "eval.test_days must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)
        cells = self.horizon_days / self.grain_days
        if abs(cells - round(cells)) > 1e-9 * max(cells, 1.0):
            raise UsageError("horizon_days must be a whole number of grain_days cells")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = {"filters": FilterConfig, "smoothing": SmoothingConfig, "eval": EvalConfig}.get(name)
        if sub is not None and cls is PipelineConfig:
            value = _build(sub, value or {}, f"{where}.{name}")
        kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    if not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    return _build(PipelineConfig, data, "config")


OVERRIDES = ("grain_days", "horizon_days", "reach", "category", "threads", "seed", "events", "out_dir")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    for name in OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    cfg.validate()
    return cfg


# -- helpers ----------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(path: str, cfg: PipelineConfig) -> str:
    if cfg.format:
        return cfg.format
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "csv"


def _read_log(path: str | None, cfg: PipelineConfig):
    if not path:
        raise UsageError("an events file is required (--events or config 'events')")
    if not Path(path).exists():
        raise DataError(f"events file {path} not found")
    return ingest_events(path, _fmt(path, cfg), window_length=cfg.window_days)


class Manifest:
    """Collects inputs, outputs and stage timings for one command."""

    def __init__(self, command: str, cfg: PipelineConfig):
        self.command = command
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.notes: dict = {}

    def input(self, path) -> None:
        if path and Path(path).exists():
            self.inputs[str(path)] = _sha256(Path(path))

    def output(self, path) -> None:
        self.outputs[str(path)] = _sha256(Path(path))

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)

    def write(self, path) -> None:
        doc = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_s": self.timings,
            **({"notes": self.notes} if self.notes else {}),
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _default_reach(log, cfg: PipelineConfig) -> np.ndarray:
    """``reach_k * p_c`` with ``p_c`` the mean purchases per ``delta_days``."""
    span = log.window_length
    p = log.category_totals() * cfg.delta_days / span
    return np.maximum(1, np.round(cfg.reach_k * p)).astype(int)


def _rank_all(lam: IntensityMatrix, reach, cfg: PipelineConfig, dest: Path) -> None:
    cats = [cfg.category] if cfg.category else list(lam.categories)
    for c in cats:
        if c not in lam.categories:
            raise DataError(f"unknown category {c!r}")
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category_id", "rank", "user_id", "score"])
        for c in cats:
            ci = lam.categories.index(c)
            r = cfg.reach if cfg.reach is not None else int(reach[ci])
            r = min(r, len(lam.users))
            rank_audience(lam, ci, r).write_rows(w, with_category=True)


# -- subcommands ------------------------------------------------------------------


def cmd_stats(args, cfg: PipelineConfig) -> None:
    m = Manifest("stats", cfg)
    log = _read_log(cfg.events, cfg)
    m.input(cfg.events)
    text = json.dumps(log_stats(log).to_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _write_text(out, text)
        m.output(out)
        m.write(_manifest_path(out))
    else:
        sys.stdout.write(text)


def cmd_preprocess(args, cfg: PipelineConfig) -> None:
    m = Manifest("preprocess", cfg)
    log = _read_log(cfg.events, cfg)
    m.input(cfg.events)
    with m.stage("preprocess"):
        clean, info = preprocess_log(
            log,
            promotions=cfg.filters.promo,
            resellers=cfg.filters.resellers,
            threshold=cfg.filters.reseller_threshold,
            window=cfg.filters.reseller_window_days,
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_events(clean, out, _fmt(str(out), cfg))
    m.output(out)
    m.notes = info
    m.write(_manifest_path(out))


def _fit(log, cfg: PipelineConfig) -> FittedModel:
    return fit_model(
        log,
        K=cfg.K,
        estimator=cfg.estimator,
        alpha_s=cfg.smoothing.alpha,
        beta_s=cfg.smoothing.beta,
        window=cfg.attribution_window_days,
        per_user_base=cfg.per_user_base,
        grain=cfg.grain_days,
        horizon_days=cfg.horizon_days,
        seed=cfg.seed,
        threads=cfg.threads,
        min_samples=cfg.min_samples,
    )


def cmd_estimate(args, cfg: PipelineConfig) -> None:
    m = Manifest("estimate", cfg)
    log = _read_log(cfg.events, cfg)
    m.input(cfg.events)
    with m.stage("estimate"):
        model = _fit(log, cfg)
    out = Path(args.out)
    _write_text(out, model.to_json())
    m.output(out)
    m.write(_manifest_path(out))


def _load_model(path) -> FittedModel:
    if not path or not Path(path).exists():
        raise DataError(f"model file {path} not found")
    try:
        return FittedModel.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"model file {path} is malformed: {exc}") from exc


def cmd_infer(args, cfg: PipelineConfig) -> None:
    m = Manifest("infer", cfg)
    log = _read_log(cfg.events, cfg)
    model = _load_model(args.model)
    if tuple(model.categories) != tuple(log.categories.ids):
        raise DataError("model categories do not match the log")
    m.input(cfg.events)
    m.input(args.model)
    t = log.window_length if args.at is None else args.at
    with m.stage("infer"):
        lam = infer_at(log, model.base, model.precompute(), t, threads=cfg.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lam.to_csv(out)
    m.output(out)
    m.write(_manifest_path(out))


def cmd_rank(args, cfg: PipelineConfig) -> None:
    m = Manifest("rank", cfg)
    if not Path(args.intensities).exists():
        raise DataError(f"intensity file {args.intensities} not found")
    lam = IntensityMatrix.from_csv(args.intensities)
    m.input(args.intensities)
    if cfg.reach is None:
        if not cfg.events:
            raise UsageError("give --reach or --events to derive reach from purchase rates")
        log = _read_log(cfg.events, cfg)
        m.input(cfg.events)
        by_id = dict(zip(log.categories.ids, _default_reach(log, cfg)))
        reach = [by_id.get(c, 1) for c in lam.categories]
    else:
        reach = None
    out = Path(args.out)
    with m.stage("rank"):
        _rank_all(lam, reach, cfg, out)
    m.output(out)
    m.write(_manifest_path(out))


def cmd_simulate(args, cfg: PipelineConfig) -> None:
    m = Manifest("simulate", cfg)
    if not Path(args.model).exists():
        raise DataError(f"model spec {args.model} not found")
    try:
        spec = GroundTruthModel.load(args.model)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"model spec {args.model} is malformed: {exc}") from exc
    m.input(args.model)
    with m.stage("simulate"):
        log = simulate_logs(spec, seed=cfg.seed, n_users=args.users)
        if args.promo_rate or args.resellers:
            log = inject_noise(log, args.promo_rate, args.resellers, seed=cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_events(log, out, _fmt(str(out), cfg))
    m.output(out)
    m.write(_manifest_path(out))


def _evaluate(log, cfg: PipelineConfig, m: Manifest, out_dir: Path) -> None:
    proto = split_protocol(
        log, cfg.eval.test_days, cfg.eval.segment_days, cfg.eval.segments, cfg.eval.ks
    )
    with m.stage("evaluate.estimate"):
        model = _fit(log.truncate(proto.train_end), cfg)
    with m.stage("evaluate.run"):
        res = run_experiment(
            log, proto, default_methods(model, delta=cfg.delta_days, seed=cfg.seed, threads=cfg.threads)
        )
    metrics = out_dir / "metrics.csv"
    metrics.parent.mkdir(parents=True, exist_ok=True)
    res.to_csv(metrics)
    table = out_dir / "metrics_table.txt"
    _write_text(table, res.format_table())
    m.output(metrics)
    m.output(table)
    m.notes["test_only_users_excluded"] = res.test_only_users
    m.notes["empty_cells_skipped"] = {"/".join(map(str, k)): v for k, v in sorted(res.skipped.items())}
    sys.stdout.write(res.format_table())


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    m = Manifest("evaluate", cfg)
    log = _read_log(cfg.events, cfg)
    m.input(cfg.events)
    out_dir = Path(cfg.out_dir)
    _evaluate(log, cfg, m, out_dir)
    m.write(out_dir / "evaluate.manifest.json")


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    """Pre-process, estimate, infer, rank and evaluate in one run."""
    m = Manifest("pipeline", cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = _read_log(cfg.events, cfg)
    m.input(cfg.events)
    with m.stage("preprocess"):
        log, info = preprocess_log(
            raw,
            promotions=cfg.filters.promo,
            resellers=cfg.filters.resellers,
            threshold=cfg.filters.reseller_threshold,
            window=cfg.filters.reseller_window_days,
        )
    m.notes["preprocess"] = info
    clean = out_dir / "events.clean.csv"
    write_events(log, clean)
    m.output(clean)
    with m.stage("estimate"):
        model = _fit(log, cfg)
    model_path = out_dir / "model.json"
    _write_text(model_path, model.to_json())
    m.output(model_path)
    with m.stage("infer"):
        lam = infer_at(log, model.base, model.precompute(), log.window_length, threads=cfg.threads)
    lam_path = out_dir / "intensities.csv"
    lam.to_csv(lam_path)
    m.output(lam_path)
    with m.stage("rank"):
        aud_path = out_dir / "audience.csv"
        _rank_all(lam, _default_reach(log, cfg), cfg, aud_path)
    m.output(aud_path)
    if not args.skip_evaluate:
        _evaluate(log, cfg, m, out_dir)
    m.write(out_dir / "pipeline.manifest.json")


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--events", help="purchase log (CSV or JSONL)")
    common.add_argument("--grain-days", type=_positive_float, dest="grain_days")
    common.add_argument("--horizon-days", type=_positive_float, dest="horizon_days")
    common.add_argument("--reach", type=_positive_int)
    common.add_argument("--category")
    common.add_argument("--threads", type=_positive_int)
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="audiencetpp", description="Audience creation from purchase logs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("stats", parents=[common], help="log summary statistics")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("preprocess", parents=[common], help="drop promotions and re-sellers")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("estimate", parents=[common], help="fit base rates, kernels and network")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("infer", parents=[common], help="intensity matrix at a time")
    s.add_argument("--model", required=True)
    s.add_argument("--at", type=float, help="evaluation time in days (default: window end)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("rank", parents=[common], help="top users per category")
    s.add_argument("--intensities", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("simulate", parents=[common], help="sample a synthetic log")
    s.add_argument("--model", required=True, help="ground-truth model JSON")
    s.add_argument("--users", type=_positive_int)
    s.add_argument("--promo-rate", type=float, default=0.0, dest="promo_rate")
    s.add_argument("--resellers", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", parents=[common], help="offline precision/recall")
    s.add_argument("--out-dir", dest="out_dir")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage")
    s.add_argument("--out-dir", dest="out_dir")
    s.add_argument("--skip-evaluate", action="store_true", dest="skip_evaluate")
    s.set_defaults(func=cmd_pipeline)
    return p


def _classify(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, argparse.ArgumentError)):
        return EXIT_VALIDATION
    if isinstance(exc, (FloatingPointError, OverflowError, np.linalg.LinAlgError,
                        SimulationError, FitDegenerate)):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataError, IngestError, OSError, KeyError, ValueError)):
        return EXIT_DATA
    return EXIT_NUMERICAL if isinstance(exc, ArithmeticError) else EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = resolve_config(args)
        args.func(args, cfg)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error JSON
        code = _classify(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
        sys.stderr.write(json.dumps(err) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
