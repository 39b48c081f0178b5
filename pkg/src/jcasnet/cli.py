"""Command-line front end: train, validate, encoding-compare, esprit-bench, plot."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .channel import ArrayConfig, draw_scenes, snapshot_stack
from .esprit import esprit_scan
from .model import JcasModel
from .numerics import rng_stream
from .plotting import PlotError, line_chart
from .setmethods import matched_sq_errors
from .training import TrainConfig, TrainingDiverged, stage_of, train, validate

log = logging.getLogger("jcasnet")

DEFAULT_U = (1, 2, 3, 4, 6, 8, 16, 32, 64)
OUT_ENV = "JCAS_OUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_EXTRA_KEYS = ("u_list", "n_validate", "out_dir")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    u_list: tuple = DEFAULT_U
    n_validate: int = 10_000
    out_dir: str | None = None

    def __post_init__(self):
        self.u_list = tuple(int(u) for u in self.u_list)
        if not self.u_list or self.u_list[0] < 1 or any(b <= a for a, b in zip(self.u_list, self.u_list[1:])):
            raise ConfigError(f"u_list must be non-empty, >= 1 and strictly increasing: {list(self.u_list)}")
        if self.n_validate < 1:
            raise ConfigError("n_validate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = sorted(set(d) - set(_TRAIN_KEYS) - set(_EXTRA_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            tc = TrainConfig(**{k: d[k] for k in _TRAIN_KEYS if k in d})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        extra = {k: d[k] for k in _EXTRA_KEYS if k in d}
        return cls(tc, **extra)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self.train)
        d.update(u_list=list(self.u_list), n_validate=self.n_validate, out_dir=self.out_dir)
        for k in ("phi_region_deg", "theta_region_deg"):
            d[k] = list(d[k])
        return d

    def config_hash(self) -> str:
        """Short digest of everything that affects results except the seed."""
        d = self.to_dict()
        for k in ("seed", "out_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(data)


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _tag(rows, exp: ExperimentConfig):
    h = exp.config_hash()
    return [{**r, "seed": exp.train.seed, "config_hash": h} for r in rows]


# ----------------------------------------------------------------- commands


def run_training(exp: ExperimentConfig, out: Path, prefix: str = ""):
    """Train, writing stage checkpoints, the final model and history CSVs to ``out``."""
    cfg = exp.train
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint(rec, model):
        last = rec.epoch + 1 == cfg.epochs
        if last or stage_of(rec.epoch + 1, cfg.epochs) != rec.stage:
            model.save(out / f"{prefix}stage{rec.stage}.ckpt", extra={"epoch": rec.epoch})

    try:
        model, hist = train(cfg, progress=checkpoint)
    except TrainingDiverged as exc:
        snap = exc.snapshot
        snap["model"].save(out / f"{prefix}diverged.ckpt", extra={"epoch": snap["epoch"], "batch": snap["batch"]})
        (out / f"{prefix}diverged.json").write_text(
            json.dumps({k: v for k, v in snap.items() if k != "model"}, indent=2) + "\n")
        raise
    model.save(out / f"{prefix}model.ckpt", extra={"config_hash": exp.config_hash(), "seed": cfg.seed})
    write_csv(out / f"{prefix}history.csv", _tag([dataclasses.asdict(r) for r in hist.epochs], exp))
    write_csv(out / f"{prefix}batches.csv", _tag([dataclasses.asdict(r) for r in hist.batches], exp))
    return model, hist


def cmd_train(exp: ExperimentConfig, out: Path, args) -> None:
    run_training(exp, out)
    (out / "config.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_validate(exp: ExperimentConfig, out: Path, args) -> None:
    ckpt = args.checkpoint or out / "model.ckpt"
    model = _load_model(ckpt)
    cfg = exp.train
    mismatch = [k for k in ("M", "K", "t_max", "encoding") if getattr(model, k) != getattr(cfg, k)]
    if mismatch:
        raise ConfigError(f"checkpoint {ckpt} does not match config in: {', '.join(mismatch)}")
    recs = validate(model, cfg, exp.u_list, exp.n_validate)
    write_csv(out / "metrics.csv", _tag([dataclasses.asdict(r) for r in recs], exp))


def cmd_encoding_compare(exp: ExperimentConfig, out: Path, args) -> None:
    rows = []
    for enc in ("counting", "onehot"):
        sub = dataclasses.replace(exp, train=dataclasses.replace(exp.train, encoding=enc))
        _, hist = run_training(sub, out, prefix=f"{enc}_")
        rows += [{"encoding": enc, "epoch": r.epoch, "stage": r.stage, "train_pd": r.train_pd,
                  "train_pf": r.train_pf, "pd": r.pd, "pf": r.pf} for r in hist.epochs]
    write_csv(out / "encoding_compare.csv", _tag(rows, exp))


def cmd_esprit_bench(exp: ExperimentConfig, out: Path, args) -> None:
    """ESPRIT RMSE versus u with the true target count supplied."""
    cfg = exp.train
    array = ArrayConfig(cfg.K, cfg.d_over_lambda)
    if args.checkpoint:
        transmit = _load_model(args.checkpoint).transmitter()
    else:
        # PSK symbols from a single isotropic element
        const = np.exp(2j * np.pi * np.arange(cfg.M) / cfg.M)
        nu = np.zeros(cfg.K, complex)
        nu[0] = 1.0

        def transmit(m):
            return const[np.asarray(m)][:, None] * nu[None, :]
    rng = rng_stream(cfg.seed, "esprit-bench")
    scenes = draw_scenes(exp.n_validate, cfg.M, cfg.t_max, cfg.regions[:2], cfg.regions[2:],
                         cfg.noise, rng)
    rows = []
    for u in exp.u_list:
        Z, _ = snapshot_stack(scenes, u, transmit, cfg.M, cfg.noise, rng_stream(cfg.seed, f"bench-u{u}"),
                              array, cfg.fluctuation)
        sq = []
        for t in range(1, cfg.t_max + 1):
            idx = np.flatnonzero(scenes.n_targets == t)
            if idx.size:
                est = esprit_scan(Z[idx], t, array)
                sq.append(matched_sq_errors(scenes.theta[idx], scenes.n_targets[idx], est, np.full(idx.size, t)))
        sq = np.concatenate(sq)
        rows.append({"u": u, "rmse_esprit": float(np.sqrt(sq.mean())), "n_pairs": int(sq.size)})
    write_csv(out / "esprit_bench.csv", _tag(rows, exp))


def cmd_plot(args) -> None:
    if not args.csv:
        raise ConfigError("plot needs at least one --csv file")
    for p in args.csv:
        if not Path(p).is_file():
            raise ConfigError(f"no such CSV file: {p}")
    line_chart(args.csv, args.x, args.y.split(","), args.output, group=args.group, logy=args.logy,
               title=args.title)


def _load_model(path) -> JcasModel:
    try:
        return JcasModel.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------- main

COMMANDS = {
    "train": cmd_train,
    "validate": cmd_validate,
    "encoding-compare": cmd_encoding_compare,
    "esprit-bench": cmd_esprit_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jcasnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--checkpoint", help="model checkpoint to read")
        p.add_argument("--out", help=f"output directory (else config out_dir, ${OUT_ENV}, ./results)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, help="cap BLAS worker threads")
        p.add_argument("-q", "--quiet", action="store_true")
    p = sub.add_parser("plot")
    p.add_argument("--csv", nargs="+", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True, help="comma-separated column names")
    p.add_argument("--group", help="column whose values split the series")
    p.add_argument("--logy", action="store_true")
    p.add_argument("--title")
    p.add_argument("--output", "-o", required=True, help="SVG file to write")
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _resolve_out(args, exp: ExperimentConfig) -> Path:
    return Path(args.out or exp.out_dir or os.environ.get(OUT_ENV) or "results")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "plot":
            cmd_plot(args)
            return EXIT_OK
        exp = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            exp = dataclasses.replace(exp, train=dataclasses.replace(exp.train, seed=args.seed))
        out = _resolve_out(args, exp)
        limit = contextlib.nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=args.threads)
        with limit:
            COMMANDS[args.command](exp, out, args)
        log.info("outputs written to %s", out)
        return EXIT_OK
    except (ConfigError, PlotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
