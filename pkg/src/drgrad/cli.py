"""``drgrad`` command line: gen-data, train, eval, telemetry-summary.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import LabeledDataset, SyntheticSpec, gen_synthetic, load_census, load_synthetic_dir, save_synthetic
from .errors import ConfigError, DrgradError, NumericError
from .metrics import EvalReport, Telemetry, convergence_summary, eval_csv, read_eval_csv, read_telemetry, result_table
from .model import ModelConfig
from .train import evaluate, init_state, load_checkpoint, run_training, save_checkpoint

log = logging.getLogger("drgrad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_EPOCHS = {"synthetic": 5, "synthetic_dir": 5, "census": 10}
SOURCES = tuple(DEFAULT_EPOCHS)


@dataclass
class ExperimentConfig:
    """Everything a run needs.  ``dataset`` holds exactly one source:
    ``{"synthetic": {...SyntheticSpec fields}}``, ``{"synthetic_dir": path}``
    (output of gen-data) or ``{"census": path}``."""

    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    model: dict = field(default_factory=dict)
    epochs: int | None = None
    max_steps: int | None = None
    batch_size: int = 256
    eval_every: int = 1
    telemetry_stride: int = 1
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if len(self.dataset) != 1 or next(iter(self.dataset)) not in SOURCES:
            raise ConfigError(f"dataset needs exactly one of {SOURCES}, got {sorted(self.dataset)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.batch_size < 1 or self.eval_every < 1 or self.telemetry_stride < 1:
            raise ConfigError("batch_size, eval_every and telemetry_stride must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.source == "synthetic":
            self.synthetic_spec()
        self.model_config(self.seeds[0])

    @property
    def source(self) -> str:
        return next(iter(self.dataset))

    @property
    def n_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.source] if self.epochs is None else self.epochs

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec(**self.dataset["synthetic"])
        except TypeError as e:
            raise ConfigError(f"bad synthetic spec: {e}") from None

    def model_config(self, seed: int) -> ModelConfig:
        try:
            return ModelConfig.from_dict({**self.model, "seed": seed})
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown experiment config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.seeds = [int(s) for s in cfg.seeds]
        return cfg


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    src, arg = cfg.source, cfg.dataset[cfg.source]
    if src == "synthetic":
        return gen_synthetic(cfg.synthetic_spec())
    if src == "synthetic_dir":
        return load_synthetic_dir(arg)
    if isinstance(arg, dict):
        return load_census(arg["path"], arg.get("test_path"), seed=arg.get("split_seed", 0))
    return load_census(arg)


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / f"seed_{seed}"


def train_seed(cfg: ExperimentConfig, seed: int, data=None) -> list[EvalReport]:
    """Train one seed and write config.json, telemetry.csv, eval.csv, checkpoint.json."""
    out = run_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    effective = ExperimentConfig.from_dict({**cfg.to_dict(), "seeds": [seed], "epochs": cfg.n_epochs})
    model_cfg = cfg.model_config(seed)
    effective.model = model_cfg.to_dict()
    (out / "config.json").write_text(json.dumps(effective.to_dict(), indent=2, sort_keys=True) + "\n")
    train, test = data if data is not None else load_datasets(cfg)
    if cfg.n_epochs == 0:
        # untrained model: initialise, checkpoint and evaluate only
        state = init_state(model_cfg, train.schema())
        reports = [evaluate(state.model, test, seed, 0, 0)]
        Telemetry().write(out / "telemetry.csv")
    else:
        try:
            result = run_training(
                model_cfg,
                train,
                test,
                epochs=cfg.n_epochs,
                batch_size=cfg.batch_size,
                eval_every=cfg.eval_every,
                telemetry_stride=cfg.telemetry_stride,
                max_steps=cfg.max_steps,
            )
        except NumericError as e:
            last = getattr(e, "last_record", None)
            diag = {
                "error": "numeric",
                "message": str(e),
                "seed": seed,
                "mode": model_cfg.mode,
                "step": getattr(e, "step", None),
                "last_record": asdict(last) if last is not None else None,
            }
            (out / "diagnostic.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
            raise
        state, reports = result.state, result.reports
        result.telemetry.write(out / "telemetry.csv")
    (out / "eval.csv").write_text(eval_csv(reports))
    save_checkpoint(state, out / "checkpoint.json")
    return reports


def _train_seed_job(args: tuple[dict, int]) -> list[EvalReport]:
    cfg_dict, seed = args
    return train_seed(ExperimentConfig.from_dict(cfg_dict), seed)


# -- argument handling ---------------------------------------------------


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values, then command-line flags on top."""
    base = _read_config(args.config)
    cfg = ExperimentConfig.from_dict(base)
    if args.census is not None:
        cfg.dataset = {"census": args.census}
    elif args.data is not None:
        cfg.dataset = {"synthetic_dir": args.data}
    if args.cos_theta is not None:
        if cfg.source != "synthetic":
            raise ConfigError("--cos-theta only applies to generated synthetic data")
        cfg.dataset = {"synthetic": {**cfg.dataset["synthetic"], "cos_theta": args.cos_theta}}
    if getattr(args, "user_id_column", False):
        if cfg.source != "synthetic":
            raise ConfigError("--user-id-column only applies to generated synthetic data")
        cfg.dataset = {"synthetic": {**cfg.dataset["synthetic"], "user_id_column": True}}
    overrides = {
        "mode": args.mode,
        "gamma": args.gamma,
        "rho": args.rho,
        "learning_rate": args.lr,
        "tower_init": args.tower_init,
    }
    cfg.model = {**cfg.model, **{k: v for k, v in overrides.items() if v is not None}}
    if args.freeze_updater:
        cfg.model["freeze_updater"] = True
    for name in ("epochs", "max_steps", "batch_size", "out"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    elif args.seed is not None:
        cfg.seeds = [args.seed]
    cfg.validate()
    return cfg


def cmd_gen_data(args) -> int:
    base = _read_config(args.config)
    spec_dict = dict(base.get("dataset", {}).get("synthetic", base.get("synthetic", {})))
    if args.cos_theta is not None:
        spec_dict["cos_theta"] = args.cos_theta
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.user_id_column:
        spec_dict["user_id_column"] = True
    try:
        spec = SyntheticSpec(**spec_dict)
    except TypeError as e:
        raise ConfigError(f"bad synthetic spec: {e}") from None
    out = Path(args.out or "data")
    manifest = save_synthetic(spec, out)
    print(f"wrote {manifest['rows']['train']} train / {manifest['rows']['test']} test rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = experiment_from_args(args)
    jobs = max(1, min(args.parallel_seeds, len(cfg.seeds)))
    log.info("training %s on %s for seeds %s", cfg.model.get("mode", "drgrad_no_ppnet"), cfg.source, cfg.seeds)
    reports: list[EvalReport] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for reps in pool.map(_train_seed_job, [(cfg.to_dict(), s) for s in cfg.seeds]):
                reports += reps
    else:
        data = load_datasets(cfg)
        for seed in cfg.seeds:
            reports += train_seed(cfg, seed, data)
    text, table_csv = result_table(reports)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "results.csv").write_text(table_csv)
    print(text, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    rdir = Path(args.run_dir)
    ckpt = rdir / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}")
    cfg = ExperimentConfig.from_dict(json.loads((rdir / "config.json").read_text()))
    if args.census is not None:
        cfg.dataset = {"census": args.census}
    elif args.data is not None:
        cfg.dataset = {"synthetic_dir": args.data}
    cfg.validate()
    state = load_checkpoint(ckpt)
    train, test = load_datasets(cfg)
    ds = test if args.split == "test" else train
    epoch = max([r.epoch for r in read_eval_csv(rdir / "eval.csv")], default=0) if (rdir / "eval.csv").exists() else 0
    rep = evaluate(state.model, ds, cfg.seeds[0], epoch, state.step)
    text = eval_csv([rep])
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_telemetry_summary(args) -> int:
    reports: list[EvalReport] = []
    for d in args.run_dirs:
        d = Path(d)
        dirs = sorted(p for p in d.glob("seed_*") if p.is_dir()) or [d]
        for rd in dirs:
            recs = read_telemetry(rd / "telemetry.csv")
            if len(recs) >= 20:
                s = convergence_summary(recs, args.window)
                print(
                    f"{rd}: |xi_a| {s['xi_a_first']:.4f} -> {s['xi_a_last']:.4f}  "
                    f"|xi_b| {s['xi_b_first']:.4f} -> {s['xi_b_last']:.4f}  "
                    f"ratio {s['ratio_first']:.4f} -> {s['ratio_last']:.4f}"
                )
            else:
                print(f"{rd}: {len(recs)} telemetry rows (need 20 for a summary)")
            if (rd / "eval.csv").exists():
                reports += read_eval_csv(rd / "eval.csv")
    if reports:
        print(result_table(reports)[0], end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drgrad", description="Multi-task gradient routing experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--config")
    g.add_argument("--cos-theta", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--user-id-column", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one run directory per seed")
    t.add_argument("--config")
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=_seed_list, help="comma separated, e.g. 0,1,2")
    t.add_argument("--out")
    t.add_argument("--gamma", type=float)
    t.add_argument("--rho", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--cos-theta", type=float)
    t.add_argument("--user-id-column", action="store_true")
    t.add_argument("--tower-init", choices=("independent", "tied"))
    t.add_argument("--freeze-updater", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--data", help="directory written by gen-data")
    t.add_argument("--census", help="census-income file or directory")
    t.add_argument("--parallel-seeds", type=int, default=1)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run directory's checkpoint")
    e.add_argument("run_dir")
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--data")
    e.add_argument("--census")
    e.add_argument("--output", help="also write the report CSV here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("telemetry-summary", help="convergence summary and result table")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--window", type=float, default=0.1)
    s.set_defaults(func=cmd_telemetry_summary)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DrgradError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
