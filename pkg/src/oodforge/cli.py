"""``oodforge`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness, plots
from .data import DataError, IdxFormatError, load_envs, load_raw_mnist, make_cmnist, make_synthetic_spurious, save_envs
from .nets import ModelSpec, SpecError
from .penalties import verify_identities
from .trainers import ContractError, NumericalAbort, TrainerConfig, TrainHistory

log = logging.getLogger("oodforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3
FULL_SCALE_ITERATIONS = 10000

TRAINER_KEYS = tuple(f.name for f in fields(TrainerConfig) if f.name not in ("seed", "keep_checkpoints"))
DEFAULTS = {
    **{f.name: f.default for f in fields(TrainerConfig) if f.name in TRAINER_KEYS},
    "seed": 0,
    "dataset": "cmnist",
    "data": None,
    "n_seeds": 3,
    "val_fraction": 0.2,
    "test_env": None,
    "full_scale": False,
    "hidden_dims": [256, 256],
    "rep_dim": 256,
    "arch": "mlp",
    "precision": "float64",
    "bias_enabled": True,
    "resolution": 28,
    "input_range": "auto",
}
SYNTHETIC = {"n_per_env": 2000, "d_inv": 5, "d_spu": 5, "inv_margin": 1.0, "spu_margin": 3.0, "spu_corrs": [0.9, 0.7, -0.9]}
# CLI flag -> config key
FLAG_KEYS = {
    "algo": "algorithm",
    "eps": "eps",
    "alpha": "alpha",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "iters": "iterations",
    "seed": "seed",
    "data": "data",
    "seeds": "n_seeds",
    "test_env": "test_env",
    "full_scale": "full_scale",
    "precision": "precision",
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(file_path=None, cli: dict | None = None) -> dict:
    """Defaults, then the flat JSON file, then CLI flags that were given."""
    cfg = dict(DEFAULTS)
    if file_path:
        doc = json.loads(Path(file_path).read_text())
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a flat JSON object")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for flag, key in FLAG_KEYS.items():
        v = (cli or {}).get(flag)
        if v is not None and v is not False:
            cfg[key] = v
    if cfg["full_scale"]:
        cfg["iterations"] = FULL_SCALE_ITERATIONS
    return cfg


def trainer_config(cfg: dict, envs=None) -> TrainerConfig:
    """``input_range: "auto"`` clips to [0, 1] only when every input already lies there."""
    kw = {k: cfg[k] for k in TRAINER_KEYS}
    if kw["input_range"] == "auto":
        bounded = envs is not None and all(e.inputs.min() >= 0.0 and e.inputs.max() <= 1.0 for e in envs)
        kw["input_range"] = (0.0, 1.0) if bounded else None
    for k in ("loss_clamp", "input_range"):
        if kw[k] is not None:
            kw[k] = tuple(kw[k])
    return TrainerConfig(seed=int(cfg["seed"]), **kw)


def model_spec(cfg: dict, envs) -> ModelSpec:
    shape = envs[0].input_shape
    dim = 1
    for s in shape:
        dim *= int(s)
    return ModelSpec(
        input_dim=dim,
        hidden_dims=tuple(cfg["hidden_dims"]),
        rep_dim=int(cfg["rep_dim"]),
        bias_enabled=bool(cfg["bias_enabled"]),
        arch=cfg["arch"],
        in_channels=int(shape[0]) if len(shape) == 3 else 2,
        precision=cfg["precision"],
    )


def generate(dataset: str, seed: int, resolution: int = 28):
    if dataset == "cmnist":
        return make_cmnist(load_raw_mnist(), seed=seed, resolution=resolution)
    if dataset == "synthetic":
        return make_synthetic_spurious(seed=seed, **SYNTHETIC)
    raise UsageError(f"unknown dataset {dataset!r}")


def environments(cfg: dict):
    if cfg["data"]:
        d = Path(cfg["data"])
        if not (d / "manifest.json").exists():
            raise DataError(f"no manifest.json in {d}")
        return load_envs(d)
    return generate(cfg["dataset"], int(cfg["seed"]), int(cfg["resolution"]))


def _run_protocol(cfg: dict, out: Path, space=None, n_trials: int = 1):
    envs = environments(cfg)
    tc = trainer_config(cfg, envs)
    spec = model_spec(cfg, envs)
    log.info("training %s on %s, input_range=%s", tc.algorithm, [e.env_id for e in envs], tc.input_range)
    test_envs = [cfg["test_env"]] if cfg["test_env"] else None
    kw = dict(spec=spec, val_fraction=float(cfg["val_fraction"]), test_envs=test_envs, out_dir=out / "runs")
    if space is None:
        records = harness.leave_one_out(envs, tc, int(cfg["n_seeds"]), master_seed=int(cfg["seed"]), **kw)
    else:
        records = harness.sweep(envs, tc, space, n_trials, int(cfg["n_seeds"]), master_seed=int(cfg["seed"]), **kw)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    harness.emit_results(records, out / "results.csv")
    return records


def cmd_verify(args) -> int:
    res = verify_identities(args.trials, args.seed)
    rows = res.pop("rows")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "identities.json").write_text(json.dumps({**res, "rows": rows}, indent=2) + "\n")
    print(json.dumps(res, indent=2))
    return EXIT_OK if res["pass"] else EXIT_NAN


def cmd_gen_data(args) -> int:
    envs = generate(args.dataset, args.seed, args.resolution)
    save_envs(envs, args.out, args.seed)
    for e in envs:
        print(f"{e.env_id}\t{len(e)}\t{e.content_hash()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, vars(args))
    records = _run_protocol(cfg, Path(args.out))
    _print_summary(records)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config, vars(args))
    space = harness.SearchSpace.load(args.space)
    records = _run_protocol(cfg, Path(args.out), space, args.trials)
    _print_summary(records)
    return EXIT_OK


def _print_summary(records) -> None:
    for r in harness.summarize(records):
        print(f"{r['algorithm']}\t{r['selection_rule']}\t{r['test_env']}\t{r['mean']:.1f} +/- {r['stderr']:.1f}\t(n={r['n']})")


def cmd_report(args) -> int:
    src = Path(args.inp)
    files = sorted(src.rglob("results.json")) if src.is_dir() else [src]
    records = [r for f in files for r in harness.load_records(f)]
    if not records:
        raise DataError(f"no results.json under {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.emit_results(records, out)
    rows = harness.summarize(records)
    harness.emit_summary(rows, out.with_name(out.stem + "_summary.csv"))
    scatter, _ = harness.emit_batch_size_scatter(records, out.with_name(out.stem + "_batch_size.csv"))
    plots.accuracy_bars(rows, out.with_name(out.stem + "_accuracy.png"))
    plots.batch_size_scatter(records, harness.batch_size_slopes(records), scatter.with_suffix(".png"))
    if args.curves:
        for r in records:
            if r.history_path and Path(r.history_path).exists() and r.selection_rule == harness.RULES[0]:
                h = TrainHistory.from_csv(r.history_path)
                plots.training_curves(h, out.parent / f"{r.run_id}.curves.png", r.run_id)
    _print_summary(records)
    return EXIT_OK


def _add_overrides(p) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="replicates per held-out environment")
    p.add_argument("--data", help="directory written by gen-data")
    p.add_argument("--test-env", help="hold out only this environment")
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--full-scale", action="store_true", help=f"train for {FULL_SCALE_ITERATIONS} iterations")
    p.add_argument("--out", default="oodforge_out")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="oodforge", description="domain-wise adversarial training experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("verify-identities", help="check the penalty identities on random nets")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write environments to a directory")
    p.add_argument("--dataset", choices=("cmnist", "synthetic"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=28)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="leave-one-environment-out training for one configuration")
    p.add_argument("--algo", type=str.upper, choices=[a.upper() for a in ("erm", "irmv1", "at", "uat", "dat", "ldat", "ensembleuat")])
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="random hyperparameter search")
    p.add_argument("--space", required=True, help="JSON object of name -> [low, high]")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--algo", type=str.upper)
    _add_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge results, write tables and figures")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", action="store_true", help="also plot per-run training curves")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "abort.json").write_text(json.dumps(exc.record, indent=2, default=str) + "\n")
        return EXIT_NAN
    except (DataError, IdxFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ContractError, SpecError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
