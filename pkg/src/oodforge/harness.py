"""Experiment orchestration: random search, leave-one-domain-out runs, model selection and result files."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import EnvironmentDataset, train_val_split
from .nets import ModelSpec, save_model, to_json
from .trainers import ContractError, Ensemble, TrainerConfig, TrainHistory, accuracy, derive_seed, train

RULES = ("train_domain", "oracle")
TRAIN_VAL_PREFIX = "train_val:"
ORACLE_SPLIT = "oracle_val"
TEST_SPLIT = "test"
RESULT_FIELDS = (
    "run_id", "algorithm", "test_env", "selection_rule", "seed",
    "eps", "alpha", "lr", "batch_size", "accuracy",
)
INT_KEYS = ("batch_size", "iterations", "pgd_steps", "irm_anneal_iters")

# Log-uniform search ranges used on CMNIST.
CMNIST_SPACES = {
    "DAT": {"eps": (1e-1, 1e2), "alpha": (1e-2, 1e1)},
    "UAT": {"eps": (1e-1, 1e2), "alpha": (1e-2, 1e1)},
    "AT": {"eps": (1e-1, 1e1), "alpha": (1e-2, 1e0)},
}


class ProtocolError(ValueError):
    pass


# -- search space --------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    intervals: dict[str, tuple[float, float]]

    def __post_init__(self):
        clean = {}
        for name, (lo, hi) in self.intervals.items():
            lo, hi = float(lo), float(hi)
            if lo <= 0:
                raise ContractError(f"{name}: log-uniform interval needs a positive lower bound")
            if lo > hi:
                raise ContractError(f"{name}: lower bound {lo} above upper bound {hi}")
            clean[name] = (lo, hi)
        object.__setattr__(self, "intervals", clean)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls({k: tuple(v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "SearchSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_hparams(space: SearchSpace, n_trials: int, seed: int) -> list[dict]:
    """Independent log-uniform draws, one dict per trial, in sorted key order."""
    if not space.intervals:
        raise ContractError("empty search space")
    if n_trials < 1:
        raise ContractError("n_trials must be >= 1")
    rng = np.random.default_rng(seed)
    names = sorted(space.intervals)
    trials = []
    for _ in range(n_trials):
        draw = {}
        for name in names:
            lo, hi = space.intervals[name]
            u = rng.uniform(math.log10(lo), math.log10(hi))
            v = lo if lo == hi else float(10.0**u)
            draw[name] = int(round(v)) if name in INT_KEYS else v
        trials.append(draw)
    return trials


# -- records -------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    algorithm: str
    test_env: str
    selection_rule: str
    seed: int
    accuracy: float
    config: dict
    trial: int = 0
    selected_iteration: int = 0
    domain_accuracies: dict[str, float] = field(default_factory=dict)
    replicates: int = 1
    wall_clock: float = 0.0
    history_path: str | None = None
    checkpoint_path: str | None = None
    split_path: str | None = None

    def __post_init__(self):
        if self.selection_rule not in RULES:
            raise ContractError(f"unknown selection rule {self.selection_rule!r}")
        if not 0.0 <= self.accuracy <= 100.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 100]")
        # tuples become lists, so a record equals its reloaded copy
        self.config = json.loads(json.dumps(self.config))

    def schema_row(self) -> dict:
        """The CSV view: accuracy rounded to one decimal."""
        c = self.config
        return {
            "run_id": self.run_id,
            "algorithm": self.algorithm,
            "test_env": self.test_env,
            "selection_rule": self.selection_rule,
            "seed": int(self.seed),
            "eps": float(c.get("eps", 0.0)),
            "alpha": float(c.get("alpha", 0.0)),
            "lr": float(c.get("learning_rate", 0.0)),
            "batch_size": int(c.get("batch_size", 0)),
            "accuracy": round(self.accuracy, 1),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


# -- model selection -----------------------------------------------------

def _eval_table(history: TrainHistory) -> tuple[list[int], dict[str, dict[int, float]]]:
    iters = history.eval_iterations()
    table: dict[str, dict[int, float]] = {}
    for e in history.evals:
        table.setdefault(e["split"], {})[e["iteration"]] = e["accuracy"]
    return iters, table


def selection_scores(history: TrainHistory, rule: str) -> np.ndarray:
    iters, table = _eval_table(history)
    if rule == "train_domain":
        splits = [s for s in table if s.startswith(TRAIN_VAL_PREFIX)]
    elif rule == "oracle":
        splits = [ORACLE_SPLIT] if ORACLE_SPLIT in table else []
    else:
        raise ContractError(f"unknown selection rule {rule!r}")
    if not splits or not iters:
        raise ContractError(f"history lacks the splits needed by the {rule} rule")
    scores = []
    for it in iters:
        try:
            scores.append(np.mean([table[s][it] for s in splits]))
        except KeyError as exc:
            raise ContractError(f"split missing at eval iteration {it}") from exc
    return np.asarray(scores)


def select_model(history: TrainHistory, rule: str) -> int:
    """Index of the chosen eval point; ties resolve to the earliest."""
    return int(np.argmax(selection_scores(history, rule)))


# -- leave-one-domain-out ------------------------------------------------

def _run_id(config: TrainerConfig, trial: int, test_env: str, k: int) -> str:
    return f"{config.algorithm}-t{trial}-{test_env}-s{k}"


def _materialize(model, history: TrainHistory, index: int):
    """The model as it was at eval point ``index``."""
    if isinstance(model, Ensemble) or not history.checkpoints:
        return model
    out = model.copy()
    out.set_params(history.checkpoints[index][1])
    return out


def leave_one_out(
    env_datasets,
    config: TrainerConfig,
    n_seeds: int = 3,
    spec: ModelSpec | None = None,
    val_fraction: float = 0.2,
    master_seed: int = 0,
    rules=RULES,
    trial: int = 0,
    test_envs=None,
    out_dir=None,
) -> list[RunRecord]:
    """Hold out each environment in turn, train on the rest and score the held-out one.

    Every environment is split 80/20 (by default). Training sees only the
    training part of the training environments. The train-domain rule reads
    their validation parts; the oracle rule reads the validation part of the
    held-out environment. Accuracy is always reported on the held-out
    environment's remaining part. The run seed depends only on
    ``(master_seed, replicate)``, so algorithms compared under one master
    seed share initializations and batch orders.
    """
    envs = list(env_datasets)
    if len(envs) < 2:
        raise ProtocolError("leave-one-out needs at least two environments")
    if n_seeds < 1:
        raise ProtocolError("n_seeds must be >= 1")
    held = [e.env_id for e in envs] if test_envs is None else list(test_envs)
    missing = set(held) - {e.env_id for e in envs}
    if missing:
        raise ProtocolError(f"unknown test environments: {sorted(missing)}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records = []
    for k in range(n_seeds):
        seed = derive_seed(master_seed, f"replicate{k}")
        splits = [train_val_split(e, val_fraction, derive_seed(seed, e.env_id)) for e in envs]
        for h, test in enumerate(envs):
            if test.env_id not in held:
                continue
            train_parts = [s[0] for j, s in enumerate(splits) if j != h]
            eval_splits = {f"{TRAIN_VAL_PREFIX}{envs[j].env_id}": s[1] for j, s in enumerate(splits) if j != h}
            test_part, oracle_part = splits[h]
            eval_splits[ORACLE_SPLIT] = oracle_part
            eval_splits[TEST_SPLIT] = test_part
            cfg = replace(config, seed=seed, keep_checkpoints=True)
            run_id = _run_id(cfg, trial, test.env_id, k)
            t0 = time.perf_counter()
            model, history = train(cfg, train_parts, eval_splits, spec)
            elapsed = time.perf_counter() - t0
            iters, table = _eval_table(history)
            paths = {}
            if out is not None:
                paths["history_path"] = str(out / f"{run_id}.history.csv")
                history.to_csv(paths["history_path"])
                paths["split_path"] = str(out / f"{run_id}.split.json")
                Path(paths["split_path"]).write_text(json.dumps(_split_doc(test, test_part)))
            for rule in rules:
                idx = select_model(history, rule)
                it = iters[idx]
                rid = f"{run_id}-{rule}"
                if out is not None:
                    paths["checkpoint_path"] = str(out / f"{rid}.model.json")
                    _save_checkpoint(_materialize(model, history, idx), paths["checkpoint_path"])
                records.append(
                    RunRecord(
                        run_id=rid,
                        algorithm=cfg.algorithm,
                        test_env=test.env_id,
                        selection_rule=rule,
                        seed=seed,
                        accuracy=table[TEST_SPLIT][it],
                        config=cfg.to_dict(),
                        trial=trial,
                        selected_iteration=it,
                        domain_accuracies={s: table[s][it] for s in sorted(table)},
                        replicates=n_seeds,
                        wall_clock=elapsed,
                        **paths,
                    )
                )
    return records


def _split_doc(env: EnvironmentDataset, part: EnvironmentDataset) -> dict:
    # the held-out split is identified by its parent environment and its row content
    return {"env_id": env.env_id, "split_id": part.env_id, "n": len(part), "content_hash": part.content_hash()}


def _save_checkpoint(model, path) -> None:
    if isinstance(model, Ensemble):
        Path(path).write_text(json.dumps({"ensemble": [to_json(m) for m in model.models]}))
    else:
        save_model(model, path)


def audit_record(record: RunRecord, test_part: EnvironmentDataset) -> float:
    """Recompute a record's accuracy from its persisted checkpoint."""
    from .nets import from_json

    doc = json.loads(Path(record.checkpoint_path).read_text())
    model = Ensemble([from_json(d) for d in doc["ensemble"]]) if "ensemble" in doc else from_json(doc)
    split = json.loads(Path(record.split_path).read_text())
    if split["content_hash"] != test_part.content_hash():
        raise ContractError("test split does not match the persisted split")
    return accuracy(model, test_part)


# -- aggregation ---------------------------------------------------------

def _stderr(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0


def summarize(records) -> list[dict]:
    """Mean and standard error per (algorithm, trial, rule, test_env) cell, plus an ``Average`` cell.

    The average is the mean of the per-domain cell means; its standard error
    is taken across replicates of the per-replicate domain average. Rows of
    a single-trial run are labeled by algorithm alone, sweeps get ``ALG#trial``.
    """
    groups: dict[tuple, dict[str, dict[int, float]]] = {}
    for r in records:
        groups.setdefault((r.algorithm, r.trial, r.selection_rule), {}).setdefault(r.test_env, {})[r.seed] = r.accuracy
    multi = {alg for alg, t, _ in groups if t != 0}
    rows = []
    for (alg, trial, rule), by_env in sorted(groups.items()):
        label = f"{alg}#{trial}" if alg in multi else alg
        for env in sorted(by_env):
            vals = list(by_env[env].values())
            rows.append({"algorithm": label, "selection_rule": rule, "test_env": env,
                         "mean": float(np.mean(vals)), "stderr": _stderr(vals), "n": len(vals)})
        cell_means = [np.mean(list(v.values())) for v in by_env.values()]
        seeds = set.intersection(*(set(v) for v in by_env.values()))
        per_seed = [np.mean([by_env[e][s] for e in by_env]) for s in sorted(seeds)]
        rows.append({"algorithm": label, "selection_rule": rule, "test_env": "Average",
                     "mean": float(np.mean(cell_means)), "stderr": _stderr(per_seed), "n": len(per_seed)})
    return rows


def summary_cell(rows, algorithm: str, rule: str, test_env: str) -> dict:
    for r in rows:
        if (r["algorithm"], r["selection_rule"], r["test_env"]) == (algorithm, rule, test_env):
            return r
    raise KeyError((algorithm, rule, test_env))


# -- result files --------------------------------------------------------

def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def results_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = r.schema_row()
        w.writerow({k: (f"{row[k]:.1f}" if k == "accuracy" else _fmt(row[k])) for k in RESULT_FIELDS})
    return buf.getvalue()


def emit_results(records, path) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and a JSON mirror next to it with the full records."""
    records = list(records)
    path = Path(path)
    json_path = path.with_suffix(".json")
    with open(path, "w", newline="") as fh:
        fh.write(results_csv(records))
    with open(json_path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path, json_path


def parse_results(path) -> list[dict]:
    casts = {"seed": int, "batch_size": int, "eps": float, "alpha": float, "lr": float, "accuracy": float}
    with open(path, newline="") as fh:
        return [{k: casts.get(k, str)(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_records(path) -> list[RunRecord]:
    return [RunRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


def least_squares_slope(x, y) -> float | None:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.all(x == x[0]):
        return None
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def batch_size_slopes(records) -> dict[str, float | None]:
    by_env: dict[str, list] = {}
    for r in records:
        by_env.setdefault(r.test_env, []).append(r)
    return {
        env: least_squares_slope([r.schema_row()["batch_size"] for r in rs], [r.accuracy for r in rs])
        for env, rs in sorted(by_env.items())
    }


def emit_batch_size_scatter(records, path) -> tuple[Path, Path]:
    """``batch_size,accuracy`` rows plus per-test-domain slopes in ``<stem>.slopes.json``."""
    records = list(records)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_size", "accuracy"])
        for r in records:
            w.writerow([r.schema_row()["batch_size"], f"{r.accuracy:.1f}"])
    slope_path = path.with_name(path.stem + ".slopes.json")
    slope_path.write_text(json.dumps(batch_size_slopes(records), indent=2, sort_keys=True) + "\n")
    return path, slope_path


def emit_summary(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "selection_rule", "test_env", "accuracy", "stderr", "n"])
        for r in rows:
            w.writerow([r["algorithm"], r["selection_rule"], r["test_env"], f"{r['mean']:.1f}", f"{r['stderr']:.1f}", r["n"]])
    return path


def sweep(env_datasets, base: TrainerConfig, space: SearchSpace, n_trials: int, n_seeds: int,
          master_seed: int = 0, spec: ModelSpec | None = None, **kwargs) -> list[RunRecord]:
    """Random search: each sampled trial runs the full leave-one-out protocol."""
    records = []
    for t, draw in enumerate(sample_hparams(space, n_trials, derive_seed(master_seed, "search"))):
        cfg = replace(base, **draw)
        records.extend(leave_one_out(env_datasets, cfg, n_seeds, spec, master_seed=master_seed, trial=t, **kwargs))
    return records
