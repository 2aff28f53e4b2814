"""Training algorithms: ERM, IRMv1, sample-wise AT, UAT, DAT, LDAT and an ensemble of UAT models.

All perturbation-based trainers share :func:`project_lp` and
:func:`ascend_perturbation`. Every iteration finishes with one optimizer
step on the mean over environments of the per-environment mean loss.
"""
from __future__ import annotations

import contextlib
import csv
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import penalties
from . import tensor as T
from .data import EnvironmentDataset, batcher
from .nets import Model, ModelSpec, init
from .tensor import NonFiniteError, Tensor

ALGORITHMS = ("ERM", "IRMv1", "AT", "UAT", "DAT", "LDAT", "EnsembleUAT")
PERTURBING = ("AT", "UAT", "DAT", "EnsembleUAT")


class ContractError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    """Training produced a non-finite value; ``record`` holds the diagnostics."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def canonical_algorithm(name: str) -> str:
    for a in ALGORITHMS:
        if a.lower() == str(name).lower():
            return a
    raise ValueError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")


@dataclass
class TrainerConfig:
    algorithm: str = "ERM"
    learning_rate: float = 1e-3
    batch_size: int = 64
    iterations: int = 2000
    eps: float = 1.0
    alpha: float = 0.1
    norm_p: float = 2
    pgd_steps: int = 10
    irm_lambda: float = 100.0
    irm_anneal_iters: int = 500
    loss_clamp: tuple[float, float] | None = None
    input_range: tuple[float, float] | None = (0.0, 1.0)
    seed: int = 0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    normalize_ascent: bool = True
    delta_init: str = "uniform"
    eval_interval: int = 100
    keep_checkpoints: bool = False

    def __post_init__(self):
        self.algorithm = canonical_algorithm(self.algorithm)
        if self.norm_p in ("inf", "Inf", "infinity"):
            self.norm_p = math.inf
        self.norm_p = float(self.norm_p)
        if self.norm_p not in (2.0, math.inf):
            raise ValueError(f"norm_p must be 2 or inf, got {self.norm_p}")
        if self.loss_clamp is not None:
            lo, hi = self.loss_clamp
            if not lo < hi:
                raise ValueError(f"loss_clamp needs lo < hi, got {self.loss_clamp}")
            self.loss_clamp = (float(lo), float(hi))
        if self.input_range is not None:
            self.input_range = (float(self.input_range[0]), float(self.input_range[1]))
        if self.algorithm in PERTURBING and (self.eps <= 0 or self.alpha <= 0):
            raise ValueError("eps and alpha must be positive for perturbation-based training")
        if self.algorithm == "LDAT" and self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.irm_lambda < 0:
            raise ValueError("irm_lambda must be non-negative")
        if self.delta_init not in ("uniform", "zero"):
            raise ValueError("delta_init must be 'uniform' or 'zero'")
        if self.batch_size < 1 or self.iterations < 0 or self.eval_interval < 1:
            raise ValueError("batch_size and eval_interval must be >= 1, iterations >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.norm_p):
            d["norm_p"] = "inf"
        return d


# -- optimizers ----------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = m / denom
            step *= self.lr / c1
            p.data = p.data - step


class SGD:
    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.weight_decay = lr, weight_decay

    def reset(self) -> None:
        pass

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data = p.data - self.lr * g


def make_optimizer(model: Model, config: TrainerConfig):
    params = model.trainable()
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, weight_decay=config.weight_decay)
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate, weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def descend(model: Model, opt, loss: Tensor) -> None:
    model.zero_grad()
    T.backward(loss)
    opt.step()


@contextlib.contextmanager
def frozen(model: Model):
    """Stop recording parameter gradients while only input gradients are needed."""
    flags = [p.requires_grad for p in model.params]
    for p in model.params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(model.params, flags):
            p.requires_grad = f


# -- perturbations -------------------------------------------------------

def project_lp(delta, eps: float, p: float = 2) -> np.ndarray:
    """Project onto the l_p ball of radius eps (p = 2 rescales, p = inf clamps)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    delta = np.asarray(delta.data if isinstance(delta, Tensor) else delta)
    if p == 2:
        nrm = float(np.sqrt(np.sum(delta * delta)))
        return delta * (eps / nrm) if nrm > eps else delta.copy()
    if p == math.inf:
        return np.clip(delta, -eps, eps)
    raise ValueError(f"unsupported norm p={p}")


def lp_norm(delta: np.ndarray, p: float) -> float:
    return float(np.max(np.abs(delta))) if p == math.inf else float(np.sqrt(np.sum(delta * delta)))


@dataclass
class PerturbationState:
    env_id: str
    delta: np.ndarray
    norm_p: float = 2
    eps: float = 1.0
    alpha: float = 0.1

    @classmethod
    def initial(cls, env_id: str, shape, config: TrainerConfig, rng: np.random.Generator, dtype=np.float64):
        if config.delta_init == "zero":
            d = np.zeros(shape, dtype=dtype)
        else:
            d = rng.uniform(-config.eps, config.eps, size=shape).astype(dtype)
            d = project_lp(d, config.eps, config.norm_p)
        return cls(env_id, d, config.norm_p, config.eps, config.alpha)

    @property
    def norm(self) -> float:
        return lp_norm(self.delta, self.norm_p)


def apply_perturbation(x: np.ndarray, delta: np.ndarray, input_range) -> np.ndarray:
    x_adv = x + delta
    if input_range is not None:
        x_adv = np.clip(x_adv, input_range[0], input_range[1])
    return x_adv


def _ascent_direction(g: np.ndarray, normalize: bool) -> np.ndarray:
    if not normalize:
        return g
    nrm = float(np.sqrt(np.sum(g * g)))
    return g / nrm if nrm > 0 else np.zeros_like(g)


def perturbation_gradient(model: Model, x: np.ndarray, y, delta: np.ndarray, loss_clamp=None) -> np.ndarray:
    """Gradient w.r.t. a shared delta of the batch-mean (optionally clamped) loss at x + delta."""
    d = Tensor(delta, requires_grad=True)
    with frozen(model):
        per = model.loss(model.forward(T.add(Tensor(x), d)), y)
        if loss_clamp is not None:
            per = T.clamp(per, *loss_clamp)
        risk = per.mean()
        if not risk.requires_grad:
            return np.zeros_like(delta)
        (g,) = T.grad(risk, [d])
    return g


def ascend_perturbation(model: Model, state: PerturbationState, x: np.ndarray, y, config: TrainerConfig) -> None:
    """One ascent step on ``state.delta`` followed by projection (in place)."""
    g = perturbation_gradient(model, x, y, state.delta, config.loss_clamp)
    step = _ascent_direction(g, config.normalize_ascent)
    state.delta = project_lp(state.delta + state.alpha * step, state.eps, state.norm_p)


# -- iterations ----------------------------------------------------------

def _env_losses(model: Model, batches) -> list[Tensor]:
    return [model.loss(model.forward(x), y).mean() for x, y in batches]


def _mean(ts: list[Tensor]) -> Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = total + t
    return total / len(ts) if len(ts) > 1 else total


def erm_step(model: Model, opt, batches, config: TrainerConfig | None = None) -> list[dict]:
    losses = _env_losses(model, batches)
    descend(model, opt, _mean(losses))
    return [{"loss": float(l.data), "penalty": None, "delta_norm": None} for l in losses]


def dat_iteration(model: Model, opt, states: list[PerturbationState], batches, config: TrainerConfig) -> list[dict]:
    """Domain-wise adversarial training, one iteration.

    For each environment in order: ascend its delta on that environment's
    batch, project, and form the clipped adversarial batch. Then take one
    optimizer step on the mean adversarial loss.
    """
    if len(states) != len(batches):
        raise ContractError(f"{len(states)} perturbations but {len(batches)} environment batches")
    adv = []
    for state, (x, y) in zip(states, batches):
        ascend_perturbation(model, state, x, y, config)
        adv.append((apply_perturbation(x, state.delta, config.input_range), y))
    losses = _env_losses(model, adv)
    descend(model, opt, _mean(losses))
    return [
        {"loss": float(l.data), "penalty": None, "delta_norm": s.norm} for l, s in zip(losses, states)
    ]


def uat_iteration(model: Model, opt, batch, state: PerturbationState, config: TrainerConfig) -> list[dict]:
    """Universal adversarial training: a single perturbation shared by the whole batch."""
    return dat_iteration(model, opt, [state], [batch], config)


def pgd_perturb(model: Model, x: np.ndarray, y, config: TrainerConfig) -> np.ndarray:
    """Sample-wise PGD from zero: ``pgd_steps`` normalized ascent steps with per-sample projection."""
    n = len(x)
    delta = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for _ in range(config.pgd_steps):
        d = Tensor(delta, requires_grad=True)
        with frozen(model):
            total = model.loss(model.forward(T.add(Tensor(x), d)), y).sum()
            g = T.grad(total, [d])[0] if total.requires_grad else np.zeros_like(delta)
        if config.normalize_ascent:
            # l2-normalized per sample, whatever the projection norm
            nrm = np.sqrt(np.sum(g * g, axis=axes, keepdims=True))
            g = np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)
        delta = delta + config.alpha * g
        delta = np.stack([project_lp(delta[i], config.eps, config.norm_p) for i in range(n)])
    return delta


def at_iteration(model: Model, opt, batches, config: TrainerConfig) -> list[dict]:
    if config.pgd_steps < 1:
        raise ContractError("pgd_steps must be >= 1")
    adv, norms = [], []
    for x, y in batches:
        delta = pgd_perturb(model, x, y, config)
        norms.append(float(max(lp_norm(d, config.norm_p) for d in delta)))
        adv.append((apply_perturbation(x, delta, config.input_range), y))
    losses = _env_losses(model, adv)
    descend(model, opt, _mean(losses))
    return [{"loss": float(l.data), "penalty": None, "delta_norm": n} for l, n in zip(losses, norms)]


def irm_penalty_weight(config: TrainerConfig, iteration: int) -> float:
    return config.irm_lambda if iteration >= config.irm_anneal_iters else 1.0


def irmv1_step(model: Model, opt, batches, config: TrainerConfig, iteration: int) -> list[dict]:
    """One step on ``mean_e [R^e + lam * penalty^e]``, divided by lam when lam > 1.

    The optimizer state is reset when the penalty weight switches to
    ``irm_lambda``.
    """
    lam = irm_penalty_weight(config, iteration)
    if iteration == config.irm_anneal_iters:
        opt.reset()
    risks, pens = [], []
    for x, y in batches:
        logits = model.forward(x)
        risks.append(model.loss(logits, y).mean())
        pens.append(penalties.irmv1_penalty_graph(logits, y))
    loss = _mean(risks) + _mean(pens) * lam
    if lam > 1.0:
        loss = loss / lam
    descend(model, opt, loss)
    return [{"loss": float(r.data), "penalty": float(p.data), "delta_norm": None} for r, p in zip(risks, pens)]


def ldat_step(model: Model, opt, batches, config: TrainerConfig) -> list[dict]:
    """One step on ``mean_e [R^e + eps * ||mean grad_x loss||]`` with gradients through the penalty."""
    if config.eps < 0:
        raise ValueError("eps must be non-negative")
    risks, pens = [], []
    for x, y in batches:
        risks.append(model.loss(model.forward(x), y).mean())
        pens.append(penalties.dat_penalty_graph(model, x, y))
    loss = _mean(risks) + _mean(pens) * config.eps
    descend(model, opt, loss)
    return [{"loss": float(r.data), "penalty": float(p.data), "delta_norm": None} for r, p in zip(risks, pens)]


# -- ensembles -----------------------------------------------------------

def ensemble_uat_predict(models, x) -> np.ndarray:
    """Majority vote of hard predictions; ties go to the earliest model among the tied labels."""
    models = list(models)
    if not models:
        raise ContractError("empty model list")
    preds = np.stack([m.predict(x) for m in models])  # [M, N]
    out = np.empty(preds.shape[1], dtype=preds.dtype)
    for j in range(preds.shape[1]):
        col = preds[:, j]
        labels, first, counts = np.unique(col, return_index=True, return_counts=True)
        best = counts == counts.max()
        out[j] = labels[best][np.argmin(first[best])]
    return out


class Ensemble:
    """Voting wrapper exposing the prediction interface of a single model."""

    def __init__(self, models):
        self.models = list(models)
        if not self.models:
            raise ContractError("empty model list")
        self.spec = self.models[0].spec

    def predict(self, x) -> np.ndarray:
        return ensemble_uat_predict(self.models, x)


# -- training loop -------------------------------------------------------

@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[tuple[int, list[np.ndarray]]] = field(default_factory=list, repr=False)

    CSV_FIELDS = ("iteration", "env_id", "loss", "penalty", "delta_norm", "split", "accuracy")

    def eval_iterations(self) -> list[int]:
        return sorted({e["iteration"] for e in self.evals})

    def accuracy_table(self) -> dict[str, list[float]]:
        """split -> accuracies ordered by eval point."""
        table: dict[str, list[float]] = {}
        for e in self.evals:
            table.setdefault(e["split"], []).append(e["accuracy"])
        return table

    def rows(self):
        for s in self.steps:
            yield {**{k: s.get(k) for k in ("iteration", "env_id", "loss", "penalty", "delta_norm")}, "split": None, "accuracy": None}
        for e in self.evals:
            yield {"iteration": e["iteration"], "env_id": None, "loss": None, "penalty": None,
                   "delta_norm": None, "split": e["split"], "accuracy": e["accuracy"]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in r.items()})

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                if r["split"]:
                    h.evals.append({"iteration": int(r["iteration"]), "split": r["split"], "accuracy": float(r["accuracy"])})
                else:
                    h.steps.append({
                        "iteration": int(r["iteration"]),
                        "env_id": r["env_id"],
                        "loss": float(r["loss"]),
                        "penalty": float(r["penalty"]) if r["penalty"] else None,
                        "delta_norm": float(r["delta_norm"]) if r["delta_norm"] else None,
                    })
        return h


def accuracy(model, dataset: EnvironmentDataset, chunk: int = 4096) -> float:
    """Percentage of correct hard predictions."""
    correct = 0
    for s in range(0, len(dataset), chunk):
        pred = model.predict(dataset.inputs[s : s + chunk])
        correct += int(np.sum(pred == dataset.labels[s : s + chunk]))
    return 100.0 * correct / len(dataset)


def _spawn(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def derive_seed(master_seed: int, key: str) -> int:
    """Independent 32-bit seed for ``key``, stable across processes."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(key.encode())])
    return int(ss.generate_state(1)[0])


def _fit(config: TrainerConfig, envs, eval_splits, spec: ModelSpec, tag: str = "") -> tuple[Model, TrainHistory]:
    alg = config.algorithm
    model = init(replace(spec, seed=config.seed))
    opt = make_optimizer(model, config)
    env_ids = [e.env_id for e in envs]
    # streams are keyed by env_id so reordering environments only relabels them
    streams = [batcher(e, min(config.batch_size, len(e)), seed=derive_seed(config.seed, "batches/" + e.env_id)) for e in envs]
    dtype = spec.dtype
    states: list[PerturbationState] = []

    def state_for(key: str, shape) -> PerturbationState:
        rng = np.random.default_rng(derive_seed(config.seed, "delta/" + key))
        return PerturbationState.initial(key, shape, config, rng, dtype)

    if alg == "DAT":
        states = [state_for(e.env_id, e.input_shape) for e in envs]
    elif alg == "UAT":
        states = [state_for("+".join(env_ids), envs[0].input_shape)]
    history = TrainHistory()

    def evaluate(it: int) -> None:
        for name, ds in eval_splits.items():
            history.evals.append({"iteration": it, "split": name, "accuracy": accuracy(model, ds)})
        if config.keep_checkpoints:
            history.checkpoints.append((it, [p.data.copy() for p in model.params]))

    for it in range(config.iterations):
        batches = [next(s) for s in streams]
        batches = [(x.astype(dtype, copy=False), y) for x, y in batches]
        try:
            if alg == "ERM":
                metrics = erm_step(model, opt, batches, config)
            elif alg == "DAT":
                metrics = dat_iteration(model, opt, states, batches, config)
            elif alg == "UAT":
                pooled = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
                metrics = uat_iteration(model, opt, pooled, states[0], config)
            elif alg == "AT":
                metrics = at_iteration(model, opt, batches, config)
            elif alg == "IRMv1":
                metrics = irmv1_step(model, opt, batches, config, it)
            elif alg == "LDAT":
                metrics = ldat_step(model, opt, batches, config)
            else:
                raise ValueError(alg)
        except NonFiniteError as exc:
            raise NumericalAbort(
                f"non-finite value at iteration {it}{tag}: {exc}",
                {"iteration": it, "algorithm": alg, "config": config.to_dict(), "error": str(exc)},
            ) from exc
        ids = ["+".join(env_ids)] if alg == "UAT" else env_ids
        for env_id, m in zip(ids, metrics):
            history.steps.append({"iteration": it, "env_id": env_id + tag, **m})
        done = it + 1
        if done % config.eval_interval == 0 or done == config.iterations:
            evaluate(done)
    return model, history


def train(config: TrainerConfig, env_datasets, eval_splits=None, spec: ModelSpec | None = None):
    """Train with ``config.algorithm``; returns ``(model, history)``.

    ``eval_splits`` maps split names to datasets scored every
    ``eval_interval`` iterations and after the last one. ``EnsembleUAT``
    trains one UAT model per environment and returns an :class:`Ensemble`.
    """
    envs = list(env_datasets)
    if not envs:
        raise ContractError("at least one training environment is required")
    eval_splits = dict(eval_splits or {})
    if spec is None:
        spec = ModelSpec(input_dim=int(np.prod(envs[0].input_shape)), hidden_dims=(64,), rep_dim=64)
    if config.algorithm != "EnsembleUAT":
        return _fit(config, envs, eval_splits, spec)
    sub = replace(config, algorithm="UAT")
    models, merged = [], TrainHistory()
    for k, env in enumerate(envs):
        m, h = _fit(replace(sub, seed=_spawn(config.seed, len(envs))[k]), [env], {}, spec, tag=f"@{k}")
        models.append(m)
        merged.steps.extend(h.steps)
    ens = Ensemble(models)
    for name, ds in eval_splits.items():
        merged.evals.append({"iteration": config.iterations, "split": name, "accuracy": accuracy(ens, ds)})
    return ens, merged
