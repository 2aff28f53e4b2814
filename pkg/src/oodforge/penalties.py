"""Gradient-penalty functionals for a binary logistic model and the identities linking them.

Notation in this module: for a sample (x, y) with logit f = beta^T Phi(x) and
local linearization Phi(x) = Phi_x x + B_x,

* the IRMv1 penalty is the squared derivative of the batch-mean loss of
  ``w * f`` at ``w = 1``,
* the AT penalty is the batch mean of ``||grad_x loss||``,
* the DAT penalty is ``||batch mean of grad_x loss||``,
* the LDAT penalty of a single sample is ``|<grad_x loss, eps x>|``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import ModelSpec, init
from .tensor import Tensor, sigmoid_np


class ContractError(ValueError):
    pass


def _batch(x, y):
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    y = T.check_binary_labels(np.atleast_1d(y))
    if x.ndim == 1:
        x = x[None, :]
    if len(x) == 0:
        raise ContractError("empty batch")
    if len(x) != len(y):
        raise ContractError(f"{len(x)} inputs but {len(y)} labels")
    return x, y


def _require_binary(model) -> None:
    if not model.binary:
        raise ContractError("penalties are defined for the binary (head_dim=1) configuration")


def input_gradients(model, x, y) -> np.ndarray:
    """Per-sample ``grad_x loss`` as rows of an [N, input_dim] array."""
    x, y = _batch(x, y)
    g = T.grad_wrt_input(model, x, y)
    return g.reshape(len(x), -1)


def penalty_irmv1(model, x, y) -> float:
    """Squared derivative w.r.t. a scalar dummy multiplier of the batch-mean loss, at 1."""
    _require_binary(model)
    x, y = _batch(x, y)
    with T.no_grad():
        logits = model.forward(x).data
    w = Tensor(np.asarray(1.0, dtype=logits.dtype), requires_grad=True)
    risk = T.logistic_loss(T.mul(Tensor(logits), w), y).mean()
    (gw,) = T.grad(risk, [w])
    return float(gw) ** 2


def irmv1_penalty_graph(logits: Tensor, y) -> Tensor:
    """Differentiable IRMv1 penalty from logits: ``mean(-y sigmoid(-y f) f) ** 2``.

    This is the closed form of the dummy-multiplier derivative, so training
    can backpropagate through it with first-order autodiff only.
    """
    y = T.check_binary_labels(y)
    ycol = Tensor(y.astype(logits.dtype).reshape(logits.shape))
    s = T.sigmoid(T.neg(logits * ycol))
    dw = T.neg(T.mean(s * ycol * logits))
    return T.square(dw)


def _norms(g: np.ndarray) -> np.ndarray:
    # one formula for both penalties keeps them bit-equal on singleton batches
    return np.sqrt(np.sum(g * g, axis=-1))


def penalty_at(model, x, y) -> float:
    _require_binary(model)
    g = input_gradients(model, x, y)
    return float(np.mean(_norms(g)))


def penalty_dat(model, x, y) -> float:
    _require_binary(model)
    g = input_gradients(model, x, y)
    return float(_norms(g.mean(axis=0)))


def dat_penalty_graph(model, x, y) -> Tensor:
    """``||mean grad_x loss||`` as a tape expression (MLP only), differentiable in the parameters."""
    if not hasattr(model, "input_gradient_graph"):
        raise ContractError("the differentiable DAT penalty needs an MLP model")
    y = T.check_binary_labels(y)
    logits = model.forward(x)
    ycol = Tensor(y.astype(logits.dtype).reshape(logits.shape))
    dldf = T.neg(T.sigmoid(T.neg(logits * ycol)) * ycol)
    g = model.input_gradient_graph(x, dldf)
    return T.l2norm(T.mean_rows(g))


def reweighted_gradients(model, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample reweighted gradient rows ``L_x`` ([N, input_dim]) and bias terms ``B~_x`` ([N]).

    ``L_x = c_x beta^T Phi_x`` and ``B~_x = c_x beta^T B_x`` with
    ``c_x = (1 - sigmoid(y f)) y`` evaluated at the full logit f.
    """
    _require_binary(model)
    x, y = _batch(x, y)
    beta = model.head.data[:, 0]
    L = np.empty((len(x), x[0].size), dtype=x.dtype)
    Bt = np.empty(len(x), dtype=x.dtype)
    for i, (xi, yi) in enumerate(zip(x, y)):
        lin = model.local_linearization(xi)
        row = beta @ lin.jacobian
        const = beta @ lin.bias
        f = row @ xi.ravel() + const
        c = (1.0 - sigmoid_np(np.asarray(yi * f))) * yi
        L[i] = c * row
        Bt[i] = c * const
    return L, Bt


def reweighted_irm_penalty(model, x, y) -> float:
    """``||mean(L_x x + B~_x)||^2``, the linearization route to the IRMv1 penalty."""
    x, y = _batch(x, y)
    L, Bt = reweighted_gradients(model, x, y)
    per = np.einsum("nd,nd->n", L, x.reshape(len(x), -1)) + Bt
    return float(np.mean(per)) ** 2


def penalty_ldat(model, x, y, eps: float) -> float:
    """Single-sample linearized DAT penalty with the sign of ``+-eps x`` chosen to be non-negative."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _require_binary(model)
    x, y = _batch(x, y)
    if len(x) != 1:
        raise ContractError("penalty_ldat is defined per sample")
    g = input_gradients(model, x, y)[0]
    return abs(float(g @ (eps * x[0].ravel())))


def penalty_irm_prime(model, x, y) -> float:
    """``(1 - sigmoid(y f))^2 ||beta^T Phi_x x||^2`` for one sample (bias term dropped)."""
    _require_binary(model)
    x, y = _batch(x, y)
    if len(x) != 1:
        raise ContractError("penalty_irm_prime is defined per sample")
    lin = model.local_linearization(x[0])
    beta = model.head.data[:, 0]
    lin_part = beta @ lin.jacobian @ x[0].ravel()
    f = lin_part + beta @ lin.bias
    w = 1.0 - sigmoid_np(np.asarray(y[0] * f))
    return float(w * w * lin_part * lin_part)


@dataclass
class PenaltyReport:
    penalty_irm: float
    penalty_irm_prime: float
    penalty_at: float
    penalty_dat: float
    penalty_ldat: float
    per_sample_Lx: list = field(repr=False)
    per_sample_Btilde: list = field(repr=False)
    batch_size: int


def penalty_report(model, x, y, eps: float = 1.0) -> PenaltyReport:
    """All penalties on one batch; the single-sample terms use the first sample."""
    x, y = _batch(x, y)
    L, Bt = reweighted_gradients(model, x, y)
    return PenaltyReport(
        penalty_irm=penalty_irmv1(model, x, y),
        penalty_irm_prime=penalty_irm_prime(model, x[:1], y[:1]),
        penalty_at=penalty_at(model, x, y),
        penalty_dat=penalty_dat(model, x, y),
        penalty_ldat=penalty_ldat(model, x[:1], y[:1], eps),
        per_sample_Lx=list(L),
        per_sample_Btilde=list(Bt),
        batch_size=len(x),
    )


# -- first-order accuracy of the DAT penalty -------------------------------

def region_radius(model, x) -> float:
    """Largest r such that no hidden ReLU of an MLP changes sign within ``||delta|| < r`` of x.

    Layer by layer the pre-activations are affine in x while the earlier
    masks hold, so ``|pre| / ||d pre / dx||`` bounds the distance to the
    nearest kink.
    """
    h = np.asarray(x, dtype=np.float64).ravel()
    jac = np.eye(h.size)
    radius = np.inf
    for k in range(model.n_linear - 1):
        w = model.params[2 * k].data
        pre = h @ w + (model.params[2 * k + 1].data if model.spec.bias_enabled else 0.0)
        J = jac @ w
        scale = np.linalg.norm(J, axis=0)
        with np.errstate(divide="ignore"):
            radius = min(radius, float(np.min(np.where(scale > 0, np.abs(pre) / scale, np.inf))))
        mask = pre > 0
        h = pre * mask
        jac = J * mask
    return radius


def unit_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    u = rng.normal(size=(n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def worst_case_gain(model, x, y, eps: float, directions: np.ndarray) -> float:
    """``max_u mean loss(x + eps u) - mean loss(x)`` over the given unit directions (one shared shift)."""
    x, y = _batch(x, y)
    with T.no_grad():
        base = float(model.loss(model.forward(x), y).data.mean())
        n, m = len(x), len(directions)
        shifted = (x[None, :, :] + eps * directions[:, None, :]).reshape(n * m, -1)
        losses = model.loss(model.forward(shifted), np.tile(y, m)).data.reshape(m, n).mean(axis=1)
    return float(losses.max()) - base


def linearization_gap(model, x, y, eps: float, directions: np.ndarray) -> float:
    """``|brute-force worst-case gain - eps * penalty_dat|``; second order in eps inside a linear region."""
    return abs(worst_case_gain(model, x, y, eps, directions) - eps * penalty_dat(model, x, y))


# -- identity checks -----------------------------------------------------

IDENTITY_TOL = 1e-8


def rel_err(a: float, b: float, floor: float = 1e-30) -> float:
    return abs(a - b) / max(abs(b), floor)


def random_net(rng: np.random.Generator, input_dim: int, depth: int, width: int, bias: bool):
    """A random ReLU MLP; with ``bias`` the biases are drawn non-zero so ``B_x`` is present."""
    spec = ModelSpec(
        input_dim=input_dim,
        hidden_dims=(width,) * depth,
        rep_dim=width,
        bias_enabled=bias,
        seed=int(rng.integers(2**63)),
    )
    model = init(spec)
    if bias:
        for b in model.biases():
            b.data = rng.normal(0.0, 0.5, size=b.shape)
    return model


def random_batch(rng: np.random.Generator, n: int, input_dim: int):
    x = rng.normal(size=(n, input_dim))
    y = rng.choice(np.array([-1, 1]), size=n)
    return x, y


def ldat_identity_error(model, x, y, eps: float, drop_bias: bool = True) -> float:
    """Relative gap between ``ldat^2`` and ``eps^2`` times the single-sample IRM penalty.

    With ``drop_bias`` the IRM side is the bias-dropped penalty computed from
    the local linearization; otherwise it is the full IRMv1 penalty, which
    only matches when ``B_x = 0``.
    """
    lhs = penalty_ldat(model, x, y, eps) ** 2
    irm = penalty_irm_prime(model, x, y) if drop_bias else penalty_irmv1(model, x, y)
    rhs = eps * eps * irm
    return abs(lhs - rhs) / max(rhs, 1e-30)


def reweighting_error(model, x, y) -> float:
    auto = penalty_irmv1(model, x, y)
    lin = reweighted_irm_penalty(model, x, y)
    return abs(auto - lin) / max(abs(auto), abs(lin), 1e-30)


def verify_identities(
    n_trials: int,
    seed: int = 0,
    eps_grid=(1e-3, 1e-2, 1e-1, 1.0),
    depths=(1, 2, 3),
    widths=(4, 16),
    input_dims=(4, 16),
    max_batch: int = 64,
    tol: float = IDENTITY_TOL,
) -> dict:
    """Numerically check the single-sample LDAT/IRMv1 identity and the batch IRMv1/DAT identity.

    Each trial draws a random architecture and batch, and checks both
    identities on a bias-free and a biased copy. ``err_ldat`` compares the
    squared LDAT penalty with eps^2 times the full single-sample IRMv1
    penalty; it ignores ``B_x``, so on biased nets it is expected to fail and
    those rows are flagged ``expected_exception`` (not counted against
    ``pass``). ``err_ldat_prime`` uses the bias-dropped IRM penalty and
    must hold for every net.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(n_trials):
        depth = int(rng.choice(depths))
        width = int(rng.integers(min(widths), max(widths) + 1))
        din = int(rng.integers(min(input_dims), max(input_dims) + 1))
        n = int(rng.integers(1, max_batch + 1))
        x, y = random_batch(rng, n, din)
        net_seed = int(rng.integers(2**63))
        for bias in (False, True):
            model = random_net(np.random.default_rng(net_seed), din, depth, width, bias)
            e_rw = reweighting_error(model, x, y)
            for eps in eps_grid:
                e_l = ldat_identity_error(model, x[:1], y[:1], eps, drop_bias=False)
                e_lp = ldat_identity_error(model, x[:1], y[:1], eps)
                ok = e_rw <= tol and e_lp <= tol and (bias or e_l <= tol)
                rows.append(
                    {
                        "trial": trial,
                        "depth": depth,
                        "width": width,
                        "input_dim": din,
                        "batch_size": n,
                        "bias_enabled": bias,
                        "eps": eps,
                        "err_ldat": e_l,
                        "err_ldat_prime": e_lp,
                        "err_reweighting": e_rw,
                        "expected_exception": bias,
                        "pass": bool(ok),
                    }
                )
    free = [r for r in rows if not r["bias_enabled"]]
    biased = [r for r in rows if r["bias_enabled"]]
    return {
        "n_trials": n_trials,
        "seed": seed,
        "tol": tol,
        "max_err_ldat": max((r["err_ldat"] for r in free), default=0.0),
        "max_err_ldat_prime": max((r["err_ldat_prime"] for r in rows), default=0.0),
        "max_err_reweighting": max((r["err_reweighting"] for r in rows), default=0.0),
        "max_gap_ldat_biased": max((r["err_ldat"] for r in biased), default=0.0),
        "pass": all(r["pass"] for r in rows),
        "rows": rows,
    }
