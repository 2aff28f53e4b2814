"""Piecewise-linear classifiers ``f(x) = beta^T Phi(x)``.

Two architectures share one interface (``params``, ``features``,
``forward``, ``loss``):

* :class:`MLP` -- ``Phi`` is a stack of affine maps with ReLU between them
  (no activation after the last one), so ``Phi`` is piecewise affine and its
  local linearization can be read off the activation masks.
* :class:`MnistCNN` -- four 3x3 convolutions with ReLU, global average pool.

The head ``beta`` is a bias-free linear map so that every constant in the
network ends up in ``B_x``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    rep_dim: int = 1
    bias_enabled: bool = True
    head_dim: int = 1
    seed: int = 0
    arch: str = "mlp"
    # CNN only: input channels and per-layer conv widths
    in_channels: int = 2
    conv_channels: tuple[int, ...] = (16, 32, 32, 32)
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        dims = [self.input_dim, self.rep_dim, self.head_dim, *self.hidden_dims]
        if self.arch == "cnn":
            dims = [self.in_channels, self.head_dim, *self.conv_channels]
            if len(self.conv_channels) != 4:
                raise SpecError("the CNN has exactly four conv layers")
        elif self.arch != "mlp":
            raise SpecError(f"unknown arch {self.arch!r}")
        if any(int(d) <= 0 for d in dims):
            raise SpecError(f"all dimensions must be positive: {dims}")
        if self.precision not in ("float64", "float32"):
            raise SpecError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class LocalLinearization:
    """Affine form ``Phi(x) = jacobian @ x + bias`` valid in the activation region of x."""

    jacobian: np.ndarray  # [rep_dim, input_dim]
    bias: np.ndarray  # [rep_dim]
    masks: list[np.ndarray] = field(default_factory=list)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.jacobian @ np.ravel(x) + self.bias


def _uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """Shared behaviour; subclasses build ``self.params`` and ``features``."""

    spec: ModelSpec
    params: list[Tensor]
    param_names: list[str]

    @property
    def head(self) -> Tensor:
        return self.params[-1]

    @property
    def binary(self) -> bool:
        return self.spec.head_dim == 1

    def forward(self, x) -> Tensor:
        """Logits ``beta^T Phi(x)``, shape [N, head_dim]."""
        return T.matmul(self.features(x), self.head)

    __call__ = forward

    def loss(self, logits: Tensor, y) -> Tensor:
        """Per-sample loss: logistic for a binary head, cross-entropy otherwise."""
        if self.binary:
            return T.logistic_loss(logits, y)
        return T.cross_entropy(logits, y)

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            z = self.forward(x).data
        if self.binary:
            return np.where(z[:, 0] > 0, 1, -1)
        return np.argmax(z, axis=1)

    def copy(self) -> "Model":
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.params = [Tensor(p.data.copy(), requires_grad=p.requires_grad) for p in self.params]
        return other

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params])

    def set_params(self, arrays) -> None:
        for p, a in zip(self.params, arrays, strict=True):
            a = np.asarray(a, dtype=p.dtype)
            if a.shape != p.shape:
                raise SpecError(f"parameter shape mismatch {a.shape} vs {p.shape}")
            p.data = a.copy()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def local_linearization(self, x) -> LocalLinearization:
        """Generic route: one reverse pass per representation coordinate."""
        x = np.asarray(x, dtype=self.spec.dtype).reshape(1, *self.input_shape)
        xt = Tensor(x, requires_grad=True)
        phi = self.features(xt)
        rows = []
        for i in range(phi.shape[1]):
            sel = np.zeros(phi.shape, dtype=phi.dtype)
            sel[0, i] = 1.0
            (g,) = T.grad((phi * Tensor(sel)).sum(), [xt])
            rows.append(g.ravel())
        jac = np.stack(rows)
        return LocalLinearization(jac, phi.data[0] - jac @ x.ravel())


class MLP(Model):
    def __init__(self, spec: ModelSpec):
        rng = np.random.default_rng(spec.seed)
        dt = spec.dtype
        dims = [spec.input_dim, *spec.hidden_dims, spec.rep_dim]
        self.spec = spec
        self.input_shape = (spec.input_dim,)
        self.params, self.param_names = [], []
        for k, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            self.params.append(Tensor(_uniform(rng, din, (din, dout), dt), requires_grad=True))
            self.params.append(Tensor(np.zeros(dout, dtype=dt), requires_grad=spec.bias_enabled))
            self.param_names += [f"W{k}", f"b{k}"]
        self.params.append(Tensor(_uniform(rng, spec.rep_dim, (spec.rep_dim, spec.head_dim), dt), requires_grad=True))
        self.param_names.append("beta")

    @property
    def n_linear(self) -> int:
        return (len(self.params) - 1) // 2

    def weights(self) -> list[Tensor]:
        return self.params[0:-1:2]

    def biases(self) -> list[Tensor]:
        return self.params[1:-1:2]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.params if p.requires_grad]

    def _flat(self, x) -> Tensor:
        x = T.as_tensor(x, dtype=self.spec.dtype)
        if x.data.ndim == 1:
            x = x.reshape(1, -1)
        elif x.data.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.spec.input_dim:
            raise T.ShapeError(f"expected {self.spec.input_dim} input features, got {x.shape[1]}")
        return x

    def features(self, x) -> Tensor:
        h = self._flat(x)
        n = self.n_linear
        for k in range(n):
            h = T.matmul(h, self.params[2 * k])
            if self.spec.bias_enabled:
                h = T.add(h, self.params[2 * k + 1])
            if k < n - 1:
                h = T.relu(h)
        return h

    def activation_masks(self, x) -> list[np.ndarray]:
        """0/1 masks ([N, width]) of every hidden ReLU at a batch of inputs."""
        with T.no_grad():
            h = self._flat(x).data
            masks = []
            for k in range(self.n_linear - 1):
                h = h @ self.params[2 * k].data
                if self.spec.bias_enabled:
                    h = h + self.params[2 * k + 1].data
                m = (h > 0).astype(h.dtype)
                masks.append(m)
                h = h * m
        return masks

    def local_linearization(self, x) -> LocalLinearization:
        """Frozen-mask Jacobian of ``Phi`` at x and ``B_x = Phi(x) - Phi_x x``."""
        x = np.asarray(x, dtype=self.spec.dtype).ravel()
        masks = [m[0] for m in self.activation_masks(x)]
        ws = [w.data for w in self.weights()]
        # Phi_x = W_K^T D_{K-1} W_{K-1}^T ... D_1 W_1^T  (weights stored [in, out])
        jac = ws[0].T
        for k in range(1, len(ws)):
            jac = ws[k].T @ (masks[k - 1][:, None] * jac)
        with T.no_grad():
            phi = self.features(x).data[0]
        return LocalLinearization(jac, phi - jac @ x, masks)

    def input_gradient_graph(self, x, dloss_dlogit: Tensor) -> Tensor:
        """Per-sample input gradients ``dl/dlogit * beta^T Phi_x`` built from tape ops.

        Masks are treated as constants (exact inside each activation region),
        so the result stays differentiable w.r.t. the parameters without any
        second-order machinery. ``dloss_dlogit`` has shape [N, head_dim].
        """
        masks = self.activation_masks(x)
        g = T.matmul(dloss_dlogit, self.head.T)
        for k in range(self.n_linear - 1, -1, -1):
            g = T.matmul(g, self.params[2 * k].T)
            if k > 0:
                g = g * Tensor(masks[k - 1])
        return g


class MnistCNN(Model):
    """Four conv layers (3x3; the second strided) + ReLU, global average pool, linear head.

    No normalization layers, so the network stays piecewise linear in x.
    """

    def __init__(self, spec: ModelSpec):
        rng = np.random.default_rng(spec.seed)
        dt = spec.dtype
        chans = [spec.in_channels, *spec.conv_channels]
        self.spec = spec
        self.input_shape = (spec.in_channels, None, None)
        self.strides = (1, 2, 1, 1)
        self.params, self.param_names = [], []
        for k, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            fan_in = cin * 9
            self.params.append(Tensor(_uniform(rng, fan_in, (cout, cin, 3, 3), dt), requires_grad=True))
            self.params.append(Tensor(np.zeros(cout, dtype=dt), requires_grad=spec.bias_enabled))
            self.param_names += [f"conv{k}.weight", f"conv{k}.bias"]
        rep = chans[-1]
        self.params.append(Tensor(_uniform(rng, rep, (rep, spec.head_dim), dt), requires_grad=True))
        self.param_names.append("beta")

    def trainable(self) -> list[Tensor]:
        return [p for p in self.params if p.requires_grad]

    def features(self, x) -> Tensor:
        x = T.as_tensor(x, dtype=self.spec.dtype)
        if x.data.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise T.ShapeError(f"expected [N, {self.spec.in_channels}, H, W] input, got {x.shape}")
        h = x
        for k in range(4):
            b = self.params[2 * k + 1] if self.spec.bias_enabled else None
            h = T.relu(T.conv2d(h, self.params[2 * k], b, stride=self.strides[k], padding=1))
        return T.spatial_mean(h)

    def local_linearization(self, x) -> LocalLinearization:
        x = np.asarray(x, dtype=self.spec.dtype)
        self.input_shape = x.shape[-3:]
        return super().local_linearization(x)


def init(spec: ModelSpec) -> Model:
    """Build a model with fan-in scaled uniform weights and zero biases."""
    return MnistCNN(spec) if spec.arch == "cnn" else MLP(spec)


def forward(model: Model, x) -> Tensor:
    return model.forward(x)


def mnist_cnn_forward(model: MnistCNN, x) -> Tensor:
    if not isinstance(model, MnistCNN):
        raise TypeError("mnist_cnn_forward needs an MnistCNN model")
    return model.forward(x)


def local_linearization(model: Model, x) -> LocalLinearization:
    return model.local_linearization(x)


# -- checkpoints ---------------------------------------------------------

def to_json(model: Model) -> dict:
    return {
        "spec": model.spec.to_dict(),
        "seed": model.spec.seed,
        "precision": model.spec.precision,
        "params": [
            {"name": n, "shape": list(p.shape), "data": p.data.ravel().tolist()}
            for n, p in zip(model.param_names, model.params)
        ],
    }


def from_json(doc: dict) -> Model:
    spec = ModelSpec(**doc["spec"])
    model = init(spec)
    arrays = [np.asarray(e["data"], dtype=spec.dtype).reshape(e["shape"]) for e in doc["params"]]
    model.set_params(arrays)
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(to_json(model)))


def load_model(path) -> Model:
    return from_json(json.loads(Path(path).read_text()))
