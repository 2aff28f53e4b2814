"""Environment datasets: MNIST IDX parsing, ColoredMNIST, a Gaussian spurious-feature generator, batching."""
from __future__ import annotations

import functools
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE_3D = 0x00000803
IDX_UBYTE_1D = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


class IdxLengthError(IdxFormatError):
    pass


class DataError(ValueError):
    pass


def parse_idx(buf: bytes, expect_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer (1-d labels or 3-d images).

    The payload length must match the header exactly.
    """
    if len(buf) < 4:
        raise IdxLengthError("buffer shorter than the IDX magic")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_UBYTE_1D, IDX_UBYTE_3D):
        raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}")
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"expected magic 0x{expect_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxLengthError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        raise IdxLengthError(f"IDX payload is {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = {1: IDX_UBYTE_1D, 3: IDX_UBYTE_3D}.get(arr.ndim)
    if magic is None:
        raise IdxFormatError("only 1-d and 3-d unsigned-byte arrays are supported")
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def _read_maybe_gz(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FileNotFoundError(f"neither {path} nor {gz} exists")


@dataclass
class RawMnist:
    images: np.ndarray  # uint8 [N, 28, 28]
    labels: np.ndarray  # uint8 [N]
    checksums: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("image and label counts differ")
        if self.labels.size and self.labels.max() > 9:
            raise DataError("MNIST labels must be 0..9")


def default_data_dir() -> Path | None:
    d = os.environ.get("OODFORGE_DATA_DIR")
    return Path(d) if d else None


def load_mnist(data_dir=None, splits=("train", "test")) -> RawMnist:
    """Read and concatenate the requested MNIST splits from IDX files (optionally ``.gz``)."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    if data_dir is None:
        raise FileNotFoundError("no MNIST directory given and OODFORGE_DATA_DIR is unset")
    images, labels, sums = [], [], {}
    for split in splits:
        for kind, magic in (("images", IDX_UBYTE_3D), ("labels", IDX_UBYTE_1D)):
            name = MNIST_FILES[f"{split}_{kind}"]
            buf = _read_maybe_gz(data_dir / name)
            sums[name] = hashlib.sha256(buf).hexdigest()
            arr = parse_idx(buf, expect_magic=magic)
            (images if kind == "images" else labels).append(arr)
    return RawMnist(np.concatenate(images), np.concatenate(labels), sums)


def mnist_available(data_dir=None) -> bool:
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    if data_dir is None:
        return False
    return all(
        (data_dir / n).exists() or (data_dir / (n + ".gz")).exists() for n in MNIST_FILES.values()
    )


# -- environments --------------------------------------------------------

@dataclass
class EnvironmentDataset:
    env_id: str
    inputs: np.ndarray
    labels: np.ndarray
    env_params: dict = field(default_factory=dict)
    split: str = "train"
    # per-sample generator internals (true labels, colors, spurious signs) for diagnostics
    aux: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{self.env_id}: {len(self.inputs)} inputs vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None, suffix: str = "") -> "EnvironmentDataset":
        return EnvironmentDataset(
            self.env_id + suffix,
            self.inputs[idx],
            self.labels[idx],
            dict(self.env_params),
            split or self.split,
            {k: v[idx] for k, v in self.aux.items()},
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def manifest(self, seed: int) -> dict:
        return {
            "env_id": self.env_id,
            "n": len(self),
            "env_params": self.env_params,
            "seed": seed,
            "content_hash": self.content_hash(),
        }


def _check_prob(p: float, name: str) -> None:
    if not 0.0 <= p <= 1.0:
        raise DataError(f"{name} must lie in [0, 1], got {p}")


def make_cmnist(
    raw: RawMnist,
    color_flip_probs=(0.1, 0.2, 0.9),
    label_noise: float = 0.25,
    seed: int = 0,
    resolution: int = 28,
) -> list[EnvironmentDataset]:
    """Colored MNIST with one environment per color-flip probability.

    Label ``y~ = +1`` for digits 0-4, ``-1`` otherwise; the observed label
    flips with probability ``label_noise``; the color flips away from the
    observed label with the environment's probability. Color ``+1`` puts the
    digit in channel 0, color ``-1`` in channel 1. Pixels are scaled to [0, 1].
    Samples go to environments round-robin after a seeded shuffle.
    """
    for p in color_flip_probs:
        _check_prob(p, "color_flip_prob")
    if not 0.0 <= label_noise < 0.5:
        raise DataError(f"label_noise must lie in [0, 0.5), got {label_noise}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(raw.labels))
    images, digits = raw.images[order], raw.labels[order]
    if resolution != images.shape[1]:
        step = images.shape[1] // resolution
        images = images[:, ::step, ::step]
    n_env = len(color_flip_probs)
    envs = []
    for k, p in enumerate(color_flip_probs):
        img = images[k::n_env].astype(np.float64) / 255.0
        y_true = np.where(digits[k::n_env] < 5, 1, -1)
        y = np.where(rng.random(len(y_true)) < label_noise, -y_true, y_true)
        color = np.where(rng.random(len(y)) < p, -y, y)
        x = np.zeros((len(y), 2, *img.shape[1:]), dtype=np.float64)
        x[color == 1, 0] = img[color == 1]
        x[color == -1, 1] = img[color == -1]
        envs.append(
            EnvironmentDataset(
                env_id=f"cmnist_{p:g}",
                inputs=x,
                labels=y.astype(np.int64),
                env_params={"color_flip_prob": p, "label_noise": label_noise},
                aux={"true_labels": y_true, "colors": color},
            )
        )
    return envs


def make_synthetic_spurious(
    n_per_env: int,
    d_inv: int,
    d_spu: int,
    inv_margin: float,
    spu_corrs,
    seed: int = 0,
    spu_margin: float | None = None,
) -> list[EnvironmentDataset]:
    """Gaussian environments with a fixed invariant block and an environment-dependent spurious block.

    ``x_inv = y mu_inv + N(0, I)`` with ``||mu_inv|| = inv_margin``;
    ``x_spu = s mu_spu + N(0, I)`` where ``s = y`` with probability
    ``(1 + corr) / 2`` and ``-y`` otherwise. ``mu_spu`` has norm
    ``spu_margin`` (defaults to ``inv_margin``). Both means point along the
    all-ones direction of their block.
    """
    for c in spu_corrs:
        if not -1.0 <= c <= 1.0:
            raise DataError(f"spurious correlation must lie in [-1, 1], got {c}")
    if d_inv <= 0 or d_spu < 0:
        raise DataError("need d_inv > 0 and d_spu >= 0")
    rng = np.random.default_rng(seed)
    spu_margin = inv_margin if spu_margin is None else spu_margin
    mu_inv = np.full(d_inv, inv_margin / np.sqrt(d_inv))
    mu_spu = np.full(d_spu, spu_margin / np.sqrt(d_spu)) if d_spu else np.zeros(0)
    envs = []
    for k, corr in enumerate(spu_corrs):
        y = rng.choice(np.array([-1, 1]), size=n_per_env)
        s = np.where(rng.random(n_per_env) < (1.0 + corr) / 2.0, y, -y)
        x_inv = y[:, None] * mu_inv + rng.normal(size=(n_per_env, d_inv))
        x_spu = s[:, None] * mu_spu + rng.normal(size=(n_per_env, d_spu))
        envs.append(EnvironmentDataset(
            env_id=f"synth_{k}",
            inputs=np.concatenate([x_inv, x_spu], axis=1),
            labels=y.astype(np.int64),
            env_params={
                "spu_corr": corr,
                "d_inv": d_inv,
                "d_spu": d_spu,
                "inv_margin": inv_margin,
                "spu_margin": spu_margin,
            },
            aux={"spurious_sign": s},
        ))
    return envs


def train_val_split(env: EnvironmentDataset, val_fraction: float = 0.2, seed: int = 0):
    """Seeded split of one environment into (train, val) parts."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(env))
    n_val = int(round(val_fraction * len(env)))
    return env.subset(np.sort(idx[n_val:]), "train"), env.subset(np.sort(idx[:n_val]), "val", "_val")


def batcher(dataset: EnvironmentDataset, batch_size: int, seed: int = 0, epochs: int | None = None):
    """Yield ``(inputs, labels)`` batches; reshuffled each epoch, short final batch kept.

    With ``epochs=None`` the iterator never ends.
    """
    n = len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            yield dataset.inputs[idx], dataset.labels[idx]
        epoch += 1


def write_manifest(envs, seed: int, path) -> None:
    Path(path).write_text(json.dumps([e.manifest(seed) for e in envs], indent=2))


def save_envs(envs, out_dir, seed: int) -> None:
    """Store environments as one ``.npz`` each plus a ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in envs:
        np.savez(out / f"{e.env_id}.npz", inputs=e.inputs, labels=e.labels, env_params=json.dumps(e.env_params))
    write_manifest(envs, seed, out / "manifest.json")


def load_envs(in_dir) -> list[EnvironmentDataset]:
    d = Path(in_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    envs = []
    for m in manifest:
        with np.load(d / f"{m['env_id']}.npz") as z:
            envs.append(
                EnvironmentDataset(m["env_id"], z["inputs"], z["labels"], json.loads(str(z["env_params"])))
            )
    return envs


@functools.lru_cache(maxsize=1)
def load_mnist_subset() -> RawMnist:
    """The 5000-image MNIST sample (500 per digit) bundled with ``mlxtend``.

    A stand-in for the full IDX files when they are not on disk. The arrays
    are round-tripped through the IDX codec so they take the same parse path.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    images = parse_idx(encode_idx(X.reshape(-1, 28, 28).astype(np.uint8)), IDX_UBYTE_3D)
    labels = parse_idx(encode_idx(y.astype(np.uint8)), IDX_UBYTE_1D)
    # shared through the cache, so keep it read-only
    images.flags.writeable = False
    labels.flags.writeable = False
    return RawMnist(images, labels, {"source": "mlxtend.mnist_5k"})


def load_raw_mnist(data_dir=None, allow_subset: bool = True) -> RawMnist:
    """Full MNIST from IDX files when available, else (optionally) the 5k subset."""
    if mnist_available(data_dir):
        return load_mnist(data_dir)
    if not allow_subset:
        raise FileNotFoundError("MNIST IDX files not found; set OODFORGE_DATA_DIR")
    return load_mnist_subset()
