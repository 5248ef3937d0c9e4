"""Synthetic classification tasks and IDX file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError, InputError

IDX_IMAGES = 2051
IDX_LABELS = 2049


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture task. ``drift=True`` multiplies input features by
    log-uniformly spread scales (10**-spread .. 10**spread), which makes the
    input layer's per-example gradient norms dominate and grow during training.
    """

    n: int = 10000
    n_test: int = 2000
    classes: int = 10
    dim: int = 32
    separation: float = 5.0
    drift: bool = False
    scale_spread: float = 1.5

    def __post_init__(self):
        if self.classes < 2 or self.dim < 2 or self.n < 1 or self.n_test < 0 or not self.separation > 0:
            raise InputError(f"degenerate synthetic spec {self}")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n(self) -> int:
        return len(self.x)


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((spec.classes, spec.dim))
    means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(m):
        y = rng.integers(0, spec.classes, m)
        return means[y] + rng.standard_normal((m, spec.dim)), y

    x, y = draw(spec.n)
    xt, yt = draw(spec.n_test)
    if spec.drift:
        scale = np.logspace(-spec.scale_spread, spec.scale_spread, spec.dim)
        rng.shuffle(scale)
        x, xt = x * scale, xt * scale
    return Dataset(x, y, xt, yt)


# model presets that go with the tasks
DRIFT_WIDTHS = (32, 64, 16, 16, 16, 16, 16, 16, 10)
DRIFT_ACTIVATION = "tanh"


def read_idx(path: str | Path) -> np.ndarray:
    """Read an IDX file: images (magic 2051) become float64 in [0, 1], labels
    (magic 2049) stay integer."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("file too short for an IDX header", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"bad IDX magic {magic}; expected {IDX_IMAGES} or {IDX_LABELS}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated IDX dimension header", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise FormatError(f"truncated IDX payload: need {count} bytes", len(data))
    if len(data) > header + count:
        raise FormatError("trailing bytes after IDX payload", header + count)
    raw = np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write uint8 data as IDX: 1-D arrays as labels, 3-D arrays as images."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        magic = IDX_LABELS
    elif arr.ndim == 3:
        magic = IDX_IMAGES
    else:
        raise InputError(f"IDX writer handles 1-D labels or 3-D images, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        else:
            arr = arr.astype(np.uint8)
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_dataset(train_images, train_labels, test_images, test_labels) -> Dataset:
    def flat(p):
        a = read_idx(p)
        return a.reshape(len(a), -1)

    return Dataset(flat(train_images), read_idx(train_labels), flat(test_images), read_idx(test_labels))
