"""Small deterministic feedforward networks with per-layer backward hooks.

Backpropagation here is hand-written rather than graph-based: the only layer
types are Linear and elementwise activations, and the clipping engine needs the
(input activation, output gradient) pair of every Linear layer the moment it
becomes available. ``backward_per_layer`` hands those pairs to a visitor in
reverse layer order.

Inputs are either (B, in) or sequences (B, T, in); Linear layers act on the
last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InputError, StateError

ACTIVATIONS = ("relu", "tanh")


@dataclass
class Linear:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError(f"Linear weight {self.W.shape} and bias {self.b.shape} are inconsistent")

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]

    @property
    def size(self) -> int:
        return self.W.size + self.b.size


@dataclass
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")


Layer = Linear | Activation


@dataclass
class Model:
    """An ordered stack of layers plus a partition of its Linear layers into groups.

    ``groups`` holds tuples of Linear-layer indices (0-based positions among the
    Linear layers, not among all layers). Each group must be a consecutive run,
    and the groups must cover every Linear layer exactly once in order. By
    default every Linear layer is its own group.
    """

    layers: list[Layer]
    groups: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        self.linear_positions = [i for i, layer in enumerate(self.layers) if isinstance(layer, Linear)]
        if not self.linear_positions:
            raise InputError("model has no Linear layers")
        prev = None
        for pos in self.linear_positions:
            lin = self.layers[pos]
            if prev is not None and lin.in_features != prev.out_features:
                raise DimensionError(
                    f"layer {pos}: expects {lin.in_features} inputs but previous Linear emits {prev.out_features}"
                )
            prev = lin
        if not self.groups:
            self.groups = [(i,) for i in range(len(self.linear_positions))]
        self._check_groups()

    def _check_groups(self):
        flat = [i for g in self.groups for i in g]
        if flat != list(range(len(self.linear_positions))) or any(len(g) == 0 for g in self.groups):
            raise InputError(f"groups {self.groups} do not partition linear layers 0..{len(self.linear_positions) - 1} in order")

    @property
    def linears(self) -> list[Linear]:
        return [self.layers[i] for i in self.linear_positions]

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_sizes(self) -> list[int]:
        lins = self.linears
        return [sum(lins[i].size for i in g) for g in self.groups]

    def group_of_linear(self) -> list[int]:
        out = [0] * len(self.linear_positions)
        for k, g in enumerate(self.groups):
            for i in g:
                out[i] = k
        return out

    def regroup(self, groups: Sequence[Sequence[int]]) -> "Model":
        """Same parameters (shared arrays), different clipping groups."""
        return Model(self.layers, [tuple(g) for g in groups])

    def copy(self) -> "Model":
        layers = [Linear(l.W.copy(), l.b.copy()) if isinstance(l, Linear) else Activation(l.kind) for l in self.layers]
        return Model(layers, list(self.groups))

    # flat parameter views, ordered group by group, W before b within a layer
    def get_group_params(self, k: int) -> np.ndarray:
        lins = self.linears
        return np.concatenate([np.concatenate([lins[i].W.ravel(), lins[i].b]) for i in self.groups[k]])

    def set_group_params(self, k: int, flat: np.ndarray) -> None:
        lins = self.linears
        off = 0
        for i in self.groups[k]:
            lin = lins[i]
            lin.W[...] = flat[off : off + lin.W.size].reshape(lin.W.shape)
            off += lin.W.size
            lin.b[...] = flat[off : off + lin.b.size]
            off += lin.b.size
        if off != flat.size:
            raise DimensionError(f"group {k} expects {off} parameters, got {flat.size}")

    def get_params(self) -> list[np.ndarray]:
        return [self.get_group_params(k) for k in range(self.num_groups)]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        for k, p in enumerate(params):
            self.set_group_params(k, p)


def mlp(widths: Sequence[int], activation: str = "relu", rng: np.random.Generator | None = None,
        init_scales: Sequence[float] | None = None) -> Model:
    """He/Glorot-style initialized MLP. ``widths`` = (in, hidden..., out).

    ``init_scales`` optionally multiplies each Linear layer's initial weights.
    """
    if len(widths) < 2:
        raise InputError("an MLP needs at least input and output widths")
    rng = rng if rng is not None else np.random.default_rng(0)
    gain = np.sqrt(2.0) if activation == "relu" else 1.0
    layers: list[Layer] = []
    n = len(widths) - 1
    for i in range(n):
        fan_in, fan_out = widths[i], widths[i + 1]
        scale = gain / np.sqrt(fan_in) * (init_scales[i] if init_scales is not None else 1.0)
        layers.append(Linear(rng.standard_normal((fan_out, fan_in)) * scale, np.zeros(fan_out)))
        if i < n - 1:
            layers.append(Activation(activation))
    return Model(layers)


@dataclass
class LayerTape:
    """Activations recorded by ``forward``.

    ``inputs[p]`` is the input of layer position ``p``; ``output`` the logits.
    """

    inputs: list[np.ndarray]
    output: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.output.shape[0]

    def linear_input(self, model: Model, i: int) -> np.ndarray:
        return self.inputs[model.linear_positions[i]]


def _apply(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Linear):
        return x @ layer.W.T + layer.b
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def forward(model: Model, x: np.ndarray, start: int = 0, stop: int | None = None) -> tuple[np.ndarray, LayerTape]:
    """Run layers ``start:stop`` (positions in ``model.layers``) on ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise DimensionError(f"input must be (B, in) or (B, T, in), got shape {x.shape}")
    layers = model.layers[start:stop]
    inputs = []
    h = x
    for offset, layer in enumerate(layers):
        if isinstance(layer, Linear) and h.shape[-1] != layer.in_features:
            raise DimensionError(
                f"layer {start + offset} (Linear {layer.in_features}->{layer.out_features}) got input width {h.shape[-1]}"
            )
        inputs.append(h)
        h = _apply(layer, h)
    return h, LayerTape(inputs, h)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, labels: np.ndarray, kind: str = "cross_entropy") -> tuple[float, np.ndarray]:
    """Mean per-example loss and the gradient of the *summed* loss.

    For sequence logits (B, T, C) an example's loss is the sum over its
    positions. ``mse`` uses 0.5 * ||logits - target||^2 per example.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if kind == "cross_entropy":
        labels = np.asarray(labels)
        if labels.shape != logits.shape[:-1]:
            raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        n_cls = logits.shape[-1]
        if labels.size and (labels.min() < 0 or labels.max() >= n_cls or not np.issubdtype(labels.dtype, np.integer)):
            raise InputError(f"labels must be integers in [0, {n_cls})")
        logp = _log_softmax(logits)
        onehot = np.zeros_like(logits)
        np.put_along_axis(onehot, labels[..., None].astype(np.intp), 1.0, axis=-1)
        per_token = -(logp * onehot).sum(axis=-1)
        grad = np.exp(logp) - onehot
    elif kind == "mse":
        target = np.asarray(labels, dtype=np.float64)
        if target.shape != logits.shape:
            raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
        diff = logits - target
        per_token = 0.5 * (diff * diff).sum(axis=-1)
        grad = diff
    else:
        raise InputError(f"unknown loss kind {kind!r}")
    per_example = per_token.reshape(n, -1).sum(axis=1)
    value = float(per_example.mean()) if n else 0.0
    return value, grad


Visitor = Callable[[int, np.ndarray, np.ndarray], None]


def backward_per_layer(model: Model, tape: LayerTape, dlogits: np.ndarray, visitor: Visitor,
                       start: int = 0, stop: int | None = None) -> np.ndarray | None:
    """Backpropagate ``dlogits`` through layers ``start:stop``.

    ``visitor(i, a, e)`` is called for each Linear layer, ``i`` being its index
    among Linear layers, in strictly decreasing order. Returns the gradient
    w.r.t. the input of layer ``start`` (useful for chunked pipelines), or None
    when ``start`` is 0.
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    stop = len(model.layers) if stop is None else stop
    if len(tape.inputs) != stop - start:
        raise StateError(f"tape holds {len(tape.inputs)} layers but backward spans {stop - start}")
    if dlogits.shape != tape.output.shape:
        raise StateError(f"dlogits shape {dlogits.shape} does not match recorded output {tape.output.shape}")
    lin_index = {p: i for i, p in enumerate(model.linear_positions)}
    g = dlogits
    for pos in range(stop - 1, start - 1, -1):
        layer = model.layers[pos]
        x = tape.inputs[pos - start]
        if isinstance(layer, Linear):
            visitor(lin_index[pos], x, g)
            if pos > 0:
                g = g @ layer.W
        elif layer.kind == "relu":
            g = g * (x > 0)
        else:
            t = np.tanh(x)
            g = g * (1.0 - t * t)
    return g if start > 0 else None


def param_grads(model: Model, tape: LayerTape, dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Summed (over the batch) gradients (dW, db) for every Linear layer."""
    out: list = [None] * len(model.linear_positions)

    def visit(i, a, e):
        a2 = a.reshape(-1, a.shape[-1])
        e2 = e.reshape(-1, e.shape[-1])
        out[i] = (e2.T @ a2, e2.sum(axis=0))

    backward_per_layer(model, tape, dlogits, visit)
    return out


def flatten_grads(model: Model, grads: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    return [np.concatenate([np.concatenate([grads[i][0].ravel(), grads[i][1]]) for i in g]) for g in model.groups]
