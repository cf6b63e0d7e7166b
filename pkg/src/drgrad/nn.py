"""Dense feed-forward networks with hand-written forward/backward passes.

Everything is float64 numpy.  Networks keep their parameters as plain arrays
(weights shaped ``(fan_in, fan_out)``, biases shaped ``(fan_out,)``) so that
optimizers, flatteners and checkpoints can address them by name.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CacheError, NumericError, ShapeError

ACTIVATIONS = ("relu", "identity", "sigmoid")


def seeded_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator keyed on ``(seed, stream)``.

    The stream name is hashed with CRC32 so independent consumers (weight init,
    shuffling, data generation) draw from non-overlapping sequences while
    staying reproducible across platforms.
    """
    key = zlib.crc32(stream.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key])
    return np.random.Generator(np.random.PCG64(ss))


def as_matrix(x, cols: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if cols is None or arr.size == cols else arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains non-finite entries")
    return arr


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (z > 0.0)
    if kind == "sigmoid":
        return g * a * (1.0 - a)
    return g


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Stack of affine layers.

    ``activation`` applies after every hidden layer, ``out_activation`` after
    the last one.  Towers use identity outputs (logits), experts use relu.
    """

    def __init__(
        self,
        name: str,
        layer_dims: Sequence[int],
        activation: str = "relu",
        out_activation: str = "identity",
        rng: np.random.Generator | None = None,
    ):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ShapeError(f"layer_dims must hold at least two positive sizes, got {dims}")
        for kind in (activation, out_activation):
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")
        self.name = name
        self.layer_dims = dims
        self.activation = activation
        self.out_activation = out_activation
        self.version = 0
        rng = rng if rng is not None else seeded_rng(0, name)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def layer_activation(self, i: int) -> str:
        return self.out_activation if i == self.num_layers - 1 else self.activation

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Parameters in canonical order: per layer, weights then bias."""
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.W{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out

    def bump(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def __repr__(self) -> str:
        return f"Mlp({self.name!r}, {self.layer_dims}, {self.activation}/{self.out_activation})"


@dataclass
class MlpCache:
    net_id: int
    version: int
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class ParamGrads:
    """Gradients laid out exactly like the owning network's parameters."""

    owner: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def named(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.owner}.W{i}"] = w
            out[f"{self.owner}.b{i}"] = b
        return out

    @classmethod
    def zeros_like(cls, net: Mlp) -> "ParamGrads":
        return cls(net.name, [np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    @classmethod
    def from_named(cls, net: Mlp, named: Mapping[str, np.ndarray]) -> "ParamGrads":
        n = net.num_layers
        return cls(
            net.name,
            [np.asarray(named[f"{net.name}.W{i}"]) for i in range(n)],
            [np.asarray(named[f"{net.name}.b{i}"]) for i in range(n)],
        )


def forward(net: Mlp, x) -> MlpCache:
    """Run ``net`` on a batch, keeping every intermediate activation."""
    a = as_matrix(x, cols=net.layer_dims[0])
    inputs, pre, post = [], [], []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w + b
        a = _act(net.layer_activation(i), z)
        pre.append(z)
        post.append(a)
    return MlpCache(id(net), net.version, inputs, pre, post)


def backward(net: Mlp, cache: MlpCache, output_grad) -> tuple[ParamGrads, np.ndarray]:
    """Gradients w.r.t. every parameter and w.r.t. the network input."""
    if cache.net_id != id(net):
        raise CacheError(f"cache was produced by a different network than {net.name!r}")
    if cache.version != net.version:
        raise CacheError(f"cache for {net.name!r} is stale (parameters changed since forward)")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.output.shape}")
    gw: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    for i in reversed(range(net.num_layers)):
        g = _act_grad(net.layer_activation(i), cache.pre[i], cache.post[i], g)
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return ParamGrads(net.name, gw, gb), g


def numeric_gradient(
    params: Mapping[str, np.ndarray], loss: Callable[[], float], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored; ``loss`` must read them live.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = float(loss())
    if not np.isfinite(base):
        raise NumericError("loss is not finite")
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(loss())
            flat[j] = orig - h
            down = float(loss())
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss is not finite near {name}[{j}]")
            gflat[j] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def finite_diff_grad(net: Mlp, x, loss_fn: Callable[[np.ndarray], float], h: float = 1e-5) -> ParamGrads:
    """Numerical parameter gradient of ``loss_fn(net(x))``."""
    x = as_matrix(x, cols=net.layer_dims[0])

    def loss() -> float:
        a = x
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            a = _act(net.layer_activation(i), a @ w + b)
        return loss_fn(a)

    return ParamGrads.from_named(net, numeric_gradient(net.named_parameters(), loss, h))


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params, grads, state: OptimizerState) -> None:
    """Update ``params`` in place from ``grads``.

    ``params`` is an :class:`Mlp` or a name -> array mapping; ``grads`` a
    :class:`ParamGrads` or a mapping with the same names.  Adam moments and
    step counts are tracked per parameter name.
    """
    net = params if isinstance(params, Mlp) else None
    named_p = params.named_parameters() if net is not None else params
    named_g = grads.named() if isinstance(grads, ParamGrads) else grads
    for name, g in named_g.items():
        if name not in named_p:
            raise ShapeError(f"no parameter named {name!r}")
        p = named_p[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if state.kind == "sgd":
            p -= state.learning_rate * g
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        t = state.steps[name] = state.steps[name] + 1
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.learning_rate / (1.0 - state.beta1**t)
        denom = np.sqrt(v / (1.0 - state.beta2**t)) + state.eps
        p -= step * m / denom
    if net is not None:
        net.bump()


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)`` over matching names.

    ``floor`` keeps near-zero entries from turning round-off into huge ratios.
    """
    worst = 0.0
    for name, x in a.items():
        x, y = np.asarray(x, dtype=np.float64), np.asarray(b[name], dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"{name}: shapes {x.shape} and {y.shape} differ")
        if x.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
