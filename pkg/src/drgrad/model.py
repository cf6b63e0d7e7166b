"""MMoE, Split-MMoE and DRGrad model graphs.

All modes share one expert bank over ``[dense | sparse embeddings]``.  MMoE
mixes it through one softmax gate per task.  The split modes use a dedicated
gate ``G1`` producing v1 for tower ``T1p`` and a shared gate ``Gs`` producing
v_s for towers ``T1pp`` and ``T2``; task 1 is the mu-weighted blend of the two
task-1 logits.  With PPNet on, v_s is rescaled elementwise by
``2 * sigmoid(ppnet(v_ppnet))`` where v_ppnet holds personal-id embeddings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .nn import Mlp, MlpCache, backward, forward, seeded_rng, sigmoid

MODES = ("mmoe", "split_mmoe", "split_mmoe_router", "drgrad_no_ppnet", "drgrad", "pcgrad_mmoe")

# mode -> (split towers, router, updater, ppnet, pcgrad)
MODE_FLAGS = {
    "mmoe": (False, False, False, False, False),
    "split_mmoe": (True, False, False, False, False),
    "split_mmoe_router": (True, True, False, False, False),
    "drgrad_no_ppnet": (True, True, True, False, False),
    "drgrad": (True, True, True, True, False),
    "pcgrad_mmoe": (False, False, False, False, True),
}

TOWER_INITS = ("independent", "tied")


@dataclass
class ModelConfig:
    mode: str = "drgrad_no_ppnet"
    num_experts: int = 4
    expert_dims: tuple[int, ...] = (64, 32)
    tower_dims: tuple[int, ...] = (32, 16, 1)
    embedding_dim: int = 8
    gamma: float = 1.0
    rho: float = 0.99
    alpha: tuple[float, ...] = (1.0, 1.0)
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    freeze_updater: bool = False
    tower_init: str = "independent"

    def __post_init__(self):
        self.expert_dims = tuple(int(d) for d in self.expert_dims)
        self.tower_dims = tuple(int(d) for d in self.tower_dims)
        self.alpha = tuple(float(a) for a in self.alpha)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.num_experts < 1 or not self.expert_dims or min(self.expert_dims) < 1:
            raise ConfigError("need at least one expert with positive layer sizes")
        if len(self.tower_dims) < 2 or min(self.tower_dims) < 1:
            raise ConfigError("tower_dims must list at least an input and an output size")
        if self.tower_dims[0] != self.expert_dims[-1]:
            raise ConfigError(
                f"tower input {self.tower_dims[0]} must equal expert output {self.expert_dims[-1]}"
            )
        if self.tower_dims[-1] != 1:
            raise ConfigError("towers must end in a single logit")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]")
        if len(self.alpha) != 2 or min(self.alpha) < 0:
            raise ConfigError("alpha needs two non-negative task weights")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if self.tower_init not in TOWER_INITS:
            raise ConfigError(f"tower_init must be one of {TOWER_INITS}")

    @property
    def split(self) -> bool:
        return MODE_FLAGS[self.mode][0]

    @property
    def use_router(self) -> bool:
        return MODE_FLAGS[self.mode][1]

    @property
    def use_updater(self) -> bool:
        return MODE_FLAGS[self.mode][2] and not self.freeze_updater

    @property
    def use_ppnet(self) -> bool:
        return MODE_FLAGS[self.mode][3]

    @property
    def use_pcgrad(self) -> bool:
        return MODE_FLAGS[self.mode][4]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("expert_dims", "tower_dims", "alpha"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class FeatureSchema:
    """Model-facing description of a dataset's inputs."""

    dense_dim: int
    sparse_buckets: list[int] = field(default_factory=list)
    personal_buckets: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    dense: np.ndarray
    sparse: np.ndarray
    labels: np.ndarray | None = None
    personal: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.dense.shape[0]


class EmbeddingTable:
    def __init__(self, name: str, vocab: int, dim: int, rng: np.random.Generator):
        if vocab < 1 or dim < 1:
            raise ConfigError("embedding vocab and dim must be positive")
        self.name = name
        self.vocab = vocab
        self.dim = dim
        limit = np.sqrt(6.0 / (vocab + dim))
        self.rows = rng.uniform(-limit, limit, size=(vocab, dim))

    def bucket(self, ids) -> np.ndarray:
        return np.mod(np.asarray(ids, dtype=np.int64), self.vocab)

    def lookup(self, ids) -> np.ndarray:
        return self.rows[self.bucket(ids)]

    def grad(self, ids, out_grad: np.ndarray) -> np.ndarray:
        g = np.zeros_like(self.rows)
        np.add.at(g, self.bucket(ids), out_grad)
        return g


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mixture(gate_logits, expert_outputs) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted sum of expert outputs.

    ``gate_logits`` is ``(n, E)``, ``expert_outputs`` ``(E, n, D)`` (or a list
    of E ``(n, D)`` arrays).  Returns ``(mixed, weights)``.
    """
    z = np.atleast_2d(np.asarray(gate_logits, dtype=np.float64))
    ex = np.asarray(expert_outputs, dtype=np.float64)
    if ex.ndim == 2:
        ex = ex[:, None, :]
    if ex.shape[0] != z.shape[1]:
        raise ShapeError(f"{z.shape[1]} gate logits for {ex.shape[0]} experts")
    w = softmax(z)
    return np.einsum("ne,end->nd", w, ex), w


def mixture_backward(weights: np.ndarray, expert_outputs: np.ndarray, d_mixed: np.ndarray):
    """Returns (d_gate_logits, d_expert_outputs)."""
    d_ex = weights.T[:, :, None] * d_mixed[None, :, :]
    dw = np.einsum("end,nd->ne", expert_outputs, d_mixed)
    dz = weights * (dw - np.sum(weights * dw, axis=1, keepdims=True))
    return dz, d_ex


def ppnet_gate(v_s, v_ppnet, gate_net: Mlp) -> tuple[np.ndarray, np.ndarray, MlpCache]:
    """Rescale ``v_s`` by ``2 * sigmoid(gate_net(v_ppnet))``; factors lie in (0, 2)."""
    v_s = np.atleast_2d(np.asarray(v_s, dtype=np.float64))
    cache = forward(gate_net, v_ppnet)
    if cache.output.shape != v_s.shape:
        raise ShapeError(f"gate output {cache.output.shape} does not match v_s {v_s.shape}")
    factor = 2.0 * sigmoid(cache.output)
    return v_s * factor, factor, cache


def aggregate_task1(t1p, t1pp, mu_p: float, mu_pp: float) -> np.ndarray:
    """Blend the dedicated and shared task-1 logits."""
    return mu_p * np.asarray(t1p, dtype=np.float64) + mu_pp * np.asarray(t1pp, dtype=np.float64)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample binary cross-entropy on sigmoid(logits)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z


def compute_loss(logits, labels, alpha: Sequence[float]) -> tuple[float, np.ndarray]:
    """Mean BCE per task and the alpha-weighted total.

    ``logits`` and ``labels`` are ``(n, T)``.  Returns ``(total, per_task)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim == 1:
        z, y = z[:, None], y.reshape(-1, 1)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    per_task = bce_with_logits(z, y).mean(axis=0)
    return float(np.dot(np.asarray(alpha, dtype=np.float64), per_task)), per_task


def loss_grad(logits: np.ndarray, labels: np.ndarray, alpha: Sequence[float]) -> np.ndarray:
    """d(total loss)/d(logits), shape ``(n, T)``."""
    n = logits.shape[0]
    return (sigmoid(logits) - labels) * (np.asarray(alpha, dtype=np.float64) / n)


@dataclass
class ForwardCache:
    h0: np.ndarray
    sparse: np.ndarray
    personal: np.ndarray | None
    expert_caches: list[MlpCache]
    experts: np.ndarray  # (E, n, D)
    gate_caches: dict[str, MlpCache]
    gate_weights: dict[str, np.ndarray]
    mixes: dict[str, np.ndarray]
    tower_caches: dict[str, MlpCache]
    tower_logits: dict[str, np.ndarray]  # name -> (n,)
    logits: np.ndarray  # (n, 2) task logits
    mu: tuple[float, float]
    ppnet_cache: MlpCache | None = None
    ppnet_in: np.ndarray | None = None
    ppnet_factor: np.ndarray | None = None
    vs_raw: np.ndarray | None = None


class Model:
    """Parameter container plus forward/backward for one model graph."""

    def __init__(self, config: ModelConfig, schema: FeatureSchema):
        self.config = config
        self.schema = schema
        rng = seeded_rng(config.seed, "init")
        dim = config.embedding_dim
        self.embeddings = [EmbeddingTable(f"emb.s{i}", b, dim, rng) for i, b in enumerate(schema.sparse_buckets)]
        self.input_dim = schema.dense_dim + dim * len(self.embeddings)
        if self.input_dim < 1:
            raise ConfigError("model has no inputs")
        self.experts = [
            Mlp(f"expert{i}", [self.input_dim, *config.expert_dims], "relu", "relu", rng)
            for i in range(config.num_experts)
        ]
        gate_names = ("G1", "Gs") if config.split else ("G1", "G2")
        self.gates = {g: Mlp(g, [self.input_dim, config.num_experts], "identity", "identity", rng) for g in gate_names}
        tower_names = ("T1p", "T1pp", "T2") if config.split else ("T1", "T2")
        if config.tower_init == "tied":
            # every tower starts from the same draw so coordinate j means the same unit in each
            self.towers = {
                t: Mlp(t, list(config.tower_dims), "relu", "identity", seeded_rng(config.seed, "init/towers"))
                for t in tower_names
            }
        else:
            self.towers = {t: Mlp(t, list(config.tower_dims), "relu", "identity", rng) for t in tower_names}
        self.personal_embeddings: list[EmbeddingTable] = []
        self.ppnet: Mlp | None = None
        if config.use_ppnet:
            if not schema.personal_buckets:
                raise ConfigError(
                    f"mode {config.mode!r} needs a personalized id column (e.g. a user id); the dataset has none"
                )
            self.personal_embeddings = [
                EmbeddingTable(f"emb.u{i}", b, dim, rng) for i, b in enumerate(schema.personal_buckets)
            ]
            self.ppnet = Mlp(
                "ppnet", [dim * len(self.personal_embeddings), config.expert_dims[-1]], "identity", "identity", rng
            )
        self.mu = (0.5, 0.5)

    # -- parameters -------------------------------------------------------
    def nets(self) -> list[Mlp]:
        nets = [*self.experts, *self.gates.values(), *self.towers.values()]
        if self.ppnet is not None:
            nets.append(self.ppnet)
        return nets

    def tables(self) -> list[EmbeddingTable]:
        return [*self.embeddings, *self.personal_embeddings]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {t.name: t.rows for t in self.tables()}
        for net in self.nets():
            out.update(net.named_parameters())
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def shared_param_names(self) -> list[str]:
        """Parameters every task depends on (embeddings and experts)."""
        names = [t.name for t in self.embeddings]
        for e in self.experts:
            names += list(e.named_parameters())
        return names

    def tower_param_names(self) -> list[str]:
        return [n for t in self.towers.values() for n in t.named_parameters()]

    def touch(self) -> None:
        for net in self.nets():
            net.bump()

    # -- forward / backward ----------------------------------------------
    def forward(self, batch: Batch) -> ForwardCache:
        dense = np.asarray(batch.dense, dtype=np.float64)
        sparse = np.asarray(batch.sparse, dtype=np.int64).reshape(dense.shape[0], -1)
        if dense.shape[1] != self.schema.dense_dim or sparse.shape[1] != len(self.embeddings):
            raise ShapeError(
                f"batch has {dense.shape[1]} dense / {sparse.shape[1]} sparse columns, "
                f"model expects {self.schema.dense_dim} / {len(self.embeddings)}"
            )
        parts = [dense] + [t.lookup(sparse[:, i]) for i, t in enumerate(self.embeddings)]
        h0 = np.concatenate(parts, axis=1)

        expert_caches = [forward(e, h0) for e in self.experts]
        experts = np.stack([c.output for c in expert_caches])
        gate_caches, gate_weights, mixes = {}, {}, {}
        for name, g in self.gates.items():
            gc = forward(g, h0)
            mixes[name], gate_weights[name] = mixture(gc.output, experts)
            gate_caches[name] = gc

        cache_kw: dict = {}
        if self.config.split:
            v1, vs = mixes["G1"], mixes["Gs"]
            if self.ppnet is not None:
                if batch.personal is None:
                    raise ConfigError("PPNet mode requires personalized ids in every batch")
                personal = np.asarray(batch.personal, dtype=np.int64).reshape(dense.shape[0], -1)
                p_in = np.concatenate(
                    [t.lookup(personal[:, i]) for i, t in enumerate(self.personal_embeddings)], axis=1
                )
                vs_raw = vs
                vs, factor, pc = ppnet_gate(vs_raw, p_in, self.ppnet)
                cache_kw = dict(ppnet_cache=pc, ppnet_in=p_in, ppnet_factor=factor, vs_raw=vs_raw)
                cache_kw["personal"] = personal
            inputs = {"T1p": v1, "T1pp": vs, "T2": vs}
        else:
            inputs = {"T1": mixes["G1"], "T2": mixes["G2"]}

        tower_caches = {t: forward(self.towers[t], x) for t, x in inputs.items()}
        tower_logits = {t: c.output[:, 0] for t, c in tower_caches.items()}
        mu = self.mu
        if self.config.split:
            task1 = aggregate_task1(tower_logits["T1p"], tower_logits["T1pp"], *mu)
        else:
            task1 = tower_logits["T1"]
        logits = np.stack([task1, tower_logits["T2"]], axis=1)
        cache_kw.setdefault("personal", None)
        return ForwardCache(
            h0=h0,
            sparse=sparse,
            expert_caches=expert_caches,
            experts=experts,
            gate_caches=gate_caches,
            gate_weights=gate_weights,
            mixes=mixes,
            tower_caches=tower_caches,
            tower_logits=tower_logits,
            logits=logits,
            mu=mu,
            **cache_kw,
        )

    def backward(self, cache: ForwardCache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every parameter, given d loss / d task logits."""
        d_logits = np.asarray(d_logits, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        if self.config.split:
            mu_p, mu_pp = cache.mu
            d_tower = {"T1p": mu_p * d_logits[:, 0], "T1pp": mu_pp * d_logits[:, 0], "T2": d_logits[:, 1]}
        else:
            d_tower = {"T1": d_logits[:, 0], "T2": d_logits[:, 1]}

        d_in = {}
        for name, dt in d_tower.items():
            pg, dx = backward(self.towers[name], cache.tower_caches[name], dt[:, None])
            grads.update(pg.named())
            d_in[name] = dx

        if self.config.split:
            d_mix = {"G1": d_in["T1p"], "Gs": d_in["T1pp"] + d_in["T2"]}
            if self.ppnet is not None:
                dvs = d_mix["Gs"]
                f = cache.ppnet_factor
                d_mix["Gs"] = dvs * f
                s = 0.5 * f  # sigmoid of the gate pre-activation
                d_pre = dvs * cache.vs_raw * 2.0 * s * (1.0 - s)
                pg, dp = backward(self.ppnet, cache.ppnet_cache, d_pre)
                grads.update(pg.named())
                dim = self.config.embedding_dim
                for i, t in enumerate(self.personal_embeddings):
                    grads[t.name] = t.grad(cache.personal[:, i], dp[:, i * dim : (i + 1) * dim])
        else:
            d_mix = {"G1": d_in["T1"], "G2": d_in["T2"]}

        d_h0 = np.zeros_like(cache.h0)
        d_experts = np.zeros_like(cache.experts)
        for name, g in self.gates.items():
            dz, dex = mixture_backward(cache.gate_weights[name], cache.experts, d_mix[name])
            d_experts += dex
            pg, dx = backward(g, cache.gate_caches[name], dz)
            grads.update(pg.named())
            d_h0 += dx
        for e, ec, de in zip(self.experts, cache.expert_caches, d_experts):
            pg, dx = backward(e, ec, de)
            grads.update(pg.named())
            d_h0 += dx

        off = self.schema.dense_dim
        dim = self.config.embedding_dim
        for i, t in enumerate(self.embeddings):
            grads[t.name] = t.grad(cache.sparse[:, i], d_h0[:, off + i * dim : off + (i + 1) * dim])
        return grads

    def predict_logits(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).logits


def build_model(config: ModelConfig, schema: FeatureSchema) -> Model:
    config.validate()
    return Model(config, schema)


def expected_param_count(config: ModelConfig, schema: FeatureSchema) -> int:
    """Closed-form parameter count; used as a cross-check of :func:`build_model`."""

    def mlp(dims):
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    d = config.embedding_dim
    n_in = schema.dense_dim + d * len(schema.sparse_buckets)
    total = d * sum(schema.sparse_buckets)
    total += config.num_experts * mlp([n_in, *config.expert_dims])
    total += 2 * mlp([n_in, config.num_experts])
    total += (3 if config.split else 2) * mlp(config.tower_dims)
    if config.use_ppnet:
        total += d * sum(schema.personal_buckets)
        total += mlp([d * len(schema.personal_buckets), config.expert_dims[-1]])
    return total
