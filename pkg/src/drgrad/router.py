"""Gradient routing between the split task-1 heads and the auxiliary head.

Three towers of identical shape produce flattened parameter gradients
``g1p`` (dedicated head on v1), ``g1pp`` (shared head on v_s) and ``g2``
(auxiliary head on v_s).  :func:`route` turns them into additive gradients for
the two task-1 heads; :func:`updater_step` turns gradient magnitudes into the
softmax weights that blend the two task-1 logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError
from .nn import Mlp, OptimizerState, ParamGrads, optimizer_step

TOWER_NAMES = ("T1p", "T1pp", "T2")


@dataclass(frozen=True)
class Layout:
    owner: str
    shapes: tuple[tuple[int, ...], ...]  # W0, b0, W1, b1, ...

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    @classmethod
    def of(cls, obj: Mlp | ParamGrads) -> "Layout":
        shapes = []
        for w, b in zip(obj.weights, obj.biases):
            shapes += [tuple(w.shape), tuple(b.shape)]
        owner = obj.name if isinstance(obj, Mlp) else obj.owner
        return cls(owner, tuple(shapes))


def flatten(grads: ParamGrads) -> np.ndarray:
    """Concatenate per layer, weights (row-major) before biases."""
    parts = []
    for w, b in zip(grads.weights, grads.biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(flat, layout: Layout) -> ParamGrads:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size != layout.size:
        raise ShapeError(f"flat vector of size {flat.size} does not match layout of size {layout.size}")
    arrays, pos = [], 0
    for shape in layout.shapes:
        n = int(np.prod(shape))
        arrays.append(flat[pos : pos + n].reshape(shape).copy())
        pos += n
    return ParamGrads(layout.owner, arrays[0::2], arrays[1::2])


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def scale_ratio(u, v, gamma: float = 1.0) -> float:
    """``clip(|u| / |v|, 0, 1) ** gamma``; 0 when ``v`` is zero."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    return float(min(np.linalg.norm(u) / nv, 1.0) ** gamma)


@dataclass
class GradientTriple:
    g1p: np.ndarray
    g1pp: np.ndarray
    g2: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.g1p = np.asarray(self.g1p, dtype=np.float64).ravel()
        self.g1pp = np.asarray(self.g1pp, dtype=np.float64).ravel()
        self.g2 = np.asarray(self.g2, dtype=np.float64).ravel()
        if not (self.g1p.size == self.g1pp.size == self.g2.size):
            raise ShapeError(
                f"tower gradients differ in length: {self.g1p.size}, {self.g1pp.size}, {self.g2.size}"
            )
        for g in (self.g1p, self.g1pp, self.g2):
            if not np.all(np.isfinite(g)):
                raise NumericError("gradient triple contains non-finite entries")


@dataclass
class RouterOutput:
    gR1p: np.ndarray
    gR1pp: np.ndarray
    xi_a: float  # cos(g1p, g1pp)
    xi_b: float  # cos(g1p, g2)
    lambda_a: float
    lambda_b: float


def route(triple: GradientTriple, gamma: float = 1.0) -> RouterOutput:
    """Routed additions for the dedicated and shared task-1 heads.

    ``xi_a``/``lambda_a`` pair g1p with g1pp and scale the g1pp contribution;
    ``xi_b``/``lambda_b`` pair g1p with g2 and gate the g2 contribution.
    """
    g1p, g1pp, g2 = triple.g1p, triple.g1pp, triple.g2
    xi_a, xi_b = cosine(g1p, g1pp), cosine(g1p, g2)
    lam_a, lam_b = scale_ratio(g1p, g1pp, gamma), scale_ratio(g1p, g2, gamma)

    coef_pp = (1.0 - xi_a if xi_a < 0 else 1.0) * lam_a
    coef_2 = lam_b if xi_b >= 0 else 0.0
    gR1p = coef_pp * g1pp + coef_2 * g2

    mixed = xi_a * xi_b
    gR1pp = -mixed * g1pp if mixed < 0 else np.zeros_like(g1pp)
    return RouterOutput(gR1p, gR1pp, xi_a, xi_b, lam_a, lam_b)


def apply_routed_update(
    towers: Mapping[str, Mlp],
    triple: GradientTriple,
    router_out: RouterOutput | None,
    opt_state: OptimizerState,
) -> None:
    """Descend each tower on its own gradient plus its routed addition.

    T1p uses ``g1p + gR1p``, T1pp uses ``g1pp + gR1pp``, T2 uses ``g2`` alone.
    ``router_out=None`` reduces to independent per-tower descent.
    """
    flats = {"T1p": triple.g1p, "T1pp": triple.g1pp, "T2": triple.g2}
    if router_out is not None:
        flats["T1p"] = triple.g1p + router_out.gR1p
        flats["T1pp"] = triple.g1pp + router_out.gR1pp
    for name in TOWER_NAMES:
        net = towers[name]
        optimizer_step(net, unflatten(flats[name], Layout.of(net)), opt_state)


@dataclass
class UpdaterState:
    sigma_p: float = 0.0
    sigma_pp: float = 0.0
    mu_p: float = 0.5
    mu_pp: float = 0.5
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("updater decay must lie in (0, 1]")


def updater_step(state: UpdaterState, triple: GradientTriple, router_out: RouterOutput) -> tuple[float, float]:
    """Accumulate routed gradient norms and refresh the task-1 blend weights."""
    state.sigma_p = state.decay * state.sigma_p + float(np.linalg.norm(triple.g1p + router_out.gR1p))
    state.sigma_pp = state.decay * state.sigma_pp + float(np.linalg.norm(triple.g1pp + router_out.gR1pp))
    top = max(state.sigma_p, state.sigma_pp)
    ep, epp = np.exp(state.sigma_p - top), np.exp(state.sigma_pp - top)
    state.mu_p = float(ep / (ep + epp))
    state.mu_pp = 1.0 - state.mu_p
    return state.mu_p, state.mu_pp


def pcgrad_project(grads: Sequence[np.ndarray], rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Project each task gradient off the normal plane of every conflicting one.

    Projections use the original (unprojected) gradients of the other tasks;
    ``rng`` shuffles the order in which the others are visited.
    """
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in grads]
    if len(gs) < 2:
        raise ShapeError("pcgrad needs at least two gradients")
    if len({g.size for g in gs}) != 1:
        raise ShapeError("pcgrad gradients must have equal length")
    out = []
    for i, gi in enumerate(gs):
        proj = gi.copy()
        others = [j for j in range(len(gs)) if j != i]
        if rng is not None:
            others = [others[k] for k in rng.permutation(len(others))]
        for j in others:
            gj = gs[j]
            dot = float(np.dot(proj, gj))
            if dot < 0:
                proj -= dot / float(np.dot(gj, gj)) * gj
        out.append(proj)
    return out


@dataclass
class BoundReport:
    norm_gR1p: float
    norm_gR1pp: float
    bound_gR1p: float
    bound_gR1pp: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def slack_gR1p(self) -> float:
        return self.bound_gR1p - self.norm_gR1p

    @property
    def slack_gR1pp(self) -> float:
        return self.bound_gR1pp - self.norm_gR1pp

    def check(self) -> None:
        if self.violations:
            raise AssertionError("; ".join(self.violations))


def norm_bound_check(triple: GradientTriple, out: RouterOutput, rtol: float = 1e-12) -> BoundReport:
    """Check the routed gradients against their triangle-inequality bounds.

    ``|gR1p| <= (1 - min(xi_a, 0)) * lambda_a * |g1pp| + lambda_b * |g2|`` and
    ``|gR1pp| <= |g1pp|``.  ``rtol`` absorbs floating-point rounding.
    """
    n1pp, n2 = float(np.linalg.norm(triple.g1pp)), float(np.linalg.norm(triple.g2))
    rep = BoundReport(
        norm_gR1p=float(np.linalg.norm(out.gR1p)),
        norm_gR1pp=float(np.linalg.norm(out.gR1pp)),
        bound_gR1p=(1.0 - min(out.xi_a, 0.0)) * out.lambda_a * n1pp + out.lambda_b * n2,
        bound_gR1pp=n1pp,
    )
    if rep.norm_gR1p > rep.bound_gR1p * (1 + rtol) + 1e-300:
        rep.violations.append(f"|gR1p|={rep.norm_gR1p!r} exceeds bound {rep.bound_gR1p!r}")
    if rep.norm_gR1pp > rep.bound_gR1pp * (1 + rtol) + 1e-300:
        rep.violations.append(f"|gR1pp|={rep.norm_gR1pp!r} exceeds bound {rep.bound_gR1pp!r}")
    return rep


# Upstream-gradient case table for the router.  Keyed by
# (xi_a >= 0, xi_b >= 0); values say whether the g1pp term on v1 carries the
# (1 - xi_a) amplification, whether g2 reaches v1, and whether the g1pp term
# on v_s carries the (1 - xi_a * xi_b) factor.
_TABLE1 = {
    (True, True): dict(row=1, amplify=False, with_g2=True, vs_factor=False),
    (True, False): dict(row=2, amplify=False, with_g2=False, vs_factor=True),
    (False, True): dict(row=3, amplify=True, with_g2=True, vs_factor=True),
    (False, False): dict(row=4, amplify=True, with_g2=False, vs_factor=False),
}


@dataclass
class Table1Report:
    row: int
    v1_table: np.ndarray
    vs_table: np.ndarray
    v1_routed: np.ndarray
    vs_routed: np.ndarray
    coef_table: tuple[float, float, float]
    coef_routed: tuple[float, float, float] | None
    tol: float

    @property
    def v1_diff(self) -> float:
        return float(np.max(np.abs(self.v1_table - self.v1_routed), initial=0.0))

    @property
    def vs_diff(self) -> float:
        return float(np.max(np.abs(self.vs_table - self.vs_routed), initial=0.0))

    @property
    def structure_ok(self) -> bool:
        if self.coef_routed is None:
            return True
        return all(abs(a - b) <= self.tol * max(1.0, abs(a)) for a, b in zip(self.coef_table, self.coef_routed))

    @property
    def agrees(self) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.v1_table), initial=0.0)), float(np.max(np.abs(self.vs_table), initial=0.0)))
        return self.structure_ok and self.v1_diff <= self.tol * scale and self.vs_diff <= self.tol * scale


def table1_oracle(
    triple: GradientTriple,
    gamma: float = 1.0,
    beta1: float | None = None,
    beta2: float | None = None,
    tol: float = 1e-9,
) -> Table1Report:
    """Evaluate the four-case upstream table and compare it with :func:`route`.

    The table gives the effective gradient reaching v1 (``g1p + gR1p``) and
    v_s (``g2 + g1pp + gR1pp``).  ``beta1``/``beta2`` default to the scale
    ratios, which is what makes the table coincide with the routed form.
    Routed coefficients are recovered by least squares on the output vectors,
    so the structural check does not reuse the router's own branch logic.
    """
    g1p, g1pp, g2 = triple.g1p, triple.g1pp, triple.g2
    xi1, xi2 = cosine(g1p, g1pp), cosine(g1p, g2)
    b1 = scale_ratio(g1p, g1pp, gamma) if beta1 is None else beta1
    b2 = scale_ratio(g1p, g2, gamma) if beta2 is None else beta2
    case = _TABLE1[(xi1 >= 0, xi2 >= 0)]

    c_pp = b1 * (1.0 - xi1) if case["amplify"] else b1
    c_2 = b2 if case["with_g2"] else 0.0
    c_vs = (1.0 - xi1 * xi2) if case["vs_factor"] else 1.0
    v1_table = g1p + c_pp * g1pp + c_2 * g2
    vs_table = g2 + c_vs * g1pp

    out = route(triple, gamma)
    v1_routed = g1p + out.gR1p
    vs_routed = g2 + g1pp + out.gR1pp

    coef_routed = None
    basis = np.stack([g1pp, g2], axis=1)
    if g1pp.size >= 2 and np.linalg.matrix_rank(basis) == 2:
        (a, b), *_ = np.linalg.lstsq(basis, out.gR1p, rcond=None)
        c = 1.0 + float(np.dot(out.gR1pp, g1pp) / np.dot(g1pp, g1pp))
        coef_routed = (float(a), float(b), c)
    return Table1Report(case["row"], v1_table, vs_table, v1_routed, vs_routed, (c_pp, c_2, c_vs), coef_routed, tol)
