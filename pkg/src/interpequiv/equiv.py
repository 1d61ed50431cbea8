"""Interpretive equivalence and compression over finite implementation sets.

Distances between implementations go through a distillation map: the
solutions of a few shared variables, optionally projected, compared in
dataset-RMS norm. All set quantities (Hausdorff distance, diameter) are
exact over the finite sets given.

The ``check_thm*`` functions take a bundle of measured terms and report
whether the corresponding inequality holds, with its slack.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .causal import CausalModel, Task, solve_batch
from .errors import (
    AssumptionViolated,
    DomainError,
    EmptySet,
    InsufficientSamples,
    MissingTerm,
    ShapeMismatch,
    UnknownVariable,
    ValidationError,
)
from .implgen import ImplementationSet
from .reprsim import RepresentationMatrix, fit_constrained

DEFAULT_OMEGA_CAP = 1e-3
DEFAULT_LIP_SAFETY = 2.0


# ------------------------------------------------------------ distillation

@dataclass(frozen=True)
class DistillationMap:
    variable_ids: tuple[str, ...]
    projection: np.ndarray | None = None

    def __init__(self, variable_ids: Sequence[str] | str, projection: Any = None):
        ids = (variable_ids,) if isinstance(variable_ids, str) else tuple(variable_ids)
        if not ids:
            raise ValidationError("a distillation map needs at least one variable")
        object.__setattr__(self, "variable_ids", ids)
        proj = None if projection is None else np.atleast_2d(np.asarray(projection, dtype=np.float64))
        object.__setattr__(self, "projection", proj)

    def apply(self, model: CausalModel, task: Task) -> np.ndarray:
        """Projected concatenated solutions, one row per task input."""
        missing = [v for v in self.variable_ids if v not in model.by_id]
        if missing:
            raise UnknownVariable(f"variables {missing} not in model")
        values = solve_batch(model, task.input_array())
        stacked = np.concatenate([values[v].reshape(len(task.inputs), -1) for v in self.variable_ids], axis=1)
        if self.projection is None:
            return stacked
        if self.projection.shape[1] != stacked.shape[1]:
            raise ShapeMismatch(f"projection expects width {self.projection.shape[1]}, got {stacked.shape[1]}")
        return stacked @ self.projection.T

    def to_json(self) -> dict:
        return {
            "variable_ids": list(self.variable_ids),
            "projection": None if self.projection is None else self.projection.tolist(),
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "DistillationMap":
        return cls(doc["variable_ids"], doc.get("projection"))


def default_distillation() -> DistillationMap:
    return DistillationMap(("out",))


def rms_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Dataset-RMS of row differences, summed with ``math.fsum``."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"distilled shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b).ravel()
    rows = max(a.shape[0], 1)
    return math.sqrt(math.fsum(diff * diff) / rows)


def impl_distance(f1: CausalModel, f2: CausalModel, phi: DistillationMap, task: Task) -> float:
    return rms_distance(phi.apply(f1, task), phi.apply(f2, task))


def _members(group: ImplementationSet | Sequence[CausalModel]) -> list[CausalModel]:
    if isinstance(group, ImplementationSet):
        return [group.base, *group.variants]
    return list(group)


def distilled(group: ImplementationSet | Sequence[CausalModel], phi: DistillationMap, task: Task) -> list[np.ndarray]:
    members = _members(group)
    if not members:
        raise EmptySet("implementation set is empty")
    return [phi.apply(m, task) for m in members]


def distance_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Pairwise ``rms_distance``; when ``b`` is omitted the result is symmetric by copy."""
    if b is None:
        out = np.zeros((len(a), len(a)))
        for i in range(len(a)):
            for j in range(i + 1, len(a)):
                out[i, j] = out[j, i] = rms_distance(a[i], a[j])
        return out
    return np.array([[rms_distance(x, y) for y in b] for x in a]).reshape(len(a), len(b))


# ----------------------------------------------------------- set metrics

def hausdorff_from_matrix(cross: np.ndarray) -> float:
    cross = np.asarray(cross, dtype=np.float64)
    if cross.size == 0:
        raise EmptySet("Hausdorff distance needs two non-empty sets")
    return float(max(cross.min(axis=1).max(), cross.min(axis=0).max()))


def diameter_from_matrix(within: np.ndarray) -> float:
    within = np.asarray(within, dtype=np.float64)
    if within.size == 0:
        raise EmptySet("diameter of an empty set")
    return float(within.max())


def hausdorff(set_a, set_b, phi: DistillationMap, task: Task) -> float:
    return hausdorff_from_matrix(distance_matrix(distilled(set_a, phi, task), distilled(set_b, phi, task)))


def compression(impl_set, phi: DistillationMap, task: Task) -> float:
    return diameter_from_matrix(distance_matrix(distilled(impl_set, phi, task)))


def empirical_diameter(samples: Sequence[CausalModel], phi: DistillationMap, task: Task) -> float:
    if len(samples) < 2:
        raise InsufficientSamples("empirical diameter needs at least 2 samples")
    return diameter_from_matrix(distance_matrix([phi.apply(m, task) for m in samples]))


# ------------------------------------------------------ sample complexity

def sample_size_bound(covering_number: float, p_min: float, delta: float) -> int:
    """Smallest ``m >= 1`` with ``m >= (ln C - ln delta) / p_min``."""
    if not covering_number >= 1:
        raise DomainError(f"covering number must be >= 1, got {covering_number}")
    if not 0 < p_min <= 1:
        raise DomainError(f"p_min must lie in (0, 1], got {p_min}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    return max(1, math.ceil((math.log(covering_number) - math.log(delta)) / p_min))


@dataclass(frozen=True)
class Covering:
    centers: tuple[int, ...]
    assignment: tuple[int, ...]
    cell_radius: float

    @property
    def size(self) -> int:
        return len(self.centers)

    def p_min(self, weights: np.ndarray | None = None) -> float:
        n = len(self.assignment)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
        mass = np.zeros(self.size)
        np.add.at(mass, np.asarray(self.assignment), w)
        return float(mass.min())


def greedy_covering(within: np.ndarray, epsilon: float) -> Covering:
    """Greedy partition into cells of radius ``epsilon / 4`` around a centre.

    Each cell has diameter at most ``epsilon / 2``. If a sample hits every
    cell, its diameter is within ``epsilon`` of the full set's.
    """
    within = np.asarray(within, dtype=np.float64)
    if within.size == 0:
        raise EmptySet("cannot cover an empty set")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    radius = epsilon / 4.0
    n = within.shape[0]
    assignment = np.full(n, -1)
    centers: list[int] = []
    for i in range(n):
        if assignment[i] >= 0:
            continue
        cell = len(centers)
        centers.append(i)
        assignment[(assignment < 0) & (within[i] <= radius)] = cell
    return Covering(tuple(centers), tuple(int(a) for a in assignment), radius)


def coverage_trial(within: np.ndarray, m: int, epsilon: float, rng: np.random.Generator) -> bool:
    """One draw of ``m`` i.i.d. uniform members: is the diameter gap at most ``epsilon``?"""
    kappa = diameter_from_matrix(within)
    idx = rng.integers(within.shape[0], size=m)
    kappa_hat = float(within[np.ix_(idx, idx)].max())
    return kappa - kappa_hat <= epsilon


# --------------------------------------------------------------- readout

@dataclass(frozen=True)
class ReadoutMap:
    """Affine readout ``Phi ~ W (H - h_mean) + phi_mean`` with ``|W|_op <= 1``."""

    W: np.ndarray
    h_mean: np.ndarray
    phi_mean: np.ndarray
    operator_norm: float
    omega: float

    def __call__(self, H: np.ndarray) -> np.ndarray:
        return (H - self.h_mean) @ self.W.T + self.phi_mean


def fit_readout(R: RepresentationMatrix, phi_values: np.ndarray, cap: float | None = DEFAULT_OMEGA_CAP) -> ReadoutMap:
    """Fit the readout from the last representation block; ``omega`` is the worst row error."""
    H = R.blocks[-1]
    target = np.asarray(phi_values, dtype=np.float64).reshape(H.shape[0], -1)
    h_mean, phi_mean = H.mean(axis=0), target.mean(axis=0)
    fit = fit_constrained(H - h_mean, target - phi_mean)
    readout = ReadoutMap(fit.W, h_mean, phi_mean, fit.operator_norm, 0.0)
    omega = float(np.sqrt(np.sum((readout(H) - target) ** 2, axis=1)).max())
    readout = ReadoutMap(fit.W, h_mean, phi_mean, fit.operator_norm, omega)
    if cap is not None and omega > cap:
        raise AssumptionViolated(f"readout error {omega:.3g} exceeds cap {cap:.3g}")
    return readout


def set_omega(reprs: Sequence[RepresentationMatrix], phis: Sequence[np.ndarray],
              cap: float | None = DEFAULT_OMEGA_CAP) -> float:
    return max(fit_readout(r, p, cap).omega for r, p in zip(reprs, phis, strict=True))


# ---------------------------------------------------------------- bounds

@dataclass(frozen=True)
class BoundReport:
    theorem: str
    lhs: float
    rhs: float
    terms: dict[str, float]
    tolerance: float
    sense: str = "<="
    slack: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        if self.sense not in ("<=", ">="):
            raise ValidationError(f"unknown bound sense {self.sense!r}")
        gap = self.rhs - self.lhs if self.sense == "<=" else self.lhs - self.rhs
        object.__setattr__(self, "slack", float(gap + self.tolerance))
        object.__setattr__(self, "holds", bool(self.slack >= 0))

    def to_json(self) -> dict:
        return {
            "theorem": self.theorem,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "tolerance": self.tolerance,
            "sense": self.sense,
            "slack": self.slack,
            "holds": self.holds,
            "terms": dict(sorted(self.terms.items())),
        }


def _require(bundle: Mapping[str, Any], keys: Sequence[str]) -> dict[str, float]:
    missing = [k for k in keys if k not in bundle or bundle[k] is None]
    if missing:
        raise MissingTerm(f"bundle lacks {', '.join(missing)}")
    return {k: float(bundle[k]) for k in keys}


THM1_KEYS = ("d_interp", "kappa_1", "kappa_2", "omega", "d_repr", "delta_1", "delta_2", "Delta")
THM2_KEYS = ("epsilon_equiv", "lipschitz", "delta_1", "delta_2", "Delta", "d_repr")


def check_thm1(bundle: Mapping[str, Any], tol: float = 1e-6) -> BoundReport:
    """Sufficient condition: ``d_interp <= k1 + k2 + 2 w + d_repr + d1 + d2 + Delta``."""
    t = _require(bundle, THM1_KEYS)
    rhs = (t["kappa_1"] + t["kappa_2"] + 2 * t["omega"] + t["d_repr"]
           + t["delta_1"] + t["delta_2"] + t["Delta"])
    return BoundReport("thm1", t["d_interp"], rhs, t, tol)


def check_thm2(bundle: Mapping[str, Any], tol: float = 1e-6, safety: float = DEFAULT_LIP_SAFETY) -> BoundReport:
    """Necessary condition: ``d_repr <= eps (L + 1) + d1 + d2 + Delta``, with ``L`` scaled by ``safety``."""
    t = _require(bundle, THM2_KEYS)
    t["lipschitz_safety"] = float(safety)
    lip = t["lipschitz"] * safety
    rhs = t["epsilon_equiv"] * (lip + 1.0) + t["delta_1"] + t["delta_2"] + t["Delta"]
    return BoundReport("thm2", t["d_repr"], rhs, t, tol)


def vote_rate(within: np.ndarray, cross: np.ndarray) -> float:
    """Exact ``P[d(R, R*) <= d(R, R')]`` for i.i.d. uniform draws over finite sets."""
    within = np.asarray(within, dtype=np.float64)
    cross = np.asarray(cross, dtype=np.float64)
    hits = 0
    for i in range(within.shape[0]):
        sorted_cross = np.sort(cross[i])
        # for each R*, how many R' satisfy d(R, R') >= d(R, R*)
        hits += int(np.sum(cross.shape[1] - np.searchsorted(sorted_cross, within[i], side="left")))
    return hits / (within.shape[0] ** 2 * cross.shape[1])


def thm3_terms(within: np.ndarray, cross: np.ndarray, kappa: float, d_interp: float,
               grid: Sequence[float]) -> list[tuple[float, float, float]]:
    """``(epsilon, dispersion tail, collision tail)`` for every grid point."""
    within = np.asarray(within, dtype=np.float64)
    cross = np.asarray(cross, dtype=np.float64)
    return [
        (float(eps), float(np.mean(within > kappa + eps)), float(np.mean(cross < d_interp - eps)))
        for eps in grid
    ]


def epsilon_grid(kappa: float, d_interp: float, points: int = 64, restricted: bool = True,
                 upper: float | None = None) -> np.ndarray:
    """Grid over which the infimum is taken.

    The restricted grid keeps ``kappa + 2 eps <= d_interp``; only there does a
    small dispersion and a large collision distance force a vote of 1.
    """
    if restricted:
        top = (d_interp - kappa) / 2.0
        if top < 0:
            return np.zeros(0)
        return np.linspace(0.0, top, points)
    top = upper if upper is not None else max(d_interp, kappa, 1.0) * 2.0
    return np.linspace(0.0, top, points)


def check_thm3(
    within_1: np.ndarray,
    cross_12: np.ndarray,
    kappa_1: float,
    d_interp: float,
    p_hat: float | None = None,
    margin: float = 0.0,
    grid: Sequence[float] | None = None,
    restricted: bool = True,
) -> BoundReport:
    """Vote-rate lower bound from dispersion and collision tails.

    ``within_1`` holds representation distances inside the first set and
    ``cross_12`` those from the first set to the second. ``kappa_1`` and
    ``d_interp`` are distillation-space quantities. Without ``p_hat`` the
    vote rate is computed exactly over the finite sets.
    """
    within_1 = np.asarray(within_1, dtype=np.float64)
    cross_12 = np.asarray(cross_12, dtype=np.float64)
    if within_1.size == 0 or cross_12.size == 0:
        raise EmptySet("thm3 needs non-empty distance matrices")
    p = vote_rate(within_1, cross_12) if p_hat is None else float(p_hat)
    pts = epsilon_grid(kappa_1, d_interp, restricted=restricted) if grid is None else np.asarray(grid, dtype=np.float64)
    rows = thm3_terms(within_1, cross_12, kappa_1, d_interp, pts)
    if rows:
        eps, tail, collision = min(rows, key=lambda r: (r[1] + r[2], r[0]))
        best = tail + collision
    else:
        eps, tail, collision, best = float("nan"), 1.0, 1.0, 1.0
    rhs = max(0.0, 1.0 - min(best, 1.0) - margin)
    terms = {
        "p": p, "kappa": float(kappa_1), "d_interp": float(d_interp), "epsilon_grid": eps,
        "dispersion_tail": tail, "collision_tail": collision, "margin": float(margin),
        "grid_points": float(len(pts)), "restricted": float(restricted),
    }
    return BoundReport("thm3", p, rhs, terms, 0.0, ">=")


def congruity_envelope(within_1: np.ndarray, within_2: np.ndarray, cross_12: np.ndarray,
                       kappa_1: float, kappa_2: float, d_interp: float, points: int = 64) -> float:
    """``f``: the smallest combined dispersion and collision mass over the restricted grid.

    The congruity score never exceeds ``f``. Returns ``inf`` when no grid
    point satisfies the restriction for both sets.
    """
    top = (d_interp - max(kappa_1, kappa_2)) / 2.0
    if top < 0:
        return math.inf
    within_1, within_2 = np.asarray(within_1), np.asarray(within_2)
    cross_12 = np.asarray(cross_12)
    best = math.inf
    for eps in np.linspace(0.0, top, points):
        value = (np.mean(within_1 > kappa_1 + eps) + 2 * np.mean(cross_12 < d_interp - eps)
                 + np.mean(within_2 > kappa_2 + eps))
        best = min(best, float(value))
    return best


def exact_vote_rates(within_1: np.ndarray, within_2: np.ndarray, cross_12: np.ndarray) -> tuple[float, float]:
    cross_12 = np.asarray(cross_12, dtype=np.float64)
    return vote_rate(within_1, cross_12), vote_rate(within_2, cross_12.T)


@dataclass(frozen=True)
class EquivReport:
    d_interp: float
    kappa_1: float
    kappa_2: float
    bound_a: float
    bound_b: float
    slack: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("d_interp", "kappa_1", "kappa_2", "bound_a", "bound_b", "slack")}


def equiv_report(set_a, set_b, phi: DistillationMap, task: Task, d_repr: float = 0.0,
                 omega: float = 0.0, delta_1: float = 0.0, delta_2: float = 0.0,
                 gap: float = 0.0) -> EquivReport:
    """Distance, compressions, and the two parts of the sufficient bound.

    ``bound_a`` collects the compression terms, ``bound_b`` the representation
    terms; slack is their sum minus ``d_interp``.
    """
    va, vb = distilled(set_a, phi, task), distilled(set_b, phi, task)
    d = hausdorff_from_matrix(distance_matrix(va, vb))
    ka, kb = diameter_from_matrix(distance_matrix(va)), diameter_from_matrix(distance_matrix(vb))
    a = ka + kb + 2 * omega
    b = d_repr + delta_1 + delta_2 + gap
    return EquivReport(d, ka, kb, a, b, a + b - d)

