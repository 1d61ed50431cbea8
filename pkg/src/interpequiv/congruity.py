"""Congruity between two interpretations via representation-distance votes.

Each round draws implementations and casts two votes. The first vote is 1
when a model's own variant is no farther (in ``repr_dist``) than the other
model. The second vote is the same with roles swapped. With ``p1, p2`` the
vote rates, the score is ``1 - |p1 + p2 - 1|``: 1 when the two sides cannot
be told apart, 0 when each side always prefers its own variants (or always
prefers the other side).
"""

from __future__ import annotations

import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .causal import COMPILED_TOL, CausalModel, Task
from .errors import (
    BudgetExhausted,
    DegenerateVariantsWarning,
    EmptySet,
    GenerationFailure,
    InsufficientRounds,
    InterpEquivError,
    NoUnimportantComponents,
    ValidationError,
)
from .implgen import (
    DEFAULT_STRATEGIES,
    DEFAULT_THRESHOLD,
    ImplementationSet,
    VariantStrategy,
    generate_implementations,
    score_components,
)
from .reprsim import LayerPooling, RepresentationMatrix, default_pooling, get_reprs, repr_dist

EQUIVALENT = "equivalent-not-rejected"
DIFFERENT = "different"
_BOOTSTRAP_STREAM = 2**31 - 1


@dataclass(frozen=True)
class CongruityConfig:
    n_rounds: int = 100
    impl_count: int = 1
    bootstrap_samples: int = 20
    level: float = 0.95
    seed: int = 0
    null_band: float = 0.5

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValidationError("n_rounds must be >= 1")
        if self.impl_count < 1:
            raise ValidationError("impl_count must be >= 1")
        if self.bootstrap_samples < 2:
            raise InsufficientRounds("bootstrap needs at least 2 resamples")
        if not 0.0 < self.level < 1.0:
            raise ValidationError("level must lie in (0, 1)")


@dataclass(frozen=True)
class CongruityReport:
    score: float
    p1_hat: float
    p2_hat: float
    ci: tuple[float, float]
    verdict: str
    votes: tuple[tuple[int, int], ...]
    distances: tuple[tuple[float, float, float, float], ...] = ()
    failed_rounds: tuple[int, ...] = ()

    @property
    def n_rounds(self) -> int:
        return len(self.votes)

    def swapped(self) -> "CongruityReport":
        """The same report with the two sides exchanged."""
        return CongruityReport(
            self.score, self.p2_hat, self.p1_hat, self.ci, self.verdict,
            tuple((b, a) for a, b in self.votes),
            tuple((c, d, a, b) for a, b, c, d in self.distances),
            self.failed_rounds,
        )

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "p1_hat": self.p1_hat,
            "p2_hat": self.p2_hat,
            "ci": list(self.ci),
            "verdict": self.verdict,
            "n_rounds": self.n_rounds,
            "votes": [list(v) for v in self.votes],
            "distances": [list(d) for d in self.distances],
            "failed_rounds": list(self.failed_rounds),
        }


def congruity_score(p1: float, p2: float) -> float:
    return 1.0 - abs(p1 + p2 - 1.0)


def repr_dist_vote(r1: RepresentationMatrix, r2: RepresentationMatrix, r3: RepresentationMatrix) -> int:
    """1 iff ``r2`` is no farther from ``r1`` than ``r3`` is (ties vote 1)."""
    return int(repr_dist(r1, r2) <= repr_dist(r1, r3))


def bootstrap_ci(votes: Sequence[Sequence[int]], cfg: CongruityConfig) -> tuple[float, float]:
    """Wald interval from bootstrap replicates of the score, clamped to [0, 1]."""
    arr = np.asarray(votes, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] < 2:
        raise InsufficientRounds("bootstrap needs at least 2 rounds")
    if cfg.bootstrap_samples < 2:
        raise InsufficientRounds("bootstrap needs at least 2 resamples")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_BOOTSTRAP_STREAM,)))
    idx = rng.integers(arr.shape[0], size=(cfg.bootstrap_samples, arr.shape[0]))
    means = arr[idx].mean(axis=1)
    scores = 1.0 - np.abs(means.sum(axis=1) - 1.0)
    centre = float(scores.mean())
    spread = float(scores.std(ddof=1))
    z = float(stats.norm.ppf(0.5 + cfg.level / 2.0))
    lo, hi = centre - z * spread, centre + z * spread
    return max(0.0, lo), min(1.0, hi)


class _DistanceCache:
    def __init__(self):
        self._store: dict[tuple[int, int], float] = {}

    def __call__(self, a: RepresentationMatrix, b: RepresentationMatrix) -> float:
        key = (id(a), id(b)) if id(a) <= id(b) else (id(b), id(a))
        if key not in self._store:
            self._store[key] = repr_dist(a, b)
        return self._store[key]


def _is_degenerate(a: RepresentationMatrix, b: RepresentationMatrix) -> bool:
    return a is b or (a.widths == b.widths and all(np.array_equal(x, y) for x, y in zip(a.blocks, b.blocks)))


Draw = Callable[[np.random.Generator, int], tuple[RepresentationMatrix, ...]]


def _run_rounds(draw: Draw, cfg: CongruityConfig, dist: _DistanceCache | None = None) -> CongruityReport:
    """Shared round loop. ``draw`` returns ``(R1, R1*, R2, R2*)`` for one round."""
    dist = dist or _DistanceCache()
    votes: list[tuple[int, int]] = []
    distances: list[tuple[float, float, float, float]] = []
    failed: list[int] = []
    degenerate = False
    for r in range(cfg.n_rounds):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(r,)))
        try:
            r1, r1s, r2, r2s = draw(rng, r)
        except GenerationFailure:
            failed.append(r)
            continue
        degenerate |= _is_degenerate(r1, r1s) or _is_degenerate(r2, r2s)
        d11, d12 = dist(r1, r1s), dist(r1, r2)
        d22, d21 = dist(r2, r2s), dist(r2, r1)
        votes.append((int(d11 <= d12), int(d22 <= d21)))
        distances.append((d11, d12, d22, d21))
    if not votes:
        raise GenerationFailure(f"all {cfg.n_rounds} rounds failed to generate variants")
    if degenerate:
        warnings.warn("some variants have representations identical to the model they vary",
                      DegenerateVariantsWarning, stacklevel=3)
    arr = np.asarray(votes, dtype=np.float64)
    p1, p2 = float(arr[:, 0].mean()), float(arr[:, 1].mean())
    score = congruity_score(p1, p2)
    ci = bootstrap_ci(votes, cfg) if len(votes) >= 2 else (score, score)
    verdict = EQUIVALENT if ci[0] > cfg.null_band else DIFFERENT
    return CongruityReport(score, p1, p2, ci, verdict, tuple(votes), tuple(distances), tuple(failed))


# ------------------------------------------------------------- model level

@dataclass
class VariantGenerator:
    """Draws one fresh verified variant of a model per call.

    Component scores are computed once per model and reused.
    """

    strategies: Sequence[VariantStrategy] = DEFAULT_STRATEGIES
    budget: float = COMPILED_TOL
    threshold: float = DEFAULT_THRESHOLD
    _scores: dict[int, list] = field(default_factory=dict, repr=False)

    def __call__(self, model: CausalModel, task: Task, seed: int) -> CausalModel:
        key = id(model)
        if key not in self._scores:
            self._scores[key] = score_components(model, task)
        try:
            impls = generate_implementations(
                model, task, 1, self.strategies, self.budget, seed=seed,
                threshold=self.threshold, scores=self._scores[key],
            )
        except (BudgetExhausted, NoUnimportantComponents) as exc:
            raise GenerationFailure(str(exc)) from exc
        return impls.variants[0]


def congruity(
    m1: CausalModel,
    m2: CausalModel,
    task: Task,
    cfg: CongruityConfig,
    gen: Callable[[CausalModel, Task, int], CausalModel] | None = None,
    rho1: LayerPooling | None = None,
    rho2: LayerPooling | None = None,
) -> CongruityReport:
    """Congruity of two fixed models with a fresh variant of each per round."""
    gen = gen or VariantGenerator()
    rho1 = rho1 or default_pooling(m1)
    rho2 = rho2 or default_pooling(m2)
    base1, base2 = get_reprs(m1, task, rho1), get_reprs(m2, task, rho2)

    def draw(rng: np.random.Generator, r: int):
        seeds = rng.integers(2**63, size=2)
        try:
            v1 = gen(m1, task, int(seeds[0]))
            v2 = gen(m2, task, int(seeds[1]))
        except InterpEquivError as exc:
            raise GenerationFailure(f"round {r}: {exc}") from exc
        return base1, get_reprs(v1, task, rho1), base2, get_reprs(v2, task, rho2)

    return _run_rounds(draw, cfg)


# --------------------------------------------------------------- set level

def set_congruity(
    reprs1: Sequence[RepresentationMatrix],
    reprs2: Sequence[RepresentationMatrix],
    cfg: CongruityConfig,
    same: bool | None = None,
    dist: _DistanceCache | None = None,
) -> CongruityReport:
    """Congruity between two finite implementation sets given their representations.

    Every round draws ``R1, R1*`` from the first set and ``R2, R2*`` from the
    second, uniformly and without repeats. When both arguments are the same
    set the four draws are distinct.
    """
    if not reprs1 or not reprs2:
        raise EmptySet("implementation sets must be non-empty")
    same = (reprs1 is reprs2) if same is None else same
    need = 4 if same else 2
    if len(reprs1) < need or len(reprs2) < need:
        raise InsufficientRounds(f"each set needs at least {need} members")

    def draw(rng: np.random.Generator, r: int):
        if same:
            a, b, c, d = rng.choice(len(reprs1), size=4, replace=False)
            return reprs1[a], reprs1[b], reprs1[c], reprs1[d]
        a, b = rng.choice(len(reprs1), size=2, replace=False)
        c, d = rng.choice(len(reprs2), size=2, replace=False)
        return reprs1[a], reprs1[b], reprs2[c], reprs2[d]

    return _run_rounds(draw, cfg, dist)


def implementation_reprs(impls: ImplementationSet, task: Task, rho: LayerPooling | None = None,
                         include_base: bool = True) -> list[RepresentationMatrix]:
    models = ([impls.base] if include_base else []) + list(impls.variants)
    return [get_reprs(m, task, rho or default_pooling(m)) for m in models]


def congruity_matrix(
    groups: Sequence[ImplementationSet | Sequence[RepresentationMatrix]],
    task: Task | None,
    cfg: CongruityConfig,
    rhos: Sequence[LayerPooling | None] | None = None,
) -> list[list[CongruityReport]]:
    """Pairwise set-level congruity. Entry ``[j][i]`` mirrors ``[i][j]``."""
    if len(groups) < 2:
        raise ValidationError("congruity_matrix needs at least two groups")
    reprs: list[list[RepresentationMatrix]] = []
    for k, group in enumerate(groups):
        if isinstance(group, ImplementationSet):
            if task is None:
                raise ValidationError("a task is needed to compute representations")
            rho = rhos[k] if rhos else None
            reprs.append(implementation_reprs(group, task, rho))
        else:
            if not group:
                raise EmptySet(f"group {k} is empty")
            reprs.append(list(group))
    size = len(reprs)
    dist = _DistanceCache()
    matrix: list[list[CongruityReport | None]] = [[None] * size for _ in range(size)]
    for i in range(size):
        for j in range(i, size):
            entry_cfg = CongruityConfig(
                cfg.n_rounds, cfg.impl_count, cfg.bootstrap_samples, cfg.level,
                int(np.random.SeedSequence(cfg.seed, spawn_key=(i, j)).generate_state(1, np.uint64)[0] >> 1),
                cfg.null_band,
            )
            report = set_congruity(reprs[i], reprs[j], entry_cfg, same=(i == j), dist=dist)
            matrix[i][j] = report
            matrix[j][i] = report if i == j else report.swapped()
    return matrix  # type: ignore[return-value]


def diagonal_test(scores: np.ndarray) -> tuple[float, float, float]:
    """Diagonal mean, off-diagonal mean, one-sided Welch p-value (diagonal greater)."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.eye(scores.shape[0], dtype=bool)
    diag, off = scores[mask], scores[~mask]
    with warnings.catch_warnings():
        # constant samples trip scipy's precision check; the NaN branch below covers them
        warnings.simplefilter("ignore", RuntimeWarning)
        result = stats.ttest_ind(diag, off, equal_var=False, alternative="greater")
    p = float(result.pvalue)
    if np.isnan(p):
        p = 0.0 if diag.mean() > off.mean() else 1.0
    return float(diag.mean()), float(off.mean()), p


def group_means(scores: np.ndarray, groups: Sequence[Sequence[int]]) -> dict[str, float]:
    """Mean off-diagonal score within each group pair, keyed ``"a|b"``."""
    scores = np.asarray(scores, dtype=np.float64)
    out: dict[str, float] = {}
    for gi, a in enumerate(groups):
        for gj, b in enumerate(groups):
            if gj < gi:
                continue
            vals = [scores[i, j] for i in a for j in b if i != j]
            if vals:
                out[f"{gi}|{gj}"] = float(np.mean(vals))
    return out
