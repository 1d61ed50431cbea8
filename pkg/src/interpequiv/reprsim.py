"""Layered representations and a constrained-linear distance between them.

Representations are row-aligned matrices (one row per task input) split into
layer blocks. The distance from ``R1`` to ``R2`` is the worst, over blocks of
``R2``, of the best contraction fit from some block of ``R1``; fits use the
dataset-RMS norm and operators of spectral norm at most one. Blocks are
mean-centred and stripped of constant columns first. The symmetric distance
is the larger of the two directions.
"""

from __future__ import annotations

import json
import struct
import warnings
from collections import deque
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import LinAlgError, eigh

from .causal import CausalModel, Task, solve_batch
from .errors import LipschitzEstimateWarning, NonChainPooling, ShapeMismatch, UnknownVariable, ValidationError

PG_STEPS = 25
PG_STEP_SCALE = 0.1
RIDGE_SCALE = 1e-6
NORM_SLACK = 1e-9
_RANK_TOL = 1e-10


# -------------------------------------------------------------------- types

@dataclass(frozen=True)
class LayerPooling:
    """Which variables are concatenated into each representation layer."""

    layers: tuple[tuple[str, ...], ...]

    def __init__(self, layers: Iterable[Iterable[str]]):
        object.__setattr__(self, "layers", tuple(tuple(layer) for layer in layers))
        if not self.layers or any(not layer for layer in self.layers):
            raise ValidationError("pooling needs at least one non-empty layer")

    @classmethod
    def from_json(cls, obj: Any) -> "LayerPooling":
        if isinstance(obj, Mapping):
            obj = obj["layers"]
        return cls(obj)

    def to_json(self) -> dict:
        return {"layers": [list(layer) for layer in self.layers]}


def default_pooling(model: CausalModel, final_only: bool = False) -> LayerPooling:
    """Pooling recorded by the compiler (residual stream per layer), else the output."""
    layers = model.meta.get("rho")
    if not layers:
        return LayerPooling([[model.output_id]])
    return LayerPooling([layers[-1]] if final_only else layers)


@dataclass(frozen=True)
class RepresentationMatrix:
    blocks: tuple[np.ndarray, ...]
    layer_ids: tuple[tuple[str, ...], ...] = ()
    model_id: str = ""

    def __post_init__(self):
        if not self.blocks:
            raise ValidationError("a representation needs at least one layer")
        rows = {b.shape[0] for b in self.blocks}
        if len(rows) != 1 or any(b.ndim != 2 for b in self.blocks):
            raise ShapeMismatch("all layer blocks must be 2-D with the same row count")

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def n_rows(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @classmethod
    def from_arrays(cls, blocks: Sequence[Any], model_id: str = "") -> "RepresentationMatrix":
        arrays = tuple(np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in blocks)
        return cls(arrays, tuple((f"layer{i}",) for i in range(len(arrays))), model_id)


# ---------------------------------------------------------------- pooling

def _check_chain(model: CausalModel, pooling: LayerPooling) -> None:
    known = model.by_id
    seen: dict[str, int] = {}
    for k, layer in enumerate(pooling.layers):
        for vid in layer:
            if vid not in known:
                raise UnknownVariable(f"unknown variable {vid!r}")
            if vid in seen:
                raise NonChainPooling(f"{vid!r} is pooled into layers {seen[vid]} and {k}")
            seen[vid] = k
    position = {vid: i for i, vid in enumerate(model.order)}
    children = model._child_map()
    for k in range(len(pooling.layers) - 1):
        here, nxt = set(pooling.layers[k]), set(pooling.layers[k + 1])
        if max(position[v] for v in here) >= max(position[v] for v in nxt):
            raise NonChainPooling(f"layer {k + 1} does not come after layer {k}")
        for vid in here:
            if nxt & (model.ancestors(vid) | {vid}):
                raise NonChainPooling(f"layer {k + 1} feeds layer {k}")
        frontier = deque([model.input_id])
        reached = {model.input_id}
        while frontier:
            node = frontier.popleft()
            if node in nxt:
                raise NonChainPooling(f"layer {k} does not separate the input from layer {k + 1}")
            for child in children.get(node, ()):
                if child not in reached and child not in here:
                    reached.add(child)
                    frontier.append(child)


def get_reprs(model: CausalModel, task: Task, rho: LayerPooling | Sequence[Sequence[str]] | None = None,
              model_id: str = "") -> RepresentationMatrix:
    """Solve ``model`` on the task and concatenate pooled activations per layer."""
    pooling = rho if isinstance(rho, LayerPooling) else (default_pooling(model) if rho is None else LayerPooling(rho))
    _check_chain(model, pooling)
    values = solve_batch(model, task.input_array())
    blocks = tuple(np.concatenate([values[v] for v in layer], axis=1) for layer in pooling.layers)
    return RepresentationMatrix(blocks, pooling.layers, model_id)


# ------------------------------------------------------------------ solver

@dataclass(frozen=True)
class LinearFit:
    W: np.ndarray
    operator_norm: float
    residual: float


@dataclass(frozen=True)
class _Basis:
    """Thin SVD of a data block: ``M = U diag(s) V^T``."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    rows: int
    total: float  # squared Frobenius norm
    tail: float  # squared mass of the dropped singular values

    @classmethod
    def of(cls, M: np.ndarray) -> "_Basis":
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        keep = s > (s[0] * _RANK_TOL if s.size else 0.0)
        keep &= s > 0
        return cls(U[:, keep], s[keep], Vt[keep].T, M.shape[0], float(np.sum(M * M)), float(np.sum(s[~keep] ** 2)))


def _project(A: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the unit spectral-norm ball (singular value clipping)."""
    if A.size == 0 or np.sqrt(np.sum(A * A)) <= 1.0:
        return A
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] <= 1.0:
        return A
    return (U * np.minimum(s, 1.0)) @ Vt


def _spectral_norm(A: np.ndarray) -> float:
    """Exact largest singular value via the smaller Gram matrix."""
    if A.size == 0:
        return 0.0
    G = A.T @ A if A.shape[0] >= A.shape[1] else A @ A.T
    k = G.shape[0]
    try:
        top = eigh(G, eigvals_only=True, subset_by_index=[k - 1, k - 1], check_finite=False)[0]
    except LinAlgError:
        # the subset driver occasionally fails to converge; the full solver does not
        top = np.linalg.eigvalsh(G)[-1]
    return float(np.sqrt(max(top, 0.0)))


def _power_step(A: np.ndarray, v: np.ndarray, iters: int = 2) -> tuple[float, np.ndarray]:
    """Warm-started power iteration; returns a lower estimate of the top singular value."""
    sigma = 0.0
    for _ in range(iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, v
        w = A.T @ (u / nu)
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return 0.0, v
        v = w / sigma
    return sigma, v


def _solve_reduced(bx: _Basis, by: _Basis) -> tuple[np.ndarray, float]:
    """Constrained fit in the coordinates of both thin SVDs.

    Any optimal map acts as ``V_y A V_x^T``: the part outside the row space of
    X does not change the fit and the part outside the row space of Y only
    adds error. So the problem reduces exactly to ``min |s*A - T|`` with
    ``T = U_x^T U_y diag(s_y)`` plus a constant.

    Start: ridge solution rescaled into the ball. Refinement: projected
    gradient steps where the projection rescales by a power-iteration
    estimate of the spectral norm. The projected least-squares solution is a
    second candidate. The best feasible candidate wins.
    """
    if by.s.size == 0:
        return np.zeros((bx.s.size, 0)), 0.0
    target_full = by.U * by.s
    if bx.s.size == 0:
        return np.zeros((0, by.s.size)), float(np.sqrt(by.total / by.rows))
    T = bx.U.T @ target_full
    # computed directly: total - |T|^2 cancels badly when Y lies in span(X)
    rest = target_full - bx.U @ T
    outside = float(np.sum(rest * rest)) + by.tail
    s = bx.s[:, None]

    def loss(A: np.ndarray) -> float:
        R = s * A - T
        return float(np.sum(R * R))

    lam = RIDGE_SCALE * float(np.sum(bx.s ** 2))
    ridge = (s / (s * s + lam)) * T
    ridge = ridge / max(1.0, _spectral_norm(ridge))
    lstsq = _project(T / s)

    step = PG_STEP_SCALE / float(bx.s[0] ** 2)
    A = ridge
    best_iter, best_iter_loss = ridge, loss(ridge)
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    for _ in range(PG_STEPS):
        A = A - step * s * (s * A - T)
        sigma, v = _power_step(A, v)
        if sigma > 1.0:
            A = A / sigma
        current = loss(A)
        if current < best_iter_loss:
            best_iter, best_iter_loss = A, current
    norm = _spectral_norm(best_iter)
    if norm > 1.0:
        best_iter = best_iter / norm

    best = min((ridge, lstsq, best_iter), key=loss)
    norm = _spectral_norm(best)
    if norm > 1.0 + NORM_SLACK:
        best = best / norm
    return best, float(np.sqrt((loss(best) + outside) / bx.rows))


def fit_constrained(X: Any, Y: Any) -> LinearFit:
    """Best found ``W`` with ``|W|_op <= 1`` for ``Y ~ X W^T`` in dataset-RMS.

    No centring is applied here. The reported residual is achieved by the
    returned ``W``, so it upper-bounds the true infimum.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0] or X.shape[0] < 1:
        raise ShapeMismatch(f"cannot fit {X.shape} -> {Y.shape}")
    bx, by = _Basis.of(X), _Basis.of(Y)
    A, _ = _solve_reduced(bx, by)
    W = (bx.V @ A @ by.V.T).T if A.size else np.zeros((Y.shape[1], X.shape[1]))
    residual = float(np.sqrt(np.sum((X @ W.T - Y) ** 2) / X.shape[0]))
    return LinearFit(W, _spectral_norm(W), residual)


# ---------------------------------------------------------------- distance

def center(block: np.ndarray, tol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centre columns and drop the constant ones; returns (block, kept mask)."""
    centred = block - block.mean(axis=0, keepdims=True)
    mask = np.any(np.abs(centred) > tol, axis=0)
    return centred[:, mask], mask


@dataclass
class _Prepared:
    bases: list[_Basis]
    masks: list[np.ndarray]


_CACHE_ATTR = "_reprsim_bases"


def _prepare(R: RepresentationMatrix) -> _Prepared:
    cached = R.__dict__.get(_CACHE_ATTR)
    if cached is None:
        bases, masks = [], []
        for block in R.blocks:
            centred, mask = center(block)
            bases.append(_Basis.of(centred))
            masks.append(mask)
        cached = _Prepared(bases, masks)
        object.__setattr__(R, _CACHE_ATTR, cached)
    return cached


def directional_distance(R1: RepresentationMatrix, R2: RepresentationMatrix) -> float:
    """Worst target block of ``R2`` under its best single-block fit from ``R1``."""
    if R1.n_rows != R2.n_rows:
        raise ShapeMismatch(f"row counts differ: {R1.n_rows} vs {R2.n_rows}")
    p1, p2 = _prepare(R1), _prepare(R2)
    worst = 0.0
    for target in p2.bases:
        best = min(_solve_reduced(source, target)[1] for source in p1.bases)
        worst = max(worst, best)
    return worst


def repr_dist(R1: RepresentationMatrix, R2: RepresentationMatrix) -> float:
    """Symmetric constrained-linear distance; symmetric by construction."""
    forward = directional_distance(R1, R2)
    backward = directional_distance(R2, R1)
    return max(forward, backward)


# ----------------------------------------------------------------- quality

@dataclass(frozen=True)
class ReprQuality:
    encoder_errors: tuple[float, ...]
    decoder_errors: tuple[float, ...]
    delta: float


def repr_quality(R: RepresentationMatrix, h_outputs: Any) -> ReprQuality:
    """Per-layer encoder (layer to output) and decoder (output to layer) fit errors."""
    h = np.asarray(h_outputs, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != R.n_rows:
        raise ShapeMismatch(f"{h.shape[0]} outputs for {R.n_rows} rows")
    hb = _Basis.of(center(h)[0])
    prepared = _prepare(R)
    enc = tuple(_solve_reduced(b, hb)[1] for b in prepared.bases)
    dec = tuple(_solve_reduced(hb, b)[1] for b in prepared.bases)
    return ReprQuality(enc, dec, max(enc + dec))


@dataclass(frozen=True)
class FunctionalGap:
    delta: float
    norm: str = "rms"


def dataset_norm(diff: np.ndarray, norm: str = "rms") -> float:
    diff = np.asarray(diff, dtype=np.float64)
    if diff.shape[0] == 0:
        return 0.0
    per_row = np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)
    if norm == "rms":
        return float(np.sqrt(np.mean(per_row)))
    if norm == "max":
        return float(np.sqrt(per_row.max()))
    raise ValidationError(f"unknown norm {norm!r}")


def functional_gap(m1: CausalModel, m2: CausalModel, task: Task, norm: str = "rms") -> FunctionalGap:
    u = task.input_array()
    o1 = solve_batch(m1, u)[m1.output_id]
    o2 = solve_batch(m2, u)[m2.output_id]
    if o1.shape != o2.shape:
        raise ShapeMismatch(f"output shapes differ: {o1.shape} vs {o2.shape}")
    return FunctionalGap(dataset_norm(o1 - o2, norm), norm)


def lipschitz_estimate(
    model_pairs: Sequence[tuple[CausalModel, CausalModel]],
    task: Task,
    rho: LayerPooling | Sequence[Sequence[str]] | None,
    d_impl: Callable[[CausalModel, CausalModel], float] | Sequence[float],
    guard: float = 1e-12,
) -> float:
    """Largest observed ``repr_dist / d_impl`` ratio: a lower bound on the constant."""
    ratios = []
    for i, (a, b) in enumerate(model_pairs):
        dist = d_impl[i] if not callable(d_impl) else d_impl(a, b)
        if dist < guard:
            continue
        ratios.append(repr_dist(get_reprs(a, task, rho), get_reprs(b, task, rho)) / dist)
    if not ratios:
        warnings.warn("no pair had a usable implementation distance", LipschitzEstimateWarning, stacklevel=2)
        return 0.0
    return float(max(ratios))


# ---------------------------------------------------------- binary format

_MAGIC = b"IEREPR01"


def save_reprs(R: RepresentationMatrix, path: str | Path) -> None:
    """Header-prefixed little-endian float64 blocks."""
    header = json.dumps({
        "model_id": R.model_id,
        "layers": [{"ids": list(ids), "shape": list(b.shape)} for ids, b in zip(R.layer_ids, R.blocks)],
    }).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for block in R.blocks:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_reprs(path: str | Path) -> RepresentationMatrix:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValidationError(f"{path} is not a representation file")
    (length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + length])
    offset = 16 + length
    blocks, ids = [], []
    for layer in header["layers"]:
        rows, cols = layer["shape"]
        count = rows * cols
        block = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(rows, cols)
        blocks.append(block.astype(np.float64))
        ids.append(tuple(layer["ids"]))
        offset += 8 * count
    return RepresentationMatrix(tuple(blocks), tuple(ids), header.get("model_id", ""))
