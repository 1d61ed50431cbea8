"""Implementation variants that preserve a model's interpretation.

Components whose ablation barely moves the output are "unimportant". Variants
are produced by editing only those components (or by adding dead ones), and
each candidate is accepted only after :func:`verify_preservation` confirms the
outputs and the interchange behaviour of the important components are intact.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import expm

from . import ops as _ops
from .causal import (
    COMPILED_TOL,
    CausalModel,
    FaithfulnessBudget,
    Intervention,
    Task,
    TransitionFunction,
    Variable,
    apply_intervention,
    build_model,
    dumps_model,
    load_model,
    save_model,
    solve_batch,
)
from .errors import (
    BudgetExhausted,
    EmptyTask,
    NoUnimportantComponents,
    TargetIsInput,
    TargetIsOutput,
    ValidationError,
)

STRATEGY_KINDS = (
    "constant-ablate",
    "resample-ablate",
    "gaussian-perturb",
    "dead-component-insert",
    "unused-subspace-rotate",
)
DEFAULT_THRESHOLD = 0.02
MAX_RETRIES = 50
_EPS = 1e-12


@dataclass(frozen=True)
class ComponentScore:
    variable_id: str
    importance: float


def patched_solve(model: CausalModel, inputs: np.ndarray, base_values: Mapping[str, np.ndarray],
                  patches: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Re-solve only the descendants of the patched variables."""
    affected: set[str] = set()
    for vid in patches:
        affected |= model.descendants(vid)
    overrides = {k: v for k, v in base_values.items() if k not in affected and k != model.input_id}
    overrides.update(patches)
    return solve_batch(model, inputs, overrides)


def _relative_change(new: np.ndarray, base: np.ndarray) -> np.ndarray:
    num = np.linalg.norm(new - base, axis=1)
    den = np.maximum(np.linalg.norm(base, axis=1), _EPS)
    return num / den


def score_components(model: CausalModel, task: Task, ablation: str = "constant", seed: int = 0) -> list[ComponentScore]:
    """Importance of every hidden variable under zero or resample ablation.

    Importance is the task mean of ``|out_ablated - out| / max(|out|, eps)``,
    clamped to ``[0, 1]``.
    """
    if not len(task):
        raise EmptyTask("task has no inputs")
    if ablation not in ("constant", "resample"):
        raise ValidationError(f"unknown ablation {ablation!r}")
    u = task.input_array()
    base = solve_batch(model, u)
    out = base[model.output_id]
    rng = np.random.default_rng(seed)
    scores = []
    for vid in model.hidden_ids:
        if ablation == "constant":
            patch = np.zeros_like(base[vid])
        else:
            patch = base[vid][rng.permutation(len(task))]
        ablated = patched_solve(model, u, base, {vid: patch})[model.output_id]
        importance = float(np.clip(_relative_change(ablated, out).mean(), 0.0, 1.0))
        scores.append(ComponentScore(vid, importance))
    return scores


def unimportant_ids(scores: Iterable[ComponentScore], threshold: float = DEFAULT_THRESHOLD) -> frozenset[str]:
    return frozenset(s.variable_id for s in scores if s.importance < threshold)


# --------------------------------------------------------------- strategies

@dataclass(frozen=True)
class VariantStrategy:
    kind: str
    magnitude: float = 0.0
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown strategy {self.kind!r}; choose from {STRATEGY_KINDS}")
        if not self.magnitude >= 0:
            raise ValidationError("magnitude must be >= 0")
        if self.count < 1:
            raise ValidationError("count must be >= 1")

    def with_seed(self, seed: int) -> "VariantStrategy":
        return VariantStrategy(self.kind, self.magnitude, int(seed), self.count)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "VariantStrategy":
        return cls(obj["kind"], float(obj.get("magnitude", 0.0)), int(obj.get("seed", 0)), int(obj.get("count", 1)))


DEFAULT_STRATEGIES = tuple(VariantStrategy(kind, 0.1) for kind in STRATEGY_KINDS)


@dataclass(frozen=True)
class Edit:
    """One step of a variant's construction, replayable on the base model."""

    kind: str  # "intervene" or "insert"
    target: str
    parents: tuple[str, ...]
    op: _ops.Op
    arity: int = 0

    def to_json(self) -> dict:
        return {"kind": self.kind, "target": self.target, "parents": list(self.parents),
                "op": self.op.to_json(), "arity": self.arity}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Edit":
        return cls(obj["kind"], obj["target"], tuple(obj["parents"]), _ops.op_from_json(obj["op"]), int(obj["arity"]))


def apply_edits(model: CausalModel, edits: Sequence[Edit]) -> CausalModel:
    """Replay edits: interventions via ``apply_intervention``, inserts as new variables."""
    inserts = [e for e in edits if e.kind == "insert"]
    for edit in edits:
        if edit.kind == "intervene":
            model = apply_intervention(model, Intervention(edit.target, edit.parents, edit.op))
    if inserts:
        variables = list(model.variables) + [Variable(e.target, e.arity) for e in inserts]
        transitions = list(model.transitions.values()) + [TransitionFunction(e.target, e.parents, e.op) for e in inserts]
        model = build_model(variables, model.input_id, transitions, dict(model.meta))
    return model


def _check_targets(model: CausalModel, ids: Iterable[str]) -> list[str]:
    ids = sorted(ids, key=list(model.order).index)
    for vid in ids:
        if vid == model.output_id:
            raise TargetIsOutput(f"{vid!r} is the output variable")
        if vid == model.input_id:
            raise TargetIsInput(f"{vid!r} is the input variable")
        if vid not in model.by_id:
            raise ValidationError(f"unknown variable {vid!r}")
    return ids


def _perturbable(op: Any) -> dict[str, np.ndarray]:
    if not isinstance(op, _ops.Op):
        return {}
    return {k: v for k, v in op.arrays().items() if k != "keys"}


def _rotate_outputs(op: _ops.Op, rotation: np.ndarray) -> _ops.Op | None:
    """Apply ``rotation`` to the per-position output coordinates of ``op``."""
    if isinstance(op, (_ops.Affine, _ops.Relu)) and op.W is not None:
        return op.replace(W=op.W @ rotation, b=op.b @ rotation)
    if isinstance(op, _ops.HardAttention):
        changes = {"W_ov": op.W_ov @ rotation, "default": op.default @ rotation}
        if op.bos is not None:
            changes["bos"] = op.bos @ rotation
        return op.replace(**changes)
    if isinstance(op, _ops.ElementwiseTable):
        changes = {"table": op.table @ rotation}
        if op.positional is not None:
            changes["positional"] = op.positional @ rotation
        return op.replace(**changes)
    return None


def _output_width(op: _ops.Op) -> int | None:
    if isinstance(op, (_ops.Affine, _ops.Relu)) and op.W is not None:
        return op.W.shape[1]
    if isinstance(op, _ops.HardAttention):
        return op.W_ov.shape[1]
    if isinstance(op, _ops.ElementwiseTable):
        return op.table.shape[1]
    return None


def _rms_scale(array: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(array)))) if array.size else 0.0
    return rms if rms > 0 else 1.0


def _random_rotation(rng: np.random.Generator, width: int, magnitude: float) -> np.ndarray:
    generator = rng.normal(size=(width, width))
    return expm(magnitude * (generator - generator.T) / 2.0)


def plan_variant(model: CausalModel, unimportant: Iterable[str], strategy: VariantStrategy,
                 task: Task | None = None) -> list[Edit]:
    """The edits a strategy makes; only ``unimportant`` ids are touched."""
    targets = _check_targets(model, unimportant)
    rng = np.random.default_rng(strategy.seed)
    kind = strategy.kind
    if kind == "dead-component-insert":
        sources = [v for v in model.order if v != model.output_id]
        taken = set(model.by_id)
        edits = []
        k = 0
        for _ in range(strategy.count):
            while f"dead{k}" in taken:
                k += 1
            vid = f"dead{k}"
            taken.add(vid)
            parent = sources[int(rng.integers(len(sources)))]
            width = 4
            scale = strategy.magnitude or 1.0
            op = _ops.Relu(rng.normal(0, scale, (model.variable(parent).arity, width)), rng.normal(0, scale, width))
            edits.append(Edit("insert", vid, (parent,), op, width))
        return edits
    if not targets:
        raise NoUnimportantComponents("no unimportant components to edit")
    if kind in ("constant-ablate", "resample-ablate"):
        edits = []
        picks = rng.choice(len(targets), size=min(strategy.count, len(targets)), replace=False)
        for idx in sorted(int(i) for i in picks):
            vid = targets[idx]
            arity = model.variable(vid).arity
            if kind == "constant-ablate":
                value = np.zeros(arity)
            else:
                if task is None or not len(task):
                    raise ValidationError("resample-ablate needs a non-empty task")
                row = int(rng.integers(len(task)))
                value = solve_batch(model, task.input_array()[row:row + 1])[vid][0]
            edits.append(Edit("intervene", vid, (), _ops.Constant(value)))
        return edits
    edits = []
    for vid in targets:
        tf = model.transitions[vid]
        op = tf.evaluator
        if kind == "gaussian-perturb":
            arrays = _perturbable(op)
            if not arrays:
                continue
            # noise is relative to each array's own RMS so chained components stay bounded
            noisy = {k: v + rng.normal(0.0, 1.0, v.shape) * strategy.magnitude * _rms_scale(v)
                     for k, v in arrays.items()}
            edits.append(Edit("intervene", vid, tf.parents, op.replace(**noisy)))
        else:
            width = _output_width(op) if isinstance(op, _ops.Op) else None
            if width is None:
                continue
            rotated = _rotate_outputs(op, _random_rotation(rng, width, strategy.magnitude))
            edits.append(Edit("intervene", vid, tf.parents, rotated))
    return edits


def sample_variant(model: CausalModel, unimportant: Iterable[str], strategy: VariantStrategy,
                   task: Task | None = None) -> CausalModel:
    """Apply one strategy to the unimportant components of ``model``."""
    return apply_edits(model, plan_variant(model, unimportant, strategy, task))


# ------------------------------------------------------------- verification

@dataclass(frozen=True)
class PreservationReport:
    passed: bool
    output_residual: float
    interchange_residual: float
    budget: float
    checked_components: tuple[str, ...] = ()


def verify_preservation(
    base: CausalModel,
    variant: CausalModel,
    task: Task,
    budget: FaithfulnessBudget | float = COMPILED_TOL,
    important: Iterable[str] | None = None,
    n_pairs: int = 8,
    seed: int = 0,
) -> PreservationReport:
    """Output agreement plus interchange agreement on important components.

    For each important component and each sampled input pair ``(s, s')`` both
    models run on ``s`` with that component patched to its value on ``s'``;
    the patched outputs must agree within the budget.
    """
    eta = budget.eta if isinstance(budget, FaithfulnessBudget) else float(budget)
    if base.input_id != variant.input_id or base.output_id != variant.output_id:
        return PreservationReport(False, float("inf"), float("inf"), eta)
    u = task.input_array()
    base_vals = solve_batch(base, u)
    var_vals = solve_batch(variant, u)
    out_b, out_v = base_vals[base.output_id], var_vals[variant.output_id]
    if out_b.shape != out_v.shape:
        return PreservationReport(False, float("inf"), float("inf"), eta)
    output_residual = float(np.max(np.linalg.norm(out_b - out_v, axis=1))) if len(task) else 0.0

    if important is None:
        important = [s.variable_id for s in score_components(base, task) if s.importance >= DEFAULT_THRESHOLD]
    shared = [vid for vid in important if vid in variant.by_id and vid in base.by_id]
    rng = np.random.default_rng(seed)
    pairs = min(n_pairs, len(task))
    interchange = 0.0
    if pairs and shared:
        dst = rng.choice(len(task), size=pairs, replace=False)
        src = rng.choice(len(task), size=pairs, replace=True)
        for vid in shared:
            if base_vals[vid].shape != var_vals[vid].shape:
                interchange = float("inf")
                break
            pb = patched_solve(base, u[dst], {k: v[dst] for k, v in base_vals.items()}, {vid: base_vals[vid][src]})
            pv = patched_solve(variant, u[dst], {k: v[dst] for k, v in var_vals.items()}, {vid: var_vals[vid][src]})
            gap = np.linalg.norm(pb[base.output_id] - pv[variant.output_id], axis=1).max()
            interchange = max(interchange, float(gap))
    passed = output_residual <= eta and interchange <= eta
    return PreservationReport(passed, output_residual, interchange, eta, tuple(shared))


# --------------------------------------------------------------- generation

@dataclass
class ImplementationSet:
    base: CausalModel
    variants: list[CausalModel]
    budget: float
    provenance: list[dict] = field(default_factory=list)
    seed: int = 0
    strategies: tuple[VariantStrategy, ...] = ()
    unimportant: tuple[str, ...] = ()
    important: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.variants)

    def replay(self, index: int, task: Task | None = None) -> CausalModel:
        """Rebuild variant ``index`` from the base and its recorded provenance."""
        record = self.provenance[index]
        strategy = VariantStrategy.from_json(record["strategy"])
        return sample_variant(self.base, record["targets"], strategy, task)


def _model_hash(model: CausalModel) -> str:
    return hashlib.sha256(dumps_model(model).encode()).hexdigest()


def generate_implementations(
    model: CausalModel,
    task: Task,
    count: int,
    strategies: Sequence[VariantStrategy] | None = None,
    budget: FaithfulnessBudget | float = COMPILED_TOL,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    max_retries: int = MAX_RETRIES,
    stage: int = 0,
    scores: Sequence[ComponentScore] | None = None,
) -> ImplementationSet:
    """Draw ``count`` verified variants; reproducible from ``seed``.

    Strategies are chosen uniformly. The RNG of variant ``i`` is derived from
    ``(seed, stage, i)`` alone, so results do not depend on generation order.
    Variants identical to an earlier one are rejected and redrawn.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    if not len(task):
        raise EmptyTask("task has no inputs")
    eta = budget.eta if isinstance(budget, FaithfulnessBudget) else float(budget)
    strategies = tuple(strategies or DEFAULT_STRATEGIES)
    scores = list(scores) if scores is not None else score_components(model, task)
    unimportant = sorted(unimportant_ids(scores, threshold), key=list(model.order).index)
    important = tuple(s.variable_id for s in scores if s.importance >= threshold)
    if not unimportant and any(s.kind != "dead-component-insert" for s in strategies):
        raise NoUnimportantComponents("every component is important at the threshold")

    variants: list[CausalModel] = []
    provenance: list[dict] = []
    seen: set[str] = set()
    for index in range(count):
        for attempt in range(max_retries):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, index, attempt)))
            template = strategies[int(rng.integers(len(strategies)))]
            strategy = template.with_seed(int(rng.integers(2**63)))
            try:
                candidate = sample_variant(model, unimportant, strategy, task)
            except NoUnimportantComponents:
                continue
            digest = _model_hash(candidate)
            if digest in seen:
                continue
            report = verify_preservation(model, candidate, task, eta, important, seed=index)
            if report.passed:
                seen.add(digest)
                variants.append(candidate)
                provenance.append({
                    "index": index,
                    "attempt": attempt,
                    "strategy": strategy.to_json(),
                    "targets": list(unimportant),
                    "output_residual": report.output_residual,
                    "interchange_residual": report.interchange_residual,
                    "sha256": digest,
                })
                break
        else:
            raise BudgetExhausted(f"variant {index}: no verified variant after {max_retries} attempts")
    return ImplementationSet(model, variants, eta, provenance, seed, strategies, tuple(unimportant), important)


# -------------------------------------------------------------- persistence

def save_implementation_set(impls: ImplementationSet, directory: str | Path, task: Task | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_model(impls.base, out / "base.json")
    files = []
    for i, variant in enumerate(impls.variants):
        name = f"variant_{i:03d}.json"
        save_model(variant, out / name)
        files.append(name)
    manifest = {
        "seed": impls.seed,
        "budget": impls.budget,
        "strategies": [s.to_json() for s in impls.strategies],
        "unimportant": list(impls.unimportant),
        "important": list(impls.important),
        "variants": files,
        "provenance": impls.provenance,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if task is not None:
        (out / "task.json").write_text(json.dumps(task.to_json()))
    return out


def load_implementation_set(directory: str | Path) -> ImplementationSet:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    base = load_model(root / "base.json")
    variants = [load_model(root / name) for name in manifest["variants"]]
    return ImplementationSet(
        base, variants, float(manifest["budget"]), manifest["provenance"], int(manifest["seed"]),
        tuple(VariantStrategy.from_json(s) for s in manifest["strategies"]),
        tuple(manifest["unimportant"]), tuple(manifest["important"]),
    )
