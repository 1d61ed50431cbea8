"""Deterministic causal models over real vectors.

A model is a DAG of variables with one input ``U`` and one terminal output.
Every non-input variable owns a transition function; solving evaluates them
in topological order. Evaluation is batched: one call solves many inputs.

Interventions swap a single transition. Alignments map subsets of a
low-level model's variables onto a high-level model's variables and carry a
matching map on interventions; ``check_abstraction`` tests both the
observational and the interventional consistency they imply.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any

import numpy as np

from . import ops as _ops
from .errors import (
    CycleDetected,
    DomainMismatch,
    DuplicateTransition,
    EvaluatorFailure,
    InterventionOutsideDomain,
    MissingTransition,
    OrderViolation,
    SerializationError,
    UnknownParentId,
    UnknownTarget,
    UnmappedHighVariable,
    ValidationError,
)

EXACT_TOL = 1e-9
COMPILED_TOL = 1e-6

Evaluator = Callable[[list[np.ndarray], np.ndarray], np.ndarray]
KINDS = ("input", "hidden", "output")


@dataclass(frozen=True)
class Variable:
    id: str
    arity: int
    kind: str = "hidden"

    def __post_init__(self):
        if int(self.arity) < 1:
            raise ValidationError(f"variable {self.id!r} needs arity >= 1")
        if self.kind not in KINDS:
            raise ValidationError(f"variable {self.id!r} has unknown kind {self.kind!r}")


@dataclass(frozen=True)
class TransitionFunction:
    target: str
    parents: tuple[str, ...]
    evaluator: Evaluator

    def __init__(self, target: str, parents: Iterable[str], evaluator: Evaluator):
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "parents", tuple(parents))
        object.__setattr__(self, "evaluator", evaluator)


@dataclass(frozen=True)
class Intervention:
    """``do(target <- new_evaluator(new_parents))``."""

    target: str
    new_parents: tuple[str, ...]
    new_evaluator: Evaluator
    label: str = ""

    def __init__(self, target: str, new_parents: Iterable[str], new_evaluator: Evaluator, label: str = ""):
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "new_parents", tuple(new_parents))
        object.__setattr__(self, "new_evaluator", new_evaluator)
        object.__setattr__(self, "label", label or f"do({target})")

    @classmethod
    def constant(cls, target: str, value: Sequence[float] | np.ndarray, label: str = "") -> "Intervention":
        return cls(target, (), _ops.Constant(value), label or f"do({target}<-const)")


@dataclass(frozen=True)
class CausalModel:
    variables: tuple[Variable, ...]
    input_id: str
    output_id: str
    transitions: Mapping[str, TransitionFunction]
    order: tuple[str, ...]
    meta: Mapping[str, Any] = field(default_factory=dict)

    @property
    def by_id(self) -> dict[str, Variable]:
        return {v.id: v for v in self.variables}

    def variable(self, vid: str) -> Variable:
        for v in self.variables:
            if v.id == vid:
                return v
        raise UnknownTarget(f"no variable {vid!r}")

    def parents(self, vid: str) -> tuple[str, ...]:
        tf = self.transitions.get(vid)
        return tf.parents if tf is not None else ()

    def children(self, vid: str) -> tuple[str, ...]:
        return tuple(t for t in self.order if vid in self.parents(t))

    def descendants(self, vid: str) -> set[str]:
        out: set[str] = set()
        frontier = [vid]
        child_map = self._child_map()
        while frontier:
            node = frontier.pop()
            for c in child_map.get(node, ()):
                if c not in out:
                    out.add(c)
                    frontier.append(c)
        return out

    def ancestors(self, vid: str) -> set[str]:
        out: set[str] = set()
        frontier = [vid]
        while frontier:
            node = frontier.pop()
            for p in self.parents(node):
                if p not in out:
                    out.add(p)
                    frontier.append(p)
        return out

    def _child_map(self) -> dict[str, list[str]]:
        cm: dict[str, list[str]] = {}
        for t in self.order:
            for p in self.parents(t):
                cm.setdefault(p, []).append(t)
        return cm

    @property
    def hidden_ids(self) -> tuple[str, ...]:
        return tuple(v for v in self.order if self.variable(v).kind == "hidden")

    @property
    def dead_ids(self) -> frozenset[str]:
        """Hidden variables with no directed path to the output."""
        live = self.ancestors(self.output_id)
        return frozenset(v for v in self.hidden_ids if v not in live)

    @property
    def input_arity(self) -> int:
        return self.variable(self.input_id).arity


def _topological_order(ids: Sequence[str], parent_map: Mapping[str, Sequence[str]]) -> tuple[str, ...]:
    """Kahn's algorithm, breaking ties by declaration order."""
    rank = {vid: i for i, vid in enumerate(ids)}
    indegree = {vid: 0 for vid in ids}
    children: dict[str, list[str]] = {vid: [] for vid in ids}
    for vid in ids:
        for p in parent_map.get(vid, ()):
            indegree[vid] += 1
            children[p].append(vid)
    ready = sorted((v for v in ids if indegree[v] == 0), key=rank.__getitem__)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for c in children[node]:
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
                ready.sort(key=rank.__getitem__)
    if len(order) != len(ids):
        stuck = sorted(set(ids) - set(order))
        raise CycleDetected(f"cycle among {stuck}")
    return tuple(order)


def build_model(
    variables: Iterable[Variable],
    input: str | Variable,
    transitions: Iterable[TransitionFunction],
    meta: Mapping[str, Any] | None = None,
) -> CausalModel:
    """Validate and assemble a model, computing its topological order."""
    variables = tuple(variables)
    input_id = input.id if isinstance(input, Variable) else input
    ids = [v.id for v in variables]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate variable ids")
    by_id = {v.id: v for v in variables}
    if input_id not in by_id:
        raise UnknownTarget(f"input {input_id!r} is not a declared variable")
    inputs = [v.id for v in variables if v.kind == "input"]
    if inputs != [input_id]:
        raise ValidationError(f"exactly one input variable required, found {inputs}")
    outputs = [v.id for v in variables if v.kind == "output"]
    if len(outputs) != 1:
        raise ValidationError(f"exactly one output variable required, found {outputs}")

    tmap: dict[str, TransitionFunction] = {}
    for tf in transitions:
        if tf.target not in by_id:
            raise UnknownTarget(f"transition for unknown variable {tf.target!r}")
        if tf.target in tmap:
            raise DuplicateTransition(f"two transitions for {tf.target!r}")
        for p in tf.parents:
            if p not in by_id:
                raise UnknownParentId(f"{tf.target!r} has unknown parent {p!r}")
        if tf.target == input_id and tf.parents:
            raise OrderViolation("the input variable cannot have parents")
        tmap[tf.target] = tf
    missing = [vid for vid in ids if vid != input_id and vid not in tmap]
    if missing:
        raise MissingTransition(f"no transition for {missing}")

    parent_map = {vid: tmap[vid].parents for vid in tmap}
    order = _topological_order(ids, parent_map)
    if order[0] != input_id and input_id in order:
        order = (input_id,) + tuple(v for v in order if v != input_id)
    model = CausalModel(variables, input_id, outputs[0], MappingProxyType(tmap), order, MappingProxyType(dict(meta or {})))
    if model.children(outputs[0]):
        raise ValidationError(f"output {outputs[0]!r} must have no successors")
    return model


# --------------------------------------------------------------------- solving

@dataclass(frozen=True)
class Solution:
    """Values of every variable for one input setting."""

    values: Mapping[str, np.ndarray]

    def __getitem__(self, vid: str) -> np.ndarray:
        return self.values[vid]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Solution) or set(self.values) != set(other.values):
            return False
        return all(
            self.values[k].shape == other.values[k].shape
            and self.values[k].tobytes() == other.values[k].tobytes()
            for k in self.values
        )

    __hash__ = None  # type: ignore[assignment]


def _as_batch(inputs: Any, arity: int) -> np.ndarray:
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, arity) if arr.size != arity else arr.reshape(1, arity)
    if arr.ndim != 2 or arr.shape[1] != arity:
        raise ValidationError(f"inputs must have shape (batch, {arity}), got {np.shape(inputs)}")
    return arr


def solve_batch(
    model: CausalModel,
    inputs: Any,
    overrides: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Solve the model on a batch of inputs.

    ``overrides`` pins variables to given ``(batch, arity)`` arrays, which is
    how activation patching is expressed without building a new model.
    """
    u = _as_batch(inputs, model.input_arity)
    batch = u.shape[0]
    values: dict[str, np.ndarray] = {}
    overrides = overrides or {}
    arity = {v.id: v.arity for v in model.variables}
    for vid in model.order:
        if vid in overrides:
            val = np.asarray(overrides[vid], dtype=np.float64)
            if val.ndim == 1:
                val = np.broadcast_to(val, (batch, val.shape[0]))
            values[vid] = np.array(val, dtype=np.float64)
            continue
        tf = model.transitions.get(vid)
        if tf is None:
            values[vid] = u
            continue
        parent_vals = [values[p] for p in tf.parents]
        try:
            out = tf.evaluator(parent_vals, u)
            out = np.asarray(out, dtype=np.float64)
            if out.ndim == 1 and batch == 1 and out.shape[0] == arity[vid]:
                out = out.reshape(1, -1)
            elif out.ndim == 1 and arity[vid] == 1:
                out = out.reshape(-1, 1)
        except EvaluatorFailure:
            raise
        except Exception as exc:  # noqa: BLE001 - wrap with provenance
            raise EvaluatorFailure(vid, exc) from exc
        if out.shape != (batch, arity[vid]):
            raise EvaluatorFailure(vid, f"returned shape {out.shape}, expected {(batch, arity[vid])}")
        values[vid] = out
    return values


def solve(model: CausalModel, input_value: Any) -> Solution:
    """Solve a single input setting ``U <- input_value``."""
    batch = solve_batch(model, np.asarray(input_value, dtype=np.float64).reshape(1, -1))
    return Solution(MappingProxyType({k: v[0].copy() for k, v in batch.items()}))


# ---------------------------------------------------------------- intervention

def apply_intervention(model: CausalModel, iv: Intervention) -> CausalModel:
    """Return a copy of ``model`` whose ``iv.target`` transition is replaced."""
    if iv.target not in model.by_id:
        raise UnknownTarget(f"no variable {iv.target!r}")
    position = {vid: i for i, vid in enumerate(model.order)}
    for p in iv.new_parents:
        if p not in position:
            raise UnknownParentId(f"unknown parent {p!r}")
        if position[p] >= position[iv.target]:
            raise OrderViolation(f"{p!r} does not precede {iv.target!r}")
    if iv.target == model.input_id and iv.new_parents:
        raise OrderViolation("the input variable cannot have parents")
    tmap = dict(model.transitions)
    tmap[iv.target] = TransitionFunction(iv.target, iv.new_parents, iv.new_evaluator)
    return CausalModel(
        model.variables, model.input_id, model.output_id, MappingProxyType(tmap), model.order, model.meta
    )


def apply_interventions(model: CausalModel, ivs: Iterable[Intervention]) -> CausalModel:
    for iv in ivs:
        model = apply_intervention(model, iv)
    return model


def default_intervention_suite(model: CausalModel, inputs: Any, seed: int = 0) -> list[Intervention]:
    """One zero-ablation and one resample-ablation per hidden variable."""
    rng = np.random.default_rng(seed)
    u = _as_batch(inputs, model.input_arity)
    sol = solve_batch(model, u)
    suite = []
    for vid in model.hidden_ids:
        arity = model.variable(vid).arity
        suite.append(Intervention.constant(vid, np.zeros(arity), f"zero({vid})"))
        row = int(rng.integers(u.shape[0]))
        suite.append(Intervention.constant(vid, sol[vid][row], f"resample({vid},{row})"))
    return suite


# ------------------------------------------------------------------------ task

@dataclass(frozen=True)
class Task:
    """A finite ordered set of input sequences with optional reference outputs."""

    alphabet_size: int
    inputs: tuple[tuple[Any, ...], ...]
    reference_outputs: np.ndarray | None = None

    def __init__(self, alphabet_size: int, inputs: Iterable[Sequence[Any]], reference_outputs: Any = None):
        rows = tuple(tuple(x) for x in inputs)
        if len(set(rows)) != len(rows):
            raise ValidationError("task inputs must be distinct")
        ref = None
        if reference_outputs is not None:
            ref = np.asarray(reference_outputs, dtype=np.float64)
            if ref.ndim == 1:
                ref = ref.reshape(-1, 1)
            if ref.shape[0] != len(rows):
                raise ValidationError("reference_outputs length must match inputs")
        object.__setattr__(self, "alphabet_size", int(alphabet_size))
        object.__setattr__(self, "inputs", rows)
        object.__setattr__(self, "reference_outputs", ref)

    def __len__(self) -> int:
        return len(self.inputs)

    def input_array(self) -> np.ndarray:
        return np.asarray(self.inputs, dtype=np.float64).reshape(len(self.inputs), -1)

    def with_reference(self, reference_outputs: Any) -> "Task":
        return Task(self.alphabet_size, self.inputs, reference_outputs)

    def to_json(self) -> dict:
        return {
            "alphabet_size": self.alphabet_size,
            "inputs": [list(x) for x in self.inputs],
            "reference_outputs": None if self.reference_outputs is None else self.reference_outputs.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Task":
        return cls(obj["alphabet_size"], obj["inputs"], obj.get("reference_outputs"))


# -------------------------------------------------------------- circuit check

@dataclass(frozen=True)
class PropertyResult:
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class CircuitReport:
    properties: Mapping[str, PropertyResult]
    max_deviation: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties.values())


def check_circuit(model: CausalModel, task: Task, tolerance: float = EXACT_TOL) -> CircuitReport:
    """Check the four circuit properties against the task's reference outputs."""
    if task.reference_outputs is None:
        raise ValidationError("task needs reference_outputs to act as h(S)")
    props: dict[str, PropertyResult] = {}
    values = None
    try:
        values = solve_batch(model, task.input_array())
        props["input_accepts_task"] = PropertyResult(True)
    except (EvaluatorFailure, ValidationError) as exc:
        props["input_accepts_task"] = PropertyResult(False, str(exc))

    if values is None:
        props["real_hidden"] = PropertyResult(False, "model could not be solved")
    else:
        bad = [
            vid for vid in model.hidden_ids
            if not np.all(np.isfinite(values[vid])) or values[vid].shape[1] != model.variable(vid).arity
        ]
        props["real_hidden"] = PropertyResult(not bad, f"non-real: {bad}" if bad else "")

    succ = model.children(model.output_id)
    props["terminal_output"] = PropertyResult(not succ, f"successors: {list(succ)}" if succ else "")

    deviation = float("inf")
    if values is not None:
        out = values[model.output_id]
        ref = task.reference_outputs
        if out.shape == ref.shape:
            deviation = float(np.max(np.linalg.norm(out - ref, axis=1))) if len(task) else 0.0
            props["matches_reference"] = PropertyResult(deviation <= tolerance, f"max deviation {deviation:.3g}")
        else:
            props["matches_reference"] = PropertyResult(False, f"shape {out.shape} vs {ref.shape}")
    else:
        props["matches_reference"] = PropertyResult(False, "model could not be solved")
    return CircuitReport(MappingProxyType(props), deviation)


# ------------------------------------------------------------------ alignment

ValueMap = Callable[[list[np.ndarray]], np.ndarray]
InterventionMap = Callable[[Intervention], "Intervention | None"]


def _concat_values(vals: list[np.ndarray]) -> np.ndarray:
    return vals[0] if len(vals) == 1 else np.concatenate(vals, axis=1)


@dataclass(frozen=True)
class Alignment:
    """A partial map ``pi`` from low-level variable subsets to high-level variables.

    ``variable_map[high] = (low_ids, value_fn)``; ``value_fn`` receives the
    solved ``(batch, arity)`` arrays of ``low_ids`` in order. ``intervention_map``
    sends a low-level intervention to its high-level counterpart, or ``None``
    when it has none.
    """

    variable_map: Mapping[str, tuple[tuple[str, ...], ValueMap]]
    intervention_map: InterventionMap
    low_ids: frozenset[str]
    high_ids: frozenset[str]

    def __post_init__(self):
        seen: set[str] = set()
        for high, (lows, _) in self.variable_map.items():
            if high not in self.high_ids:
                raise ValidationError(f"{high!r} is not a high-level variable")
            for low in lows:
                if low not in self.low_ids:
                    raise ValidationError(f"{low!r} is not a low-level variable")
                if low in seen:
                    raise ValidationError(f"preimages overlap on {low!r}")
                seen.add(low)

    @property
    def discarded(self) -> frozenset[str]:
        used = {low for lows, _ in self.variable_map.values() for low in lows}
        return frozenset(self.low_ids - used)

    def apply(self, high: str, low_values: Mapping[str, np.ndarray]) -> np.ndarray:
        lows, fn = self.variable_map[high]
        return fn([low_values[v] for v in lows])

    @classmethod
    def identity(cls, model: CausalModel) -> "Alignment":
        ids = frozenset(model.by_id)
        return cls(
            MappingProxyType({v: ((v,), _concat_values) for v in model.order}),
            lambda iv: iv,
            ids,
            ids,
        )


def make_alignment(
    low: CausalModel,
    high: CausalModel,
    variable_map: Mapping[str, tuple[Sequence[str], ValueMap | None]],
    intervention_map: InterventionMap | None = None,
) -> Alignment:
    """Convenience constructor; ``None`` value maps concatenate the preimage."""
    vm = {h: (tuple(lows), fn or _concat_values) for h, (lows, fn) in variable_map.items()}
    return Alignment(
        MappingProxyType(vm), intervention_map or (lambda iv: None), frozenset(low.by_id), frozenset(high.by_id)
    )


def trivial_interpretation(circuit: CausalModel) -> tuple[CausalModel, Alignment]:
    """The two-variable model ``out <- h(U)`` plus its alignment from ``circuit``.

    Everything except the input and output of the circuit is discarded; only
    interventions on those two variables have high-level counterparts.
    """
    u_id, out_id = circuit.input_id, circuit.output_id

    def h(parents, u, _circuit=circuit):
        # read U's solved value so interventions on U propagate
        return solve_batch(_circuit, parents[0])[_circuit.output_id]

    high = build_model(
        [Variable(u_id, circuit.input_arity, "input"), Variable(out_id, circuit.variable(out_id).arity, "output")],
        u_id,
        [TransitionFunction(out_id, [u_id], h)],
    )

    def omega(iv: Intervention) -> Intervention | None:
        if iv.target in (u_id, out_id) and set(iv.new_parents) <= {u_id}:
            return iv
        return None

    alignment = make_alignment(circuit, high, {u_id: ([u_id], None), out_id: ([out_id], None)}, omega)
    return high, alignment


@dataclass(frozen=True)
class AbstractionReport:
    observational_residual: float
    interventional_residuals: Mapping[str, float]
    tolerance: float

    @property
    def max_interventional_residual(self) -> float:
        return max(self.interventional_residuals.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return (
            self.observational_residual <= self.tolerance
            and self.max_interventional_residual <= self.tolerance
        )


def _alignment_residual(a: Alignment, low_vals, high_vals) -> float:
    worst = 0.0
    for high in a.variable_map:
        mapped = np.asarray(a.apply(high, low_vals), dtype=np.float64)
        target = high_vals[high]
        if mapped.shape != target.shape:
            return float("inf")
        if mapped.size:
            worst = max(worst, float(np.max(np.linalg.norm(mapped - target, axis=1))))
    return worst


def check_abstraction(
    low: CausalModel,
    high: CausalModel,
    a: Alignment,
    task: Task,
    intervention_suite: Sequence[Intervention] = (),
    tolerance: float = EXACT_TOL,
) -> AbstractionReport:
    """Observational and interventional consistency of ``a`` over ``task``.

    The suite is finite, so a pass is evidence rather than proof.
    """
    missing = sorted(set(high.by_id) - set(a.variable_map))
    if missing:
        raise UnmappedHighVariable(f"high-level variables without a preimage: {missing}")
    u = task.input_array()
    obs = _alignment_residual(a, solve_batch(low, u), solve_batch(high, u))
    residuals: dict[str, float] = {}
    for i, iv in enumerate(intervention_suite):
        mapped = a.intervention_map(iv)
        if mapped is None:
            raise InterventionOutsideDomain(f"{iv.label} has no high-level counterpart")
        low_iv = solve_batch(apply_intervention(low, iv), u)
        high_iv = solve_batch(apply_intervention(high, mapped), u)
        residuals[f"{i}:{iv.label}"] = _alignment_residual(a, low_iv, high_iv)
    return AbstractionReport(obs, MappingProxyType(residuals), tolerance)


@dataclass(frozen=True)
class FaithfulnessBudget:
    eta: float

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValidationError("eta must be nonnegative")


def output_gap(circuit: CausalModel, interp: CausalModel, a: Alignment, task: Task) -> float:
    """Largest per-input distance between the two models' outputs."""
    u = task.input_array()
    low_vals = solve_batch(circuit, u)
    high_out = solve_batch(interp, u)[interp.output_id]
    low_out = low_vals[circuit.output_id]
    if low_out.shape != high_out.shape:
        low_out = np.asarray(a.apply(interp.output_id, low_vals))
    if not len(task):
        return 0.0
    return float(np.max(np.linalg.norm(low_out - high_out, axis=1)))


def check_interpretation(
    circuit: CausalModel,
    interp: CausalModel,
    a: Alignment,
    task: Task,
    budget: FaithfulnessBudget | float,
    intervention_suite: Sequence[Intervention] = (),
    tolerance: float = EXACT_TOL,
) -> bool:
    """True iff ``a`` is a verified abstraction and outputs agree within eta."""
    eta = budget.eta if isinstance(budget, FaithfulnessBudget) else float(budget)
    report = check_abstraction(circuit, interp, a, task, intervention_suite, tolerance)
    return report.passed and output_gap(circuit, interp, a, task) <= eta


def compose_alignments(a12: Alignment, a23: Alignment) -> Alignment:
    """Chain two alignments ``L -> M`` and ``M -> H`` into ``L -> H``."""
    if a12.high_ids != a23.low_ids:
        raise DomainMismatch("intermediate variable sets differ")
    composite: dict[str, tuple[tuple[str, ...], ValueMap]] = {}
    for high, (mids, fn23) in a23.variable_map.items():
        lows: list[str] = []
        spans: list[tuple[tuple[str, ...], ValueMap]] = []
        for mid in mids:
            if mid not in a12.variable_map:
                raise DomainMismatch(f"{mid!r} has no preimage in the first alignment")
            mid_lows, fn12 = a12.variable_map[mid]
            spans.append((mid_lows, fn12))
            lows.extend(mid_lows)

        def fn(vals, _spans=tuple(spans), _fn23=fn23):
            it = iter(vals)
            mid_vals = [fn12([next(it) for _ in lows_]) for lows_, fn12 in _spans]
            return _fn23(mid_vals)

        composite[high] = (tuple(lows), fn)

    def omega(iv: Intervention) -> Intervention | None:
        mid = a12.intervention_map(iv)
        return None if mid is None else a23.intervention_map(mid)

    return Alignment(MappingProxyType(composite), omega, a12.low_ids, a23.high_ids)


# -------------------------------------------------------------- serialization

def model_to_json(model: CausalModel) -> dict:
    transitions = []
    for vid in model.order:
        tf = model.transitions.get(vid)
        if tf is None:
            continue
        if not isinstance(tf.evaluator, _ops.Op):
            raise SerializationError(f"transition of {vid!r} is not a whitelisted op")
        transitions.append({"target": vid, "parents": list(tf.parents), "op": tf.evaluator.to_json()})
    doc = {
        "variables": [{"id": v.id, "arity": v.arity, "kind": v.kind} for v in model.variables],
        "transitions": transitions,
        "order": list(model.order),
    }
    if model.meta:
        doc["meta"] = dict(model.meta)
    return doc


def model_from_json(doc: Mapping[str, Any]) -> CausalModel:
    try:
        variables = [Variable(v["id"], int(v["arity"]), v["kind"]) for v in doc["variables"]]
        transitions = [
            TransitionFunction(t["target"], t["parents"], _ops.op_from_json(t["op"])) for t in doc["transitions"]
        ]
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed model document: {exc}") from exc
    inputs = [v.id for v in variables if v.kind == "input"]
    if len(inputs) != 1:
        raise SerializationError("model document needs exactly one input variable")
    model = build_model(variables, inputs[0], transitions, doc.get("meta"))
    declared = tuple(doc.get("order", ()))
    if declared and set(declared) == set(model.order):
        pos = {v: i for i, v in enumerate(declared)}
        for vid in declared:
            if any(pos[p] >= pos[vid] for p in model.parents(vid)):
                raise SerializationError(f"declared order puts a parent after {vid!r}")
        model = CausalModel(
            model.variables, model.input_id, model.output_id, model.transitions, declared, model.meta
        )
    return model


def dumps_model(model: CausalModel) -> str:
    return json.dumps(model_to_json(model), sort_keys=True, separators=(",", ":"))


def save_model(model: CausalModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: str | Path) -> CausalModel:
    return model_from_json(json.loads(Path(path).read_text()))


def models_equal(a: CausalModel, b: CausalModel) -> bool:
    """Structural and bitwise parameter equality of two serializable models."""
    return dumps_model(a) == dumps_model(b)
