"""End-to-end runs over the builtin permutation detectors.

``run_calibration`` compiles the selected interpretations, draws variant
sets, and computes the congruity matrix. ``run_bounds`` measures every term
of the three theorem checks for each interpretation pair. Both are fully
determined by the config; artifacts contain no wall-clock data unless asked.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import time
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .causal import Task, solve_batch
from .congruity import (
    CongruityConfig,
    CongruityReport,
    congruity_matrix,
    diagonal_test,
    implementation_reprs,
)
from .equiv import (
    DEFAULT_LIP_SAFETY,
    DEFAULT_OMEGA_CAP,
    BoundReport,
    DistillationMap,
    check_thm1,
    check_thm2,
    check_thm3,
    default_distillation,
    diameter_from_matrix,
    distance_matrix,
    distilled,
    hausdorff_from_matrix,
    set_omega,
)
from .errors import InterpEquivError, MissingArtifact, ValidationError
from .implgen import ImplementationSet, VariantStrategy, generate_implementations
from .rasp import BUILTIN_NAMES, COUNTING_GROUP, SORTING_GROUP, CompileConfig, builtin_interpretations, compile_program
from .reprsim import RepresentationMatrix, default_pooling, functional_gap, lipschitz_estimate, repr_dist, repr_quality

CALIBRATION_STRATEGIES = tuple(VariantStrategy("gaussian-perturb", m) for m in (0.5, 1.0, 2.0, 4.0))

STAGE_TASK, STAGE_VARIANTS, STAGE_CONGRUITY = 0, 1, 2
MATRIX_FILE, REPORTS_FILE, MANIFEST_FILE, SVG_FILE = "matrix.csv", "reports.json", "manifest.json", "matrix.svg"
CSV_HEADER = ("row", "col", "score", "ci_lo", "ci_hi", "verdict")


class StageError(InterpEquivError):
    """A pipeline stage failed; keeps the cause's exit category."""

    def __init__(self, stage: str, cause: InterpEquivError):
        self.stage = stage
        self.cause = cause
        self.code = cause.code
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 5
    interpretations: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    variants: int = 20
    rounds: int = 100
    task_samples: int = 200
    seed: int = 0
    bootstrap_samples: int = 20
    level: float = 0.95
    null_band: float = 0.5
    strategies: tuple[VariantStrategy, ...] = CALIBRATION_STRATEGIES
    final_layer_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "interpretations", tuple(int(i) for i in self.interpretations))
        object.__setattr__(self, "strategies", tuple(
            s if isinstance(s, VariantStrategy) else VariantStrategy.from_json(s) for s in self.strategies
        ))
        if not 3 <= self.n <= 10:
            raise ValidationError("n must lie in [3, 10]")
        ids = self.interpretations
        if len(ids) < 2 or len(set(ids)) != len(ids) or not set(ids) <= set(range(1, 7)):
            raise ValidationError("interpretations must be at least two distinct ids from 1..6")
        if self.variants < 3:
            raise ValidationError("variants must be >= 3 so each set has four members")
        if self.rounds < 1:
            raise ValidationError("rounds must be >= 1")
        if self.task_samples < 0:
            raise ValidationError("task_samples must be >= 0")
        if not self.strategies:
            raise ValidationError("at least one strategy is required")
        CongruityConfig(self.rounds, 1, self.bootstrap_samples, self.level, 0, self.null_band)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["interpretations"] = list(self.interpretations)
        doc["strategies"] = [s.to_json() for s in self.strategies]
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def names(self) -> list[str]:
        return [BUILTIN_NAMES[i - 1] for i in self.interpretations]


def stage_seed(seed: int, stage: int) -> int:
    state = np.random.SeedSequence(seed, spawn_key=(stage,)).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def calibration_sequences(n: int, samples: int, seed: int) -> list[tuple[int, ...]]:
    """All permutations of ``1..n`` (sampled when there are too many) plus random sequences."""
    rng = np.random.default_rng(seed)
    if math.factorial(n) <= 720:
        seqs = list(itertools.permutations(range(1, n + 1)))
    else:
        seqs = [tuple(int(v) + 1 for v in rng.permutation(n)) for _ in range(samples)]
    seqs += [tuple(int(v) for v in rng.integers(1, n + 1, size=n)) for _ in range(samples)]
    return list(dict.fromkeys(seqs))


@dataclass
class Groups:
    names: list[str]
    compiled: list[Any]
    task: Task
    sets: list[ImplementationSet]


def build_groups(cfg: ExperimentConfig) -> Groups:
    programs = builtin_interpretations(cfg.n)
    try:
        compiled = [compile_program(programs[i - 1], CompileConfig(max_len=cfg.n)) for i in cfg.interpretations]
    except InterpEquivError as exc:
        raise StageError("compile", exc) from exc
    task = compiled[0].make_task(calibration_sequences(cfg.n, cfg.task_samples, stage_seed(cfg.seed, STAGE_TASK)))
    sets = []
    variant_seed = stage_seed(cfg.seed, STAGE_VARIANTS)
    for k, c in enumerate(compiled):
        try:
            sets.append(generate_implementations(c.model, task, cfg.variants, cfg.strategies,
                                                 seed=variant_seed, stage=cfg.interpretations[k]))
        except InterpEquivError as exc:
            raise StageError(f"variants:{cfg.names()[k]}", exc) from exc
    return Groups(cfg.names(), compiled, task, sets)


def group_reprs(groups: Groups, final_layer_only: bool = True) -> list[list[RepresentationMatrix]]:
    return [
        implementation_reprs(s, groups.task, default_pooling(s.base, final_only=final_layer_only))
        for s in groups.sets
    ]


# ------------------------------------------------------------- calibration

@dataclass
class CalibrationResult:
    names: list[str]
    reports: list[list[CongruityReport]]
    summary: dict[str, Any]
    manifest: dict[str, Any]
    files: dict[str, bytes] = field(default_factory=dict)

    @property
    def scores(self) -> np.ndarray:
        return np.array([[r.score for r in row] for row in self.reports])


def _fmt(x: float) -> str:
    return repr(float(x))


def matrix_csv(names: Sequence[str], reports: Sequence[Sequence[CongruityReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for i, row in enumerate(reports):
        for j, rep in enumerate(row):
            writer.writerow((names[i], names[j], _fmt(rep.score), _fmt(rep.ci[0]), _fmt(rep.ci[1]), rep.verdict))
    return buf.getvalue()


def summarize(names: Sequence[str], interpretations: Sequence[int], scores: np.ndarray) -> dict[str, Any]:
    diag, off, p = diagonal_test(scores)
    summary: dict[str, Any] = {"diagonal_mean": diag, "off_diagonal_mean": off, "welch_p": p}
    sorting = [k for k, i in enumerate(interpretations) if i - 1 in SORTING_GROUP]
    counting = [k for k, i in enumerate(interpretations) if i - 1 in COUNTING_GROUP]
    within = [scores[a, b] for a in sorting for b in sorting if a != b]
    across = [scores[a, b] for a in sorting for b in counting]
    summary["within_sorting_mean"] = float(np.mean(within)) if within else None
    summary["sorting_vs_counting_mean"] = float(np.mean(across)) if across else None
    return summary


def _dump(doc: Any) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def run_calibration(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                    record_timestamps: bool = False) -> CalibrationResult:
    started = time.time()
    groups = build_groups(cfg)
    reprs = group_reprs(groups, cfg.final_layer_only)
    ccfg = CongruityConfig(cfg.rounds, 1, cfg.bootstrap_samples, cfg.level,
                           stage_seed(cfg.seed, STAGE_CONGRUITY), cfg.null_band)
    try:
        reports = congruity_matrix(reprs, None, ccfg)
    except InterpEquivError as exc:
        raise StageError("congruity", exc) from exc
    names = groups.names
    scores = np.array([[r.score for r in row] for row in reports])
    summary = summarize(names, cfg.interpretations, scores)

    csv_bytes = matrix_csv(names, reports).encode()
    reports_doc = {
        "names": names,
        "summary": summary,
        "entries": [
            {"row": names[i], "col": names[j], **reports[i][j].to_json()}
            for i in range(len(names)) for j in range(len(names))
        ],
    }
    reports_bytes = _dump(reports_doc)
    manifest = {
        "tool_version": __version__,
        "config": cfg.to_json(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "stage_seeds": {
            "task": stage_seed(cfg.seed, STAGE_TASK),
            "variants": stage_seed(cfg.seed, STAGE_VARIANTS),
            "congruity": stage_seed(cfg.seed, STAGE_CONGRUITY),
        },
        "task_size": len(groups.task),
        "variant_hashes": {
            names[k]: [p["sha256"] for p in s.provenance] for k, s in enumerate(groups.sets)
        },
        "failed_rounds": {
            f"{names[i]}|{names[j]}": list(reports[i][j].failed_rounds)
            for i in range(len(names)) for j in range(len(names)) if reports[i][j].failed_rounds
        },
        "files": {
            MATRIX_FILE: hashlib.sha256(csv_bytes).hexdigest(),
            REPORTS_FILE: hashlib.sha256(reports_bytes).hexdigest(),
        },
        "timestamps": {"started": started, "finished": time.time()} if record_timestamps else None,
    }
    files = {MATRIX_FILE: csv_bytes, REPORTS_FILE: reports_bytes, MANIFEST_FILE: _dump(manifest)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            (out / name).write_bytes(data)
    return CalibrationResult(names, reports, summary, manifest, files)


# ------------------------------------------------------------------ bounds

@dataclass
class BoundsResult:
    entries: list[dict[str, Any]]
    notes: list[str]

    @property
    def violations(self) -> list[dict[str, Any]]:
        return [e for e in self.entries if not e["report"].holds]

    def to_json(self) -> dict:
        return {
            "entries": [{**{k: v for k, v in e.items() if k != "report"}, "report": e["report"].to_json()}
                        for e in self.entries],
            "violations": len(self.violations),
            "notes": self.notes,
        }


def run_bounds(cfg: ExperimentConfig, tol: float = 1e-6, omega_cap: float | None = DEFAULT_OMEGA_CAP,
               lip_safety: float = DEFAULT_LIP_SAFETY, phi: DistillationMap | None = None) -> BoundsResult:
    """Every theorem check for every interpretation pair, both directions for the vote bound."""
    phi = phi or default_distillation()
    groups = build_groups(cfg)
    task = groups.task
    reprs = group_reprs(groups, cfg.final_layer_only)
    phis = [distilled(s, phi, task) for s in groups.sets]
    kappas = [diameter_from_matrix(distance_matrix(p)) for p in phis]
    omegas = [set_omega(r, p, omega_cap) for r, p in zip(reprs, phis)]
    outputs = [solve_batch(s.base, task.input_array())[s.base.output_id] for s in groups.sets]
    deltas = [repr_quality(r[0], h).delta for r, h in zip(reprs, outputs)]
    notes: list[str] = []

    members = [r for rs in reprs for r in rs]
    offsets = np.cumsum([0] + [len(rs) for rs in reprs])
    full = np.zeros((len(members), len(members)))
    for a in range(len(members)):
        for b in range(a + 1, len(members)):
            full[a, b] = full[b, a] = repr_dist(members[a], members[b])

    def block(i: int, j: int) -> np.ndarray:
        return full[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]]

    entries: list[dict[str, Any]] = []
    names = groups.names
    for i, j in itertools.combinations(range(len(names)), 2):
        si, sj = groups.sets[i], groups.sets[j]
        d_interp = hausdorff_from_matrix(distance_matrix(phis[i], phis[j]))
        d_repr = float(block(i, j)[0, 0])
        gap = functional_gap(si.base, sj.base, task).delta
        pairs = [(a, b) for a in (si.base, *si.variants[:2]) for b in (sj.base, *sj.variants[:2])]
        cross_impl = distance_matrix(phis[i][:3], phis[j][:3]).ravel().tolist()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            lip = lipschitz_estimate(pairs, task, default_pooling(si.base, final_only=cfg.final_layer_only),
                                     cross_impl)
        if caught:
            notes.append(f"{names[i]}|{names[j]}: no pair with positive implementation distance; "
                         "Lipschitz estimate set to 0")
        pair = f"{names[i]}|{names[j]}"
        bundle1 = {
            "d_interp": d_interp, "kappa_1": kappas[i], "kappa_2": kappas[j],
            "omega": max(omegas[i], omegas[j]), "d_repr": d_repr,
            "delta_1": deltas[i], "delta_2": deltas[j], "Delta": gap,
        }
        entries.append({"pair": pair, "theorem": "thm1", "report": check_thm1(bundle1, tol)})
        bundle2 = {
            "epsilon_equiv": d_interp, "lipschitz": lip, "delta_1": deltas[i],
            "delta_2": deltas[j], "Delta": gap, "d_repr": d_repr,
        }
        entries.append({"pair": pair, "theorem": "thm2", "report": check_thm2(bundle2, tol, lip_safety)})
        for a, b in ((i, j), (j, i)):
            report = check_thm3(block(a, a), block(a, b), kappas[a], d_interp)
            entries.append({"pair": f"{names[a]}->{names[b]}", "theorem": "thm3", "report": report})
    return BoundsResult(entries, notes)


# ------------------------------------------------------------------ report

def load_matrix(directory: str | Path) -> tuple[list[str], np.ndarray, list[list[str]]]:
    path = Path(directory) / MATRIX_FILE
    if not path.exists():
        raise MissingArtifact(f"{path} does not exist")
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MissingArtifact(f"{path} has no entries")
    names = list(dict.fromkeys(r["row"] for r in rows))
    index = {name: k for k, name in enumerate(names)}
    scores = np.full((len(names), len(names)), np.nan)
    verdicts = [[""] * len(names) for _ in names]
    for r in rows:
        if r["col"] not in index:
            raise MissingArtifact(f"{path}: column {r['col']!r} has no row")
        a, b = index[r["row"]], index[r["col"]]
        scores[a, b] = float(r["score"])
        verdicts[a][b] = r["verdict"]
    if np.isnan(scores).any():
        raise MissingArtifact(f"{path} does not hold a full matrix")
    return names, scores, verdicts


def _colour(score: float) -> str:
    level = int(round(255 * (1.0 - min(max(score, 0.0), 1.0))))
    return f"#{level:02x}{level:02x}ff"


def matrix_svg(names: Sequence[str], scores: np.ndarray, verdicts: Sequence[Sequence[str]], cell: int = 56) -> str:
    """Heatmap with one square per entry; a dot marks entries whose verdict is equivalent."""
    size = len(names)
    margin = 110
    width = height = margin + cell * size + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="monospace" font-size="11">']
    for k, name in enumerate(names):
        y = margin + k * cell + cell // 2 + 4
        parts.append(f'<text x="{margin - 6}" y="{y}" text-anchor="end">{name}</text>')
        x = margin + k * cell + cell // 2
        parts.append(f'<text x="{x}" y="{margin - 8}" text-anchor="end" '
                     f'transform="rotate(-45 {x} {margin - 8})">{name}</text>')
    for a in range(size):
        for b in range(size):
            x, y = margin + b * cell, margin + a * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="{_colour(scores[a, b])}" stroke="#444"/>')
            parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" '
                         f'text-anchor="middle">{scores[a, b]:.2f}</text>')
            if verdicts[a][b] == "equivalent-not-rejected":
                parts.append(f'<circle cx="{x + cell - 8}" cy="{y + 8}" r="3" fill="#000"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report(directory: str | Path, svg: bool = True) -> str:
    """Text summary of a calibration directory; also writes the heatmap when ``svg``."""
    names, scores, verdicts = load_matrix(directory)
    lines = ["congruity matrix", ""]
    width = max(len(n) for n in names) + 2
    lines.append(" " * width + "".join(f"{n[:8]:>10}" for n in names))
    for a, name in enumerate(names):
        lines.append(f"{name:<{width}}" + "".join(f"{scores[a, b]:>10.3f}" for b in range(len(names))))
    lines.append("")
    diag, off, p = diagonal_test(scores) if len(names) > 1 else (float(scores[0, 0]), float("nan"), float("nan"))
    lines.append(f"diagonal mean {diag:.3f}, off-diagonal mean {off:.3f}, one-sided Welch p = {p:.3g}")
    ids = [BUILTIN_NAMES.index(n) for n in names if n in BUILTIN_NAMES]
    if len(ids) == len(names):
        s = summarize(names, [i + 1 for i in ids], scores)
        if s["within_sorting_mean"] is not None and s["sorting_vs_counting_mean"] is not None:
            relation = "above" if s["within_sorting_mean"] > s["sorting_vs_counting_mean"] else "not above"
            lines.append(f"within sorting group {s['within_sorting_mean']:.3f} is {relation} "
                         f"sorting vs counting {s['sorting_vs_counting_mean']:.3f}")
    equivalent = sum(v == "equivalent-not-rejected" for row in verdicts for v in row)
    lines.append(f"{equivalent} of {len(names) ** 2} entries not rejected as equivalent")
    if svg:
        (Path(directory) / SVG_FILE).write_text(matrix_svg(names, scores, verdicts))
    return "\n".join(lines) + "\n"


def bound_report_from_json(doc: Mapping[str, Any]) -> BoundReport:
    return BoundReport(doc["theorem"], doc["lhs"], doc["rhs"], dict(doc["terms"]), doc["tolerance"],
                       doc.get("sense", "<="))
