"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (visible with or
without ``-s``) before asserting, so a full run doubles as a report.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import all_sequences, mlp
from interpequiv import cli
from interpequiv.causal import Task, TransitionFunction, Variable, build_model, solve_batch
from interpequiv.congruity import CongruityConfig, set_congruity
from interpequiv.equiv import (
    DistillationMap,
    compression,
    coverage_trial,
    distance_matrix,
    distilled,
    empirical_diameter,
    greedy_covering,
    hausdorff,
    sample_size_bound,
)
from interpequiv.experiment import ExperimentConfig, run_bounds, run_calibration
from interpequiv.implgen import VariantStrategy, generate_implementations
from interpequiv.ops import Constant
from interpequiv.rasp import CompileConfig, builtin_interpretations, compile_program, decide
from interpequiv.reprsim import (
    RepresentationMatrix,
    center,
    fit_constrained,
    functional_gap,
    get_reprs,
    repr_dist,
    repr_quality,
)

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(request, capsys):
    """Print one PASS/FAIL line for the criterion under test."""

    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


# ------------------------------------------------------------ calibration

@pytest.fixture(scope="module")
def calibration(tmp_path_factory):
    out = tmp_path_factory.mktemp("calibration")
    start = time.perf_counter()
    result = run_calibration(ExperimentConfig(), out)
    return result, out, time.perf_counter() - start


def test_criterion_1_calibration(calibration, verdict):
    result, _, seconds = calibration
    cfg = result.manifest["config"]
    s = result.summary
    ok = (
        (cfg["n"], len(cfg["interpretations"]), cfg["variants"], cfg["rounds"]) == (5, 6, 20, 100)
        and s["diagonal_mean"] > s["off_diagonal_mean"]
        and s["welch_p"] < 0.05
        and s["within_sorting_mean"] > s["sorting_vs_counting_mean"]
        and seconds <= 600
    )
    verdict(1, ok, f"diag {s['diagonal_mean']:.3f} off {s['off_diagonal_mean']:.3f} p {s['welch_p']:.2g} "
                   f"sorting {s['within_sorting_mean']:.3f} vs cross {s['sorting_vs_counting_mean']:.3f} "
                   f"in {seconds:.0f}s")
    assert ok, s


# --------------------------------------------------------------- compiler

def multiset_oracle(seq, n):
    return sorted(seq) == list(range(1, n + 1))


def test_criterion_2_compiler(verdict):
    mismatches, wrong, checked = 0, 0, 0
    rng = np.random.default_rng(2024)
    for n in (4, 5):
        seqs = all_sequences(n)
        for p in builtin_interpretations(n):
            c = compile_program(p, CompileConfig(max_len=n))
            out = c.run(seqs)
            mismatches += int(np.sum(np.any(out != c.reference_outputs(seqs), axis=1)))
            wrong += int(np.sum(c.decisions(out) != np.array([multiset_oracle(s, n) for s in seqs])))
            checked += len(seqs)
    n = 10
    perms = [tuple(int(v) + 1 for v in rng.permutation(n)) for _ in range(5000)]
    rand = [tuple(int(v) for v in rng.integers(1, n + 1, size=n)) for _ in range(5000)]
    seqs = perms + rand
    labels = np.array([multiset_oracle(s, n) for s in seqs])
    for p in builtin_interpretations(n):
        c = compile_program(p, CompileConfig(max_len=n))
        out = c.run(seqs)
        mismatches += int(np.sum(np.any(out != c.reference_outputs(seqs), axis=1)))
        wrong += int(np.sum(c.decisions(out) != labels))
        checked += len(seqs)
    # the interpreter itself agrees with the oracle on a sample
    interp_ok = all(decide(builtin_interpretations(n)[0], s) == multiset_oracle(s, n) for s in seqs[:200])
    accuracy = 1.0 - wrong / checked
    ok = mismatches == 0 and accuracy == 1.0 and interp_ok
    verdict(2, ok, f"{checked} compiled runs, {mismatches} mismatches, accuracy {accuracy}")
    assert ok


# ------------------------------------------------------------ pseudometric

def fista_residual(X, Y, iters=1500):
    """Independent reference solver: accelerated projected gradient with exact projection."""
    if X.shape[1] == 0 or Y.shape[1] == 0:
        return math.sqrt(np.sum(Y ** 2) / Y.shape[0])
    L = np.linalg.norm(X, 2) ** 2
    W = np.zeros((Y.shape[1], X.shape[1]))
    Z, t = W.copy(), 1.0
    for _ in range(iters):
        G = (Z @ X.T - Y.T) @ X
        U, s, Vt = np.linalg.svd(Z - G / L, full_matrices=False)
        W_next = (U * np.minimum(s, 1.0)) @ Vt
        t_next = (1 + math.sqrt(1 + 4 * t * t)) / 2
        Z = W_next + (t - 1) / t_next * (W_next - W)
        W, t = W_next, t_next
    return math.sqrt(np.sum((X @ W.T - Y) ** 2) / X.shape[0])


def contraction(rng, d_in, d_out, scale):
    M = rng.normal(size=(d_in, d_out))
    return M / np.linalg.norm(M, 2) * scale


def test_criterion_3_pseudometric(verdict):
    rng = np.random.default_rng(3)
    worst_self, asym, worst_excess = 0.0, 0, -np.inf
    for _ in range(100):
        n = int(rng.integers(20, 80))
        X = rng.normal(size=(n, int(rng.integers(2, 12))))
        Y = X @ contraction(rng, X.shape[1], int(rng.integers(2, 12)), rng.uniform(0.5, 1.5))
        Y += rng.normal(size=(n, 1)) * rng.uniform(0, 0.3)
        Z = Y @ contraction(rng, Y.shape[1], int(rng.integers(2, 12)), rng.uniform(0.5, 1.5))
        Z += rng.normal(size=(n, 1)) * rng.uniform(0, 0.3)
        mats = [X, Y, Z]
        R = [RepresentationMatrix.from_arrays([M]) for M in mats]
        worst_self = max(worst_self, *(repr_dist(r, r) for r in R))
        asym += sum(repr_dist(a, b) != repr_dist(b, a) for a, b in itertools.permutations(R, 2))
        # solver tolerance: how far each directional fit sits above the reference solver
        centred = [center(M)[0] for M in mats]
        solver_tol = max(0.0, max(fit_constrained(a, b).residual - fista_residual(a, b)
                                  for a, b in itertools.permutations(centred, 2)))
        d = {(i, j): repr_dist(R[i], R[j]) for i, j in itertools.combinations(range(3), 2)}
        for i, j, k in ((0, 2, 1), (0, 1, 2), (1, 2, 0)):
            side = d[(i, j)]
            others = d[tuple(sorted((i, k)))] + d[tuple(sorted((k, j)))]
            worst_excess = max(worst_excess, side - others - 2 * solver_tol)
    ok = worst_self <= 1e-9 and asym == 0 and worst_excess <= 0.0
    verdict(3, ok, f"max self {worst_self:.1e}, asymmetric pairs {asym}, worst triangle excess {worst_excess:.3g}")
    assert ok


# -------------------------------------------------------------- repr-comp

def test_criterion_4_repr_comp(verdict):
    rng = np.random.default_rng(4)
    task = Task(4, [tuple(r) for r in rng.normal(size=(100, 4))])
    u = task.input_array()
    held, worst = 0, -np.inf
    for _ in range(50):
        models = []
        for _ in range(2):
            hidden = [int(w) for w in rng.integers(3, 12, size=int(rng.integers(1, 4)))]
            models.append(mlp(rng, [4, *hidden, 2]))
        m1, m2 = models
        R1, R2 = get_reprs(m1, task), get_reprs(m2, task)
        d1 = repr_quality(R1, solve_batch(m1, u)["out"]).delta
        d2 = repr_quality(R2, solve_batch(m2, u)["out"]).delta
        gap = functional_gap(m1, m2, task).delta
        excess = repr_dist(R1, R2) - (d1 + d2 + gap)
        worst = max(worst, excess)
        held += excess <= 1e-6
    ok = held == 50
    verdict(4, ok, f"{held}/50 pairs within the bound, worst excess {worst:.3g}")
    assert ok


# ----------------------------------------------------------------- bounds

def test_criterion_5_bounds(verdict):
    result = run_bounds(ExperimentConfig(n=4, variants=10))
    pairs = {e["pair"] for e in result.entries if e["theorem"] != "thm3"}
    theorems = {e["theorem"] for e in result.entries}
    bad = result.violations
    ok = not bad and len(pairs) == 15 and theorems == {"thm1", "thm2", "thm3"}
    verdict(5, ok, f"{len(result.entries)} checks over {len(pairs)} pairs, {len(bad)} violations")
    assert ok, json.dumps(result.to_json()["entries"] if bad else sorted(pairs), indent=1)


# --------------------------------------------------------- congruity null

def test_criterion_6_congruity_null(verdict):
    rng = np.random.default_rng(6)
    task = Task(4, [tuple(r) for r in rng.normal(size=(40, 4))])

    def sample_set(count):
        return [get_reprs(mlp(rng, [4, 8, 3]), task) for _ in range(count)]

    same = set_congruity(sample_set(20), sample_set(20), CongruityConfig(n_rounds=400, seed=61))
    se = 0.5 / math.sqrt(400)
    rates_ok = abs(same.p1_hat - 0.5) <= 3 * se and abs(same.p2_hat - 0.5) <= 3 * se

    def cluster(count):
        centre = rng.normal(size=(40, 5))
        return [RepresentationMatrix.from_arrays([centre + 0.05 * rng.normal(size=centre.shape)])
                for _ in range(count)]

    apart = set_congruity(cluster(12), cluster(12), CongruityConfig(n_rounds=400, seed=62))
    ok = rates_ok and apart.score <= 0.1
    verdict(6, ok, f"same-distribution rates {same.p1_hat:.3f}/{same.p2_hat:.3f} (3 SE = {3 * se:.3f}), "
                   f"separated score {apart.score:.3f}")
    assert ok


# ----------------------------------------------------- sample complexity

def test_criterion_7_sample_complexity(verdict):
    c = compile_program(builtin_interpretations(4)[3], CompileConfig(max_len=4))
    task = c.make_task(all_sequences(4))
    strategies = [VariantStrategy("gaussian-perturb", m) for m in (0.5, 2.0)]
    impls = generate_implementations(c.model, task, 40, strategies, seed=7)
    phi = DistillationMap(c.model.meta["rho"][-2])
    within = distance_matrix(distilled(impls, phi, task))
    epsilon = 0.5 * float(within.max())
    cover = greedy_covering(within, epsilon)
    m = sample_size_bound(cover.size, cover.p_min(), 0.1)
    rng = np.random.default_rng(70)
    coverage = np.mean([coverage_trial(within, m, epsilon, rng) for _ in range(1000)])
    tiny = np.mean([coverage_trial(within, 2, epsilon, rng) for _ in range(1000)])
    ok = coverage >= 0.88
    verdict(7, ok, f"|set| {within.shape[0]}, C {cover.size}, p_min {cover.p_min():.3f}, m {m}, "
                   f"coverage {coverage:.3f} (m=2 gives {tiny:.3f})")
    assert ok
    # the instance is informative: cells merge and a tiny sample misses the target
    assert cover.size < within.shape[0] and tiny < 0.88


# ------------------------------------------------------- oracle equality

def vector_model(vec):
    vec = [float(v) for v in vec]
    return build_model(
        [Variable("U", 1, "input"), Variable("out", len(vec), "output")],
        "U",
        [TransitionFunction("out", [], Constant(vec))],
    )


def brute_distance(a, b, rows):
    # every row carries the same constant vector, so the per-row terms repeat
    terms = [(float(x) - float(y)) * (float(x) - float(y)) for x, y in zip(a, b)] * rows
    return math.sqrt(math.fsum(terms) / rows)


def brute_hausdorff(A, B, rows):
    forward = max(min(brute_distance(a, b, rows) for b in B) for a in A)
    backward = max(min(brute_distance(a, b, rows) for a in A) for b in B)
    return max(forward, backward)


def brute_diameter(A, rows):
    return max(brute_distance(a, b, rows) for a in A for b in A)


def test_criterion_8_oracle_equality(verdict):
    rng = np.random.default_rng(8)
    phi = DistillationMap("out")
    mismatches = 0
    for _ in range(200):
        rows, dim = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        task = Task(1, [(float(i),) for i in range(rows)])
        A = [rng.normal(size=dim) * 10 for _ in range(int(rng.integers(1, 7)))]
        B = [rng.normal(size=dim) * 10 for _ in range(int(rng.integers(1, 7)))]
        full = A + B
        picks = [int(i) for i in rng.integers(0, len(full), size=int(rng.integers(2, 6)))]
        models_a, models_b = [vector_model(v) for v in A], [vector_model(v) for v in B]
        models_full = models_a + models_b
        mismatches += hausdorff(models_a, models_b, phi, task) != brute_hausdorff(A, B, rows)
        mismatches += compression(models_full, phi, task) != brute_diameter(full, rows)
        mismatches += (empirical_diameter([models_full[i] for i in picks], phi, task)
                       != brute_diameter([full[i] for i in picks], rows))
    ok = mismatches == 0
    verdict(8, ok, f"{mismatches} mismatches over 200 instances x 3 quantities")
    assert ok


# ------------------------------------------------------------- determinism

def test_criterion_9_determinism(calibration, tmp_path, verdict):
    _, first_dir, _ = calibration
    code = cli.main(["calibrate", "--out", str(tmp_path / "again"), "--json", str(tmp_path / "summary.json")])
    names = ("matrix.csv", "reports.json", "manifest.json")
    same = [(first_dir / f).read_bytes() == (tmp_path / "again" / f).read_bytes() for f in names]
    ok = code == 0 and all(same)
    verdict(9, ok, ", ".join(f"{f} {'identical' if s else 'differs'}" for f, s in zip(names, same)))
    assert ok
