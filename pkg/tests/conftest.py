import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from interpequiv.causal import Task, TransitionFunction, Variable, build_model
from interpequiv.ops import Affine, Relu
from interpequiv.rasp import CompileConfig, builtin_interpretations, compile_program

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def chain_model():
    """U -> v1 = U + 1 -> v2 = 2 v1, scalar throughout."""
    return build_model(
        [Variable("U", 1, "input"), Variable("v1", 1), Variable("v2", 1, "output")],
        "U",
        [
            TransitionFunction("v1", ["U"], Affine([[1.0]], [1.0])),
            TransitionFunction("v2", ["v1"], Affine([[2.0]])),
        ],
    )


def mlp(rng, widths, scale=1.0):
    """Random ReLU chain; ``meta["rho"]`` pools each hidden layer."""
    variables = [Variable("U", widths[0], "input")]
    transitions, rho, prev = [], [], "U"
    for k, w in enumerate(widths[1:-1]):
        vid = f"h{k}"
        variables.append(Variable(vid, w))
        W = rng.normal(size=(widths[k], w)) * scale / np.sqrt(widths[k])
        transitions.append(TransitionFunction(vid, [prev], Relu(W, rng.normal(size=w) * 0.1)))
        prev = vid
        rho.append([vid])
    variables.append(Variable("out", widths[-1], "output"))
    W = rng.normal(size=(widths[-2], widths[-1])) / np.sqrt(widths[-2])
    transitions.append(TransitionFunction("out", [prev], Affine(W)))
    return build_model(variables, "U", transitions, {"rho": rho})


def all_sequences(n):
    return list(itertools.product(range(1, n + 1), repeat=n))


@pytest.fixture(scope="session")
def compiled4():
    return [compile_program(p, CompileConfig(max_len=4)) for p in builtin_interpretations(4)]


@pytest.fixture(scope="session")
def task4(compiled4):
    return compiled4[0].make_task(all_sequences(4))


@pytest.fixture
def gaussian_task():
    rng = np.random.default_rng(0)
    return Task(4, [tuple(r) for r in rng.normal(size=(60, 4))])
