import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import all_sequences
from interpequiv.causal import COMPILED_TOL, check_interpretation
from interpequiv.errors import (
    AlphabetViolation,
    CapacityExceeded,
    RaspSyntaxError,
    TypeMismatch,
    UnknownPrimitive,
    ValidationError,
)
from interpequiv.rasp import (
    BUILTIN_NAMES,
    COUNTING_GROUP,
    SORTING_GROUP,
    CompileConfig,
    aggregate_values,
    builtin_interpretations,
    builtin_source,
    compile_program,
    decide,
    interpret,
    is_permutation,
    parse_program,
    required_layers,
    source_map_interventions,
)

WORD = "alphabet c,o,d,e\n"


def brute_is_permutation(seq, n):
    counts = [0] * (n + 1)
    for v in seq:
        counts[v] += 1
    return all(c == 1 for c in counts[1:])


# ------------------------------------------------------------------ parsing

def test_passthrough_program():
    p = parse_program(WORD + "out = tokens\n")
    assert p.output_node.op == "tokens"


def test_non_boolean_predicate():
    with pytest.raises(TypeMismatch):
        parse_program(WORD + "s = select(tokens, tokens, lambda k, q: k + q)\nout = aggregate(s, tokens)\n")


def test_sort_diff_has_four_definitions():
    p = builtin_interpretations(5)[0]
    assert list(p.sops) == ["sorted", "nxt", "diff", "out"]


def test_syntax_error_position():
    with pytest.raises(RaspSyntaxError) as info:
        parse_program("alphabet 1,2\nout = tokens +\n")
    assert info.value.line == 2


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitive):
        parse_program("alphabet 1,2\nout = frobnicate(tokens)\n")


# ------------------------------------------------------------- interpreter

def test_tokens_and_indices():
    assert interpret(parse_program(WORD + "out = tokens\n"), "code") == ["c", "o", "d", "e"]
    assert interpret(parse_program(WORD + "out = indices\n"), "code") == [0, 1, 2, 3]


def test_aggregate_example():
    assert aggregate_values([[1, 0, 0], [0, 0, 0], [1, 1, 0]], [10, 20, 30]) == [10, 0, 15]


def test_scaled_indices():
    assert interpret(parse_program(WORD + "out = 3 * indices\n"), "code") == [0, 3, 6, 9]


def test_alphabet_violation():
    with pytest.raises(AlphabetViolation):
        interpret(parse_program(WORD + "out = tokens\n"), "cat")


def test_builtin_examples():
    for p in builtin_interpretations(3):
        assert decide(p, [3, 1, 2]) is True
        assert decide(p, [1, 2, 2]) is False


def test_builtins_match_multiset_oracle_n4():
    for p in builtin_interpretations(4):
        for seq in all_sequences(4):
            assert decide(p, seq) == brute_is_permutation(seq, 4), seq


def test_builtin_metadata():
    assert len(BUILTIN_NAMES) == 6
    assert set(SORTING_GROUP) | set(COUNTING_GROUP) == set(range(6))
    with pytest.raises(ValidationError):
        builtin_interpretations(2)
    assert builtin_source(0, 3).startswith("alphabet 1,2,3")


@given(st.integers(3, 10), st.data())
def test_is_permutation_helper(n, data):
    seq = data.draw(st.lists(st.integers(1, n), min_size=n, max_size=n))
    assert is_permutation(seq, n) == brute_is_permutation(seq, n)


# ---------------------------------------------------------------- compiler

def test_passthrough_compiles_without_attention():
    p = parse_program(WORD + "out = tokens\n")
    c = compile_program(p, CompileConfig(max_len=4, pad_heads=0, pad_mlps=0))
    assert c.layers == 0
    seqs = list(itertools.product("code", repeat=4))
    assert np.array_equal(c.run(seqs), c.reference_outputs(seqs))


def test_count_duplicates_exhaustive_n5():
    c = compile_program(builtin_interpretations(5)[4], CompileConfig(max_len=5))
    seqs = all_sequences(5)
    assert np.array_equal(c.run(seqs), c.reference_outputs(seqs))


def two_aggregate_program():
    return parse_program(
        "alphabet 1,2,3\n"
        "a = aggregate(select(indices, indices, lambda k, q: k == q), tokens)\n"
        "out = aggregate(select(indices, indices, lambda k, q: k == q), a)\n"
    )


def attention_depth(program):
    """Longest chain of aggregate-like nodes: an independent depth oracle."""
    memo = {}

    def depth(node):
        if node.uid not in memo:
            below = max((depth(a) for a in node.args), default=0)
            memo[node.uid] = below + (node.op in ("aggregate", "selector_width"))
        return memo[node.uid]

    return depth(program.output_node)


def test_capacity_exceeded():
    p = two_aggregate_program()
    assert attention_depth(p) == 2
    with pytest.raises(CapacityExceeded):
        compile_program(p, CompileConfig(max_len=3, max_layers=1))
    c = compile_program(p, CompileConfig(max_len=3, max_layers=2))
    seqs = all_sequences(3)
    assert np.array_equal(c.run(seqs), c.reference_outputs(seqs))


def test_required_layers_cover_attention_depth():
    for p in builtin_interpretations(4) + [two_aggregate_program()]:
        assert required_layers(p) >= attention_depth(p)


def test_compiled_matches_interpreter_n4(compiled4):
    seqs = all_sequences(4)
    for c in compiled4:
        assert np.array_equal(c.run(seqs), c.reference_outputs(seqs)), c.program.source


@pytest.mark.parametrize("index", range(6))
def test_source_map_is_exact_interpretation(compiled4, index):
    c = compiled4[index]
    task = c.make_task(all_sequences(4))
    suite = source_map_interventions(c, task, per_component=2, seed=index)
    assert check_interpretation(c.model, c.abstract_model, c.alignment, task, 0.0, suite, COMPILED_TOL)


@given(st.integers(3, 6), st.integers(0, 5), st.integers(0, 2**32 - 1))
def test_compiled_differential_fuzz(n, index, seed):
    rng = np.random.default_rng(seed)
    c = compile_program(builtin_interpretations(n)[index], CompileConfig(max_len=n))
    seqs = [tuple(int(v) for v in rng.integers(1, n + 1, size=n)) for _ in range(20)]
    seqs += [tuple(int(v) + 1 for v in rng.permutation(n)) for _ in range(5)]
    out = c.run(seqs)
    assert np.array_equal(out, c.reference_outputs(seqs))
    assert c.decisions(out).tolist() == [brute_is_permutation(s, n) for s in seqs]


def test_wrong_length_rejected(compiled4):
    with pytest.raises(ValidationError):
        compiled4[0].encode_inputs([(1, 2, 3)])
