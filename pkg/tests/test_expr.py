import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mudicho import kernels
from mudicho.errors import ParseError
from mudicho.sysdef.expr import (
    FUNCTIONS,
    BinOp,
    Call,
    Const,
    Neg,
    Var,
    compile_programs,
    parse_expr,
    to_source,
)


def ev(source, **env):
    return float(parse_expr(source).evaluate(env))


class TestGrammar:
    def test_product_binds_tighter(self):
        assert ev("2+3*4") == 14

    def test_power_right_associative(self):
        assert ev("2^3^2") == 512

    def test_unary_minus_looser_than_power(self):
        assert ev("-2^2") == -4

    def test_power_of_negated_exponent(self):
        assert ev("2^-1") == 0.5

    def test_left_associative_division(self):
        assert ev("8/4/2") == 1

    def test_unary_plus(self):
        assert ev("+3") == 3

    def test_exponent_notation(self):
        assert ev("1.5e-3*2") == pytest.approx(3e-3)

    def test_gaussian_bump(self):
        assert ev("x1^2*exp(-x1^2)", x1=1.0) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_polynomial_rate_at_zero(self):
        assert ev("1+n", n=0.0) == 1.0

    def test_reciprocal(self):
        assert ev("-1/t", t=2.0) == -0.5

    @pytest.mark.parametrize("func", FUNCTIONS)
    def test_functions(self, func):
        ref = {"exp": math.exp, "ln": math.log, "sin": math.sin, "cos": math.cos, "sqrt": math.sqrt,
               "tanh": math.tanh, "abs": abs}[func]
        assert ev(f"{func}(0.7)") == pytest.approx(ref(0.7), rel=1e-15)

    def test_vectorized(self):
        e = parse_expr("n/(n+1)")
        np.testing.assert_allclose(e.evaluate({"n": np.array([1.0, 2.0, 3.0])}), [0.5, 2 / 3, 0.75])

    def test_constants_fold(self):
        e = parse_expr("c*x1", constants={"c": 0.25})
        assert e.variables() == {"x1"}
        assert float(e.evaluate({"x1": 4.0})) == 1.0

    def test_variables(self):
        assert parse_expr("x1*x2+n").variables() == {"x1", "x2", "n"}


class TestErrors:
    def test_unknown_identifier_offset(self):
        with pytest.raises(ParseError) as info:
            parse_expr("1 + foo")
        assert info.value.offset == 4
        assert "declared variable" in str(info.value)

    def test_unknown_function(self):
        with pytest.raises(ParseError) as info:
            parse_expr("2*log(3)")
        assert info.value.offset == 2

    def test_unbalanced(self):
        with pytest.raises(ParseError) as info:
            parse_expr("(1+2")
        assert info.value.offset == 4
        assert "')'" in str(info.value)

    def test_trailing_token(self):
        with pytest.raises(ParseError) as info:
            parse_expr("1 2")
        assert info.value.offset == 2

    def test_bad_character(self):
        with pytest.raises(ParseError) as info:
            parse_expr("1 $ 2")
        assert info.value.offset == 2

    def test_byte_offsets_count_utf8(self):
        with pytest.raises(ParseError) as info:
            parse_expr("1+é")
        assert info.value.offset == 2
        with pytest.raises(ParseError) as info:
            parse_expr("é")
        assert info.value.offset == 0

    def test_empty(self):
        with pytest.raises(ParseError):
            parse_expr("")

    def test_restricted_variables(self):
        with pytest.raises(ParseError):
            parse_expr("t+1", variables=("n",))

    def test_structured_error(self):
        with pytest.raises(ParseError) as info:
            parse_expr("1+")
        doc = info.value.to_dict()
        assert doc["error"] == "parse"
        assert doc["witness"] == {"offset": 2}


# --- random trees --------------------------------------------------------------

VARIABLES = ("n", "x1", "x2")
leaf = st.one_of(
    st.floats(min_value=-5, max_value=5, allow_nan=False).map(Const),
    st.sampled_from(VARIABLES).map(Var),
)


def trees(depth):
    if depth == 0:
        return leaf
    sub = trees(depth - 1)
    return st.one_of(
        leaf,
        sub.map(Neg),
        st.builds(BinOp, st.sampled_from("+-*/^"), sub, sub),
        st.builds(Call, st.sampled_from(FUNCTIONS), sub),
    )


ENV_POINTS = np.random.default_rng(7).uniform(-3, 3, (100, 3))


def _env(points):
    return {name: points[:, i] for i, name in enumerate(VARIABLES)}


@given(trees(6))
def test_print_parse_round_trip(tree):
    env = _env(ENV_POINTS)
    with np.errstate(all="ignore"):
        expected = np.broadcast_to(tree.evaluate(env), (len(ENV_POINTS),))
        again = parse_expr(to_source(tree)).evaluate(env)
    np.testing.assert_array_equal(np.broadcast_to(again, expected.shape), expected)


@given(trees(6))
def test_compiled_matches_tree(tree):
    program = compile_programs([tree], "n", 2)
    env = _env(ENV_POINTS)
    with np.errstate(all="ignore"):
        expected = np.broadcast_to(tree.evaluate(env), (len(ENV_POINTS),))
    for backend in kernels.available_backends():
        got = kernels.eval_programs(program, ENV_POINTS, backend=backend)[:, 0]
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-300, equal_nan=True)


def test_compile_rejects_state_outside_dimension():
    with pytest.raises(ParseError):
        compile_programs([parse_expr("x3")], "n", 2)


def test_compile_stack_depth():
    program = compile_programs([parse_expr("1+(2+(3+(4+x1)))")], "n", 1)
    assert program.max_stack == 5
