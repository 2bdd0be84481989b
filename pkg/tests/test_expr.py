import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symchoice.expr import (
    EPS, Binary, ExpressionError, Feature, Num, Param, SymbolicLibrary, Unary,
    UnboundSymbolError, depth, enumerate_fragments, evaluate, features_of, params_of,
    parse_expression, parse_expressions, render_expression, validate,
)

FEATURES = ("time", "cost", "age", "income")


def asts(max_depth=4):
    leaves = st.one_of(
        st.sampled_from(FEATURES).map(Feature),
        st.builds(Param, st.sampled_from("CK"), st.integers(1, 9)),
        st.floats(0, 100, allow_nan=False).map(lambda v: Num(round(v, 3))),
    )
    return st.recursive(
        leaves,
        lambda kids: st.one_of(
            st.builds(Unary, st.sampled_from(["neg", "abs", "sqrt", "log", "exp"]), kids),
            st.builds(Binary, st.sampled_from(["+", "-", "*", "/", "^"]), kids, kids),
        ),
        max_leaves=2 ** max_depth,
    )


class TestParse:
    def test_structure(self):
        e = parse_expression("K_1*(train_time + C_1)")
        assert e == Binary("*", Param("K", 1), Binary("+", Feature("train_time"), Param("C", 1)))

    def test_log_call(self):
        assert parse_expression("log(age + C_3)") == Unary("log", Binary("+", Feature("age"), Param("C", 3)))

    def test_incomplete_binary_reports_position(self):
        with pytest.raises(ExpressionError, match="position 4"):
            parse_expression("K_1*")

    @pytest.mark.parametrize("text", ["", "   ", "a +* b", "(a", "a)", "log(", "a $ b", "|a"])
    def test_rejects_malformed(self, text):
        with pytest.raises(ExpressionError):
            parse_expression(text)

    def test_precedence(self):
        assert render_expression(parse_expression("a + b * c ^ d")) == "(a + (b * (c ^ d)))"
        assert render_expression(parse_expression("-a ^ b")) == "(neg(a) ^ b)"

    def test_left_associative(self):
        assert render_expression(parse_expression("a - b - c")) == "((a - b) - c)"
        assert render_expression(parse_expression("a / b * c")) == "((a / b) * c)"
        assert render_expression(parse_expression("a ^ b ^ c")) == "((a ^ b) ^ c)"

    def test_abs_spellings_agree(self):
        assert parse_expression("|a - b|") == parse_expression("abs(a - b)")
        assert render_expression(parse_expression("|x|")) == "abs(x)"

    def test_operator_aliases(self):
        assert parse_expression("a ** 2") == parse_expression("a^2")
        assert parse_expression("a · b × c − d") == parse_expression("a*b*c - d")

    def test_bare_symbols_numbered_above_explicit(self):
        e = parse_expression("K*time + C_2 + C")
        assert params_of(e) == {"K_1", "C_2", "C_3"}

    def test_shared_counter_across_alternatives(self):
        a, b = parse_expressions(["K + C", "C_3*x + K"])
        assert params_of(a) == {"K_1", "C_4"}
        assert params_of(b) == {"C_3", "K_2"}

    def test_negative_literal_folds(self):
        assert parse_expression("-3*x") == Binary("*", Num(-3.0), Feature("x"))


class TestRender:
    def test_canonical_product(self):
        assert render_expression(Binary("*", Param("K", 1), Feature("age"))) == "(K_1 * age)"

    def test_integral_floats_drop_decimal(self):
        assert render_expression(parse_expression("2.0*x")) == "(2 * x)"

    def test_erase_indices(self):
        assert render_expression(parse_expression("K_3*t + C_7"), erase_indices=True) == "((K * t) + C)"

    @settings(max_examples=300, deadline=None)
    @given(asts())
    def test_roundtrip(self, e):
        text = render_expression(e)
        assert parse_expression(text) == e
        assert render_expression(parse_expression(text)) == text


class TestEvaluate:
    def test_log_one(self):
        assert evaluate(parse_expression("log(x + C_1)"), {"x": 0.0}, {"C_1": 1.0}) == 0.0

    def test_sqrt(self):
        assert evaluate(parse_expression("sqrt(age)"), {"age": 9.0}) == 3.0

    def test_log_clamped_at_eps(self):
        v = evaluate(parse_expression("log(x + C_1)"), {"x": 0.0}, {"C_1": 0.0})
        assert v == math.log(EPS)

    def test_division_guard(self):
        assert evaluate(parse_expression("1/x"), {"x": 0.0}) == pytest.approx(1 / EPS)
        assert evaluate(parse_expression("1/x"), {"x": -1e-12}) == pytest.approx(-1 / EPS)

    def test_fractional_power_of_negative_base(self):
        assert math.isfinite(evaluate(parse_expression("x ^ 0.5"), {"x": -4.0}))
        assert evaluate(parse_expression("x ^ 2"), {"x": -3.0}) == 9.0

    def test_vectorized(self):
        out = evaluate(parse_expression("K_1*t"), {"t": np.array([1.0, 2.0])}, {"K_1": 3.0})
        np.testing.assert_array_equal(out, [3.0, 6.0])

    def test_unbound(self):
        with pytest.raises(UnboundSymbolError):
            evaluate(parse_expression("K_1*t"), {"t": 1.0})
        with pytest.raises(UnboundSymbolError):
            evaluate(parse_expression("t + u"), {"t": 1.0})

    @settings(max_examples=300, deadline=None)
    @given(asts(), st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=4, max_size=4),
           st.lists(st.floats(-50, 50, allow_nan=False), min_size=18, max_size=18))
    def test_total_on_finite_inputs(self, e, feats, theta):
        fb = dict(zip(FEATURES, feats))
        tb = {f"{c}_{i}": theta[j * 9 + i - 1] for j, c in enumerate("CK") for i in range(1, 10)}
        v = evaluate(e, fb, tb)
        assert math.isfinite(v)
        assert evaluate(e, fb, tb) == v


class TestValidate:
    lib = SymbolicLibrary.for_features(["train_time", "age"])

    def test_ok(self):
        assert validate(parse_expression("K_1*train_time"), self.lib) == []

    def test_unknown_operator(self):
        assert validate(parse_expression("sin(age)"), self.lib) == ["operator sin"]

    def test_unknown_feature(self):
        assert validate(parse_expression("K_1*velocity"), self.lib) == ["feature velocity"]

    def test_restricted_operator_set(self):
        lib = SymbolicLibrary.for_features(["age"], unary_ops=("log",), binary_ops=("+", "*"))
        assert validate(parse_expression("exp(age) / C"), lib) == ["operator /", "operator exp"]


class TestFragments:
    def test_exemplar(self):
        frags = enumerate_fragments(parse_expression("sqrt(age)*(trust_gov + trust_sci)"))
        assert frags == {"sqrt(age)", "(trust_gov + trust_sci)", "(sqrt(age) * (trust_gov + trust_sci))"}

    def test_single_product(self):
        assert enumerate_fragments(parse_expression("K_1*time")) == {"(K * time)"}

    def test_index_erasure_collapses(self):
        frags = enumerate_fragments(parse_expression("K_1*time + K_2*time"))
        assert frags == {"(K * time)", "((K * time) + (K * time))"}

    def test_leaves_have_none(self):
        assert enumerate_fragments(parse_expression("age")) == set()

    @settings(max_examples=200, deadline=None)
    @given(asts(), st.integers(1, 50))
    def test_invariant_under_reindexing(self, e, shift):
        text = render_expression(e)
        shifted = re.sub(r"([CK])_(\d+)", lambda m: f"{m.group(1)}_{int(m.group(2)) + shift}", text)
        assert enumerate_fragments(parse_expression(shifted)) == enumerate_fragments(e)

    def test_depth_and_features(self):
        e = parse_expression("log(age + C_1) * time")
        assert depth(e) == 3
        assert features_of(e) == {"age", "time"}
