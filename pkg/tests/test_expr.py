import numpy as np
import pytest

from netsr import corpus, expr
from netsr.expr import (
    DomainError,
    ExprTree,
    Malformed,
    Overflow,
    TokenKind,
    UnknownToken,
    canonical_form,
    check_instance,
    check_skeleton,
    evaluate,
    parse_prefix,
    serialize_prefix,
    simplify_coefficients,
    to_infix,
)
from netsr.sampling import ObservationSet, Triplet

from reference import RefError, ref_eval


def make_triplets(xs, ys):
    return tuple(
        Triplet(0, np.atleast_1d(np.asarray(x, float)), np.zeros((0, 1)), np.zeros(0), np.array([y]))
        for x, y in zip(xs, ys)
    )


class TestParse:
    def test_paper_example(self):
        t = parse_prefix("sin add mul c x_{i,0} pow2 x_{i,0}".split())
        assert serialize_prefix(t) == ["sin", "add", "mul", "c", "x_{i,0}", "pow2", "x_{i,0}"]
        assert t.tokens[0].symbol == "sin"
        assert t.n_placeholders == 1

    def test_single_leaf(self):
        t = parse_prefix(["x_{i,0}"])
        assert len(t) == 1 and t.variables == ("x_{i,0}",)

    def test_arity_underflow(self):
        with pytest.raises(Malformed):
            parse_prefix(["add", "x_{i,0}"])

    def test_trailing_tokens(self):
        with pytest.raises(Malformed):
            parse_prefix(["x_{i,0}", "x_{i,1}"])

    def test_unknown_token(self):
        with pytest.raises(UnknownToken):
            parse_prefix(["sqrt", "x_{i,0}"])

    def test_special_token_rejected(self):
        with pytest.raises(Malformed):
            parse_prefix(["EOS"])

    def test_empty_sequence(self):
        with pytest.raises(Malformed):
            parse_prefix([])

    def test_empty_tree_serializes_to_nothing(self):
        assert serialize_prefix(ExprTree.empty()) == []

    def test_literal_round_trip(self):
        t = parse_prefix(["add", "c=2.5", "x_{i,0}"])
        assert serialize_prefix(t) == ["add", "c=2.5", "x_{i,0}"]
        assert t.n_placeholders == 0

    def test_round_trip_random(self):
        cfg = corpus.GenConfig()
        for i in range(300):
            rng = np.random.default_rng(i)
            t = corpus.sample_skeleton(cfg, rng, "inter")
            assert parse_prefix(serialize_prefix(t)) == t


class TestEvaluate:
    def test_heat_kernel(self):
        t = parse_prefix("mul c sub x_{j,0} x_{i,0}".split())
        v = evaluate(t, {"x_{i,0}": 0.2, "x_{j,0}": 0.7}, [1.0])
        assert v == pytest.approx(0.5, abs=1e-15)

    def test_log_domain(self):
        t = parse_prefix(["log", "x_{i,0}"])
        with pytest.raises(DomainError):
            evaluate(t, {"x_{i,0}": -1.0})

    def test_division_by_zero(self):
        t = parse_prefix(["div", "c", "x_{i,0}"])
        with pytest.raises(DomainError):
            evaluate(t, {"x_{i,0}": 0.0}, [1.0])

    def test_arcsin_domain(self):
        t = parse_prefix(["arcsin", "x_{i,0}"])
        with pytest.raises(DomainError):
            evaluate(t, {"x_{i,0}": 1.5})

    def test_overflow_threshold(self):
        t = parse_prefix(["mul", "c", "c"])
        with pytest.raises(Overflow):
            evaluate(t, {}, [1e11, 1e11])

    def test_exp_overflow(self):
        t = parse_prefix(["exp", "x_{i,0}"])
        with pytest.raises(Overflow):
            evaluate(t, {"x_{i,0}": 1000.0})

    def test_empty_tree_is_zero(self):
        assert evaluate(ExprTree.empty(), {}) == 0.0

    def test_deterministic(self):
        t = parse_prefix("sin add mul c x_{i,0} pow2 x_{i,0}".split())
        vals = {evaluate(t, {"x_{i,0}": 0.37}, [1.7]) for _ in range(5)}
        assert len(vals) == 1

    def test_matches_reference_interpreter(self):
        cfg = corpus.GenConfig()
        checked = 0
        i = 0
        while checked < 200:
            rng = np.random.default_rng(10_000 + i)
            i += 1
            pair = corpus.generate_pair(cfg, rng)
            tree, consts = pair.f_inter, pair.inter_constants
            binding = {v: float(rng.standard_normal()) for v in tree.variables}
            tokens = serialize_prefix(tree)
            try:
                want = ref_eval(tokens, binding, list(consts))
            except RefError:
                continue
            got = evaluate(tree, binding, consts)
            assert got == pytest.approx(want, rel=1e-12)
            checked += 1


class TestCheckSkeleton:
    cfg = corpus.GenConfig()

    def test_nested_trig_exp(self):
        t = parse_prefix(["sin", "exp", "x_{i,0}"])
        rep = check_skeleton(t, self.cfg, "self")
        assert rep.violations == ("nested-trig-exp",) and not rep.ok

    def test_missing_xj(self):
        t = parse_prefix(["add", "x_{i,0}", "c"])
        rep = check_skeleton(t, self.cfg, "inter")
        assert "missing-xj" in rep.violations

    def test_valid_inter(self):
        t = parse_prefix(["mul", "x_{i,0}", "x_{j,0}"])
        assert check_skeleton(t, self.cfg, "inter").ok

    def test_too_long(self):
        cfg = corpus.GenConfig(max_tokens=3)
        t = parse_prefix("add add x_{i,0} c x_{i,0}".split())
        assert "too-long" in check_skeleton(t, cfg, "self").violations

    def test_too_many_ops(self):
        cfg = corpus.GenConfig(b_max=1)
        t = parse_prefix("add add x_{i,0} c x_{i,0}".split())
        assert "too-many-ops" in check_skeleton(t, cfg, "self").violations

    def test_dimension(self):
        cfg = corpus.GenConfig(D=1)
        t = parse_prefix(["pow2", "x_{i,2}"])
        assert "dimension" in check_skeleton(t, cfg, "self").violations

    def test_non_nested_trig_ok(self):
        t = parse_prefix("add sin x_{i,0} exp x_{i,0}".split())
        assert check_skeleton(t, self.cfg, "self").ok

    def test_empty_self_ok_empty_inter_not(self):
        assert check_skeleton(ExprTree.empty(), self.cfg, "self").ok
        assert not check_skeleton(ExprTree.empty(), self.cfg, "inter").ok

    def test_nesting_monotone(self):
        # wrapping in another trig node never clears a violation
        bad = parse_prefix(["sin", "exp", "x_{i,0}"])
        wrapped = parse_prefix(["cos"] + serialize_prefix(bad))
        assert "nested-trig-exp" in check_skeleton(wrapped, self.cfg, "self").violations


class TestCheckInstance:
    def test_reciprocal_shifted(self):
        t = parse_prefix("inv sub x_{i,0} c".split())
        rng = np.random.default_rng(0)
        samples = [{"x_{i,0}": float(v)} for v in rng.standard_normal(50) if v != 0]
        assert check_instance(t, [0.0], samples)

    def test_log_of_normal_fails(self):
        t = parse_prefix(["log", "x_{i,0}"])
        rng = np.random.default_rng(1)
        samples = [{"x_{i,0}": float(v)} for v in rng.standard_normal(100)]
        assert not check_instance(t, [], samples)

    def test_constant_only(self):
        t = parse_prefix(["c"])
        assert check_instance(t, [3.0], [{}])

    def test_requires_samples(self):
        with pytest.raises(ValueError):
            check_instance(parse_prefix(["c"]), [1.0], [])


class TestCanonical:
    def test_commutative_merge(self):
        a = parse_prefix(["add", "x_{i,0}", "c"])
        b = parse_prefix(["add", "c", "x_{i,0}"])
        assert canonical_form(a) == canonical_form(b)

    def test_non_commutative_distinct(self):
        a = parse_prefix(["add", "x_{i,0}", "x_{j,0}"])
        b = parse_prefix(["sub", "x_{i,0}", "x_{j,0}"])
        assert canonical_form(a) != canonical_form(b)

    def test_literal_collapses_to_placeholder(self):
        a = parse_prefix(["mul", "c=3.0", "x_{i,0}"])
        b = parse_prefix(["mul", "c", "x_{i,0}"])
        assert canonical_form(a) == canonical_form(b)

    @staticmethod
    def scramble(tree: expr.ExprTree, rng) -> expr.ExprTree:
        """Randomly swap children of commutative nodes; same canonical form."""

        def walk(i: int) -> list:
            tok = tree.tokens[i]
            kids = [walk(c) for c in tree.children[i]]
            if tok.symbol in ("add", "mul") and rng.random() < 0.5:
                kids.reverse()
            return [tok] + [t for kid in kids for t in kid]

        return expr.parse_prefix(walk(0))

    def test_canonical_equal_implies_numeric_equal(self):
        # commutative swaps permute placeholder slots, so the comparison
        # ties every placeholder to one shared value per round
        cfg = corpus.GenConfig(b_max=3, u_max=1)
        rng = np.random.default_rng(7)
        compared = 0
        for i in range(300):
            t = corpus.sample_skeleton(cfg, np.random.default_rng(i), "self", dim=1)
            other = self.scramble(t, rng)
            assert canonical_form(other) == canonical_form(t)
            for _ in range(10):
                x = float(rng.standard_normal())
                cval = float(rng.uniform(-2, 2))
                try:
                    va = evaluate(t, {"x_{i,0}": x}, [cval] * t.n_placeholders)
                    vb = evaluate(other, {"x_{i,0}": x}, [cval] * other.n_placeholders)
                except (DomainError, Overflow):
                    continue
                assert va == pytest.approx(vb, rel=1e-9, abs=1e-9)
                compared += 1
        assert compared > 500


class TestInfix:
    def test_renders_constants(self):
        t = parse_prefix("add mul c x_{i,0} pow2 x_{j,1}".split())
        assert to_infix(t, [2.5]) == "2.5 * x_{i,0} + (x_{j,1})^2"

    def test_empty(self):
        assert to_infix(ExprTree.empty()) == "0"


class TestSimplify:
    def pair_linear(self, c0, c1):
        return corpus.EquationPair.from_prefix(
            "add mul c x_{i,0} mul c x_{i,1}",
            "mul c x_{j,0}",
            (c0, c1),
            (0.5,),
            2,
        )

    def test_prunes_negligible_term(self):
        rng = np.random.default_rng(0)
        pair = self.pair_linear(0.0000134, 3.84)
        xs = rng.standard_normal((80, 2))
        ys = 0.0000134 * xs[:, 0] + 3.84 * xs[:, 1]
        trips = tuple(
            Triplet(0, x, np.zeros((0, 2)), np.zeros(0), np.array([y]))
            for x, y in zip(xs, ys)
        )
        obs = ObservationSet(trips, 2)
        out = simplify_coefficients(pair, 1e-4, obs)
        assert serialize_prefix(out.f_self) == ["mul", "c", "x_{i,1}"]
        assert out.self_constants == (3.84,)

    def test_keeps_large_constants(self):
        rng = np.random.default_rng(1)
        pair = self.pair_linear(1.2, 3.84)
        xs = rng.standard_normal((40, 2))
        ys = 1.2 * xs[:, 0] + 3.84 * xs[:, 1]
        trips = tuple(
            Triplet(0, x, np.zeros((0, 2)), np.zeros(0), np.array([y]))
            for x, y in zip(xs, ys)
        )
        out = simplify_coefficients(pair, 1e-4, ObservationSet(trips, 2))
        assert out.self_constants == (1.2, 3.84)

    def test_load_bearing_small_constant_kept(self):
        # the only signal comes through the small coefficient
        rng = np.random.default_rng(2)
        pair = corpus.EquationPair.from_prefix(
            "mul c x_{i,0}", "mul c x_{j,0}", (1e-5,), (0.0,), 1
        )
        xs = rng.standard_normal((60, 1))
        ys = 1e-5 * xs[:, 0]
        trips = tuple(
            Triplet(0, x, np.zeros((0, 1)), np.zeros(0), np.array([y]))
            for x, y in zip(xs, ys)
        )
        out = simplify_coefficients(pair, 1e-4, ObservationSet(trips, 1))
        assert out.self_constants == (1e-5,)
