"""Tape mechanics, per-op gradients against finite differences, and the
gradient-check harness itself (including that it catches a wrong backward)."""

import re

import numpy as np
import pytest

from slan import autodiff as ad


def _coef(k: int) -> np.ndarray:
    """Fixed non-uniform coefficients so reductions weight every entry."""
    return np.linspace(0.7, 1.9, k)


def _reduce(node: ad.Node) -> ad.Node:
    """Deterministically reduce a 1-D or 2-D node to a (1,) loss."""
    t = node.tape
    if node.value.ndim == 2:
        node = ad.matmul(node, t.leaf(_coef(node.value.shape[1])))
    return ad.matmul(t.leaf(_coef(node.value.shape[0]).reshape(1, -1)), node)


def _check(build, params, tol=1e-6):
    report = ad.check_gradients(build, params, tol=tol)
    assert report.passed, str(report)
    return report


class TestTapeMechanics:
    def test_replay_is_bitwise_deterministic(self):
        rng = np.random.default_rng(7)
        p = ad.Parameter("p", rng.normal(size=5))
        q = ad.Parameter("q", rng.normal(size=5))

        def run():
            t = ad.Tape()
            loss = _reduce(ad.tanh(ad.hadamard(t.param(p), ad.sigmoid(t.param(q)))))
            t.backward(loss)
            return loss.value.copy(), {pp.name: g.copy() for pp, g in t.param_grads()}

        v1, g1 = run()
        v2, g2 = run()
        np.testing.assert_array_equal(v1, v2)
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])

    def test_second_backward_is_rejected(self):
        t = ad.Tape()
        loss = _reduce(ad.tanh(t.leaf(np.ones(3))))
        t.backward(loss)
        with pytest.raises(ad.AutodiffError, match="backward already ran"):
            t.backward(loss)

    def test_non_scalar_root_is_rejected(self):
        t = ad.Tape()
        node = ad.tanh(t.leaf(np.ones(3)))
        with pytest.raises(ad.AutodiffError, match="must be scalar"):
            t.backward(node)

    def test_foreign_root_is_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        loss = _reduce(ad.tanh(t1.leaf(np.ones(3))))
        with pytest.raises(ad.AutodiffError, match="different tape"):
            t2.backward(loss)

    def test_cross_tape_operands_are_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.leaf(np.ones(3))
        b = t2.leaf(np.ones(3))
        with pytest.raises(ad.AutodiffError, match="different tapes"):
            ad.add(a, b)

    def test_shape_mismatch_names_both_shapes(self):
        t = ad.Tape()
        a = t.leaf(np.ones(3))
        b = t.leaf(np.ones(4))
        with pytest.raises(ad.AutodiffError,
                           match=re.escape("(3,)") + ".*" + re.escape("(4,)")):
            ad.add(a, b)

    def test_strided_slice_is_rejected(self):
        t = ad.Tape()
        x = t.leaf(np.arange(6.0))
        with pytest.raises(ad.AutodiffError, match="step must be 1"):
            x[0:6:2]

    def test_param_leaf_is_cached_per_tape(self):
        p = ad.Parameter("p", np.ones(3))
        t = ad.Tape()
        assert t.param(p) is t.param(p)
        assert t.param(p) is not ad.Tape().param(p)

    def test_untouched_param_yields_zero_grad(self):
        p = ad.Parameter("p", np.ones(3))
        q = ad.Parameter("q", np.ones(3))
        t = ad.Tape()
        leaf_p = t.param(p)
        t.param(q)                     # on the tape but not in the graph
        loss = _reduce(ad.tanh(leaf_p))
        t.backward(loss)
        grads = {pp.name: g for pp, g in t.param_grads()}
        np.testing.assert_array_equal(grads["q"], np.zeros(3))
        assert np.any(grads["p"] != 0.0)


class TestAccumulation:
    def test_fanout_sums_contributions(self):
        t = ad.Tape()
        x = t.leaf(np.array([1.0, 2.0]))
        y = ad.add(x, x)
        loss = _reduce(y)
        t.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * _coef(2))

    def test_first_contribution_is_copied(self):
        t = ad.Tape()
        x = t.leaf(np.ones(3))
        g = np.array([1.0, 2.0, 3.0])
        ad.accumulate(x, g)
        g[...] = -99.0
        np.testing.assert_array_equal(x.grad, [1.0, 2.0, 3.0])


class TestOpGradients:
    """Central finite differences, ten seeded trials per op, tol 1e-6."""

    def _trial(self, seed, shapes):
        rng = np.random.default_rng(seed)
        return [ad.Parameter(f"p{i}", rng.uniform(-1.0, 1.0, shape))
                for i, shape in enumerate(shapes)]

    def test_add_sub_hadamard(self):
        for seed in range(10):
            p, q = self._trial(seed, [(5,), (5,)])
            for op in (ad.add, ad.sub, ad.hadamard):
                def build():
                    t = ad.Tape()
                    return _reduce(op(t.param(p), t.param(q)))
                _check(build, [p, q])

    def test_scale(self):
        for seed in range(10):
            (p,) = self._trial(seed, [(5,)])
            def build():
                t = ad.Tape()
                return _reduce(ad.scale(t.param(p), -1.7))
            _check(build, [p])

    def test_matmul_matrix_vector(self):
        for seed in range(10):
            a, x = self._trial(seed, [(3, 4), (4,)])
            def build():
                t = ad.Tape()
                return _reduce(ad.matmul(t.param(a), t.param(x)))
            _check(build, [a, x])

    def test_matmul_matrix_matrix(self):
        for seed in range(10):
            a, b = self._trial(seed, [(2, 3), (3, 4)])
            def build():
                t = ad.Tape()
                return _reduce(ad.matmul(t.param(a), t.param(b)))
            _check(build, [a, b])

    def test_concat_and_take(self):
        for seed in range(10):
            p, q, a = self._trial(seed, [(3,), (2,), (3, 4)])
            def build():
                t = ad.Tape()
                joined = ad.concat([t.param(p), t.param(q)])
                row = t.param(a)[1]
                return _reduce(ad.concat([joined[1:4], row]))
            _check(build, [p, q, a])

    def test_elementwise_nonlinearities(self):
        for seed in range(10):
            (p,) = self._trial(seed, [(5,)])
            for op in (ad.sigmoid, ad.tanh, ad.sin):
                def build():
                    t = ad.Tape()
                    return _reduce(op(t.param(p)))
                _check(build, [p])

    def test_softmax(self):
        for seed in range(10):
            (p,) = self._trial(seed, [(4,)])
            def build():
                t = ad.Tape()
                return _reduce(ad.softmax(t.param(p)))
            _check(build, [p])

    def test_cross_entropy(self):
        for seed in range(10):
            (p,) = self._trial(seed, [(3,)])
            label = seed % 3
            def build():
                t = ad.Tape()
                return ad.cross_entropy(t.param(p), label)
            _check(build, [p])

    def test_stack_mean(self):
        for seed in range(10):
            p, q, r = self._trial(seed, [(4,), (4,), (4,)])
            def build():
                t = ad.Tape()
                return _reduce(ad.stack_mean([t.param(p), t.param(q), t.param(r)]))
            _check(build, [p, q, r])

    def test_stack_max(self):
        # fixed bases keep every coordinate's argmax 0.08 away from a flip,
        # far beyond the finite-difference step
        base = [np.array([0.9, -0.4, 0.2, 0.05]),
                np.array([0.1, 0.6, -0.3, 0.4]),
                np.array([-0.5, 0.0, 0.7, -0.2])]
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params = [ad.Parameter(f"p{i}", b + rng.uniform(-0.01, 0.01, 4))
                      for i, b in enumerate(base)]
            def build():
                t = ad.Tape()
                return _reduce(ad.stack_max([t.param(p) for p in params]))
            _check(build, params)

    def test_weighted_sum(self):
        for seed in range(10):
            w, p, q, r = self._trial(seed, [(3,), (4,), (4,), (4,)])
            def build():
                t = ad.Tape()
                return _reduce(ad.weighted_sum(
                    t.param(w), [t.param(p), t.param(q), t.param(r)]))
            _check(build, [w, p, q, r])


class TestOpValues:
    def test_sigmoid_saturates_without_overflow(self):
        t = ad.Tape()
        out = ad.sigmoid(t.leaf(np.array([-1000.0, 0.0, 1000.0])))
        np.testing.assert_array_equal(out.value, [0.0, 0.5, 1.0])

    def test_softmax_is_stable_and_sums_to_one(self):
        t = ad.Tape()
        out = ad.softmax(t.leaf(np.array([1000.0, 0.0, -1000.0])))
        assert np.isfinite(out.value).all()
        np.testing.assert_allclose(out.value.sum(), 1.0, rtol=0, atol=1e-15)
        np.testing.assert_allclose(out.value[0], 1.0, rtol=0, atol=1e-12)

    def test_cross_entropy_closed_forms(self):
        t = ad.Tape()
        even = ad.cross_entropy(t.leaf(np.zeros(2)), 0)
        assert even.value[0] == np.log(2.0)
        t2 = ad.Tape()
        sure = ad.cross_entropy(t2.leaf(np.array([1000.0, 0.0])), 0)
        assert abs(sure.value[0]) <= 1e-12

    def test_cross_entropy_label_range(self):
        t = ad.Tape()
        with pytest.raises(ad.AutodiffError, match="label 2 out of range"):
            ad.cross_entropy(t.leaf(np.zeros(2)), 2)

    def test_stack_max_splits_ties_evenly(self):
        t = ad.Tape()
        a = t.leaf(np.array([1.0, 5.0]))
        b = t.leaf(np.array([1.0, 2.0]))
        out = ad.stack_max([a, b])
        np.testing.assert_array_equal(out.value, [1.0, 5.0])
        loss = ad.matmul(t.leaf(np.ones((1, 2))), out)
        t.backward(loss)
        np.testing.assert_array_equal(a.grad, [0.5, 1.0])
        np.testing.assert_array_equal(b.grad, [0.5, 0.0])

    def test_finite_check_toggle_restores(self):
        previous = ad.set_finite_checks(False)
        try:
            assert ad.finite_checks_enabled() is False
            t = ad.Tape()
            t.custom(np.array([np.nan]), None, label="raw", check=True)
        finally:
            ad.set_finite_checks(previous)
        assert ad.finite_checks_enabled() is previous
        with pytest.raises(ad.AutodiffError, match="non-finite"):
            ad.Tape().custom(np.array([np.nan]), None, label="raw", check=True)


class TestQuadratic:
    def test_gradient_of_square_norm_is_exact(self):
        rng = np.random.default_rng(3)
        w = ad.Parameter("w", rng.uniform(-1.0, 1.0, 6))

        def build():
            t = ad.Tape()
            node = t.param(w)
            return ad.matmul(t.leaf(np.ones((1, 6))), ad.hadamard(node, node))

        loss = build()
        loss.tape.backward(loss)
        grads = {p.name: g for p, g in loss.tape.param_grads()}
        np.testing.assert_array_equal(grads["w"], 2.0 * w.value)
        report = ad.check_gradients(build, [w], tol=1e-9)
        assert report.passed, str(report)


class TestHarnessCatchesBugs:
    def test_wrong_backward_fails_the_check(self):
        """A deliberately wrong adjoint (3x instead of 2x) must be flagged."""
        w = ad.Parameter("w", np.array([0.5, -0.8, 1.2, 0.3]))

        def build():
            t = ad.Tape()
            node = t.param(w)

            def bad_bwd(g):
                ad.accumulate(node, 3.0 * w.value * g)

            sq = t.custom(w.value * w.value, bad_bwd, label="bad_square")
            return _reduce(sq)

        report = ad.check_gradients(build, [w], tol=1e-6)
        assert not report.passed
        assert report.max_rel_err > 1e-2
        assert "FAIL" in str(report)
