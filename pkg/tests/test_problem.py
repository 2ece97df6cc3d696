import numpy as np
import pytest
from numpy.testing import assert_allclose

from bistoch.problem import (
    AccessCounter,
    BatchSpec,
    Iterate,
    StreamBank,
    true_f,
)
from bistoch.instances import QuadraticBilevel


def _batch(seed=0, bu=512, bl=512):
    return BatchSpec(ul_batch=bu, ll_batch=bl, streams=StreamBank(seed))


class TestStreamBank:
    def test_named_streams_are_reproducible(self):
        a = StreamBank(42).stream("ul").standard_normal(5)
        b = StreamBank(42).stream("ul").standard_normal(5)
        assert_allclose(a, b)
        assert (a == b).all()

    def test_named_streams_are_distinct(self):
        bank = StreamBank(42)
        a = bank.stream("ul").standard_normal(5)
        b = bank.stream("ll").standard_normal(5)
        assert not np.allclose(a, b)

    def test_stream_object_is_cached(self):
        bank = StreamBank(0)
        g1 = bank.stream("ul")
        g1.standard_normal(3)
        g2 = bank.stream("ul")
        assert g1 is g2  # cursor advances, no reset

    def test_master_seed_changes_everything(self):
        a = StreamBank(1).stream("init").standard_normal(4)
        b = StreamBank(2).stream("init").standard_normal(4)
        assert not np.allclose(a, b)


class TestIterateAndBatch:
    def test_iterate_coerces_to_float64(self):
        it = Iterate([1, 2], [3])
        assert it.x.dtype == np.float64 and it.y.dtype == np.float64

    def test_iterate_rejects_nan(self):
        with pytest.raises(ValueError):
            Iterate(np.array([np.nan]), np.zeros(1))

    def test_iterate_rejects_matrix(self):
        with pytest.raises(ValueError):
            Iterate(np.zeros((2, 2)), np.zeros(2))

    def test_batch_positive(self):
        with pytest.raises(ValueError):
            BatchSpec(ul_batch=0, ll_batch=1, streams=StreamBank(0))


class TestSampling:
    def test_noise_free_sample_equals_closed_form(self):
        rng = np.random.default_rng(10)
        A = rng.standard_normal((3, 4))
        prob = QuadraticBilevel(A)
        x, y = rng.standard_normal(3), rng.standard_normal(4)
        s = prob.sample(Iterate(x, y), _batch())
        resid = y - A.T @ x
        assert_allclose(s.gux, x)
        assert_allclose(s.guy, y)
        assert_allclose(s.glx, -A @ resid)
        assert_allclose(s.gly, resid)
        assert_allclose(s.fu_value, 0.5 * x @ x + 0.5 * y @ y)
        assert_allclose(s.fl_value, 0.5 * resid @ resid)

    def test_sample_bitwise_deterministic(self):
        A = np.random.default_rng(11).standard_normal((2, 2))
        it = Iterate(np.ones(2), np.ones(2))
        runs = []
        for _ in range(2):
            prob = QuadraticBilevel(A, noise_std=0.5)
            s = prob.sample(it, _batch(seed=123))
            runs.append(np.concatenate([s.gux, s.guy, s.glx, s.gly,
                                        [s.fu_value, s.fl_value]]))
        assert (runs[0] == runs[1]).all()

    def test_frozen_draw_is_reusable(self):
        prob = QuadraticBilevel(np.eye(2), noise_std=1.0)
        d = prob.draw(_batch(seed=5))
        it = Iterate(np.zeros(2), np.ones(2))
        s1 = prob.sample_at(it, d)
        s2 = prob.sample_at(it, d)
        assert (s1.gly == s2.gly).all() and (s1.gux == s2.gux).all()

    def test_noise_mean_approaches_closed_form(self):
        # Mean of 10^4 unit-noise draws stays within 3*sigma/100 of exact.
        prob = QuadraticBilevel(np.eye(2), noise_std=1.0)
        batch = _batch(seed=7, bu=1, bl=1)
        it = Iterate(np.array([1.0, -1.0]), np.array([0.5, 0.5]))
        acc = np.zeros(2)
        n = 10_000
        for _ in range(n):
            acc += prob.sample(it, batch).gly
        exact = it.y - it.x
        assert np.linalg.norm(acc / n - exact) <= 3.0 / np.sqrt(n) * np.sqrt(2)

    def test_accessed_gradients_only(self):
        prob = QuadraticBilevel(np.eye(2))
        s = prob.sample(Iterate(np.zeros(2), np.zeros(2)), _batch())
        assert s.accessed == 1024

    def test_accessed_with_hessians(self):
        prob = QuadraticBilevel(np.eye(2))
        s = prob.sample(Iterate(np.zeros(2), np.zeros(2)), _batch(),
                        with_hessians=True)
        assert s.accessed == 1536

    def test_zero_length_run_accesses_nothing(self):
        assert AccessCounter().total == 0

    def test_counter_accumulates(self):
        prob = QuadraticBilevel(np.eye(2))
        c = AccessCounter()
        batch = _batch()
        for _ in range(3):
            c.add_sample(prob.sample(Iterate(np.zeros(2), np.zeros(2)), batch))
        assert c.total == 3 * 1024
        with pytest.raises(ValueError):
            c.add(-1)

    def test_full_draw_bills_nothing(self):
        prob = QuadraticBilevel(np.eye(2), noise_std=1.0)
        d = prob.full_draw()
        s = prob.sample_at(Iterate(np.ones(2), np.ones(2)), d)
        assert s.accessed == 0
        assert_allclose(s.gux, np.ones(2))  # noise suppressed

    def test_clamp_batch(self):
        prob = QuadraticBilevel(np.eye(2))
        nu, nl = prob.dataset_sizes()
        assert prob.clamp_batch(nu + 10, 5) == (nu, 5)


class TestTrueF:
    def test_matches_closed_form(self):
        rng = np.random.default_rng(12)
        A = rng.standard_normal((4, 4))
        prob = QuadraticBilevel(A)
        x = rng.standard_normal(4)
        expected = 0.5 * x @ x + 0.5 * np.linalg.norm(A.T @ x) ** 2
        assert abs(true_f(prob, x) - expected) <= 1e-6

    def test_tolerance_monotone(self):
        prob = QuadraticBilevel(np.eye(3))
        x = np.array([1.0, 2.0, 3.0])
        cf = prob.closed_form(x)[1]
        tight = abs(true_f(prob, x, tol=1e-12) - cf)
        loose = abs(true_f(prob, x, tol=1e-4) - cf)
        assert tight <= loose + 1e-10

    def test_zero_at_origin(self):
        prob = QuadraticBilevel(np.eye(3))
        assert true_f(prob, np.zeros(3)) == 0.0


class TestHessianHonesty:
    def test_hyy_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        A = rng.standard_normal((3, 5))
        prob = QuadraticBilevel(A)
        x, y = rng.standard_normal(3), rng.standard_normal(5)
        d = prob.full_draw()
        s = prob.sample_at(Iterate(x, y), d, with_hessians=True)
        h = 1e-6
        for _ in range(10):
            v = rng.standard_normal(5)
            v /= np.linalg.norm(v)
            _, gp = prob.ll_grads_at(x, y + h * v, d)
            _, gm = prob.ll_grads_at(x, y - h * v, d)
            fd = (gp - gm) / (2 * h)
            assert_allclose(s.hyy(v), fd, rtol=1e-5, atol=1e-7)

    def test_hxy_t_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        A = rng.standard_normal((3, 5))
        prob = QuadraticBilevel(A)
        x, y = rng.standard_normal(3), rng.standard_normal(5)
        d = prob.full_draw()
        s = prob.sample_at(Iterate(x, y), d, with_hessians=True)
        h = 1e-6
        for _ in range(10):
            v = rng.standard_normal(5)
            gp, _ = prob.ll_grads_at(x, y + h * v, d)
            gm, _ = prob.ll_grads_at(x, y - h * v, d)
            fd = (gp - gm) / (2 * h)
            assert_allclose(s.hxy_t(v), fd, rtol=1e-5, atol=1e-6)
