import numpy as np
import pytest

from sidforge.losses import (
    batch_pd,
    batch_sc,
    loss_gradients,
    reconstruction_loss,
    total_loss,
)
from sidforge.quantizer import ModelParams, quantize_full

from fd import central_diff, rel_error


def make_params(codebooks, ref=None, top_k=None):
    books = np.asarray(codebooks, dtype=np.float32)
    return ModelParams(
        method="r3",
        ref=None if ref is None else np.asarray(ref, dtype=np.float32),
        codebooks=books,
        top_k=books.shape[1] if top_k is None else top_k,
    )


class TestReconstructionLoss:
    def test_perfect_reconstruction(self):
        # a codeword that exactly equals the residual and K=1 gives zero error
        cw = np.array([[0.0, 4.0], [4.0, 0.0]], dtype=np.float32)
        params = make_params(cw[None, :, :], ref=[1.0, 0.0], top_k=1)
        trace = quantize_full([3.0, 4.0], params)
        assert reconstruction_loss(trace, [3.0, 4.0]) == pytest.approx(0.0, abs=1e-10)

    def test_unit_error(self):
        # degenerate zero codebooks reconstruct alpha*r only
        params = make_params(np.zeros((1, 2, 2)), ref=[0.0, 1.0])
        trace = quantize_full([1.0, 0.0], params)
        assert reconstruction_loss(trace, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_equals_final_residual_norm(self):
        rng = np.random.default_rng(0)
        params = make_params(rng.normal(size=(3, 4, 5)), ref=rng.normal(size=5))
        for _ in range(20):
            x = rng.normal(size=5)
            trace = quantize_full(x, params)
            oracle = float((trace.layers[-1].output_residual ** 2).sum())
            assert reconstruction_loss(trace, x) == pytest.approx(oracle, abs=1e-6)


class TestBatchSc:
    def _traces_with_q(self, qs, codes):
        """Build minimal stand-in traces: single layer whose quantized == q."""
        class _Layer:
            def __init__(self, q):
                self.quantized = np.asarray(q, dtype=np.float64)

        class _Trace:
            def __init__(self, q, code):
                self.layers = [_Layer(q)]
                self.sid = np.array([code])

        return [_Trace(q, c) for q, c in zip(qs, codes)]

    def test_identical_members(self):
        traces = self._traces_with_q([[1.0, 2.0]] * 3, [0, 0, 0])
        assert batch_sc(traces) == pytest.approx(1.0)

    def test_orthogonal_pair(self):
        traces = self._traces_with_q([[1.0, 0.0], [0.0, 1.0]], [0, 0])
        assert batch_sc(traces) == pytest.approx(0.0, abs=1e-12)

    def test_three_member_group_brute_force(self):
        qs = [[1.0, 0.0], [0.0, 1.0], [0.7071, 0.7071]]
        traces = self._traces_with_q(qs, [5, 5, 5])
        assert batch_sc(traces) == pytest.approx(0.4714, abs=1e-3)

    def test_two_groups_mean(self):
        qs = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
        codes = [0, 0, 1, 1]
        traces = self._traces_with_q(qs, codes)
        assert batch_sc(traces) == pytest.approx(0.5)

    def test_no_qualifying_group_is_zero(self):
        traces = self._traces_with_q([[1.0, 0.0], [0.0, 1.0]], [0, 1])
        assert batch_sc(traces) == 0.0

    def test_small_batch_rejected(self):
        traces = self._traces_with_q([[1.0, 0.0]], [0])
        with pytest.raises(ValueError):
            batch_sc(traces)

    def test_range(self):
        rng = np.random.default_rng(1)
        params = make_params(rng.normal(size=(2, 3, 4)), ref=rng.normal(size=4))
        traces = [quantize_full(rng.normal(size=4), params) for _ in range(12)]
        assert -1.0 <= batch_sc(traces) <= 1.0


class TestBatchPd:
    def test_identical_codewords(self):
        params = make_params(np.tile([1.0, 2.0], (3, 1))[None, :, :])
        assert batch_pd(params, t=2.0) == pytest.approx(0.0, abs=1e-9)

    def test_orthogonal_pair(self):
        params = make_params(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        assert batch_pd(params, t=2.0) == pytest.approx(-2.0, abs=1e-9)

    def test_antipodal_pair(self):
        params = make_params(np.array([[[1.0, 0.0], [-1.0, 0.0]]]))
        assert batch_pd(params, t=2.0) == pytest.approx(-4.0, abs=1e-9)

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            params = make_params(rng.normal(size=(2, 5, 3)))
            t = float(rng.uniform(0.5, 4.0))
            assert -2.0 * t - 1e-9 <= batch_pd(params, t) <= 1e-9


class TestTotalLoss:
    def test_lambda_zero(self):
        bd = total_loss(rec=2.5, sc=0.9, pd=-1.0, lam=0.0)
        assert bd.total == 2.5

    def test_hand_arithmetic(self):
        bd = total_loss(rec=1.0, sc=0.5, pd=-2.0, lam=0.01)
        assert bd.total == pytest.approx(0.975)
        assert bd.metric == pytest.approx(-2.5)

    def test_zero_terms(self):
        assert total_loss(rec=3.0, sc=0.0, pd=0.0, lam=0.75).total == 3.0

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(3)
        rec, sc, pd = 1.7, 0.3, -1.1
        for _ in range(10):
            l1, l2 = rng.uniform(0, 1, size=2)
            b1 = total_loss(rec, sc, pd, l1)
            b2 = total_loss(rec, sc, pd, l2)
            mid = total_loss(rec, sc, pd, (l1 + l2) / 2)
            assert mid.total == pytest.approx((b1.total + b2.total) / 2, rel=1e-12)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 0.0, 0.0, -0.1)

    def test_invariant_total_vs_metric(self):
        bd = total_loss(rec=0.4, sc=0.2, pd=-3.0, lam=0.05)
        assert abs(bd.total - (bd.rec + bd.lam * bd.metric)) < 1e-6
        assert bd.rec >= 0


def _full_loss_value(X, ref64, books64, top_k, lam, t):
    """64-bit shadow evaluation of the total loss at arbitrary parameters."""
    from sidforge.quantizer import _forward_batch
    from sidforge.losses import _pd_codebooks, _sc_arrays

    fwd = _forward_batch(X, ref64, books64, top_k)
    rec = float((fwd.residuals[-1] ** 2).sum(axis=1).mean())
    q = fwd.ehat.sum(axis=0)
    sc, _, _ = _sc_arrays(q, fwd.sids[:, 0])
    pd, _ = _pd_codebooks(books64, t)
    return rec + lam * (-sc + pd)


class TestLossGradients:
    def test_lambda_zero_equals_pure_reconstruction(self):
        rng = np.random.default_rng(4)
        params = make_params(rng.normal(size=(2, 3, 4)), ref=rng.normal(size=4))
        traces = [quantize_full(rng.normal(size=4), params) for _ in range(5)]
        grads0, bd0 = loss_gradients(traces, params, lam=0.0)
        # reconstruction-only gradients assembled trace by trace
        from sidforge.quantizer import quantize_backward

        acc_ref = np.zeros(4)
        acc_books = np.zeros(params.codebooks.shape)
        for trace in traces:
            g = quantize_backward(trace, params,
                                  (-2.0 / len(traces)) * trace.layers[-1].output_residual)
            acc_ref += g.ref
            acc_books += g.codebooks
        np.testing.assert_allclose(grads0.ref, acc_ref, atol=1e-10)
        np.testing.assert_allclose(grads0.codebooks, acc_books, atol=1e-10)
        assert bd0.total == bd0.rec

    def test_pd_only_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        books = rng.normal(size=(1, 2, 2))
        t = 2.0

        def f(b64):
            from sidforge.losses import _pd_codebooks

            return _pd_codebooks(b64, t)[0]

        from sidforge.losses import _pd_codebooks

        value, grad = _pd_codebooks(books, t)
        fd = central_diff(f, books)
        assert rel_error(fd, grad) < 1e-4

    @pytest.mark.parametrize("lam", [0.0, 0.01])
    def test_full_loss_gradients_match_fd(self, lam):
        rng = np.random.default_rng(6)
        d, m, layers, batch = 4, 3, 2, 4
        ref = rng.normal(size=d).astype(np.float32).astype(np.float64)
        books = rng.normal(size=(layers, m, d)).astype(np.float32).astype(np.float64)
        X = rng.normal(size=(batch, d))
        params = make_params(books, ref=ref)
        traces = [quantize_full(x, params) for x in X]
        grads, _ = loss_gradients(traces, params, lam=lam, t=2.0)

        fd_ref = central_diff(lambda v: _full_loss_value(X, v, books, m, lam, 2.0), ref)
        fd_books = central_diff(lambda v: _full_loss_value(X, ref, v, m, lam, 2.0), books)
        assert rel_error(fd_ref, grads.ref) < 1e-4
        assert rel_error(fd_books, grads.codebooks) < 1e-4
