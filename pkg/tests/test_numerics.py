import numpy as np
import pytest

from sidforge.numerics import cosine_sim, dot, l2_norm, pca_project, softmax


class TestDot:
    def test_orthogonal(self):
        assert dot([1, 0], [0, 1]) == 0.0

    def test_hand_value(self):
        assert dot([1, 2], [3, 4]) == 11.0

    def test_squared_norm(self):
        assert dot([3, 4], [3, 4]) == 25.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            dot([1, 2], [1, 2, 3])

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.normal(size=7)
            b = rng.normal(size=7)
            assert dot(a, b) == dot(b, a)


class TestL2Norm:
    def test_pythagorean(self):
        assert l2_norm([3, 4]) == 5.0

    def test_zero(self):
        assert l2_norm([0, 0]) == 0.0

    def test_ones(self):
        assert l2_norm([1, 1, 1, 1]) == 2.0


class TestCosineSim:
    def test_parallel(self):
        assert cosine_sim([1, 0], [2, 0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 3]) == 0.0

    def test_45_degrees(self):
        assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)

    def test_zero_vector_defined_as_zero(self):
        assert cosine_sim([0, 0], [1, 2]) == 0.0

    def test_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a = rng.normal(size=5)
            b = rng.normal(size=5)
            assert -1 - 1e-6 <= cosine_sim(a, b) <= 1 + 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine_sim([1], [1, 2])


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax([0, 0]), [0.5, 0.5])

    def test_two_way(self):
        np.testing.assert_allclose(softmax([1, 0]), [0.7311, 0.2689], atol=1e-4)

    def test_constant_input(self):
        for c in (-3.0, 0.0, 17.5):
            np.testing.assert_allclose(softmax([c, c, c]), [1 / 3] * 3)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            s = rng.normal(scale=10, size=9)
            w = softmax(s)
            assert abs(w.sum() - 1.0) < 1e-6
            assert np.all(w > 0)
            np.testing.assert_allclose(w, softmax(s + 123.456), atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax([])

    def test_large_values_no_overflow(self):
        w = softmax([1000.0, 1000.0])
        np.testing.assert_allclose(w, [0.5, 0.5])


class TestPcaProject:
    def test_line_preserves_distance_ordering(self):
        pts = np.array([[t, 2 * t] for t in (0.0, 1.0, 2.5, 7.0)])
        proj = pca_project(pts, 1)[:, 0]
        gaps = np.abs(np.diff(proj))
        assert gaps[0] < gaps[1] < gaps[2]

    def test_variance_preserved_against_eigh_oracle(self):
        rng = np.random.default_rng(3)
        for d in (2, 3, 4):
            x = rng.normal(size=(40, d)) @ rng.normal(size=(d, d))
            proj = pca_project(x, d).astype(np.float64)
            centered = x - x.mean(axis=0)
            cov = centered.T @ centered / (len(x) - 1)
            oracle_var = float(np.linalg.eigh(cov)[0].sum())
            got_var = float(proj.var(axis=0, ddof=1).sum())
            assert got_var == pytest.approx(oracle_var, rel=1e-3)

    def test_top_component_matches_eigh(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(60, 3)) * np.array([5.0, 1.0, 0.2])
        proj = pca_project(x, 1).astype(np.float64)
        centered = x - x.mean(axis=0)
        cov = centered.T @ centered / 59
        vals, vecs = np.linalg.eigh(cov)
        oracle = centered @ vecs[:, -1]
        # same up to sign
        agreement = abs(float(np.dot(proj[:, 0], oracle)) / (np.linalg.norm(proj) * np.linalg.norm(oracle)))
        assert agreement == pytest.approx(1.0, abs=1e-6)

    def test_degenerate_rows_give_zeros(self):
        x = np.tile([1.0, 2.0, 3.0], (5, 1))
        proj = pca_project(x, 2)
        assert np.all(proj == 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            pca_project(np.zeros((1, 3)), 1)
        with pytest.raises(ValueError):
            pca_project(np.zeros((4, 3)), 4)
