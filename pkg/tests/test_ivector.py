"""UBM EM, Baum-Welch statistics, T-matrix EM, and i-vector extraction."""

import numpy as np
import pytest

from xldv.errors import InvalidArgumentError
from xldv.ivector import (
    SuffStats,
    TMatrix,
    UBM,
    accumulate_stats,
    extract_ivector,
    train_tmatrix,
    train_ubm,
)


def monotone(seq, rel=1e-6):
    return all(b >= a - rel * abs(a) for a, b in zip(seq, seq[1:]))


class TestTrainUbm:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(3.0, 2.0, (500, 4))
        ubm = train_ubm(frames, 1, n_iters=3, seed=1)
        np.testing.assert_allclose(ubm.means[0], frames.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(ubm.variances[0], frames.var(axis=0), atol=1e-8)
        np.testing.assert_allclose(ubm.weights, [1.0])

    def test_recovers_known_two_component_mixture(self):
        rng = np.random.default_rng(1)
        n = 4000
        means = np.array([[-3.0, 0.0], [3.0, 1.0]])
        comp = rng.integers(0, 2, n)
        frames = means[comp] + rng.normal(0.0, 1.0, (n, 2))
        ubm = train_ubm(frames, 2, n_iters=20, seed=2)
        order = np.argsort(ubm.means[:, 0])
        se = 1.0 / np.sqrt(n / 2)  # standard error of a component mean
        assert np.all(np.abs(ubm.means[order] - means) < 3 * se + 0.05)

    def test_loglik_nondecreasing(self):
        rng = np.random.default_rng(2)
        frames = np.concatenate([
            rng.normal(-2.0, 1.0, (300, 3)),
            rng.normal(2.0, 0.5, (300, 3)),
        ])
        ubm = train_ubm(frames, 4, n_iters=10, seed=3)
        assert len(ubm.objective) == 11
        assert monotone(ubm.objective)

    def test_weights_and_floors(self):
        rng = np.random.default_rng(3)
        frames = rng.normal(size=(400, 5))
        ubm = train_ubm(frames, 8, n_iters=5, seed=4)
        assert abs(ubm.weights.sum() - 1.0) < 1e-10
        floor = 1e-4 * frames.var(axis=0)
        assert np.all(ubm.variances >= floor - 1e-12)

    def test_too_few_frames_rejected(self):
        with pytest.raises(InvalidArgumentError):
            train_ubm(np.zeros((10, 2)), 32)


class TestAccumulateStats:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(4)
        frames = rng.normal(1.0, 1.0, (50, 3))
        ubm = train_ubm(frames, 1, n_iters=1, seed=0)
        stats = accumulate_stats(ubm, frames)
        np.testing.assert_allclose(stats.n, [50.0], atol=1e-10)
        np.testing.assert_allclose(
            stats.f[0], (frames - ubm.means[0]).sum(axis=0), atol=1e-8
        )

    def test_well_separated_posteriors_one_hot(self):
        ubm = UBM(
            weights=np.array([0.5, 0.5]),
            means=np.array([[-10.0, -10.0], [10.0, 10.0]]),
            variances=np.ones((2, 2)),
        )
        frames = np.array([[-10.0, -10.0], [10.0, 10.0], [-10.0, -10.0]])
        stats = accumulate_stats(ubm, frames)
        np.testing.assert_allclose(stats.n, [2.0, 1.0], atol=1e-10)

    def test_occupancies_sum_to_frame_count(self):
        rng = np.random.default_rng(5)
        frames = rng.normal(size=(120, 4))
        ubm = train_ubm(frames, 4, n_iters=3, seed=5)
        stats = accumulate_stats(ubm, frames[:37])
        assert abs(stats.n.sum() - 37.0) < 1e-6

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        ubm = train_ubm(rng.normal(size=(100, 4)), 2, n_iters=1, seed=6)
        with pytest.raises(InvalidArgumentError):
            accumulate_stats(ubm, rng.normal(size=(10, 5)))


def synthetic_stats_from_model(ubm, t_true, n_utts, frames_per_utt, seed):
    """Sample frames from M = m + T w and accumulate true statistics."""
    rng = np.random.default_rng(seed)
    c, d = ubm.n_components, ubm.dim
    stats = []
    for _ in range(n_utts):
        w = rng.normal(size=t_true.shape[1])
        shift = (t_true @ w).reshape(c, d)
        comps = rng.choice(c, size=frames_per_utt, p=ubm.weights)
        frames = (
            ubm.means[comps]
            + shift[comps]
            + rng.normal(size=(frames_per_utt, d)) * np.sqrt(ubm.variances[comps])
        )
        stats.append(accumulate_stats(ubm, frames))
    return stats


class TestTrainTmatrix:
    def _ubm(self):
        return UBM(
            weights=np.array([0.5, 0.5]),
            means=np.array([[-5.0, 0.0], [5.0, 1.0]]),
            variances=np.full((2, 2), 0.25),
        )

    def test_recovers_subspace_angle(self):
        ubm = self._ubm()
        rng = np.random.default_rng(7)
        t_true = rng.normal(size=(4, 1)) * 2.0
        stats = synthetic_stats_from_model(ubm, t_true, 400, 80, seed=8)
        tmat = train_tmatrix(ubm, stats, rank=1, n_iters=10, seed=9)
        cos = np.abs(
            (tmat.t[:, 0] @ t_true[:, 0])
            / (np.linalg.norm(tmat.t) * np.linalg.norm(t_true))
        )
        angle = np.degrees(np.arccos(min(cos, 1.0)))
        assert angle < 5.0

    def test_objective_nondecreasing(self):
        ubm = self._ubm()
        rng = np.random.default_rng(10)
        t_true = rng.normal(size=(4, 2))
        stats = synthetic_stats_from_model(ubm, t_true, 100, 40, seed=11)
        tmat = train_tmatrix(ubm, stats, rank=2, n_iters=10, seed=12)
        assert len(tmat.objective) == 11
        assert monotone(tmat.objective)

    def test_zero_first_order_stats_keep_prior_mean(self):
        ubm = self._ubm()
        stats = [
            SuffStats(n=np.array([20.0, 20.0]), f=np.zeros((2, 2)), n_frames=40)
            for _ in range(8)
        ]
        tmat = train_tmatrix(ubm, stats, rank=2, n_iters=3, seed=13)
        for s in stats:
            np.testing.assert_allclose(extract_ivector(ubm, tmat, s), 0.0, atol=1e-12)

    def test_needs_enough_utterances(self):
        ubm = self._ubm()
        with pytest.raises(InvalidArgumentError):
            train_tmatrix(ubm, [], rank=2)


class TestExtractIvector:
    def _setup(self, seed=14):
        ubm = UBM(
            weights=np.array([1.0]),
            means=np.zeros((1, 1)),
            variances=np.full((1, 1), 2.0),
        )
        tmat = TMatrix(t=np.array([[1.5]]), n_components=1, dim=1)
        return ubm, tmat

    def test_zero_first_order_gives_zero(self):
        ubm, tmat = self._setup()
        stats = SuffStats(n=np.array([10.0]), f=np.zeros((1, 1)), n_frames=10)
        np.testing.assert_allclose(extract_ivector(ubm, tmat, stats), [0.0])

    def test_empty_stats_give_zero(self):
        ubm, tmat = self._setup()
        stats = SuffStats(n=np.array([0.0]), f=np.zeros((1, 1)), n_frames=0)
        np.testing.assert_allclose(extract_ivector(ubm, tmat, stats), [0.0])

    def test_scalar_closed_form_oracle(self):
        # C=1, D=1, R=1: w = (1 + t^2 n / var)^-1 * t f / var
        ubm, tmat = self._setup()
        n, f, t, var = 7.0, 3.0, 1.5, 2.0
        stats = SuffStats(n=np.array([n]), f=np.array([[f]]), n_frames=7)
        expected = (t * f / var) / (1.0 + t * t * n / var)
        np.testing.assert_allclose(
            extract_ivector(ubm, tmat, stats), [expected], atol=1e-12
        )

    def test_linear_in_first_order_stats(self):
        ubm = UBM(
            weights=np.array([0.5, 0.5]),
            means=np.zeros((2, 3)),
            variances=np.ones((2, 3)),
        )
        rng = np.random.default_rng(15)
        tmat = TMatrix(t=rng.normal(size=(6, 2)), n_components=2, dim=3)
        n = np.array([5.0, 3.0])
        f = rng.normal(size=(2, 3))
        w1 = extract_ivector(ubm, tmat, SuffStats(n=n, f=f, n_frames=8))
        w2 = extract_ivector(ubm, tmat, SuffStats(n=n, f=2.5 * f, n_frames=8))
        np.testing.assert_allclose(w2, 2.5 * w1, atol=1e-10)
