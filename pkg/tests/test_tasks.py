"""
Synthetic tasks and domains used by the optimiser.
"""
import numpy as np
import pytest

from app.core.errors import ConfigurationError, DimensionError
from app.models.schemas import TaskKind
from app.services.channel import substream
from app.services.tasks import (
    EuclideanBall,
    L1Consensus,
    QuadraticConsensus,
    Unconstrained,
    make_task,
    partition,
)


def _mean_gradient(task, x):
    return np.mean([task.local_gradient(k, x) for k in range(task.K)], axis=0)


class TestDomains:
    """Projection onto the feasible set."""

    def test_ball_projection(self):
        ball = EuclideanBall(1.0)
        np.testing.assert_allclose(ball.project(np.array([3.0, 4.0])), [0.6, 0.8])
        np.testing.assert_array_equal(ball.project(np.array([0.3, 0.4])), [0.3, 0.4])

    def test_ball_samples_stay_inside(self):
        ball = EuclideanBall(2.0)
        points = ball.sample(substream(1), 500, 3)
        assert all(ball.contains(x) for x in points)

    def test_ball_radius_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            EuclideanBall(0.0)

    def test_unconstrained_projection_is_identity(self):
        x = np.array([1e6, -3.0])
        np.testing.assert_array_equal(Unconstrained().project(x), x)


class TestQuadraticConsensus:
    """f_k(x) = 0.5 ||x - c_k||^2."""

    def test_common_center(self):
        center = np.array([1.0, -2.0, 0.5])
        task = QuadraticConsensus(np.tile(center, (4, 1)))
        np.testing.assert_array_equal(task.x_star, center)
        assert task.gap(center) == pytest.approx(0.0)
        np.testing.assert_allclose(task.drift(), 0.0)

    def test_lipschitz_constant_on_the_ball(self):
        task = make_task(TaskKind.QUADRATIC_CONSENSUS, 4, 3, substream(2))
        radius = task.domain.radius
        assert task.L == pytest.approx(radius + np.linalg.norm(task.centers, axis=1).max())

    def test_heterogeneous_centers_drift(self):
        task = make_task(TaskKind.QUADRATIC_CONSENSUS, 4, 3, substream(3), heterogeneous=True)
        assert np.all(task.drift() > 1e-3)
        np.testing.assert_allclose(_mean_gradient(task, task.x_star), 0.0, atol=1e-12)

    def test_gap_is_nonnegative(self):
        task = make_task(TaskKind.QUADRATIC_CONSENSUS, 4, 3, substream(4), heterogeneous=True)
        rng = substream(5)
        for _ in range(50):
            assert task.gap(rng.standard_normal(3)) >= -1e-12


class TestL1Consensus:
    """Non-smooth consensus with the coordinate-wise median as optimum."""

    def test_median_is_optimal(self):
        task = make_task(TaskKind.L1_CONSENSUS, 5, 4, substream(6), heterogeneous=True)
        rng = substream(7)
        for _ in range(50):
            assert task.value(task.x_star + 0.1 * rng.standard_normal(4)) >= task.f_star - 1e-12

    def test_subgradient_is_a_sign(self):
        task = L1Consensus(np.array([[0.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(task.local_gradient(1, np.array([2.0, 0.0])), [1.0, -1.0])


class TestRegression:
    """Empirical-risk tasks and their optima."""

    def test_ridge_optimum_is_stationary(self):
        task = make_task(TaskKind.RIDGE_REGRESSION, 4, 5, substream(8))
        np.testing.assert_allclose(_mean_gradient(task, task.x_star), 0.0, atol=1e-10)

    def test_logistic_optimum_is_stationary(self):
        task = make_task(TaskKind.LOGISTIC_REGRESSION, 4, 5, substream(9))
        np.testing.assert_allclose(_mean_gradient(task, task.x_star), 0.0, atol=1e-6)

    def test_minibatch_gradients_are_unbiased(self):
        task = make_task(TaskKind.RIDGE_REGRESSION, 3, 4, substream(10), batch_size=8)
        x = np.ones(4)
        rng = substream(11)
        samples = np.stack([task.sample_gradient(0, x, rng) for _ in range(4000)])
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
        assert np.all(np.abs(samples.mean(axis=0) - task.local_gradient(0, x)) <= 4.5 * stderr)

    def test_heterogeneous_labels_drift(self):
        task = make_task(TaskKind.LOGISTIC_REGRESSION, 4, 5, substream(12), heterogeneous=True)
        assert task.drift().max() > 1e-3


class TestPartition:
    """Equal shards, label-sorted when heterogeneous."""

    def test_iid_partition_covers_everything(self):
        parts = partition(np.arange(40.0), 4, substream(13), heterogeneous=False)
        assert sorted(np.concatenate(parts).tolist()) == list(range(40))
        assert {len(part) for part in parts} == {10}

    def test_label_sorted_shards(self):
        labels = np.repeat(np.arange(4.0), 10)
        parts = partition(labels, 4, substream(14), heterogeneous=True)
        assert sorted(np.concatenate(parts).tolist()) == list(range(40))
        for part in parts:
            assert len(np.unique(labels[part])) <= 2


class TestCalibration:
    """L, Omega and R after calibration."""

    def test_constants_are_positive(self):
        for kind in TaskKind:
            task = make_task(kind, 3, 4, substream(15))
            assert task.L > 0 and task.Omega > 0 and task.R >= 1.0 / np.sqrt(2.0)

    def test_noise_raises_omega(self):
        quiet = make_task(TaskKind.QUADRATIC_CONSENSUS, 3, 4, substream(16))
        noisy = make_task(TaskKind.QUADRATIC_CONSENSUS, 3, 4, substream(16), gradient_noise=5.0)
        assert noisy.Omega > quiet.Omega

    def test_subgradient_shape(self):
        task = make_task(TaskKind.QUADRATIC_CONSENSUS, 3, 4, substream(17))
        assert task.subgradients(np.zeros((3, 4)), substream(18)).shape == (3, 4)
        with pytest.raises(DimensionError):
            task.subgradients(np.zeros((2, 4)), substream(18))
