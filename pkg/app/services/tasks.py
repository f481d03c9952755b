"""
Synthetic convex tasks for the distributed optimiser, with feasible domains.

Each task holds K local objectives f_k, a (stochastic) subgradient oracle,
the optimum of the average objective, and calibrated constants L, Omega, R.
"""
import logging
from abc import ABC, abstractmethod
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from app.core.errors import ConfigurationError, DimensionError
from app.models.schemas import TaskKind


logger = logging.getLogger(__name__)

CALIBRATION_SAMPLES = 2000
CALIBRATION_PERCENTILE = 99.9
CALIBRATION_MARGIN = 1.5


# ==================== Domains ====================

class Domain(ABC):
    """Closed convex feasible set X."""

    @abstractmethod
    def project(self, x: np.ndarray) -> np.ndarray:
        """Euclidean projection onto X."""

    @abstractmethod
    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        pass

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int, D: int) -> np.ndarray:
        """n points spread over X (used for constant calibration)."""


class Unconstrained(Domain):
    def __init__(self, sample_radius: float = 1.0):
        self.sample_radius = sample_radius

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.all(np.isfinite(x)))

    def sample(self, rng: np.random.Generator, n: int, D: int) -> np.ndarray:
        return self.sample_radius / np.sqrt(D) * rng.standard_normal((n, D))

    def __repr__(self) -> str:
        return "Unconstrained()"


class EuclideanBall(Domain):
    def __init__(self, radius: float):
        if not radius > 0:
            raise ConfigurationError(f"ball radius must be positive, got {radius}", key="radius")
        self.radius = float(radius)

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        norm = np.linalg.norm(x)
        return x if norm <= self.radius else x * (self.radius / norm)

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(x) <= self.radius * (1.0 + tol))

    def sample(self, rng: np.random.Generator, n: int, D: int) -> np.ndarray:
        directions = rng.standard_normal((n, D))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return directions * self.radius * rng.uniform(size=(n, 1)) ** (1.0 / D)

    def __repr__(self) -> str:
        return f"EuclideanBall(radius={self.radius:.4g})"


def default_ball(x_star: np.ndarray) -> EuclideanBall:
    return EuclideanBall(max(2.0 * float(np.linalg.norm(x_star)), 1.0))


# ==================== Tasks ====================

class BaseTask(ABC):
    """K local objectives over a shared domain; F(x) = (1/K) sum_k f_k(x)."""

    kind: TaskKind

    def __init__(self, K: int, D: int, x_star: np.ndarray, domain: Optional[Domain] = None,
                 gradient_noise: float = 0.0):
        self.K = K
        self.D = D
        self.x_star = np.asarray(x_star, dtype=float)
        self.domain = domain or default_ball(self.x_star)
        self.gradient_noise = gradient_noise
        self.f_star = self.value(self.x_star)
        self.L = 0.0
        self.Omega = 0.0

    @abstractmethod
    def local_value(self, k: int, x: np.ndarray) -> float:
        pass

    @abstractmethod
    def local_gradient(self, k: int, x: np.ndarray) -> np.ndarray:
        """Exact (sub)gradient of f_k at x."""

    def sample_gradient(self, k: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Unbiased stochastic subgradient; exact unless overridden."""
        return self.local_gradient(k, x)

    @property
    def R(self) -> float:
        """sqrt of the proximal function 0.5||x||^2 at the optimum, floored."""
        return max(float(np.linalg.norm(self.x_star)), 1.0) / np.sqrt(2.0)

    def value(self, x: np.ndarray) -> float:
        return float(np.mean([self.local_value(k, x) for k in range(self.K)]))

    def gap(self, x: np.ndarray) -> float:
        return self.value(x) - self.f_star

    def subgradients(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Stochastic subgradients of every device at its own iterate, shape (K, D)."""
        X = np.asarray(X, dtype=float)
        if X.shape != (self.K, self.D):
            raise DimensionError(f"iterates must be ({self.K}, {self.D}), got {X.shape}")
        G = np.stack([self.sample_gradient(k, X[k], rng) for k in range(self.K)])
        if self.gradient_noise > 0:
            G = G + self.gradient_noise * rng.standard_normal(G.shape)
        return G

    def calibrate(self, rng: np.random.Generator, samples: int = CALIBRATION_SAMPLES) -> "BaseTask":
        """Empirical L and Omega over points of the domain, with a safety margin."""
        points = self.domain.sample(rng, samples, self.D)
        devices = rng.integers(0, self.K, size=samples)
        exact = np.array([np.linalg.norm(self.local_gradient(k, x)) for k, x in zip(devices, points)])
        noisy = np.empty(samples)
        for i, (k, x) in enumerate(zip(devices, points)):
            g = self.sample_gradient(k, x, rng)
            if self.gradient_noise > 0:
                g = g + self.gradient_noise * rng.standard_normal(self.D)
            noisy[i] = np.linalg.norm(g)
        self.L = CALIBRATION_MARGIN * float(exact.max())
        self.Omega = CALIBRATION_MARGIN * float(np.percentile(noisy, CALIBRATION_PERCENTILE))
        logger.debug("calibrated %s: L=%.4g Omega=%.4g R=%.4g", self.kind.value, self.L, self.Omega, self.R)
        return self

    def drift(self) -> np.ndarray:
        """||grad f_k(x*)|| per device; non-zero under heterogeneous data."""
        return np.array([np.linalg.norm(self.local_gradient(k, self.x_star)) for k in range(self.K)])


class QuadraticConsensus(BaseTask):
    """f_k(x) = 0.5 ||x - c_k||^2; identical centres unless heterogeneous."""

    kind = TaskKind.QUADRATIC_CONSENSUS

    def __init__(self, centers: np.ndarray, domain: Optional[Domain] = None, gradient_noise: float = 0.0):
        self.centers = np.asarray(centers, dtype=float)
        K, D = self.centers.shape
        super().__init__(K, D, self.centers.mean(axis=0), domain, gradient_noise)

    def local_value(self, k: int, x: np.ndarray) -> float:
        return 0.5 * float(np.sum((x - self.centers[k]) ** 2))

    def local_gradient(self, k: int, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) - self.centers[k]

    def calibrate(self, rng: np.random.Generator, samples: int = CALIBRATION_SAMPLES) -> "BaseTask":
        super().calibrate(rng, samples)
        if isinstance(self.domain, EuclideanBall):
            self.L = self.domain.radius + float(np.linalg.norm(self.centers, axis=1).max())
        return self


class L1Consensus(BaseTask):
    """Non-smooth f_k(x) = ||x - c_k||_1; the optimum is the coordinate-wise median."""

    kind = TaskKind.L1_CONSENSUS

    def __init__(self, centers: np.ndarray, domain: Optional[Domain] = None, gradient_noise: float = 0.0):
        self.centers = np.asarray(centers, dtype=float)
        K, D = self.centers.shape
        super().__init__(K, D, np.median(self.centers, axis=0), domain, gradient_noise)

    def local_value(self, k: int, x: np.ndarray) -> float:
        return float(np.sum(np.abs(x - self.centers[k])))

    def local_gradient(self, k: int, x: np.ndarray) -> np.ndarray:
        return np.sign(np.asarray(x, dtype=float) - self.centers[k])


class _ShardedTask(BaseTask):
    """Empirical-risk task with equal-size local datasets and minibatch gradients."""

    def __init__(self, features: list[np.ndarray], labels: list[np.ndarray], reg: float,
                 batch_size: int, gradient_noise: float):
        self.features = features
        self.labels = labels
        self.reg = reg
        self.batch_size = batch_size
        K, D = len(features), features[0].shape[1]
        super().__init__(K, D, self._solve(), None, gradient_noise)

    @abstractmethod
    def _loss(self, A: np.ndarray, y: np.ndarray, x: np.ndarray) -> float:
        pass

    @abstractmethod
    def _loss_gradient(self, A: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def _solve(self) -> np.ndarray:
        pass

    def local_value(self, k: int, x: np.ndarray) -> float:
        return self._loss(self.features[k], self.labels[k], x) + 0.5 * self.reg * float(x @ x)

    def local_gradient(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._loss_gradient(self.features[k], self.labels[k], x) + self.reg * x

    def sample_gradient(self, k: int, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = self.labels[k].size
        if self.batch_size >= n:
            return self.local_gradient(k, x)
        idx = rng.choice(n, size=self.batch_size, replace=False)
        return self._loss_gradient(self.features[k][idx], self.labels[k][idx], x) + self.reg * x

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.features), np.concatenate(self.labels)


class RidgeRegression(_ShardedTask):
    """f_k(x) = (1/2n) ||A_k x - y_k||^2 + (reg/2) ||x||^2."""

    kind = TaskKind.RIDGE_REGRESSION

    def _loss(self, A, y, x):
        return 0.5 * float(np.mean((A @ x - y) ** 2))

    def _loss_gradient(self, A, y, x):
        return A.T @ (A @ x - y) / y.size

    def _solve(self) -> np.ndarray:
        A, y = self.pooled()
        n, D = A.shape
        return np.linalg.solve(A.T @ A / n + self.reg * np.eye(D), A.T @ y / n)


class LogisticRegression(_ShardedTask):
    """f_k(x) = mean log(1 + exp(-y a^T x)) + (reg/2) ||x||^2 with labels in {-1, +1}."""

    kind = TaskKind.LOGISTIC_REGRESSION

    def _loss(self, A, y, x):
        return float(np.mean(np.logaddexp(0.0, -y * (A @ x))))

    def _loss_gradient(self, A, y, x):
        return -A.T @ (y * expit(-y * (A @ x))) / y.size

    def _solve(self) -> np.ndarray:
        A, y = self.pooled()
        D = A.shape[1]
        result = minimize(
            lambda x: self._loss(A, y, x) + 0.5 * self.reg * float(x @ x),
            np.zeros(D),
            jac=lambda x: self._loss_gradient(A, y, x) + self.reg * x,
            method="L-BFGS-B",
            options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000},
        )
        if not result.success:
            logger.warning("logistic optimum solve stopped early: %s", result.message)
        return result.x


# ==================== Factory ====================

def partition(labels: np.ndarray, K: int, rng: np.random.Generator, heterogeneous: bool) -> list[np.ndarray]:
    """
    Index sets for K devices of equal size. Heterogeneous partitioning sorts
    by label, cuts 2K shards and deals two random shards to each device.
    """
    n = labels.size
    if heterogeneous:
        order = np.argsort(labels, kind="stable")
        shards = np.array_split(order, 2 * K)
        deal = rng.permutation(2 * K)
        return [np.concatenate([shards[deal[2 * k]], shards[deal[2 * k + 1]]]) for k in range(K)]
    return np.array_split(rng.permutation(n), K)


def make_task(
    kind: TaskKind | str,
    K: int,
    D: int,
    rng: np.random.Generator,
    heterogeneous: bool = False,
    samples_per_device: int = 64,
    reg: float = 0.1,
    batch_size: int = 16,
    gradient_noise: float = 0.0,
    spread: float = 1.0,
) -> BaseTask:
    """Build and calibrate a synthetic task."""
    kind = TaskKind(kind)
    if kind in (TaskKind.QUADRATIC_CONSENSUS, TaskKind.L1_CONSENSUS):
        center = rng.standard_normal(D)
        offsets = spread * rng.standard_normal((K, D)) if heterogeneous else np.zeros((K, D))
        cls = QuadraticConsensus if kind == TaskKind.QUADRATIC_CONSENSUS else L1Consensus
        task = cls(center + offsets, gradient_noise=gradient_noise)
    else:
        n = K * samples_per_device
        A = rng.standard_normal((n, D))
        w = rng.standard_normal(D)
        margin = A @ w + 0.1 * rng.standard_normal(n)
        if kind == TaskKind.RIDGE_REGRESSION:
            labels, cls = margin, RidgeRegression
        else:
            labels, cls = np.where(margin >= 0, 1.0, -1.0), LogisticRegression
        shards = partition(labels, K, rng, heterogeneous)
        task = cls([A[idx] for idx in shards], [labels[idx] for idx in shards], reg, batch_size, gradient_noise)
    return task.calibrate(rng)
