"""
MMSE distributed multicast beamforming.

For fixed beamformers the best receive scaling has a closed form, which turns
the design into maximising the aligned fraction

    F(p) = sum_k Re(a_k^H p_k) / sqrt(K sigma2 + sum_k p_k^H Q_k p_k)

with a_k = sum_l h[k, l] and Q_k = H_k H_k^H, under per-device power budgets.
The maximum is found by bisection on alpha: for each alpha a convex
power-minimisation subproblem (one second-order cone constraint plus K
norm constraints) is solved with a log-barrier Newton method, and alpha is
feasible when the minimal peak power fits the budget.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy.linalg import LinAlgError, block_diag, solve
from scipy.optimize import nnls

from app.core.errors import (
    DataError,
    DegenerateBeamformerError,
    DimensionError,
    InstanceTooLargeError,
    SingularChannelError,
    SolverError,
)
from app.models.schemas import BisectionConfig, Scheme
from app.services.aircomp_signal import BeamformingSolution
from app.services.channel import ChannelSet
from app.services.zf_beamforming import CONDITION_LIMIT, zf_design


logger = logging.getLogger(__name__)

FULL_POWER_TOL = 1e-4
LIMIT_MARGIN = 1e-12
MAX_BARRIER_STAGES = 100
NEWTON_TOL = 1e-10
TRACE_COLUMNS = ["iter", "p_max", "soc_slack", "stationarity"]


# ==================== Data types ====================

@dataclass(frozen=True)
class ChannelMoments:
    """Per-device aggregate channel a_k and Gram matrix Q_k."""
    a: np.ndarray  # (K, Nt)
    Q: np.ndarray  # (K, Nt, Nt)

    @classmethod
    def of(cls, ch: ChannelSet) -> "ChannelMoments":
        a = ch.h.sum(axis=1)
        Q = np.einsum("kln,klm->knm", ch.h, ch.h.conj())
        return cls(a=a, Q=Q)

    @property
    def K(self) -> int:
        return self.a.shape[0]

    @property
    def Nt(self) -> int:
        return self.a.shape[1]

    def signal(self, p: np.ndarray) -> float:
        """sum_k Re(a_k^H p_k)."""
        return float(np.real(np.einsum("kn,kn->", self.a.conj(), p)))

    def interference(self, p: np.ndarray) -> float:
        """sum_k p_k^H Q_k p_k = sum over links of |h^H p|^2."""
        return float(np.real(np.einsum("kn,knm,km->", p.conj(), self.Q, p)))


@dataclass
class KktReport:
    """Optimality conditions of the power-minimisation subproblem at a point."""
    stationarity_residual: np.ndarray
    full_power_devices: list[int]
    complementary_slackness: float
    mu: np.ndarray
    lam: float = 0.0
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    primal_residual: float = 0.0
    multiplier_residual: float = 0.0

    @property
    def max_residual(self) -> float:
        return float(max(
            np.max(self.stationarity_residual),
            self.complementary_slackness,
            self.primal_residual,
            self.multiplier_residual,
        ))


@dataclass
class PowerMinResult:
    """Minimal-peak-power beamformers for one target aligned fraction."""
    p: np.ndarray
    p_max: float
    kkt: KktReport
    iterations: int
    trace: list[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.p, self.p_max, self.kkt))


# ==================== Closed-form pieces ====================

def _as_beamformers(ch: ChannelSet, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=complex)
    if p.shape != (ch.K, ch.Nt):
        raise DimensionError(f"beamformers {p.shape} do not match channels ({ch.K}, {ch.Nt})")
    return p


def aligned_fraction(ch: ChannelSet, p: np.ndarray, sigma2: float) -> float:
    p = _as_beamformers(ch, p)
    m = ChannelMoments.of(ch)
    denominator = np.sqrt(ch.K * sigma2 + m.interference(p))
    if denominator == 0.0:
        return 0.0
    return m.signal(p) / denominator


def conditional_eta(ch: ChannelSet, p: np.ndarray, sigma2: float) -> float:
    """Receive scaling that minimises the sum AirComp error for fixed beamformers."""
    p = _as_beamformers(ch, p)
    m = ChannelMoments.of(ch)
    aligned = 2.0 * m.signal(p)
    if abs(aligned) <= np.finfo(float).tiny:
        raise DegenerateBeamformerError("beamformers deliver no aligned signal")
    return float(((2.0 * ch.K * sigma2 + 2.0 * m.interference(p)) / aligned) ** 2)


def mse_from_fraction(alpha: float, K: int, D: int, V: float) -> float:
    """Sum AirComp error at the optimal scaling, as a function of the aligned fraction."""
    return float(V ** 2 * D * (K / (K - 1) - alpha ** 2 / (K - 1) ** 2))


def _range_directions(m: ChannelMoments) -> np.ndarray:
    """Q_k^+ a_k for every device."""
    return np.einsum("knm,km->kn", np.linalg.pinv(m.Q, hermitian=True), m.a)


def feasibility_limit(ch: ChannelSet) -> float:
    """
    Supremum of attainable aligned fractions, sqrt(sum_k a_k^H Q_k^+ a_k).
    Equals sqrt(K(K-1)) when every H_k has full column rank.
    """
    m = ChannelMoments.of(ch)
    return float(np.sqrt(max(m.signal(_range_directions(m)), 0.0)))


def centroid_direction(
    Hk: np.ndarray,
    mode: Literal["partial", "full"] = "partial",
    mu: float = 0.0,
) -> np.ndarray:
    """Normalised column sum of the (regularised) channel-inversion precoder."""
    Hk = np.asarray(Hk, dtype=complex)
    ones = np.ones(Hk.shape[1], dtype=complex)
    if mode == "partial":
        if Hk.shape[0] != Hk.shape[1]:
            raise DimensionError("partial-power centroid needs a square channel matrix")
        system, rhs = Hk.conj().T, ones
    elif mode == "full":
        if mu < 0:
            raise DataError("mu must be non-negative")
        system = Hk @ Hk.conj().T + mu * np.eye(Hk.shape[0])
        rhs = Hk @ ones
    else:
        raise DataError(f"unknown centroid mode '{mode}'")

    condition = np.linalg.cond(system)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularChannelError(f"centroid system is singular (condition {condition:.3e})", condition=condition)
    direction = np.linalg.solve(system, rhs)
    return direction / np.linalg.norm(direction)


# ==================== Power-minimisation subproblem ====================

def _realify_vector(v: np.ndarray) -> np.ndarray:
    return np.concatenate([v.real, v.imag])


def _realify_matrix(Q: np.ndarray) -> np.ndarray:
    return np.block([[Q.real, -Q.imag], [Q.imag, Q.real]])


def _complexify(x: np.ndarray, K: int, Nt: int) -> np.ndarray:
    blocks = x.reshape(K, 2, Nt)
    return blocks[:, 0, :] + 1j * blocks[:, 1, :]


class _BarrierProblem:
    """Log-barrier form of the subproblem over real coordinates (x, t)."""

    def __init__(self, m: ChannelMoments, alpha: float, noise: float):
        self.alpha = alpha
        self.noise = noise  # K * sigma2 in the working scale
        self.ar = np.concatenate([_realify_vector(a) for a in m.a])
        self.Qr = block_diag(*[_realify_matrix(Q) for Q in m.Q])
        width = 2 * m.Nt
        self.blocks = [slice(width * k, width * (k + 1)) for k in range(m.K)]
        self.n_x = width * m.K

    def soc(self, x: np.ndarray) -> tuple[float, float, np.ndarray]:
        Qx = self.Qr @ x
        sq = np.sqrt(self.noise + x @ Qx)
        return self.alpha * sq - self.ar @ x, sq, Qx

    def slacks(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.array([t - x[b] @ x[b] for b in self.blocks])

    def value(self, x: np.ndarray, t: float, tau: float) -> float:
        c0 = self.soc(x)[0]
        d = self.slacks(x, t)
        if c0 >= 0 or np.any(d <= 0):
            return np.inf
        return tau * t - np.log(-c0) - np.sum(np.log(d))

    def newton_system(self, x: np.ndarray, t: float, tau: float) -> tuple[np.ndarray, np.ndarray]:
        c0, sq, Qx = self.soc(x)
        d = self.slacks(x, t)
        grad_c0 = self.alpha * Qx / sq - self.ar
        hess_c0 = self.alpha * (self.Qr / sq - np.outer(Qx, Qx) / sq ** 3)

        n = self.n_x
        g = np.zeros(n + 1)
        H = np.zeros((n + 1, n + 1))
        g[:n] = grad_c0 / (-c0)
        H[:n, :n] = hess_c0 / (-c0) + np.outer(grad_c0, grad_c0) / c0 ** 2
        g[n] = tau - np.sum(1.0 / d)
        H[n, n] = np.sum(1.0 / d ** 2)
        for b, dk in zip(self.blocks, d):
            xb = x[b]
            g[b] += 2.0 * xb / dk
            H[b, b] += 2.0 * np.eye(xb.size) / dk + 4.0 * np.outer(xb, xb) / dk ** 2
            H[b, n] = -2.0 * xb / dk ** 2
            H[n, b] = -2.0 * xb / dk ** 2
        return g, H

    def duals(self, x: np.ndarray, t: float, tau: float) -> tuple[float, np.ndarray]:
        """Central-path multipliers of the cone and power constraints."""
        c0 = self.soc(x)[0]
        return 1.0 / (tau * (-c0)), 1.0 / (tau * self.slacks(x, t))


def _center(problem: _BarrierProblem, x: np.ndarray, t: float, tau: float, max_iter: int):
    """Damped Newton minimisation of the barrier function at fixed tau."""
    for iteration in range(1, max_iter + 1):
        g, H = problem.newton_system(x, t, tau)
        try:
            step = solve(H, -g, assume_a="sym")
        except LinAlgError as exc:
            raise SolverError("Newton system is singular", best_iterate=(x, t)) from exc

        decrement = -g @ step
        if decrement / 2.0 <= NEWTON_TOL:
            return x, t, iteration

        current = problem.value(x, t, tau)
        s = 1.0
        while s > 1e-14:
            x_new, t_new = x + s * step[:-1], t + s * step[-1]
            if problem.value(x_new, t_new, tau) <= current - 0.25 * s * decrement:
                break
            s *= 0.5
        else:
            # no descent left at machine precision
            return x, t, iteration
        x, t = x_new, t_new

    raise SolverError(f"Newton centring did not converge in {max_iter} iterations", best_iterate=(x, t))


def _kkt_report(
    m: ChannelMoments,
    p: np.ndarray,
    t: float,
    alpha: float,
    sigma2: float,
    lam: float,
    nu: np.ndarray,
    full_power_tol: float = FULL_POWER_TOL,
) -> KktReport:
    powers = np.sum(np.abs(p) ** 2, axis=1)
    sq = np.sqrt(m.K * sigma2 + m.interference(p))
    grad = alpha * np.einsum("knm,km->kn", m.Q, p) / sq - m.a
    c0 = alpha * sq - m.signal(p)

    residual = np.linalg.norm(lam * grad + 2.0 * nu[:, None] * p, axis=1)
    if lam > 0:
        mu = 2.0 * nu * sq / (lam * alpha)
    else:
        mu = np.full(m.K, np.inf)

    return KktReport(
        stationarity_residual=residual,
        full_power_devices=[k for k in range(m.K) if powers[k] >= t * (1.0 - full_power_tol)],
        complementary_slackness=float(max(abs(lam * c0), np.max(np.abs(nu * (powers - t))))),
        mu=mu,
        lam=float(lam),
        nu=nu,
        primal_residual=float(max(0.0, c0, np.max(powers - t))),
        multiplier_residual=float(abs(1.0 - np.sum(nu))),
    )


def solve_power_min(
    ch: ChannelSet,
    alpha: float,
    sigma2: float,
    cfg: Optional[BisectionConfig] = None,
    moments: Optional[ChannelMoments] = None,
) -> PowerMinResult:
    """
    Smallest peak power max_k ||p_k||^2 at which the aligned fraction alpha is
    attainable.

    The problem is solved in a rescaled variable y = p / c, with c picked so
    that c * Q^+ a is strictly feasible; this keeps iterates of order one for
    any alpha below the attainable limit.
    """
    cfg = cfg or BisectionConfig()
    if not alpha > 0:
        raise DataError(f"alpha must be positive, got {alpha}")
    if not sigma2 > 0:
        raise DataError("the power-minimisation subproblem needs sigma2 > 0")

    m = moments or ChannelMoments.of(ch)
    K, Nt = m.K, m.Nt
    direction = _range_directions(m)
    reach = m.signal(direction)
    if reach <= 0:
        raise DegenerateBeamformerError("channels carry no aligned signal")
    if alpha ** 2 >= reach * (1.0 - LIMIT_MARGIN):
        raise SolverError(f"aligned fraction {alpha:.6g} is not attainable (limit {np.sqrt(reach):.6g})")

    scale = 2.0 * alpha * np.sqrt(K * sigma2 / (reach * (reach - alpha ** 2)))
    problem = _BarrierProblem(m, alpha, K * sigma2 / scale ** 2)

    x = np.concatenate([_realify_vector(v) for v in direction])
    t = 1.5 * max(x[b] @ x[b] for b in problem.blocks)
    constraints = K + 1
    tau = constraints / t
    iterations = 0
    trace: list[dict] = []

    for stage in range(MAX_BARRIER_STAGES):
        x, t, steps = _center(problem, x, t, tau, cfg.max_inner)
        iterations += steps
        if cfg.record_trace:
            g, _ = problem.newton_system(x, t, tau)
            trace.append({
                "iter": iterations,
                "p_max": scale ** 2 * max(x[b] @ x[b] for b in problem.blocks),
                "soc_slack": -scale * problem.soc(x)[0],
                "stationarity": float(np.linalg.norm(g) / tau),
            })
        if constraints / tau <= cfg.inner_tol * t:
            break
        tau *= cfg.barrier_factor
    else:
        raise SolverError("barrier method did not reach the requested gap", best_iterate=(x, t))

    lam, nu = problem.duals(x, t, tau)
    p = scale * _complexify(x, K, Nt)
    powers = np.sum(np.abs(p) ** 2, axis=1)
    kkt = _kkt_report(m, p, scale ** 2 * t, alpha, sigma2, scale * lam, nu)
    logger.debug("power-min alpha=%.6g p_max=%.6g newton=%d", alpha, powers.max(), iterations)
    return PowerMinResult(p=p, p_max=float(powers.max()), kkt=kkt, iterations=iterations, trace=trace)


# ==================== Bisection design ====================

def mmse_design(
    ch: ChannelSet,
    P0: float,
    sigma2: float,
    cfg: Optional[BisectionConfig] = None,
) -> BeamformingSolution:
    """
    Bisection on the aligned fraction. The last feasible beamformers are scaled
    so the strongest device transmits at exactly P0, and the zero-forcing
    design is kept instead whenever it reaches a higher aligned fraction.
    """
    cfg = cfg or BisectionConfig()
    if not sigma2 > 0:
        raise DataError("MMSE design needs sigma2 > 0")
    m = ChannelMoments.of(ch)
    limit = feasibility_limit(ch)
    iterations = 0

    def attempt(alpha: float) -> Optional[PowerMinResult]:
        nonlocal iterations
        if alpha ** 2 >= limit ** 2 * (1.0 - LIMIT_MARGIN):
            return None
        try:
            result = solve_power_min(ch, alpha, sigma2, cfg, moments=m)
        except SolverError as exc:
            logger.debug("treating alpha=%.6g as unattainable: %s", alpha, exc)
            return None
        iterations += result.iterations
        return result

    lo, hi = 0.0, 1.0
    best: Optional[PowerMinResult] = None
    doublings = 0
    bracket_flag = False
    while True:
        result = attempt(hi)
        if result is None or result.p_max > P0:
            hi = min(hi, limit)
            break
        lo, best = hi, result
        hi *= 2.0
        doublings += 1
        if doublings >= cfg.max_doublings:
            bracket_flag = True
            logger.warning("could not bracket alpha after %d doublings; using full-power limit", doublings)
            break

    steps = 0
    while not bracket_flag and hi - lo >= cfg.eps_alpha and steps < cfg.max_outer:
        mid = 0.5 * (lo + hi)
        steps += 1
        result = attempt(mid)
        if result is not None and result.p_max <= P0:
            lo, best = mid, result
        else:
            hi = mid

    if best is None:
        raise SolverError(f"no aligned fraction above {hi:.3e} fits the power budget")

    p = best.p * np.sqrt(P0 / best.p_max)
    if m.signal(p) < 0:
        p = -p
    incumbent = "bisection"
    try:
        zf = zf_design(ch, P0)
        if aligned_fraction(ch, zf.p, sigma2) > aligned_fraction(ch, p, sigma2):
            p, incumbent = zf.p, "zero_forcing"
    except SingularChannelError:
        pass

    alpha = aligned_fraction(ch, p, sigma2)
    logger.debug(
        "MMSE design: alpha=%.6g in [%.6g, %.6g] after %d steps (%s)", alpha, lo, hi, steps, incumbent
    )
    return BeamformingSolution(
        scheme=Scheme.MMSE,
        p=p,
        eta=conditional_eta(ch, p, sigma2),
        alpha=alpha,
        diagnostics={
            "alpha_lower": lo,
            "alpha_upper": hi,
            "alpha_limit": limit,
            "bisection_steps": steps,
            "doublings": doublings,
            "bracket_flag": bracket_flag,
            "incumbent": incumbent,
            "inner_iterations": iterations,
            "kkt": best.kkt,
            "trace": best.trace,
        },
    )


# ==================== Diagnostics ====================

def kkt_residuals(
    ch: ChannelSet,
    sol: BeamformingSolution,
    sigma2: float,
    alpha: Optional[float] = None,
    full_power_tol: float = FULL_POWER_TOL,
) -> KktReport:
    """
    Fit non-negative multipliers to the stationarity conditions at sol.p and
    report what is left over. Only full-power devices may carry a non-zero
    power multiplier.
    """
    alpha = sol.alpha if alpha is None else alpha
    if alpha is None or not alpha > 0:
        raise DataError("kkt_residuals needs a positive alpha")
    p = _as_beamformers(ch, sol.p)
    m = ChannelMoments.of(ch)
    K, Nt = m.K, m.Nt
    powers = np.sum(np.abs(p) ** 2, axis=1)
    t = float(powers.max())
    full = [k for k in range(K) if powers[k] >= t * (1.0 - full_power_tol)]

    sq = np.sqrt(K * sigma2 + m.interference(p))
    grad = alpha * np.einsum("knm,km->kn", m.Q, p) / sq - m.a
    width = 2 * Nt
    A = np.zeros((width * K + 1, 1 + len(full)))
    A[:-1, 0] = np.concatenate([_realify_vector(g) for g in grad])
    for j, k in enumerate(full):
        A[width * k:width * (k + 1), 1 + j] = 2.0 * _realify_vector(p[k])
        A[-1, 1 + j] = 1.0
    b = np.zeros(width * K + 1)
    b[-1] = 1.0

    z, _ = nnls(A, b)
    nu = np.zeros(K)
    nu[full] = z[1:]
    return _kkt_report(m, p, t, alpha, sigma2, float(z[0]), nu, full_power_tol)


def brute_force_mmse(
    ch: ChannelSet,
    P0: float,
    sigma2: float,
    grid_resolution: float = 1e-3,
    span_decades: float = 6.0,
) -> BeamformingSolution:
    """
    Exhaustive search over the phase-aligned family

        p_k(mu) = (mu Q_k + nu_k I)^{-1} a_k,

    which contains every maximiser of the aligned fraction. mu runs over a
    log grid of step grid_resolution (plus mu = 0, matched filtering) and
    nu_k >= 0 is the smallest value that meets device k's budget. Grids
    with the same span are nested, so halving the step never lowers the
    best fraction.
    """
    if ch.K > 3 or ch.Nt > 2:
        raise InstanceTooLargeError(f"brute-force search supports K <= 3, Nt <= 2 (got K={ch.K}, Nt={ch.Nt})")
    if not grid_resolution > 0:
        raise DataError("grid_resolution must be positive")

    m = ChannelMoments.of(ch)
    d, U = np.linalg.eigh(m.Q)
    d = np.clip(d, 0.0, None)
    b2 = np.abs(np.einsum("kji,kj->ki", U.conj(), m.a)) ** 2  # (K, Nt)
    active = b2 > 1e-24 * b2.sum(axis=1, keepdims=True)
    b2 = np.where(active, b2, 0.0)

    scale = np.sqrt(b2.sum(axis=1)).max() / (np.sqrt(P0) * max(d.max(), np.finfo(float).tiny))
    span = np.log(10.0) * 2.0 * span_decades
    offsets = np.arange(int(np.floor(span / grid_resolution)) + 1) * grid_resolution
    mus = np.concatenate([[0.0], scale * 10.0 ** (-span_decades) * np.exp(offsets)])

    gain = mus[:, None, None] * d[None, :, :]  # (M, K, Nt)
    with np.errstate(divide="ignore", invalid="ignore"):
        free_power = np.where(active, b2 / gain ** 2, 0.0).sum(axis=2)
    free_power = np.where(np.isfinite(free_power), free_power, np.inf)

    nu_lo = np.zeros_like(free_power)
    nu_hi = np.broadcast_to(np.sqrt(b2.sum(axis=1) / P0), free_power.shape).copy()
    for _ in range(200):
        nu_mid = 0.5 * (nu_lo + nu_hi)
        power = (b2 / (gain + nu_mid[:, :, None]) ** 2).sum(axis=2)
        too_much = power > P0
        nu_lo = np.where(too_much, nu_mid, nu_lo)
        nu_hi = np.where(too_much, nu_hi, nu_mid)
    nu = np.where(free_power <= P0, 0.0, nu_hi)

    denom = gain + nu[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(active, 1.0 / denom, 0.0)
    signal = (b2 * coeff).sum(axis=(1, 2))
    interference = (d * b2 * coeff ** 2).sum(axis=(1, 2))
    fraction = signal / np.sqrt(ch.K * sigma2 + interference)

    best = int(np.argmax(fraction))
    b = np.einsum("kji,kj->ki", U.conj(), m.a)
    p = np.einsum("kij,kj->ki", U, coeff[best] * b)
    return BeamformingSolution(
        scheme=Scheme.MMSE,
        p=p,
        eta=conditional_eta(ch, p, sigma2),
        alpha=float(fraction[best]),
        diagnostics={"oracle_mu": float(mus[best]), "grid_points": int(mus.size)},
    )


def write_solver_trace(rows: list[dict], path: Path | str) -> Path:
    """Dump solver iterates to CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path
