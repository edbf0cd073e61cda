"""Independent checkers: constraint audit, Monte Carlo SER and a phase-grid oracle."""

import cmath
import itertools
import logging
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from ciswipt.ci_precoder import QPSK, rho_star, solve_suboptimal
from ciswipt.model import (
    RHO_MIN,
    ArgumentError,
    ChannelInstance,
    CiSolution,
    Constellation,
    ConventionalSolution,
    NoiseModel,
    RotatedChannels,
    SymbolFrame,
    UserRequirement,
    rotate_channels,
)
from ciswipt.store import ResultStore


# Configuration
AUDIT_TOL = 1e-6
PARTITION_SIZE = 50_000
ORACLE_CHUNK = 20_000
ORACLE_COND_LIMIT = 1e12

logger = logging.getLogger(__name__)


class SolutionKind(str, Enum):
    CI = "CI"
    CONV = "CONV"


# ---------------------------------------------------------------------------
# Constraint audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SlackReport:
    """Normalized per-user slacks; negative entries are violations."""

    kind: SolutionKind
    sinr_slack: np.ndarray
    eh_slack: np.ndarray
    rho_slack: np.ndarray
    transmit_power: float
    tol: float = AUDIT_TOL

    @property
    def min_slack(self) -> float:
        """Smallest normalized slack over all users and constraints."""
        return float(min(self.sinr_slack.min(), self.eh_slack.min(), self.rho_slack.min()))

    @property
    def passed(self) -> bool:
        """True if every normalized slack is at least -tol."""
        return self.min_slack >= -self.tol

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready report."""
        return {
            "kind": self.kind.value,
            "status": "PASS" if self.passed else "FAIL",
            "min_slack": self.min_slack,
            "sinr_slack": self.sinr_slack.tolist(),
            "eh_slack": self.eh_slack.tolist(),
            "rho_slack": self.rho_slack.tolist(),
            "transmit_power": self.transmit_power,
        }


def _inner(h_row: Sequence[complex], x: Sequence[complex]) -> complex:
    total = 0j
    for h_n, x_n in zip(h_row, x):
        total += complex(h_n) * complex(x_n)
    return total


def check_solution(
    kind: Union[SolutionKind, str],
    solution: Union[CiSolution, ConventionalSolution],
    channels: ChannelInstance,
    frame: SymbolFrame,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation = QPSK,
    tol: float = AUDIT_TOL,
) -> SlackReport:
    """Recompute every constraint slack of a solution from the raw channels.

    CI solutions are checked on the transmitted vector w exp(j phi_1) against
    the unrotated channels and the frame's symbols. Slacks are normalized:
    SINR by max(1, threshold), EH by max(1, E_i).

    Never raises on violated constraints; they show up as negative slacks.
    """
    kind = SolutionKind(kind)
    K = channels.K
    if len(requirements) != K or frame.K != K or len(solution.rho) != K:
        raise ArgumentError("Solution, channels, frame and requirements disagree on K")

    sinr_slack = np.empty(K)
    eh_slack = np.empty(K)
    rho_slack = np.array([min(float(r), 1.0 - float(r)) for r in solution.rho])

    if kind is SolutionKind.CI:
        if not isinstance(solution, CiSolution):
            raise ArgumentError("CI audit needs a CiSolution")
        tan_theta = math.tan(math.pi / constellation.order)
        transmitted = [w_n * cmath.exp(1j * float(frame.phases[0])) for w_n in solution.w]
        power = sum(abs(x_n) ** 2 for x_n in transmitted)
        for i, req in enumerate(requirements):
            rho = float(solution.rho[i])
            # Received sample in the frame of user i's own symbol.
            r = _inner(channels.h[i], transmitted) * cmath.exp(-1j * float(frame.phases[i]))
            threshold = math.sqrt(req.gamma * (noise.n0 + noise.nc / rho)) if rho > 0 else math.inf
            sinr_slack[i] = ((r.real - threshold) * tan_theta - abs(r.imag)) / max(1.0, threshold * tan_theta)
            eh_slack[i] = ((1.0 - rho) * abs(r) ** 2 - req.energy) / max(1.0, req.energy)
    else:
        if not isinstance(solution, ConventionalSolution):
            raise ArgumentError("Conventional audit needs a ConventionalSolution")
        power = sum(abs(t) ** 2 for row in solution.t for t in row)
        for i, req in enumerate(requirements):
            rho = float(solution.rho[i])
            gains = [abs(_inner(channels.h[i], solution.t[k])) ** 2 for k in range(K)]
            interference = sum(g for k, g in enumerate(gains) if k != i)
            noise_i = noise.n0 + noise.nc / rho if rho > 0 else math.inf
            demand = req.gamma * (interference + noise_i)
            sinr_slack[i] = (gains[i] - demand) / max(1.0, demand)
            eh_slack[i] = ((1.0 - rho) * (sum(gains) + noise.n0) - req.energy) / max(1.0, req.energy)

    report = SlackReport(kind, sinr_slack, eh_slack, rho_slack, float(power), tol)
    if not report.passed:
        logger.debug(f"{kind.value} audit failed with min slack {report.min_slack:.3e}")
    return report


# ---------------------------------------------------------------------------
# Monte Carlo symbol error rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SerReport:
    errors: np.ndarray
    n_symbols: int

    @property
    def ser(self) -> np.ndarray:
        """Per-user symbol error rate."""
        return self.errors / self.n_symbols

    @property
    def standard_error(self) -> np.ndarray:
        """Binomial standard error of each rate."""
        p = self.ser
        return np.sqrt(p * (1.0 - p) / self.n_symbols)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_symbols": self.n_symbols,
            "errors": self.errors.tolist(),
            "ser": self.ser.tolist(),
            "standard_error": self.standard_error.tolist(),
        }


class _FrameCache:
    """Precoder solutions keyed by symbol-index differences to user 1."""

    def __init__(self, precoder: Callable[[RotatedChannels], CiSolution],
                 channels: ChannelInstance, constellation: Constellation, enabled: bool = True):
        self._precoder = precoder
        self._channels = channels
        self._constellation = constellation
        self._enabled = enabled
        self._lock = threading.Lock()
        self._solutions: Dict[Tuple[int, ...], CiSolution] = {}

    def received(self, key: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
        """Noiseless h_i^T w for a frame whose user-1 index is 0, plus rho."""
        with self._lock:
            cached = self._solutions.get(key)
        if cached is None:
            frame = SymbolFrame.from_indices(key, self._constellation)
            cached = self._precoder(rotate_channels(self._channels, frame))
            if self._enabled:
                with self._lock:
                    self._solutions.setdefault(key, cached)
        # Transmitted vector for the key frame is w exp(j phase(0)).
        base = self._channels.h @ cached.w * np.exp(1j * self._constellation.phase(0))
        return base, cached.rho

    def __len__(self) -> int:
        return len(self._solutions)


def _demodulation_errors(
    clean: np.ndarray,
    rho: np.ndarray,
    targets: np.ndarray,
    noise: NoiseModel,
    constellation: Constellation,
    rng: np.random.Generator,
) -> np.ndarray:
    shape = clean.shape
    antenna = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(noise.n0 / 2.0)
    conversion = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * math.sqrt(noise.nc / 2.0)
    decoded = np.sqrt(rho) * (clean + antenna) + conversion
    return np.sum(constellation.nearest_index(decoded) != targets, axis=0)


def symbol_mc_ser(
    solution: CiSolution,
    channels: ChannelInstance,
    frame: SymbolFrame,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation = QPSK,
    n_symbols: int = 100_000,
    seed: int = 0,
    redesign: bool = False,
    precoder: Optional[Callable[[RotatedChannels], CiSolution]] = None,
    cache: bool = True,
    workers: int = 1,
    partition_size: int = PARTITION_SIZE,
) -> SerReport:
    """Symbol error rate of a CI design under the power-splitting receive model.

    Each slot forms y_i = h_i^T x + n_i, splits it into sqrt(rho_i) y_i + n~_i
    and decides by nearest PSK phase.

    In the default mode the given solution and frame are reused every slot.
    With redesign=True every slot draws a fresh uniform frame and re-solves
    the precoder (solve_suboptimal unless precoder is given); solutions are
    cached per distinct set of phase differences when cache=True.

    The symbol range is cut into partitions with independent RNG substreams
    spawned from seed, so results do not depend on the worker count.
    """
    if n_symbols < 1:
        raise ArgumentError("n_symbols must be >= 1")
    K = channels.K
    if redesign and precoder is None:
        def precoder(rot: RotatedChannels) -> CiSolution:
            return solve_suboptimal(rot, requirements, noise)

    frames = _FrameCache(precoder, channels, constellation, cache) if redesign else None
    fixed_clean = channels.h @ (solution.w * np.exp(1j * frame.phases[0]))
    fixed_targets = frame.indices(constellation)
    fixed_rho = np.asarray(solution.rho)

    counts = [min(partition_size, n_symbols - start) for start in range(0, n_symbols, partition_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(counts))
    store = ResultStore()

    def run_partition(index: int) -> None:
        rng = np.random.default_rng(seeds[index])
        n = counts[index]
        if frames is None:
            clean = np.broadcast_to(fixed_clean, (n, K))
            rho = fixed_rho
            targets = fixed_targets
            errors = _demodulation_errors(clean, rho, targets, noise, constellation, rng)
        else:
            targets = rng.integers(0, constellation.order, size=(n, K))
            diffs = np.mod(targets - targets[:, :1], constellation.order)
            keys, inverse = np.unique(diffs, axis=0, return_inverse=True)
            inverse = np.asarray(inverse).reshape(-1)
            clean = np.empty((n, K), dtype=complex)
            rho = np.empty((n, K))
            for g, key in enumerate(keys):
                mask = inverse == g
                base, rho_g = frames.received(tuple(int(v) for v in key))
                # Common rotation of user 1's symbol relative to index 0.
                spin = np.exp(1j * (constellation.phase(targets[mask, 0]) - constellation.phase(0)))
                clean[mask] = base[np.newaxis, :] * spin[:, np.newaxis]
                rho[mask] = rho_g
            errors = _demodulation_errors(clean, rho, targets, noise, constellation, rng)
        store.add_result(index, {"errors": errors})

    def worker(offset: int) -> None:
        for index in range(offset, len(counts), workers):
            try:
                run_partition(index)
            except Exception as e:
                logger.error(f"SER partition {index} failed: {e}")
                store.add_error(index, e)
                return

    workers = max(1, min(int(workers), len(counts)))
    if workers == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    failure = store.first_error()
    if failure is not None:
        raise failure[1]
    total = np.zeros(K, dtype=int)
    for _, record in store.snapshot()['records']:
        total += record["errors"]
    if frames is not None:
        logger.debug(f"SER redesign used {len(frames)} distinct frame solutions")
    return SerReport(errors=total, n_symbols=n_symbols)


# ---------------------------------------------------------------------------
# Phase-grid oracle for K = N
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OracleResult:
    """Best power over the received-phase grid, and after local polishing."""

    grid_power: float
    power: float
    phases: np.ndarray
    magnitudes: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    grid_density: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid_density": self.grid_density,
            "grid_power": self.grid_power,
            "power": self.power,
            "phases": self.phases.tolist(),
            "magnitudes": self.magnitudes.tolist(),
            "rho": self.rho.tolist(),
        }


def _magnitude_floor(
    requirement: UserRequirement,
    noise: NoiseModel,
    inflation: float,
) -> Tuple[float, float]:
    """Smallest |v_i| at tilt factor inflation = sin(theta)/sin(theta - |psi|), and its rho."""
    effective = UserRequirement(requirement.gamma * inflation ** 2, requirement.energy)
    rho = float(np.clip(rho_star(effective, noise).rho_star, RHO_MIN, 1.0 - RHO_MIN))
    floor = math.sqrt(effective.gamma * noise.decoder_noise(rho))
    if requirement.energy > 0.0:
        floor = max(floor, math.sqrt(requirement.energy / (1.0 - rho)))
    return floor, rho


def _box_qp(M: np.ndarray, L: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched min r^T M r s.t. r >= L by active-set enumeration (M positive definite)."""
    B, K = L.shape
    best_value = np.full(B, np.inf)
    best_r = np.array(L, copy=True)
    for free in itertools.product((False, True), repeat=K):
        free = np.array(free)
        if free.all():
            continue  # unconstrained minimizer r = 0 violates r >= L > 0
        r = np.array(L, copy=True)
        if free.any():
            S, F = np.flatnonzero(free), np.flatnonzero(~free)
            M_SS = M[:, S][:, :, S]
            rhs = -np.einsum("bij,bj->bi", M[:, S][:, :, F], L[:, F])
            r[:, S] = np.linalg.solve(M_SS, rhs[..., np.newaxis])[..., 0]
        feasible = np.all(r >= L - 1e-12, axis=1)
        value = np.einsum("bi,bij,bj->b", r, M, r)
        better = feasible & (value < best_value)
        best_value[better] = value[better]
        best_r[better] = r[better]
    return best_value, best_r


def oracle_phase_grid(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation = QPSK,
    grid_density: int = 64,
    polish: bool = True,
) -> OracleResult:
    """Global reference for the CI problem on square, invertible channels.

    With K = N the received points v = H~ w determine w uniquely, so
    ||w||^2 = v^H Q v with Q = H~^{-H} H~^{-1}. The phase psi_i of each v_i
    is gridded over the open wedge (-theta, theta) with grid_density
    intervals; per grid point the splitting ratio follows from the balance
    identity with Gamma_i inflated by the tilt, and the magnitudes solve a
    box-constrained convex QP. The grid is nested under doubling, so the
    grid value never increases when grid_density doubles.

    Raises:
        ArgumentError: If K != N or the rotated channel matrix is singular.
    """
    K, N = rotated.K, rotated.N
    if K != N:
        raise ArgumentError(f"Phase-grid oracle needs K == N, got K={K}, N={N}")
    if len(requirements) != K:
        raise ArgumentError(f"{len(requirements)} requirements for {K} users")
    if grid_density < 2:
        raise ArgumentError("grid_density must be >= 2")
    if not np.isfinite(np.linalg.cond(rotated.h)) or np.linalg.cond(rotated.h) > ORACLE_COND_LIMIT:
        raise ArgumentError("Phase-grid oracle needs linearly independent channel rows")

    theta = constellation.half_angle
    h_inv = np.linalg.inv(rotated.h)
    Q = h_inv.conj().T @ h_inv
    grid = -theta + 2.0 * theta * np.arange(1, grid_density) / grid_density
    inflation = math.sin(theta) / np.sin(theta - np.abs(grid))
    floors = np.array([[_magnitude_floor(req, noise, c)[0] for c in inflation] for req in requirements])

    def gram(psi: np.ndarray) -> np.ndarray:
        D = np.exp(1j * psi)
        return (D.conj()[:, :, np.newaxis] * Q[np.newaxis] * D[:, np.newaxis, :]).real

    points = (grid_density - 1) ** K
    if points > 1_000_000:
        logger.warning(f"Phase-grid oracle enumerates {points} grid points")

    best_value, best_idx, best_r = np.inf, None, None
    for start in range(0, points, ORACLE_CHUNK):
        flat = np.arange(start, min(points, start + ORACLE_CHUNK))
        idx = np.stack(np.unravel_index(flat, (grid_density - 1,) * K), axis=1)
        L = floors[np.arange(K)[np.newaxis, :], idx]
        values, r = _box_qp(gram(grid[idx]), L)
        j = int(np.argmin(values))
        if values[j] < best_value:
            best_value, best_idx, best_r = float(values[j]), idx[j], r[j]

    grid_power = best_value
    phases = grid[best_idx]
    magnitudes = best_r
    power = grid_power

    if polish:
        def objective(psi: np.ndarray) -> float:
            psi = np.clip(psi, -theta * (1 - 1e-9), theta * (1 - 1e-9))
            c = math.sin(theta) / np.sin(theta - np.abs(psi))
            L = np.array([[_magnitude_floor(req, noise, ci)[0] for req, ci in zip(requirements, c)]])
            return float(_box_qp(gram(psi[np.newaxis]), L)[0][0])

        bound = theta * (1.0 - 1e-6)
        result = optimize.minimize(objective, phases, method="Powell", bounds=[(-bound, bound)] * K)
        if result.fun < power:
            phases = np.clip(result.x, -bound, bound)
            c = math.sin(theta) / np.sin(theta - np.abs(phases))
            L = np.array([[_magnitude_floor(req, noise, ci)[0] for req, ci in zip(requirements, c)]])
            values, r = _box_qp(gram(phases[np.newaxis]), L)
            power, magnitudes = float(values[0]), r[0]

    c = math.sin(theta) / np.sin(theta - np.abs(phases))
    rho = np.array([_magnitude_floor(req, noise, ci)[1] for req, ci in zip(requirements, c)])
    w = h_inv @ (magnitudes * np.exp(1j * phases))
    return OracleResult(grid_power=grid_power, power=min(power, grid_power), phases=phases,
                        magnitudes=magnitudes, rho=rho, w=w, grid_density=grid_density)
