"""Domain types, data rotation and exact evaluators for both precoding schemes."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np


# Configuration
RHO_MIN = 1e-6  # 0 < rho < 1 realized as RHO_MIN <= rho <= 1 - RHO_MIN

logger = logging.getLogger(__name__)


class ArgumentError(ValueError):
    """Malformed input: wrong dimensions, non-finite data, bad documents."""


class DomainError(ValueError):
    """A value lies outside its physical domain (e.g. rho outside (0, 1))."""


class InfeasibleError(RuntimeError):
    """A precoding problem has no feasible point.

    Attributes:
        solution: The ConeSolution carrying the infeasibility certificate,
            when one is available.
    """

    def __init__(self, message: str, solution: Any = None):
        super().__init__(message)
        self.solution = solution


def db_to_linear(value_db: float) -> float:
    """Convert a dB quantity to its linear value."""
    return 10.0 ** (value_db / 10.0)


def linear_to_db(value: float) -> float:
    """Convert a linear quantity to dB."""
    return 10.0 * math.log10(value)


def _frozen(array: np.ndarray) -> np.ndarray:
    """Read-only copy of array."""
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constellation:
    """M-PSK alphabet with unit amplitude.

    Symbol m sits at phase pi/M + 2*pi*m/M, so QPSK symbols are
    (+-1 +-j)/sqrt(2) and the decision thresholds lie on the axes.
    """

    order: int = 4

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 2:
            raise DomainError(f"Constellation order must be an integer >= 2, got {self.order}")

    @property
    def amplitude(self) -> float:
        """Symbol amplitude; every PSK point lies on the unit circle."""
        return 1.0

    @property
    def half_angle(self) -> float:
        """Half-angle theta = pi/M of the constructive-interference wedge."""
        return math.pi / self.order

    @property
    def offset(self) -> float:
        """Phase of symbol 0; pi/M puts the symbols off the axes (QPSK at 45 degrees)."""
        return math.pi / self.order

    def phase(self, index: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
        """Phase of symbol index (or array of indices)."""
        return self.offset + 2.0 * math.pi * np.asarray(index) / self.order

    def symbols(self) -> np.ndarray:
        """All M unit-modulus symbols in index order."""
        return np.exp(1j * self.phase(np.arange(self.order)))

    def nearest_index(self, received: np.ndarray) -> np.ndarray:
        """Nearest-phase (ML for PSK) decision on received samples."""
        angle = np.angle(np.asarray(received)) - self.offset
        step = 2.0 * math.pi / self.order
        return np.mod(np.rint(angle / step).astype(int), self.order)


@dataclass(frozen=True)
class NoiseModel:
    """Antenna noise power n0 and RF-to-baseband conversion noise power nc (watts)."""

    n0: float = 1.0
    nc: float = 1.0

    def __post_init__(self):
        if not (self.n0 > 0 and self.nc > 0) or not math.isfinite(self.n0 + self.nc):
            raise DomainError(f"Noise powers must be positive and finite, got n0={self.n0}, nc={self.nc}")

    def decoder_noise(self, rho: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Effective decoding-branch noise N0 + NC/rho."""
        return self.n0 + self.nc / rho


@dataclass(frozen=True)
class UserRequirement:
    """Per-user SINR target gamma (linear) and EH target energy (watts)."""

    gamma: float
    energy: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0 or not math.isfinite(self.gamma):
            raise DomainError(f"SINR target must be positive, got {self.gamma}")
        if not self.energy >= 0 or not math.isfinite(self.energy):
            raise DomainError(f"EH target must be nonnegative, got {self.energy}")

    @classmethod
    def from_db(cls, sinr_db: float, eh_db: Optional[float] = None) -> "UserRequirement":
        """Build from dB targets; eh_db=None means no harvesting requirement."""
        energy = 0.0 if eh_db is None else db_to_linear(eh_db)
        return cls(gamma=db_to_linear(sinr_db), energy=energy)


def uniform_requirements(count: int, sinr_db: float, eh_db: Optional[float]) -> List[UserRequirement]:
    """Identical requirements for every user, as in all published sweeps."""
    return [UserRequirement.from_db(sinr_db, eh_db) for _ in range(count)]


@dataclass(frozen=True, eq=False)
class ChannelInstance:
    """K x N complex channel matrix; row i is h_i."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim == 1:
            h = h[np.newaxis, :]
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise ArgumentError(f"Channel matrix must be K x N with K, N >= 1, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ArgumentError("Channel matrix contains non-finite entries")
        object.__setattr__(self, "h", _frozen(h))

    @property
    def K(self) -> int:
        return self.h.shape[0]

    @property
    def N(self) -> int:
        return self.h.shape[1]

    def scaled(self, factor: float) -> "ChannelInstance":
        """Channel multiplied by a real factor."""
        return ChannelInstance(self.h * factor)


@dataclass(frozen=True, eq=False)
class SymbolFrame:
    """Data phases phi_1..phi_K of one symbol slot."""

    phases: np.ndarray

    def __post_init__(self):
        phases = np.atleast_1d(np.asarray(self.phases, dtype=float))
        if phases.ndim != 1 or not np.all(np.isfinite(phases)):
            raise ArgumentError("Symbol phases must be a finite 1-D array")
        object.__setattr__(self, "phases", _frozen(phases))

    @classmethod
    def from_indices(cls, indices: Sequence[int], constellation: Constellation) -> "SymbolFrame":
        """Frame whose user i sends symbol indices[i] of constellation.

        Args:
            indices: One symbol index per user.
            constellation: Alphabet mapping indices to phases.

        Returns:
            SymbolFrame with the corresponding phases.
        """
        return cls(constellation.phase(np.asarray(indices, dtype=int)))

    @property
    def K(self) -> int:
        return self.phases.shape[0]

    def symbols(self) -> np.ndarray:
        """Unit-modulus symbols exp(j phi_i)."""
        return np.exp(1j * self.phases)

    def indices(self, constellation: Constellation) -> np.ndarray:
        """Symbol indices of the frame under constellation (nearest phase)."""
        return constellation.nearest_index(self.symbols())

    def shifted(self, delta: float) -> "SymbolFrame":
        """Frame with every phase advanced by delta (a common phase rotation)."""
        return SymbolFrame(self.phases + delta)


@dataclass(frozen=True, eq=False)
class RotatedChannels:
    """Data-rotated rows h~_i = h_i * exp(j(phi_1 - phi_i))."""

    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", _frozen(np.asarray(self.h, dtype=complex)))

    @property
    def K(self) -> int:
        return self.h.shape[0]

    @property
    def N(self) -> int:
        return self.h.shape[1]

    def scaled(self, factor: float) -> "RotatedChannels":
        """Rotated channel multiplied by a real factor."""
        return RotatedChannels(self.h * factor)


@dataclass(frozen=True, eq=False)
class CiSolution:
    """Common precoded vector w and splitting ratios of the CI scheme.

    The transmitted vector for the slot is w * exp(j*phi_1).
    """

    w: np.ndarray
    rho: np.ndarray
    iterations: int = 0
    converged: bool = True
    history: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(np.asarray(self.w, dtype=complex).ravel()))
        object.__setattr__(self, "rho", _frozen(np.atleast_1d(np.asarray(self.rho, dtype=float))))
        object.__setattr__(self, "history", tuple(float(p) for p in self.history))

    @property
    def transmit_power(self) -> float:
        return float(np.vdot(self.w, self.w).real)

    def scaled(self, beta: float) -> "CiSolution":
        """Same solution with w amplified by beta."""
        return CiSolution(self.w * beta, self.rho, self.iterations, self.converged, self.history)


@dataclass(frozen=True, eq=False)
class ConventionalSolution:
    """Per-user beamformers t_1..t_K (rows of t) and splitting ratios."""

    t: np.ndarray
    rho: np.ndarray
    iterations: int = 0
    converged: bool = True
    history: Tuple[float, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.t, dtype=complex)
        if t.ndim == 1:
            t = t[np.newaxis, :]
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "rho", _frozen(np.atleast_1d(np.asarray(self.rho, dtype=float))))
        object.__setattr__(self, "history", tuple(float(p) for p in self.history))

    @property
    def transmit_power(self) -> float:
        return float(np.sum(np.abs(self.t) ** 2))

    def scaled(self, beta: float) -> "ConventionalSolution":
        """Same solution with every t_k amplified by beta."""
        return ConventionalSolution(self.t * beta, self.rho, self.iterations, self.converged, self.history)


@dataclass(frozen=True)
class CiMargins:
    """Geometry of one user's received point relative to its CI wedge."""

    alpha_r: float
    alpha_i: float
    gamma_thresh: float
    slack: float
    harvested: float


@dataclass(frozen=True)
class CiEvaluation:
    margins: List[CiMargins]
    total_power: float


@dataclass(frozen=True, eq=False)
class ConventionalEvaluation:
    sinr: np.ndarray
    harvested: np.ndarray
    total_power: float


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def rotate_channels(channels: ChannelInstance, frame: SymbolFrame) -> RotatedChannels:
    """Rotate each channel row by the phase difference to user 1's symbol.

    Args:
        channels: K x N channel instance.
        frame: Symbol frame with K phases.

    Returns:
        RotatedChannels with h~_i = h_i * exp(j(phi_1 - phi_i)).

    Raises:
        ArgumentError: If the frame does not carry exactly K phases.
    """
    if frame.K != channels.K:
        raise ArgumentError(f"Frame has {frame.K} phases but channel has {channels.K} users")
    rotation = np.exp(1j * (frame.phases[0] - frame.phases))
    return RotatedChannels(channels.h * rotation[:, np.newaxis])


def real_rows(h: np.ndarray) -> np.ndarray:
    """Complex-to-real embedding of the linear functional w -> h^T w.

    A complex vector w maps to x = [Re w, Im w]; then Re(h^T w) = rows[..., 0, :] @ x
    and Im(h^T w) = rows[..., 1, :] @ x.

    Args:
        h: Length-N complex vector or K x N matrix of rows.

    Returns:
        Array of shape (2, 2N) for a vector, (K, 2, 2N) for a matrix.
    """
    h = np.asarray(h, dtype=complex)
    re_row = np.concatenate([h.real, -h.imag], axis=-1)
    im_row = np.concatenate([h.imag, h.real], axis=-1)
    return np.stack([re_row, im_row], axis=-2)


def to_real(w: np.ndarray) -> np.ndarray:
    """Stack a complex vector as [Re(w), Im(w)] along the last axis.

    Args:
        w: Complex array.

    Returns:
        Real array twice as long in the last axis.
    """
    w = np.asarray(w, dtype=complex)
    return np.concatenate([w.real, w.imag], axis=-1)


def from_real(x: np.ndarray) -> np.ndarray:
    """Inverse of to_real: the first half of the last axis is Re, the second Im.

    Args:
        x: Real array with an even last dimension.

    Returns:
        Complex array half as long in the last axis.
    """
    x = np.asarray(x, dtype=float)
    half = x.shape[-1] // 2
    return x[..., :half] + 1j * x[..., half:]


def _check_rho(rho: np.ndarray, count: int) -> np.ndarray:
    """Validate splitting ratios.

    Args:
        rho: One ratio per user.
        count: Expected number of users.

    Returns:
        rho as a float array.

    Raises:
        ArgumentError: On a length mismatch.
        DomainError: If any ratio is outside (0, 1).
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    if rho.shape != (count,):
        raise ArgumentError(f"Expected {count} splitting ratios, got shape {rho.shape}")
    if np.any(~np.isfinite(rho)) or np.any(rho <= 0.0) or np.any(rho >= 1.0):
        raise DomainError(f"Splitting ratios must lie in (0, 1), got {rho.tolist()}")
    return rho


def ci_threshold(requirement: UserRequirement, noise: NoiseModel, rho: float) -> float:
    """gamma = sqrt(Gamma (N0 + NC/rho)), the wedge apex offset on the real axis."""
    return math.sqrt(requirement.gamma * noise.decoder_noise(rho))


def evaluate_ci(
    solution: CiSolution,
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation,
) -> CiEvaluation:
    """Exact CI margins for every user plus the transmit power ||w||^2.

    Harvested power follows the CI formulation literally,
    (1 - rho_i) |h~_i^T w|^2, without the antenna-noise term.
    """
    if len(requirements) != rotated.K or solution.w.shape[0] != rotated.N:
        raise ArgumentError("Solution, channels and requirements disagree on dimensions")
    rho = _check_rho(solution.rho, rotated.K)
    tan_theta = math.tan(constellation.half_angle)
    received = rotated.h @ solution.w

    margins = []
    for i, req in enumerate(requirements):
        alpha_r = float(received[i].real)
        alpha_i = float(received[i].imag)
        gamma = ci_threshold(req, noise, rho[i])
        margins.append(CiMargins(
            alpha_r=alpha_r,
            alpha_i=alpha_i,
            gamma_thresh=gamma,
            slack=(alpha_r - gamma) * tan_theta - abs(alpha_i),
            harvested=(1.0 - rho[i]) * abs(received[i]) ** 2,
        ))
    return CiEvaluation(margins=margins, total_power=solution.transmit_power)


def evaluate_conventional(
    solution: ConventionalSolution,
    channels: ChannelInstance,
    noise: NoiseModel,
) -> ConventionalEvaluation:
    """Per-user SINR and harvested power treating all interference as noise."""
    if solution.t.shape != (channels.K, channels.N):
        raise ArgumentError(
            f"Beamformers have shape {solution.t.shape}, expected {(channels.K, channels.N)}"
        )
    rho = _check_rho(solution.rho, channels.K)
    # gains[i, k] = |h_i^T t_k|^2
    gains = np.abs(channels.h @ solution.t.T) ** 2
    signal = np.diag(gains)
    interference = gains.sum(axis=1) - signal
    sinr = signal / (interference + noise.decoder_noise(rho))
    harvested = (1.0 - rho) * (gains.sum(axis=1) + noise.n0)
    return ConventionalEvaluation(sinr=sinr, harvested=harvested, total_power=solution.transmit_power)


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------

def complex_to_pairs(values: np.ndarray) -> list:
    """Nested list of [re, im] pairs with the shape of values."""
    values = np.asarray(values, dtype=complex)
    return np.stack([values.real, values.imag], axis=-1).tolist()


def pairs_to_complex(pairs: Any) -> np.ndarray:
    """Decode nested [re, im] pairs.

    Raises:
        ArgumentError: If the innermost dimension is not 2.
    """
    array = np.asarray(pairs, dtype=float)
    if array.ndim < 1 or array.shape[-1] != 2:
        raise ArgumentError("Complex values must be encoded as [re, im] pairs")
    return array[..., 0] + 1j * array[..., 1]


def channels_to_dict(channels: ChannelInstance, **metadata: Any) -> Dict[str, Any]:
    """Channel document {"channels": K x N x 2} with optional metadata keys."""
    doc = {"channels": complex_to_pairs(channels.h)}
    doc.update(metadata)
    return doc


def channels_from_dict(doc: Any) -> ChannelInstance:
    """Accept either {"channels": [...]} or the bare K x N x 2 array."""
    try:
        pairs = doc["channels"] if isinstance(doc, dict) else doc
        return ChannelInstance(pairs_to_complex(pairs))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (ArgumentError, DomainError)):
            raise
        raise ArgumentError(f"Malformed channel document: {e}") from e


def solution_to_dict(solution: Union[CiSolution, ConventionalSolution], **metadata: Any) -> Dict[str, Any]:
    """Solution document with w (CI) or t (conventional), rho and run metadata."""
    if isinstance(solution, CiSolution):
        doc: Dict[str, Any] = {"w": complex_to_pairs(solution.w)}
    else:
        doc = {"t": complex_to_pairs(solution.t)}
    doc["rho"] = solution.rho.tolist()
    doc["iterations"] = solution.iterations
    doc["converged"] = solution.converged
    doc.update(metadata)
    return doc


def solution_from_dict(doc: Dict[str, Any]) -> Union[CiSolution, ConventionalSolution]:
    """Decode a solution document; the presence of w or t selects the scheme.

    Raises:
        ArgumentError: If the document is malformed.
    """
    try:
        if "w" in doc:
            return CiSolution(
                w=pairs_to_complex(doc["w"]),
                rho=doc["rho"],
                iterations=int(doc.get("iterations", 0)),
                converged=bool(doc.get("converged", True)),
            )
        if "t" in doc:
            return ConventionalSolution(
                t=pairs_to_complex(doc["t"]),
                rho=doc["rho"],
                iterations=int(doc.get("iterations", 0)),
                converged=bool(doc.get("converged", True)),
            )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (ArgumentError, DomainError)):
            raise
        raise ArgumentError(f"Malformed solution document: {e}") from e
    raise ArgumentError("Solution document needs a 'w' (CI) or 't' (conventional) entry")
