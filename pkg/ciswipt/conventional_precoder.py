"""Conventional SWIPT beamforming that treats all interference as noise.

Per-user beamformers t_k with

    SINR_i = |h_i^T t_i|^2 / (sum_{k != i} |h_i^T t_k|^2 + N0 + NC/rho_i) >= Gamma_i
    (1 - rho_i) (sum_k |h_i^T t_k|^2 + N0) >= E_i
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ciswipt import conic
from ciswipt.ci_precoder import DC_MAX_OUTER, DC_TOL, clamp_rho, rho_star
from ciswipt.conic import Affine, ConeProgramBuilder, ConeSolution, SolverError, SolverStatus
from ciswipt.model import (
    RHO_MIN,
    ArgumentError,
    ChannelInstance,
    ConventionalSolution,
    InfeasibleError,
    NoiseModel,
    UserRequirement,
    evaluate_conventional,
    from_real,
    real_rows,
)


# Configuration
SCA_STARTS = 5
RANDOM_RHO_RANGE = (0.05, 0.95)

logger = logging.getLogger(__name__)


def _check_inputs(channels: ChannelInstance, requirements: Sequence[UserRequirement]) -> None:
    """One requirement per user."""
    if len(requirements) != channels.K:
        raise ArgumentError(f"{len(requirements)} requirements for {channels.K} users")


def _accept(sol: ConeSolution, what: str) -> None:
    """Map a cone solve status onto InfeasibleError or SolverError."""
    if sol.status is SolverStatus.INFEASIBLE:
        raise InfeasibleError(f"{what} is infeasible", sol)
    if not sol.acceptable():
        raise SolverError(f"{what} failed with status {sol.status.value}")


class _Beamformers:
    """Variable layout: 2N real entries per user plus the norm epigraph t."""

    def __init__(self, builder: ConeProgramBuilder, channels: ChannelInstance):
        self.K, self.N = channels.K, channels.N
        self.x = [builder.add_variables(2 * self.N) for _ in range(self.K)]
        self.t = builder.add_variable()
        every = [Affine.var(j) for xk in self.x for j in xk]
        builder.add_soc(Affine.var(self.t), every)
        self.rows = real_rows(channels.h)

    def received(self, i: int, k: int) -> Tuple[Affine, Affine]:
        """Re and Im of h_i^T t_k."""
        return (Affine.linear(self.rows[i, 0], self.x[k]),
                Affine.linear(self.rows[i, 1], self.x[k]))

    def extract(self, x: np.ndarray) -> np.ndarray:
        """K x N complex beamformers from a solver vector."""
        return np.stack([from_real(x[xk]) for xk in self.x])


def polish(
    solution: ConventionalSolution,
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
) -> ConventionalSolution:
    """Amplify every t_k by the smallest common beta >= 1 closing residual violations."""
    evaluation = evaluate_conventional(solution, channels, noise)
    gains = np.abs(channels.h @ solution.t.T) ** 2
    beta_sq = 1.0
    for i, req in enumerate(requirements):
        rho = float(solution.rho[i])
        signal = gains[i, i]
        interference = gains[i].sum() - signal
        sigma = float(noise.decoder_noise(rho))
        margin = signal - req.gamma * interference
        if evaluation.sinr[i] < req.gamma and margin > 0.0:
            beta_sq = max(beta_sq, req.gamma * sigma / margin)
        total = gains[i].sum()
        if req.energy > 0.0 and total > 0.0:
            beta_sq = max(beta_sq, (req.energy / (1.0 - rho) - noise.n0) / total)
    if beta_sq <= 1.0:
        return solution
    return solution.scaled(math.sqrt(beta_sq))


def solve_sinr_only(
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    rho: Optional[Sequence[float]] = None,
) -> ConventionalSolution:
    """Classic downlink power minimization at fixed rho, solved exactly as an SOCP.

    With the phase of h_i^T t_i fixed to zero the SINR row becomes
    Re(h_i^T t_i) / sqrt(Gamma_i) >= ||(h_i^T t_k for k != i, sqrt(N0 + NC/rho_i))||,
    a cone whose aperture does not shrink as Gamma_i grows.

    Raises:
        InfeasibleError: If the SINR targets cannot be met.
    """
    _check_inputs(channels, requirements)
    K = channels.K
    rho_vec = clamp_rho(np.full(K, 1.0 - RHO_MIN) if rho is None else rho)

    builder = ConeProgramBuilder()
    beams = _Beamformers(builder, channels)
    for i, req in enumerate(requirements):
        re_ii, im_ii = beams.received(i, i)
        builder.add_zero([im_ii])
        tail: List[Affine] = []
        for k in range(K):
            if k != i:
                tail.extend(beams.received(i, k))
        tail.append(Affine(const=math.sqrt(noise.decoder_noise(rho_vec[i]))))
        builder.add_soc(re_ii * (1.0 / math.sqrt(req.gamma)), tail)

    sol = conic.solve(builder.build(Affine.var(beams.t)))
    _accept(sol, "Conventional SINR-only problem")
    solution = ConventionalSolution(t=beams.extract(sol.x), rho=rho_vec, iterations=sol.iterations)
    return polish(solution, channels, [UserRequirement(r.gamma) for r in requirements], noise)


def feasible_start(
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    rho: Sequence[float],
) -> ConventionalSolution:
    """SINR-only beamformers at rho, amplified by a common beta until every EH row holds.

    Amplification scales signal and interference alike and shrinks the noise
    share, so the SINR rows stay satisfied.
    """
    base = solve_sinr_only(channels, requirements, noise, rho)
    return polish(base, channels, requirements, noise)


def _sca_subproblem(
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    p: np.ndarray,
):
    """Conic inner approximation around expansion points p[i, k] = [Re, Im](h_i^T t_k)."""
    K = channels.K
    t_c = noise.nc ** (1.0 / 3.0)

    builder = ConeProgramBuilder()
    beams = _Beamformers(builder, channels)
    rho_idx = builder.add_variables(K)

    for i, req in enumerate(requirements):
        rho = Affine.var(rho_idx[i])
        u = Affine.var(builder.add_variable())
        re_ii, im_ii = beams.received(i, i)
        builder.add_zero([im_ii])

        entries = [beams.received(i, k) for k in range(K)]
        tail = [part for k, pair in enumerate(entries) if k != i for part in pair]
        tail.extend([Affine(const=math.sqrt(noise.n0)), u])
        builder.add_soc(re_ii * (1.0 / math.sqrt(req.gamma)), tail)

        # NC <= u^2 rho
        z1, z2 = (Affine.var(j) for j in builder.add_variables(2))
        builder.add_nonneg([u - z1])
        builder.add_rotated_soc(rho, Affine(const=t_c / 2.0), [z2])
        builder.add_rotated_soc(z1, 0.5 * z2, [Affine(const=t_c)])

        if req.energy > 0.0:
            builder.add_nonneg([rho - RHO_MIN, (1.0 - RHO_MIN) - rho])
            q = Affine.var(builder.add_variable())
            builder.add_rotated_soc(q, 0.5 * (1.0 - rho), [Affine(const=math.sqrt(req.energy))])
            # sum_k ||p_ik||^2 + 2 p_ik^T (v_ik - p_ik) + N0 >= q
            linearized = Affine(const=noise.n0)
            for k, (re_ik, im_ik) in enumerate(entries):
                p0, p1 = (float(v) for v in p[i, k])
                linearized = linearized + 2.0 * p0 * re_ik + 2.0 * p1 * im_ik - (p0 * p0 + p1 * p1)
            builder.add_nonneg([linearized - q])
        else:
            builder.add_zero([rho - (1.0 - RHO_MIN)])

    return builder.build(Affine.var(beams.t)), beams, rho_idx


def _expansion_points(channels: ChannelInstance, t: np.ndarray) -> np.ndarray:
    """K x K x 2 array of [Re, Im](h_i^T t_k)."""
    received = channels.h @ t.T
    return np.stack([received.real, received.imag], axis=-1)


def solve_with_eh_sca(
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    init: ConventionalSolution,
    tol: float = DC_TOL,
    max_outer: int = DC_MAX_OUTER,
) -> ConventionalSolution:
    """Successive convex approximation of the SINR + EH beamforming problem.

    The convex left side sum_k |h_i^T t_k|^2 of each EH row is replaced by its
    first-order lower bound at the current beamformers; SINR rows stay exact
    and rho_i is re-optimized jointly through the u epigraph.

    Args:
        channels: Channel instance.
        requirements: Per-user targets.
        noise: Noise powers.
        init: Feasible starting point (see feasible_start).
        tol: Relative power change that stops the iteration.
        max_outer: Outer iteration cap.

    Returns:
        Final beamformers with the objective history.
    """
    _check_inputs(channels, requirements)
    current = init
    history = [current.transmit_power]
    converged = False

    for iteration in range(1, max_outer + 1):
        p = _expansion_points(channels, current.t)
        prog, beams, rho_idx = _sca_subproblem(channels, requirements, noise, p)
        sol = conic.solve(prog)
        if sol.status is SolverStatus.INFEASIBLE:
            raise SolverError(f"SCA subproblem infeasible at iteration {iteration} from a feasible point")
        if not sol.acceptable():
            logger.warning(f"SCA subproblem returned {sol.status.value} at iteration {iteration}")
            break

        candidate = ConventionalSolution(t=beams.extract(sol.x), rho=clamp_rho(sol.x[rho_idx]))
        candidate = polish(candidate, channels, requirements, noise)
        power = candidate.transmit_power
        previous = history[-1]
        if power > previous:
            # Only solver round-off can push the power up; keep the previous iterate.
            logger.debug(f"SCA iteration {iteration} gave no descent ({power:.10e} > {previous:.10e})")
            converged = True
            break

        current = candidate
        history.append(power)
        logger.debug(f"SCA iteration {iteration}: P={power:.8e}")
        if abs(power - previous) <= tol * max(1.0, power):
            converged = True
            break
    else:
        logger.warning(f"SCA iteration hit the cap of {max_outer} outer steps")

    return ConventionalSolution(t=current.t, rho=current.rho, iterations=len(history) - 1,
                                converged=converged, history=tuple(history))


def solve_multistart(
    channels: ChannelInstance,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    starts: int = SCA_STARTS,
    seed: int = 0,
    tol: float = DC_TOL,
    max_outer: int = DC_MAX_OUTER,
) -> ConventionalSolution:
    """Best of several SCA runs from different initial splitting ratios.

    Start 0 uses rho_i*; the rest draw rho uniformly from RANDOM_RHO_RANGE
    with a generator seeded by seed.

    A start whose solves break down numerically is logged and skipped.

    Raises:
        InfeasibleError: If every start is infeasible.
        SolverError: If no start succeeds and at least one broke down.
    """
    _check_inputs(channels, requirements)
    rng = np.random.default_rng(seed)
    best: Optional[ConventionalSolution] = None
    last_infeasible: Optional[InfeasibleError] = None
    last_failure: Optional[SolverError] = None

    for start in range(starts):
        if start == 0:
            rho0 = clamp_rho([rho_star(req, noise).rho_star for req in requirements])
        else:
            rho0 = rng.uniform(*RANDOM_RHO_RANGE, size=channels.K)
        try:
            init = feasible_start(channels, requirements, noise, rho0)
            result = solve_with_eh_sca(channels, requirements, noise, init, tol, max_outer)
        except InfeasibleError as e:
            logger.debug(f"SCA start {start} infeasible: {e}")
            last_infeasible = e
            continue
        except SolverError as e:
            logger.warning(f"SCA start {start} failed: {e}")
            last_failure = e
            continue
        logger.debug(f"SCA start {start}: P={result.transmit_power:.8e}")
        if best is None or result.transmit_power < best.transmit_power:
            best = result

    if best is None:
        if last_failure is not None:
            raise SolverError(f"No SCA start succeeded; last failure: {last_failure}")
        raise InfeasibleError("Every SCA start is infeasible", getattr(last_infeasible, "solution", None))
    return best
