"""Constructive-interference precoders over the virtual multicast vector w.

All solvers work on data-rotated channels h~_i, so the design reduces to
a common-message problem in one complex vector w:

    minimize ||w||^2
    s.t.  |Im(h~_i^T w)| <= (Re(h~_i^T w) - sqrt(Gamma_i (N0 + NC/rho_i))) tan(theta)
          |h~_i^T w|^2 >= E_i / (1 - rho_i)
          0 < rho_i < 1
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ciswipt import conic
from ciswipt.conic import Affine, ConeProgramBuilder, ConeSolution, SolverError, SolverStatus
from ciswipt.model import (
    RHO_MIN,
    ArgumentError,
    CiSolution,
    Constellation,
    InfeasibleError,
    NoiseModel,
    RotatedChannels,
    UserRequirement,
    ci_threshold,
    evaluate_ci,
    from_real,
    real_rows,
)


# Configuration
DC_TOL = 1e-5
DC_MAX_OUTER = 50
FEASIBILITY_TOL = 1e-6
QPSK = Constellation(4)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RhoStarBreakdown:
    """Coefficients of A rho^2 + B rho + C = 0 and its root in (0, 1]."""

    A: float
    B: float
    C: float
    discriminant: float
    rho_star: float


@dataclass(frozen=True, eq=False)
class DcState:
    """Snapshot of the DC iteration after one accepted iterate."""

    iteration: int
    p: np.ndarray          # K x 2, [Re, Im](h~_i^T w) at the stored w
    w: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    g: np.ndarray
    history: Tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready snapshot; complex vectors as [re, im] pairs."""
        return {
            "iteration": self.iteration,
            "p": self.p.tolist(),
            "w": np.stack([self.w.real, self.w.imag], axis=-1).tolist(),
            "rho": self.rho.tolist(),
            "u": self.u.tolist(),
            "g": self.g.tolist(),
            "history": list(self.history),
        }


def rho_star(requirement: UserRequirement, noise: NoiseModel) -> RhoStarBreakdown:
    """Splitting ratio balancing the SINR and EH thresholds.

    Solves Gamma (N0 + NC/rho) = E / (1 - rho); the root does not depend on w.
    With E = 0 the root is exactly 1 (all power to decoding).
    """
    gamma, energy = requirement.gamma, requirement.energy
    A = -gamma * noise.n0
    B = gamma * noise.n0 - energy - gamma * noise.nc
    C = gamma * noise.nc
    disc = B * B - 4.0 * A * C
    assert disc > 0.0, f"non-positive discriminant {disc}"
    if energy == 0.0:
        return RhoStarBreakdown(A, B, C, disc, 1.0)
    root = math.sqrt(disc)
    # Both forms give (-B - sqrt(disc)) / (2A); pick the one without cancellation.
    if B < 0.0:
        rho = 2.0 * C / (root - B)
    else:
        rho = (-B - root) / (2.0 * A)
    return RhoStarBreakdown(A, B, C, disc, rho)


def clamp_rho(rho: np.ndarray) -> np.ndarray:
    """Clip splitting ratios into [RHO_MIN, 1 - RHO_MIN]."""
    return np.clip(np.asarray(rho, dtype=float), RHO_MIN, 1.0 - RHO_MIN)


def _check_inputs(rotated: RotatedChannels, requirements: Sequence[UserRequirement]) -> None:
    """One requirement per user."""
    if len(requirements) != rotated.K:
        raise ArgumentError(f"{len(requirements)} requirements for {rotated.K} users")


def _accept(sol: ConeSolution, what: str) -> None:
    """Map a cone solve status onto InfeasibleError or SolverError."""
    if sol.status is SolverStatus.INFEASIBLE:
        raise InfeasibleError(f"{what} is infeasible", sol)
    if not sol.acceptable():
        raise SolverError(f"{what} failed with status {sol.status.value}")


def polish(
    solution: CiSolution,
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation = QPSK,
) -> CiSolution:
    """Amplify w by the smallest beta >= 1 closing residual constraint violations.

    Scaling w by beta >= 1 keeps every nonnegative wedge slack nonnegative
    and raises harvested power by beta^2.
    """
    tan_theta = math.tan(constellation.half_angle)
    received = rotated.h @ solution.w
    beta = 1.0
    for i, req in enumerate(requirements):
        rho = float(solution.rho[i])
        depth = received[i].real * tan_theta - abs(received[i].imag)
        need = ci_threshold(req, noise, rho) * tan_theta
        if depth > 0.0 and depth < need:
            beta = max(beta, need / depth)
        power = abs(received[i]) ** 2
        if req.energy > 0.0 and power > 0.0:
            beta = max(beta, math.sqrt(req.energy / ((1.0 - rho) * power)))
    if beta == 1.0:
        return solution
    return solution.scaled(beta)


def _min_normalized_slack(
    solution: CiSolution,
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    constellation: Constellation,
) -> float:
    evaluation = evaluate_ci(solution, rotated, requirements, noise, constellation)
    tan_theta = math.tan(constellation.half_angle)
    worst = math.inf
    for margin, req in zip(evaluation.margins, requirements):
        worst = min(worst, margin.slack / max(1.0, margin.gamma_thresh * tan_theta))
        worst = min(worst, (margin.harvested - req.energy) / max(1.0, req.energy))
    return worst


def _epigraph_objective(builder: ConeProgramBuilder, xw: np.ndarray) -> int:
    # ||x|| <= t; minimizing t minimizes ||w||^2
    t = builder.add_variable()
    builder.add_soc(Affine.var(t), [Affine.var(j) for j in xw])
    return t


def solve_sinr_only(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    rho: Optional[Sequence[float]] = None,
    constellation: Constellation = QPSK,
) -> CiSolution:
    """CI precoder with the wedge SINR constraints only, at fixed rho.

    This is a second-order cone program. Default rho is 1 - RHO_MIN (no
    power splitting), the CI reference curve without EH constraints.

    Raises:
        InfeasibleError: If the SINR targets cannot be met.
    """
    _check_inputs(rotated, requirements)
    K, N = rotated.K, rotated.N
    rho_vec = clamp_rho(np.full(K, 1.0 - RHO_MIN) if rho is None else rho)
    tan_theta = math.tan(constellation.half_angle)
    rows = real_rows(rotated.h)

    builder = ConeProgramBuilder()
    xw = builder.add_variables(2 * N)
    t = _epigraph_objective(builder, xw)
    for i, req in enumerate(requirements):
        re = Affine.linear(rows[i, 0], xw)
        im = Affine.linear(rows[i, 1], xw)
        apex = (re - ci_threshold(req, noise, rho_vec[i])) * tan_theta
        builder.add_nonneg([apex - im, apex + im])

    sol = conic.solve(builder.build(Affine.var(t)))
    _accept(sol, "CI SINR-only problem")
    solution = CiSolution(w=from_real(sol.x[xw]), rho=rho_vec, iterations=sol.iterations)
    sinr_only = [UserRequirement(req.gamma) for req in requirements]
    return polish(solution, rotated, sinr_only, noise, constellation)


def solve_suboptimal(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
) -> CiSolution:
    """Sub-optimal CI precoder with every received point on its symbol axis.

    Adds Im(h~_i^T w) = 0; then both thresholds are met with equality at
    rho_i*, and what remains is a norm minimization under linear constraints.

    Raises:
        InfeasibleError: If the reduced problem is infeasible (e.g. K > N).
    """
    _check_inputs(rotated, requirements)
    N = rotated.N
    rho = clamp_rho([rho_star(req, noise).rho_star for req in requirements])
    rows = real_rows(rotated.h)

    builder = ConeProgramBuilder()
    xw = builder.add_variables(2 * N)
    t = _epigraph_objective(builder, xw)
    for i, req in enumerate(requirements):
        threshold = max(ci_threshold(req, noise, rho[i]), math.sqrt(req.energy / (1.0 - rho[i])))
        builder.add_zero([Affine.linear(rows[i, 1], xw)])
        builder.add_nonneg([Affine.linear(rows[i, 0], xw) - threshold])

    sol = conic.solve(builder.build(Affine.var(t)))
    _accept(sol, "Sub-optimal CI problem")
    solution = CiSolution(w=from_real(sol.x[xw]), rho=rho, iterations=sol.iterations)
    return polish(solution, rotated, requirements, noise)


def find_feasible_start(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    rho_init: Optional[Sequence[float]] = None,
    constellation: Constellation = QPSK,
) -> CiSolution:
    """Feasible point for the full CI problem.

    Solves the SINR-only SOCP at rho_init (default rho_i*), then amplifies w
    by the smallest beta >= 1 meeting every EH constraint.
    """
    if rho_init is None:
        rho_init = [rho_star(req, noise).rho_star for req in requirements]
    base = solve_sinr_only(rotated, requirements, noise, clamp_rho(rho_init), constellation)

    received = np.abs(rotated.h @ base.w) ** 2
    beta = 1.0
    for i, req in enumerate(requirements):
        if req.energy > 0.0:
            beta = max(beta, math.sqrt(req.energy / ((1.0 - base.rho[i]) * received[i])))
    if beta > 1.0:
        logger.debug(f"Amplifying SINR-only solution by beta={beta:.6f} for EH feasibility")
    start = base.scaled(beta)
    return polish(start, rotated, requirements, noise, constellation)


def _dc_subproblem(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    p: np.ndarray,
    tan_theta: float,
):
    """Convex inner approximation of the CI problem around expansion points p."""
    K, N = rotated.K, rotated.N
    rows = real_rows(rotated.h)
    t_c = noise.nc ** (1.0 / 3.0)

    builder = ConeProgramBuilder()
    xw = builder.add_variables(2 * N)
    t = _epigraph_objective(builder, xw)
    rho_idx = builder.add_variables(K)
    u_idx = builder.add_variables(K)
    g_idx = builder.add_variables(K)

    for i, req in enumerate(requirements):
        re = Affine.linear(rows[i, 0], xw)
        im = Affine.linear(rows[i, 1], xw)
        rho, u, g = Affine.var(rho_idx[i]), Affine.var(u_idx[i]), Affine.var(g_idx[i])

        apex = (re - math.sqrt(req.gamma) * g) * tan_theta
        builder.add_nonneg([apex - im, apex + im])
        # sqrt(N0 + u^2) <= g
        builder.add_soc(g, [Affine(const=math.sqrt(noise.n0)), u])
        # NC <= u^2 rho via z1 <= u, z2^2 <= rho t_c, t_c^2 <= z1 z2
        z1, z2 = (Affine.var(j) for j in builder.add_variables(2))
        builder.add_nonneg([u - z1])
        builder.add_rotated_soc(rho, Affine(const=t_c / 2.0), [z2])
        builder.add_rotated_soc(z1, 0.5 * z2, [Affine(const=t_c)])

        if req.energy > 0.0:
            builder.add_nonneg([rho - RHO_MIN, (1.0 - RHO_MIN) - rho])
            q = Affine.var(builder.add_variable())
            # q (1 - rho) >= E
            builder.add_rotated_soc(q, 0.5 * (1.0 - rho), [Affine(const=math.sqrt(req.energy))])
            # ||p||^2 + 2 p^T (v - p) >= q
            p0, p1 = (float(v) for v in p[i])
            builder.add_nonneg([2.0 * p0 * re + 2.0 * p1 * im - (p0 * p0 + p1 * p1) - q])
        else:
            builder.add_zero([rho - (1.0 - RHO_MIN)])

    return builder.build(Affine.var(t)), xw, rho_idx, u_idx, g_idx


def _expansion_points(rotated: RotatedChannels, w: np.ndarray) -> np.ndarray:
    """K x 2 array of [Re, Im](h~_i^T w)."""
    received = rotated.h @ w
    return np.stack([received.real, received.imag], axis=-1)


def solve_dc(
    rotated: RotatedChannels,
    requirements: Sequence[UserRequirement],
    noise: NoiseModel,
    init: CiSolution,
    tol: float = DC_TOL,
    max_outer: int = DC_MAX_OUTER,
    constellation: Constellation = QPSK,
) -> Tuple[CiSolution, List[DcState]]:
    """DC / successive convexification of the CI problem.

    Each outer step replaces |h~_i^T w|^2 by its first-order expansion at the
    current received point (an under-estimate, so every iterate stays
    feasible for the original problem) and re-optimizes w and rho jointly.

    Args:
        rotated: Data-rotated channels.
        requirements: Per-user targets.
        noise: Noise powers.
        init: Feasible starting point (find_feasible_start or solve_suboptimal).
        tol: Relative power change that stops the iteration.
        max_outer: Outer iteration cap.
        constellation: PSK alphabet fixing the wedge half-angle.

    Returns:
        Final solution (converged=False when the cap was hit or a subproblem
        failed) and the per-iterate DcState trace.
    """
    _check_inputs(rotated, requirements)
    tan_theta = math.tan(constellation.half_angle)

    current = init
    rho0 = current.rho
    u0 = np.sqrt(noise.nc / rho0)
    history = [current.transmit_power]
    trace = [DcState(0, _expansion_points(rotated, current.w), current.w, rho0,
                     u0, np.sqrt(noise.n0 + u0 ** 2), tuple(history))]
    converged = False
    iteration = 0

    for iteration in range(1, max_outer + 1):
        p = _expansion_points(rotated, current.w)
        prog, xw, rho_idx, u_idx, g_idx = _dc_subproblem(rotated, requirements, noise, p, tan_theta)
        sol = conic.solve(prog)
        if sol.status is SolverStatus.INFEASIBLE:
            raise SolverError(f"DC subproblem infeasible at iteration {iteration} from a feasible point")
        if not sol.acceptable():
            logger.warning(f"DC subproblem returned {sol.status.value} at iteration {iteration}")
            break

        candidate = CiSolution(w=from_real(sol.x[xw]), rho=clamp_rho(sol.x[rho_idx]))
        candidate = polish(candidate, rotated, requirements, noise, constellation)
        worst = _min_normalized_slack(candidate, rotated, requirements, noise, constellation)
        if worst < -FEASIBILITY_TOL:
            logger.warning(f"DC iterate {iteration} violates the original constraints by {-worst:.2e}; "
                           f"keeping iterate {iteration - 1}")
            break

        power = candidate.transmit_power
        previous = history[-1]
        if power > previous:
            # Only solver round-off can push the power up; keep the previous iterate.
            logger.debug(f"DC iteration {iteration} gave no descent ({power:.10e} > {previous:.10e})")
            converged = True
            break

        current = candidate
        history.append(power)
        trace.append(DcState(iteration, _expansion_points(rotated, current.w), current.w,
                             current.rho, sol.x[u_idx], sol.x[g_idx], tuple(history)))
        logger.debug(f"DC iteration {iteration}: P={power:.8e}")
        if abs(power - previous) <= tol * max(1.0, power):
            converged = True
            break
    else:
        logger.warning(f"DC iteration hit the cap of {max_outer} outer steps")

    final = CiSolution(w=current.w, rho=current.rho, iterations=len(history) - 1,
                       converged=converged, history=tuple(history))
    return final, trace
