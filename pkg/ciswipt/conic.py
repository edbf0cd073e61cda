"""Dense primal-dual interior-point solver for small cone programs.

Programs are stored in the standard form

    minimize    c^T x
    subject to  b - A x in K

where K is an ordered product of zero cones, nonnegative orthants and
second-order cones {(t, z): ||z|| <= t}. Internally the zero-cone rows
become equality constraints and the remaining rows a conic inequality;
the solver runs a homogeneous self-dual embedding with Nesterov-Todd
scaling and Mehrotra predictor-corrector steps.
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as sl

from ciswipt.model import ArgumentError


# Configuration
TOL_FEAS = 1e-8
TOL_GAP = 1e-8
MAX_ITER = 200
INFEASIBLE_TOL = 1e-7  # certificate residual for INFEASIBLE / UNBOUNDED
ACCEPT_TOL = 1e-6  # MAX_ITER or NUMERICAL iterates this accurate are still usable downstream
STEP_FRACTION = 0.99
STEP_BACKOFF = 0.5
MIN_STEP = 1e-12
INTERIOR_EPS = 1e-13  # relative SOC margin an accepted step must keep
KKT_REGULARIZATION = 1e-11
REFINEMENT_STEPS = 3  # iterative refinement passes per KKT solve
POLISH_ITERATIONS = 3  # extra steps once the tolerances are met
POLISH_TARGET = 1e-3  # polishing stops at this fraction of the tolerances
EQUILIBRATION_PASSES = 8
SCALE_BOUNDS = (1e-4, 1e4)

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Internal numerical failure of the interior-point iteration."""


class ConeType(str, Enum):
    ZERO = "ZERO"
    NONNEG = "NONNEG"
    SOC = "SOC"


class SolverStatus(str, Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"
    MAX_ITER = "MAX_ITER"
    NUMERICAL = "NUMERICAL"  # numerical breakdown before convergence


@dataclass(frozen=True)
class ConeBlock:
    kind: ConeType
    size: int


@dataclass(frozen=True, eq=False)
class ConeProgram:
    """minimize c^T x subject to b - A x in K (K given block by block)."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cones: Tuple[ConeBlock, ...]

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        b = np.asarray(self.b, dtype=float).ravel()
        A = np.asarray(self.A, dtype=float).reshape(b.shape[0], c.shape[0])
        cones = tuple(
            blk if isinstance(blk, ConeBlock) else ConeBlock(ConeType(blk[0]), int(blk[1]))
            for blk in self.cones
        )
        if sum(blk.size for blk in cones) != b.shape[0]:
            raise ArgumentError(
                f"Cone blocks cover {sum(blk.size for blk in cones)} rows but b has {b.shape[0]}"
            )
        for blk in cones:
            if blk.size < 1 or (blk.kind is ConeType.SOC and blk.size < 2):
                raise ArgumentError(f"Invalid cone block {blk}")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ArgumentError("Cone program contains non-finite data")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "cones", cones)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        """Debug dump for cross-checking against an external solver."""
        return {
            "c": self.c.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "cones": [[blk.kind.value, blk.size] for blk in self.cones],
        }

    def to_json(self) -> str:
        """Debug dump as a JSON string."""
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ConeProgram":
        """Rebuild a program from its debug dump."""
        try:
            return cls(c=doc["c"], A=doc["A"], b=doc["b"], cones=tuple(doc["cones"]))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ArgumentError):
                raise
            raise ArgumentError(f"Malformed cone program document: {e}") from e


@dataclass(frozen=True, eq=False)
class ConeSolution:
    """Solver output.

    The dual vector y pairs with the rows of A: A^T y + c = 0, y in K*, and
    the dual objective is -b^T y. For INFEASIBLE, y is the normalized
    improving ray (b^T y = -1); for UNBOUNDED, x is the normalized primal ray.
    MAX_ITER and NUMERICAL carry the best iterate seen before stopping.
    """

    status: SolverStatus
    x: np.ndarray
    y: np.ndarray
    objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    certificate_residual: float = math.nan

    @property
    def optimal(self) -> bool:
        """True when the status is OPTIMAL."""
        return self.status is SolverStatus.OPTIMAL

    def acceptable(self, tol: float = ACCEPT_TOL) -> bool:
        """OPTIMAL, or a MAX_ITER or NUMERICAL iterate whose residuals and gap are within tol."""
        if self.status is SolverStatus.OPTIMAL:
            return True
        return (self.status in (SolverStatus.MAX_ITER, SolverStatus.NUMERICAL)
                and self.primal_residual <= tol
                and self.dual_residual <= tol and self.gap <= tol)


# ---------------------------------------------------------------------------
# Modeling helpers
# ---------------------------------------------------------------------------

class Affine:
    """Sparse affine expression sum_j a_j x_j + const over program variables."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Optional[Dict[int, float]] = None, const: float = 0.0):
        self.terms: Dict[int, float] = dict(terms or {})
        self.const = float(const)

    @classmethod
    def var(cls, index: int) -> "Affine":
        """The single variable x_index."""
        return cls({int(index): 1.0})

    @classmethod
    def linear(cls, coeffs: np.ndarray, indices: Sequence[int], const: float = 0.0) -> "Affine":
        """sum_j coeffs[j] x_indices[j] + const; zero coefficients are dropped."""
        terms: Dict[int, float] = {}
        for a, j in zip(np.asarray(coeffs, dtype=float), indices):
            if a != 0.0:
                terms[int(j)] = terms.get(int(j), 0.0) + float(a)
        return cls(terms, const)

    def __add__(self, other: Union["Affine", float]) -> "Affine":
        other = as_affine(other)
        terms = dict(self.terms)
        for j, a in other.terms.items():
            terms[j] = terms.get(j, 0.0) + a
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine({j: -a for j, a in self.terms.items()}, -self.const)

    def __sub__(self, other: Union["Affine", float]) -> "Affine":
        return self + (-as_affine(other))

    def __rsub__(self, other: Union["Affine", float]) -> "Affine":
        return as_affine(other) - self

    def __mul__(self, k: float) -> "Affine":
        k = float(k)
        return Affine({j: k * a for j, a in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def row(self, n: int) -> np.ndarray:
        """Dense coefficient row over n variables."""
        row = np.zeros(n)
        for j, a in self.terms.items():
            row[j] += a
        return row

    def value(self, x: np.ndarray) -> float:
        """Evaluate at the point x."""
        return sum(a * float(x[j]) for j, a in self.terms.items()) + self.const

    def __repr__(self) -> str:
        return f"Affine({self.terms}, {self.const})"


def as_affine(value: Union[Affine, int, float]) -> Affine:
    """Wrap a number as a constant expression; Affine passes through."""
    if isinstance(value, Affine):
        return value
    return Affine(const=float(value))


def _operand(value: Union[Affine, int, float], index_like: bool) -> Affine:
    # Bare ints name variables in index-style calls; floats are constants.
    if isinstance(value, Affine):
        return value
    if index_like and isinstance(value, (int, np.integer)):
        return Affine.var(int(value))
    return Affine(const=float(value))


def embed_rotated_soc(
    u: Union[Affine, int],
    v: Union[Affine, int],
    z: Iterable[Union[Affine, int]],
) -> List[Affine]:
    """Rows of one SOC block encoding 2 u v >= ||z||^2 with u, v >= 0.

    Uses the standard identity ||(sqrt(2) z, u - v)|| <= u + v. Integer
    operands are variable indices; Affine operands may carry constants.

    Returns:
        Expressions [u + v, u - v, sqrt(2) z_1, ...] forming the SOC block.
    """
    u_expr = _operand(u, True)
    v_expr = _operand(v, True)
    rows = [u_expr + v_expr, u_expr - v_expr]
    rows.extend(math.sqrt(2.0) * _operand(zk, True) for zk in z)
    return rows


class ConeProgramBuilder:
    """Incrementally assembles a ConeProgram from affine expressions.

    Each add_* call appends one cone block whose rows are the given
    expressions; expression values are the cone element b - A x.
    """

    def __init__(self):
        self.n = 0
        self._rows: List[Affine] = []
        self._blocks: List[ConeBlock] = []

    def add_variables(self, count: int) -> np.ndarray:
        """Reserve new variables.

        Args:
            count: Number of variables to add.

        Returns:
            Their column indices, in order.
        """
        indices = np.arange(self.n, self.n + count)
        self.n += count
        return indices

    def add_variable(self) -> int:
        """Reserve one variable and return its column index."""
        return int(self.add_variables(1)[0])

    def _append(self, kind: ConeType, rows: List[Affine]) -> None:
        if not rows:
            return
        self._rows.extend(rows)
        self._blocks.append(ConeBlock(kind, len(rows)))

    def add_zero(self, exprs: Iterable[Affine]) -> None:
        """Equality rows: every expression == 0.

        Args:
            exprs: Affine expressions; an empty iterable adds nothing.
        """
        self._append(ConeType.ZERO, [as_affine(e) for e in exprs])

    def add_nonneg(self, exprs: Iterable[Affine]) -> None:
        """Inequality rows: every expression >= 0.

        Args:
            exprs: Affine expressions; an empty iterable adds nothing.
        """
        self._append(ConeType.NONNEG, [as_affine(e) for e in exprs])

    def add_soc(self, head: Affine, tail: Iterable[Affine]) -> None:
        """Second-order cone row block ||tail|| <= head.

        Args:
            head: Affine upper bound.
            tail: At least one affine expression.

        Raises:
            ArgumentError: If tail is empty.
        """
        rows = [as_affine(head)] + [as_affine(e) for e in tail]
        if len(rows) < 2:
            raise ArgumentError("A second-order cone needs at least one tail entry")
        self._append(ConeType.SOC, rows)

    def add_rotated_soc(self, u: Union[Affine, int], v: Union[Affine, int],
                        z: Iterable[Union[Affine, int]]) -> None:
        """Rotated cone 2 u v >= ||z||^2 with u, v >= 0, embedded as one SOC block.

        Args:
            u: Variable index or affine expression.
            v: Variable index or affine expression.
            z: Variable indices or affine expressions.
        """
        self._append(ConeType.SOC, embed_rotated_soc(u, v, z))

    def build(self, objective: Affine) -> ConeProgram:
        """Assemble the program minimizing objective over the rows added so far.

        Returns:
            ConeProgram with b - A x equal to the row expressions.
        """
        n = self.n
        m = len(self._rows)
        A = np.zeros((m, n))
        b = np.zeros(m)
        for r, expr in enumerate(self._rows):
            A[r] = -expr.row(n)
            b[r] = expr.const
        return ConeProgram(c=as_affine(objective).row(n), A=A, b=b, cones=tuple(self._blocks))


# ---------------------------------------------------------------------------
# Cone algebra (conic rows only: nonnegative orthants and SOCs)
# ---------------------------------------------------------------------------

class _ConeAlgebra:
    """Jordan-algebra operations on the product of NONNEG and SOC blocks."""

    def __init__(self, blocks: Sequence[ConeBlock]):
        self.lin = []   # slices of nonnegative rows
        self.soc = []   # slices of SOC rows
        start = 0
        for blk in blocks:
            sl_ = slice(start, start + blk.size)
            if blk.kind is ConeType.NONNEG:
                self.lin.append(sl_)
            else:
                self.soc.append(sl_)
            start += blk.size
        self.dim = start
        self.degree = sum(s.stop - s.start for s in self.lin) + len(self.soc)

    def identity(self) -> np.ndarray:
        """Identity element e of the product cone."""
        e = np.zeros(self.dim)
        for s in self.lin:
            e[s] = 1.0
        for s in self.soc:
            e[s.start] = 1.0
        return e

    def product(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Jordan product x o y, block by block."""
        out = np.empty(self.dim)
        for s in self.lin:
            out[s] = x[s] * y[s]
        for s in self.soc:
            xs, ys = x[s], y[s]
            out[s.start] = xs @ ys
            out[s.start + 1:s.stop] = xs[0] * ys[1:] + ys[0] * xs[1:]
        return out

    def divide(self, lam: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Solve lam o u = r for u (lam in the cone interior)."""
        out = np.empty(self.dim)
        for s in self.lin:
            out[s] = r[s] / lam[s]
        for s in self.soc:
            l0, l1 = lam[s.start], lam[s.start + 1:s.stop]
            r0, r1 = r[s.start], r[s.start + 1:s.stop]
            det = _soc_residual(lam[s])
            out[s.start] = (l0 * r0 - l1 @ r1) / det
            out[s.start + 1:s.stop] = r1 / l0 + l1 * ((l1 @ r1) / l0 - r0) / det
        return out

    def max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        """Largest alpha >= 0 with x + alpha dx in the cone (x interior)."""
        alpha = math.inf
        for s in self.lin:
            neg = dx[s] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-x[s][neg] / dx[s][neg])))
        for s in self.soc:
            alpha = min(alpha, _soc_step(x[s], dx[s]))
        return alpha

    def scaling(self, s: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nesterov-Todd scaling W (symmetric, block diagonal) and lambda = W z."""
        W = np.zeros((self.dim, self.dim))
        for sl_ in self.lin:
            idx = np.arange(sl_.start, sl_.stop)
            W[idx, idx] = np.sqrt(s[sl_] / z[sl_])
        for sl_ in self.soc:
            W[sl_, sl_] = _soc_scaling(s[sl_], z[sl_])
        return W, W @ z

    def interior_margin(self, x: np.ndarray) -> float:
        """Smallest 'eigenvalue' of x; positive iff x is interior."""
        margin = math.inf
        for s in self.lin:
            margin = min(margin, float(np.min(x[s])))
        for s in self.soc:
            margin = min(margin, float(x[s.start] - np.linalg.norm(x[s.start + 1:s.stop])))
        return margin

    def strictly_interior(self, x: np.ndarray) -> bool:
        """True if x is inside every cone, keeping a relative SOC margin of INTERIOR_EPS."""
        for s in self.lin:
            if np.any(x[s] <= 0.0):
                return False
        for s in self.soc:
            head = float(x[s.start])
            if head - float(np.linalg.norm(x[s.start + 1:s.stop])) <= INTERIOR_EPS * head:
                return False
            if _soc_residual(x[s]) <= 0.0:
                return False
        return True


def _soc_residual(x: np.ndarray) -> float:
    """x0^2 - ||x1||^2, evaluated as (x0 - ||x1||)(x0 + ||x1||)."""
    n1 = float(np.linalg.norm(x[1:]))
    return (float(x[0]) - n1) * (float(x[0]) + n1)


def _soc_step(x: np.ndarray, dx: np.ndarray) -> float:
    """Largest alpha with x + alpha dx in one SOC (x interior)."""
    # f(a) = (x0 + a dx0)^2 - ||x1 + a dx1||^2 = qa a^2 + 2 qb a + qc
    qa = dx[0] * dx[0] - dx[1:] @ dx[1:]
    qb = x[0] * dx[0] - x[1:] @ dx[1:]
    qc = _soc_residual(x)
    if qc <= 0.0 or x[0] <= 0.0:
        return 0.0
    candidates = []
    if dx[0] < 0.0:
        candidates.append(-x[0] / dx[0])
    scale = max(abs(qa), abs(qb), 1e-300)
    if abs(qa) <= 1e-14 * scale:
        if qb < 0.0:
            candidates.append(-qc / (2.0 * qb))
    else:
        disc = qb * qb - qa * qc
        if disc >= 0.0:
            q = -(qb + math.copysign(math.sqrt(disc), qb))
            for root in (q / qa, qc / q if q != 0.0 else math.inf):
                if root > 0.0:
                    candidates.append(root)
    return min(candidates) if candidates else math.inf


def _soc_scaling(s: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Nesterov-Todd scaling matrix of one SOC block."""
    s_res = _soc_residual(s)
    z_res = _soc_residual(z)
    if s_res <= 0.0 or z_res <= 0.0:
        raise SolverError("Iterate left the second-order cone interior")
    s_bar = s / math.sqrt(s_res)
    z_bar = z / math.sqrt(z_res)
    gamma = math.sqrt(max((1.0 + z_bar @ s_bar) / 2.0, 1e-300))
    w_bar = s_bar.copy()
    w_bar[0] += z_bar[0]
    w_bar[1:] -= z_bar[1:]
    w_bar /= 2.0 * gamma
    eta = (s_res / z_res) ** 0.25
    a, q = w_bar[0], w_bar[1:]
    k = s.shape[0]
    W = np.empty((k, k))
    W[0, 0] = a
    W[0, 1:] = q
    W[1:, 0] = q
    W[1:, 1:] = np.eye(k - 1) + np.outer(q, q) / (1.0 + a)
    return eta * W


def _equilibrate(prog: ConeProgram) -> Tuple[np.ndarray, np.ndarray]:
    """Ruiz column and row factors (D, E) that bring E A D to unit-order entries.

    Rows of one SOC block share a factor, so E maps each cone onto itself.
    """
    D = np.ones(prog.n)
    E = np.ones(prog.m)
    if prog.m == 0 or prog.n == 0:
        return D, E
    soc_blocks = []
    start = 0
    for blk in prog.cones:
        if blk.kind is ConeType.SOC:
            soc_blocks.append(slice(start, start + blk.size))
        start += blk.size

    M = np.abs(prog.A)
    for _ in range(EQUILIBRATION_PASSES):
        col = M.max(axis=0)
        d = np.clip(np.where(col > 0.0, 1.0 / np.sqrt(np.where(col > 0.0, col, 1.0)), 1.0), *SCALE_BOUNDS)
        M = M * d[None, :]
        row = M.max(axis=1)
        for block in soc_blocks:
            row[block] = row[block].max()
        e = np.clip(np.where(row > 0.0, 1.0 / np.sqrt(np.where(row > 0.0, row, 1.0)), 1.0), *SCALE_BOUNDS)
        M = M * e[:, None]
        D *= d
        E *= e
    return D, E


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Iterate:
    """Unscaled homogeneous iterate with its stopping measures."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    z: np.ndarray
    tau: float
    pres: float
    dres: float
    gap: float
    score: float
    iteration: int


class InteriorPointSolver:
    """Homogeneous self-dual interior-point method for ConeProgram.

    The iteration runs on an equilibrated copy of the data; every stopping
    test and every returned vector refers to the original program. One
    instance owns the KKT workspace of one program; call solve() once per
    instance at a time.
    """

    def __init__(self, prog: ConeProgram, tol_feas: float = TOL_FEAS,
                 tol_gap: float = TOL_GAP, max_iter: int = MAX_ITER,
                 infeasible_tol: float = INFEASIBLE_TOL):
        self.prog = prog
        self.tol_feas = tol_feas
        self.tol_gap = tol_gap
        self.max_iter = max_iter
        self.infeasible_tol = infeasible_tol

        eq_rows: List[int] = []
        cone_rows: List[int] = []
        cone_blocks: List[ConeBlock] = []
        start = 0
        for blk in prog.cones:
            rows = list(range(start, start + blk.size))
            if blk.kind is ConeType.ZERO:
                eq_rows.extend(rows)
            else:
                cone_rows.extend(rows)
                cone_blocks.append(blk)
            start += blk.size
        self.eq_rows = np.array(eq_rows, dtype=int)
        self.cone_rows = np.array(cone_rows, dtype=int)
        self.cones = _ConeAlgebra(cone_blocks)

        # Original data, used for stopping tests and certificates
        self._A_eq0 = prog.A[self.eq_rows]
        self._b_eq0 = prog.b[self.eq_rows]
        self._G0 = prog.A[self.cone_rows]
        self._h0 = prog.b[self.cone_rows]
        self._c0 = prog.c
        self._norm_c = max(1.0, float(np.linalg.norm(prog.c)))
        self._norm_b = max(1.0, float(np.linalg.norm(self._b_eq0)))
        self._norm_h = max(1.0, float(np.linalg.norm(self._h0)))

        # Equilibrated data: A_eq x = b_eq, G x + s = h
        self.D, self.E = _equilibrate(prog)
        A = prog.A * self.E[:, None] * self.D[None, :]
        b = prog.b * self.E
        self.A_eq = A[self.eq_rows]
        self.b_eq = b[self.eq_rows]
        self.G = A[self.cone_rows]
        self.h = b[self.cone_rows]
        self.c = prog.c * self.D
        self._e_eq = self.E[self.eq_rows]
        self._e_cone = self.E[self.cone_rows]

        self._data_scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
        self._lu = None
        self._kkt = None

    # -- linear algebra -----------------------------------------------------

    def _factor(self, WtW: np.ndarray) -> None:
        n, p, mc = self.c.shape[0], self.b_eq.shape[0], self.h.shape[0]
        size = n + p + mc
        K = np.zeros((size, size))
        K[:n, n:n + p] = self.A_eq.T
        K[:n, n + p:] = self.G.T
        K[n:n + p, :n] = self.A_eq
        K[n + p:, :n] = self.G
        K[n + p:, n + p:] = -WtW
        reg = np.concatenate([
            np.full(n, KKT_REGULARIZATION * self._data_scale),
            np.full(p + mc, -KKT_REGULARIZATION * self._data_scale),
        ])
        self._kkt = K
        self._lu = sl.lu_factor(K + np.diag(reg), check_finite=False)

    def _kkt_solve(self, rhs: np.ndarray) -> np.ndarray:
        sol = sl.lu_solve(self._lu, rhs, check_finite=False)
        for _ in range(REFINEMENT_STEPS):
            residual = rhs - self._kkt @ sol
            sol = sol + sl.lu_solve(self._lu, residual, check_finite=False)
        if not np.all(np.isfinite(sol)):
            raise SolverError("KKT solve produced non-finite values")
        return sol

    def _split(self, vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, p = self.c.shape[0], self.b_eq.shape[0]
        return vec[:n], vec[n:n + p], vec[n + p:]

    # -- scaling between the equilibrated and the original program ----------

    def _unscale(self, x, y, s, z) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.D * x, self._e_eq * y, s / self._e_cone, self._e_cone * z

    def _measure(self, x, y, s, z, tau) -> Tuple[float, float, float, float, float]:
        """Relative residuals, gap and costs of an unscaled homogeneous iterate.

        Returns:
            (primal residual, dual residual, gap, primal cost, dual cost)
        """
        rx = self._A_eq0.T @ y + self._G0.T @ z + self._c0 * tau
        ry = self._b_eq0 * tau - self._A_eq0 @ x
        rz = s + self._G0 @ x - self._h0 * tau
        pcost = float(self._c0 @ x) / tau
        dcost = -float(self._b_eq0 @ y + self._h0 @ z) / tau
        pres = max(np.linalg.norm(ry) / self._norm_b, np.linalg.norm(rz) / self._norm_h) / tau
        dres = np.linalg.norm(rx) / self._norm_c / tau
        compl = float(s @ z) / (tau * tau)
        gap = max(abs(pcost - dcost), compl) / max(1.0, abs(pcost))
        return float(pres), float(dres), float(gap), pcost, dcost

    def _certificate(self, x, y, s, z) -> Tuple[Optional[SolverStatus], float]:
        """Check the unscaled iterate for a primal or dual infeasibility ray."""
        hz_by = float(self._h0 @ z + self._b_eq0 @ y)
        if hz_by < 0.0:
            pinf = np.linalg.norm(self._A_eq0.T @ y + self._G0.T @ z) / self._norm_c / (-hz_by)
            if pinf <= self.infeasible_tol:
                return SolverStatus.INFEASIBLE, float(pinf)
        cx = float(self._c0 @ x)
        if cx < 0.0:
            dinf = max(np.linalg.norm(self._A_eq0 @ x) / self._norm_b,
                       np.linalg.norm(self._G0 @ x + s) / self._norm_h) / (-cx)
            if dinf <= self.infeasible_tol:
                return SolverStatus.UNBOUNDED, float(dinf)
        return None, math.nan

    # -- main loop ----------------------------------------------------------

    def _initial_point(self, x0: Optional[np.ndarray]) -> Tuple[np.ndarray, ...]:
        n, p = self.c.shape[0], self.b_eq.shape[0]
        e = self.cones.identity()
        x = np.zeros(n)
        s = e.copy()
        if x0 is not None:
            hint = np.asarray(x0, dtype=float).ravel()
            if hint.shape == (n,) and np.all(np.isfinite(hint)):
                hint = hint / self.D
                slack = self.h - self.G @ hint
                margin = self.cones.interior_margin(slack)
                if margin > 0.0:
                    x, s = hint, slack
                else:
                    x, s = hint, slack + (1.0 - margin) * e
        return x, np.zeros(p), s, e.copy(), 1.0, 1.0

    def _step(self, x, y, s, z, tau, kappa) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float, float]:
        """One Mehrotra predictor-corrector step on the equilibrated iterate.

        A step that would leave the cone interior is backed off until the new
        iterate is strictly interior.

        Raises:
            SolverError: If the scaling or KKT solve breaks down or the step collapses.
        """
        c, A_eq, b_eq, G, h = self.c, self.A_eq, self.b_eq, self.G, self.h
        cones = self.cones
        e = cones.identity()

        rx = A_eq.T @ y + G.T @ z + c * tau
        ry = b_eq * tau - A_eq @ x
        rz = s + G @ x - h * tau
        rt = kappa + c @ x + b_eq @ y + h @ z
        mu = (s @ z + tau * kappa) / (cones.degree + 1)

        try:
            W, lam = cones.scaling(s, z)
            self._factor(W @ W)
            x2, y2, z2 = self._split(self._kkt_solve(np.concatenate([-c, b_eq, h])))
        except (np.linalg.LinAlgError, ValueError) as err:
            raise SolverError(f"KKT factorization failed: {err}") from err
        denom = c @ x2 + b_eq @ y2 + h @ z2 - kappa / tau
        if not math.isfinite(denom) or denom == 0.0:
            raise SolverError("Degenerate homogeneous direction")

        def direction(d: float, rs: np.ndarray, rk: float):
            u = cones.divide(lam, rs)
            rhs = np.concatenate([-d * rx, d * ry, -d * rz - W.T @ u])
            x1, y1, z1 = self._split(self._kkt_solve(rhs))
            dtau = (-d * rt - rk / tau - c @ x1 - b_eq @ y1 - h @ z1) / denom
            dx = x1 + dtau * x2
            dy = y1 + dtau * y2
            dz = z1 + dtau * z2
            ds = W.T @ (u - W @ dz)
            dkappa = (rk - kappa * dtau) / tau
            return dx, dy, ds, dz, dtau, dkappa, u

        def step_to_boundary(ds, dz, dtau, dkappa) -> float:
            alpha = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0.0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0.0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        try:
            # Predictor
            lam_sq = cones.product(lam, lam)
            dx, dy, ds, dz, dtau, dkappa, u = direction(1.0, -lam_sq, -tau * kappa)
            alpha_aff = min(1.0, step_to_boundary(ds, dz, dtau, dkappa))
            sigma = min(1.0, max(0.0, 1.0 - alpha_aff)) ** 3

            # Corrector
            ws_aff = u - W @ dz  # W^{-T} ds_aff
            rs = -lam_sq - cones.product(ws_aff, W @ dz) + sigma * mu * e
            rk = -tau * kappa - dtau * dkappa + sigma * mu
            dx, dy, ds, dz, dtau, dkappa, _ = direction(1.0 - sigma, rs, rk)
        except (np.linalg.LinAlgError, ValueError) as err:
            raise SolverError(f"KKT solve failed: {err}") from err
        if not all(np.all(np.isfinite(v)) for v in (dx, dy, ds, dz)) or not math.isfinite(dtau + dkappa):
            raise SolverError("Search direction is not finite")

        alpha = min(1.0, STEP_FRACTION * step_to_boundary(ds, dz, dtau, dkappa))
        while alpha >= MIN_STEP:
            s_new = s + alpha * ds
            z_new = z + alpha * dz
            tau_new = tau + alpha * dtau
            kappa_new = kappa + alpha * dkappa
            if (tau_new > 0.0 and kappa_new > 0.0
                    and cones.strictly_interior(s_new) and cones.strictly_interior(z_new)):
                return x + alpha * dx, y + alpha * dy, s_new, z_new, tau_new, kappa_new
            alpha *= STEP_BACKOFF
        raise SolverError("Interior-point step collapsed")

    def solve(self, x0: Optional[np.ndarray] = None) -> ConeSolution:
        x, y, s, z, tau, kappa = self._initial_point(x0)
        status: Optional[SolverStatus] = None
        cert = math.nan
        best: Optional[_Iterate] = None
        breakdown: Optional[str] = None
        polished = 0
        iteration = 0

        for iteration in range(self.max_iter + 1):
            xu, yu, su, zu = self._unscale(x, y, s, z)
            pres, dres, gap, pcost, dcost = self._measure(xu, yu, su, zu, tau)
            logger.debug(
                f"iter {iteration:3d} pcost={pcost:.6e} dcost={dcost:.6e} "
                f"pres={pres:.1e} dres={dres:.1e} gap={gap:.1e} tau={tau:.1e} kappa={kappa:.1e}"
            )
            score = max(pres / self.tol_feas, dres / self.tol_feas, gap / self.tol_gap)
            if best is None or score < best.score or math.isnan(best.score):
                best = _Iterate(xu, yu, su, zu, tau, pres, dres, gap, score, iteration)

            if score <= 1.0:
                # Converged; a few more steps tighten the last digits
                if polished >= POLISH_ITERATIONS or score <= POLISH_TARGET:
                    break
                polished += 1
            else:
                status, cert = self._certificate(xu, yu, su, zu)
                if status is not None:
                    break

            if iteration == self.max_iter:
                break
            try:
                x, y, s, z, tau, kappa = self._step(x, y, s, z, tau, kappa)
            except SolverError as err:
                breakdown = str(err)
                break

        if status is SolverStatus.INFEASIBLE or status is SolverStatus.UNBOUNDED:
            return self._package_ray(status, xu, yu, zu, pres, dres, gap, iteration, cert)

        if best.score <= 1.0:
            if breakdown is not None:
                logger.debug(f"Polishing step stopped early: {breakdown}")
            return self._package(SolverStatus.OPTIMAL, best, iteration)
        if breakdown is not None:
            logger.warning(
                f"Cone solve broke down at iteration {iteration} ({breakdown}); best iterate "
                f"from iteration {best.iteration}: pres={best.pres:.1e} dres={best.dres:.1e} gap={best.gap:.1e}"
            )
            return self._package(SolverStatus.NUMERICAL, best, iteration)
        logger.warning(
            f"Cone solve hit the iteration cap; best iterate from iteration {best.iteration}: "
            f"pres={best.pres:.1e} dres={best.dres:.1e} gap={best.gap:.1e}"
        )
        return self._package(SolverStatus.MAX_ITER, best, iteration)

    def _package(self, status: SolverStatus, it: _Iterate, iteration: int) -> ConeSolution:
        y_full = np.zeros(self.prog.m)
        x_out = it.x / it.tau
        y_full[self.eq_rows] = it.y / it.tau
        y_full[self.cone_rows] = it.z / it.tau
        objective = float(self.prog.c @ x_out)
        dual_objective = float(-(self.prog.b @ y_full))
        return ConeSolution(status, x_out, y_full, objective, dual_objective,
                            it.pres, it.dres, it.gap, iteration)

    def _package_ray(self, status, x, y, z, pres, dres, gap, iteration, cert) -> ConeSolution:
        y_full = np.zeros(self.prog.m)
        if status is SolverStatus.INFEASIBLE:
            scale = -float(self._h0 @ z + self._b_eq0 @ y)
            y_full[self.eq_rows] = y / scale
            y_full[self.cone_rows] = z / scale
            return ConeSolution(status, np.full(self.prog.n, math.nan), y_full, math.inf, math.nan,
                                pres, dres, gap, iteration, cert)
        scale = -float(self._c0 @ x)
        return ConeSolution(status, x / scale, y_full, -math.inf, math.nan,
                            pres, dres, gap, iteration, cert)


def solve(prog: ConeProgram, tol_feas: float = TOL_FEAS, tol_gap: float = TOL_GAP,
          max_iter: int = MAX_ITER, x0: Optional[np.ndarray] = None) -> ConeSolution:
    """Solve a cone program.

    Args:
        prog: Program in standard form.
        tol_feas: Bound on the relative primal and dual residuals at OPTIMAL.
        tol_gap: Bound on the relative duality gap at OPTIMAL.
        max_iter: Interior-point iteration cap.
        x0: Optional initial-point hint for the primal variables.

    Returns:
        ConeSolution. MAX_ITER and NUMERICAL carry the best iterate seen,
        ranked by its residuals and gap relative to the tolerances.
    """
    return InteriorPointSolver(prog, tol_feas, tol_gap, max_iter).solve(x0)
