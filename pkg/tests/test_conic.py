"""Unit tests for the cone program builder and the interior-point solver."""

import itertools
import math

import numpy as np
import pytest

from ciswipt.conic import (
    Affine,
    ConeBlock,
    ConeProgram,
    ConeProgramBuilder,
    ConeType,
    InteriorPointSolver,
    SolverError,
    SolverStatus,
    embed_rotated_soc,
    solve,
)
from ciswipt.model import ArgumentError


def _lp(c, A_ub, b_ub):
    """minimize c^T x subject to A_ub x <= b_ub as a ConeProgram."""
    return ConeProgram(c=c, A=A_ub, b=b_ub, cones=(ConeBlock(ConeType.NONNEG, len(b_ub)),))


def _vertex_oracle(c, A_ub, b_ub):
    """Best objective over all basic feasible points of a bounded LP."""
    m, n = A_ub.shape
    best = math.inf
    for rows in itertools.combinations(range(m), n):
        sub = A_ub[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, b_ub[list(rows)])
        if np.all(A_ub @ x <= b_ub + 1e-9):
            best = min(best, float(c @ x))
    return best


class TestSolveExamples:
    """Test suite for small closed-form programs."""

    def test_nonneg_bound(self):
        """minimize x s.t. x - 1 >= 0 gives x* = 1."""
        b = ConeProgramBuilder()
        x = b.add_variable()
        b.add_nonneg([Affine.var(x) - 1.0])
        sol = solve(b.build(Affine.var(x)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.x[x] == pytest.approx(1.0, abs=1e-7)
        assert sol.objective == pytest.approx(1.0, abs=1e-7)

    def test_soc_norm(self):
        """minimize t s.t. ||(3, 4)|| <= t gives t* = 5."""
        b = ConeProgramBuilder()
        t = b.add_variable()
        b.add_soc(Affine.var(t), [Affine(const=3.0), Affine(const=4.0)])
        sol = solve(b.build(Affine.var(t)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.x[t] == pytest.approx(5.0, abs=1e-9)

    def test_rotated_soc_hyperbolic(self):
        """minimize u s.t. 2 u rho >= 9, rho <= 2 gives u* = 2.25."""
        b = ConeProgramBuilder()
        u, rho = b.add_variables(2)
        b.add_rotated_soc(int(u), int(rho), [Affine(const=3.0)])
        b.add_nonneg([2.0 - Affine.var(rho)])
        sol = solve(b.build(Affine.var(u)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.x[u] == pytest.approx(2.25, abs=1e-6)
        assert sol.x[rho] == pytest.approx(2.0, abs=1e-6)

    def test_equality_rows(self):
        """Zero-cone rows are honored as equalities."""
        b = ConeProgramBuilder()
        x, y = b.add_variables(2)
        b.add_zero([Affine.var(x) + Affine.var(y) - 3.0])
        b.add_nonneg([Affine.var(x), Affine.var(y)])
        sol = solve(b.build(Affine.var(x) + 2.0 * Affine.var(y)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.x[x] == pytest.approx(3.0, abs=1e-6)
        assert sol.objective == pytest.approx(3.0, abs=1e-6)


    def test_badly_scaled_rows(self):
        """Rows scaled by 1e6 and 1e-6 give the same optimum x* = 1."""
        b = ConeProgramBuilder()
        x = b.add_variable()
        b.add_nonneg([(Affine.var(x) - 1.0) * 1e6, (3.0 - Affine.var(x)) * 1e-6])
        sol = solve(b.build(Affine.var(x)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.x[x] == pytest.approx(1.0, abs=1e-7)

    def test_narrow_cone(self):
        """minimize x + y s.t. x/100 >= ||(y - 2, 1)|| gives sqrt(9999) + 2."""
        b = ConeProgramBuilder()
        x, y = b.add_variables(2)
        b.add_soc(Affine.var(x) * 0.01, [Affine.var(y) - 2.0, Affine(const=1.0)])
        sol = solve(b.build(Affine.var(x) + Affine.var(y)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.objective == pytest.approx(math.sqrt(9999.0) + 2.0, rel=2e-8)
        assert sol.x[y] == pytest.approx(2.0 - 1.0 / math.sqrt(9999.0), abs=1e-3)


class TestEmbedRotatedSoc:
    """Test suite for embed_rotated_soc."""

    @staticmethod
    def _member(u, v, z):
        rows = embed_rotated_soc(Affine(const=u), Affine(const=v), [Affine(const=zk) for zk in z])
        vals = np.array([r.const for r in rows])
        return vals[0] - np.linalg.norm(vals[1:])

    def test_boundary_points(self):
        """u=v=1, z=sqrt(2) and u=2, v=2.25, z=3 are tight."""
        assert self._member(1.0, 1.0, [math.sqrt(2.0)]) == pytest.approx(0.0, abs=1e-12)
        assert self._member(2.0, 2.25, [3.0]) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_agrees_with_direct_check(self, seed):
        """Membership matches 2uv >= ||z||^2 on random points."""
        rng = np.random.default_rng(seed)
        u, v = rng.uniform(0.1, 3.0, size=2)
        z = rng.standard_normal(3)
        direct = 2.0 * u * v >= z @ z
        assert (self._member(u, v, z) >= 0.0) == direct

    def test_integer_operands_are_variables(self):
        """Bare ints name variables."""
        rows = embed_rotated_soc(0, 1, [2])
        assert rows[0].terms == {0: 1.0, 1: 1.0}
        assert rows[2].terms == {2: pytest.approx(math.sqrt(2.0))}


class TestStatusAndCertificates:
    """Test suite for infeasible and unbounded programs."""

    def test_infeasible(self):
        """x >= 1 and x <= 0 is reported INFEASIBLE with a certificate."""
        b = ConeProgramBuilder()
        x = b.add_variable()
        b.add_nonneg([Affine.var(x) - 1.0, -Affine.var(x)])
        prog = b.build(Affine.var(x))
        sol = solve(prog)
        assert sol.status is SolverStatus.INFEASIBLE
        assert sol.certificate_residual <= 1e-7
        # Farkas ray: A^T y = 0, b^T y = -1, y >= 0.
        assert prog.b @ sol.y == pytest.approx(-1.0, abs=1e-7)
        assert np.allclose(prog.A.T @ sol.y, 0.0, atol=1e-6)
        assert np.allclose(sol.y, [1.0, 1.0], atol=1e-6)

    def test_unbounded(self):
        """minimize x s.t. x <= 0 is UNBOUNDED."""
        b = ConeProgramBuilder()
        x = b.add_variable()
        b.add_nonneg([-Affine.var(x)])
        sol = solve(b.build(Affine.var(x)))
        assert sol.status is SolverStatus.UNBOUNDED

    def test_non_finite_data(self):
        """NaN data is an argument error."""
        with pytest.raises(ArgumentError):
            ConeProgram(c=[1.0], A=[[math.nan]], b=[0.0], cones=(ConeBlock(ConeType.NONNEG, 1),))

    def test_block_sizes_must_cover_rows(self):
        """Cone blocks must sum to the row count."""
        with pytest.raises(ArgumentError):
            ConeProgram(c=[1.0], A=[[1.0], [1.0]], b=[0.0, 0.0], cones=(ConeBlock(ConeType.NONNEG, 1),))


class TestBreakdownHandling:
    """Test suite for iteration caps and numerical breakdowns."""

    @staticmethod
    def _program():
        rng = np.random.default_rng(7)
        b = ConeProgramBuilder()
        x = b.add_variables(3)
        t = b.add_variable()
        target = rng.standard_normal(3)
        b.add_soc(Affine.var(t), [Affine.var(j) - target[k] for k, j in enumerate(x)])
        b.add_nonneg([Affine.linear(rng.uniform(0.5, 1.0, size=3), x) - 1.0])
        return b.build(Affine.var(t))

    @staticmethod
    def _worst(sol):
        return max(sol.primal_residual, sol.dual_residual, sol.gap)

    def test_best_iterate_improves_with_cap(self, caplog):
        """The returned residuals never grow as the iteration cap is raised."""
        prog = self._program()
        with caplog.at_level("WARNING", logger="ciswipt.conic"):
            runs = [solve(prog, max_iter=cap) for cap in range(2, 7)]
        assert runs[0].status is SolverStatus.MAX_ITER
        assert "iteration cap" in caplog.text
        worst = [self._worst(sol) for sol in runs]
        assert all(b <= a for a, b in zip(worst, worst[1:]))

    def test_breakdown_is_numerical(self, monkeypatch, caplog):
        """A step that raises ends the solve with NUMERICAL and the best iterate."""
        original = InteriorPointSolver._step
        calls = []

        def failing(self, *args):
            calls.append(1)
            if len(calls) > 3:
                raise SolverError("Interior-point step collapsed")
            return original(self, *args)

        monkeypatch.setattr(InteriorPointSolver, "_step", failing)
        with caplog.at_level("WARNING", logger="ciswipt.conic"):
            sol = solve(self._program())
        assert sol.status is SolverStatus.NUMERICAL
        assert sol.iterations == 3
        assert "broke down" in caplog.text
        assert np.all(np.isfinite(sol.x))
        assert sol.acceptable() == (self._worst(sol) <= 1e-6)

    def test_breakdown_at_first_step(self, monkeypatch):
        """Breaking down immediately still returns the starting point, not an error."""
        def failing(self, *args):
            raise SolverError("KKT factorization failed: singular")

        monkeypatch.setattr(InteriorPointSolver, "_step", failing)
        sol = solve(self._program())
        assert sol.status is SolverStatus.NUMERICAL
        assert sol.iterations == 0
        assert not sol.acceptable()


class TestOptimalityProperties:
    """Test suite for KKT accuracy and duality."""

    @pytest.mark.parametrize("seed", range(50))
    def test_random_lp_matches_vertex_oracle(self, seed):
        """Random bounded LPs agree with vertex enumeration to 1e-6."""
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        m_extra = int(rng.integers(1, 5))
        # Box rows keep the LP bounded; random rows cut through a known interior point.
        A_box = np.vstack([np.eye(n), -np.eye(n)])
        b_box = np.full(2 * n, 5.0)
        A_rand = rng.standard_normal((m_extra, n))
        b_rand = A_rand @ rng.uniform(-1, 1, size=n) + rng.uniform(0.1, 2.0, size=m_extra)
        A_ub = np.vstack([A_box, A_rand])
        b_ub = np.concatenate([b_box, b_rand])
        c = rng.standard_normal(n)
        sol = solve(_lp(c, A_ub, b_ub))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.objective == pytest.approx(_vertex_oracle(c, A_ub, b_ub), abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_kkt_residuals_and_weak_duality(self, seed):
        """OPTIMAL returns satisfy the tolerance contract and weak duality."""
        rng = np.random.default_rng(100 + seed)
        b = ConeProgramBuilder()
        x = b.add_variables(3)
        t = b.add_variable()
        target = rng.standard_normal(3)
        b.add_soc(Affine.var(t), [Affine.var(j) - target[k] for k, j in enumerate(x)])
        b.add_nonneg([Affine.linear(rng.uniform(0.5, 1.0, size=3), x) - 1.0])
        sol = solve(b.build(Affine.var(t)))
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.primal_residual <= 1e-8
        assert sol.dual_residual <= 1e-8
        assert sol.gap <= 1e-8
        assert sol.objective >= sol.dual_objective - 1e-6

    def test_objective_scaling(self):
        """Scaling c by lambda scales the optimum and keeps the argmin."""
        rng = np.random.default_rng(11)
        A_ub = np.vstack([np.eye(2), -np.eye(2), rng.standard_normal((3, 2))])
        b_ub = np.concatenate([np.full(4, 2.0), np.full(3, 1.0)])
        c = np.array([1.0, -0.5])
        base = solve(_lp(c, A_ub, b_ub))
        scaled = solve(_lp(3.0 * c, A_ub, b_ub))
        assert scaled.objective == pytest.approx(3.0 * base.objective, abs=1e-6)
        assert np.allclose(scaled.x, base.x, atol=1e-5)

    def test_program_document(self):
        """A program survives its JSON debug dump."""
        prog = _lp(np.array([1.0, 2.0]), np.eye(2), np.ones(2))
        again = ConeProgram.from_dict(prog.to_dict())
        assert np.array_equal(again.A, prog.A)
        assert again.cones == prog.cones
