"""Unit tests for the CI precoders: rho*, sub-optimal, SINR-only and DC."""

import math

import numpy as np
import pytest

from ciswipt import ci_precoder
from ciswipt.ci_precoder import (
    DcState,
    clamp_rho,
    find_feasible_start,
    polish,
    rho_star,
    solve_dc,
    solve_sinr_only,
    solve_suboptimal,
)
from ciswipt.model import (
    RHO_MIN,
    ArgumentError,
    ChannelInstance,
    CiSolution,
    Constellation,
    InfeasibleError,
    NoiseModel,
    RotatedChannels,
    SymbolFrame,
    UserRequirement,
    evaluate_ci,
    rotate_channels,
    uniform_requirements,
)
from ciswipt.verify import check_solution, oracle_phase_grid


QPSK = Constellation(4)
UNIT_NOISE = NoiseModel(1.0, 1.0)


def _random_rotated(seed, K, N):
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))) / math.sqrt(2.0)
    frame = SymbolFrame.from_indices(rng.integers(0, 4, size=K), QPSK)
    channels = ChannelInstance(h)
    return channels, frame, rotate_channels(channels, frame)


def _single_user_power(h, req, noise):
    """Closed-form optimum for K=1: both thresholds balanced at rho*."""
    rho = float(clamp_rho(rho_star(req, noise).rho_star))
    need = req.gamma * noise.decoder_noise(rho)
    if req.energy > 0.0:
        need = max(need, req.energy / (1.0 - rho))
    return need / float(np.vdot(h, h).real)


def _assert_feasible(solution, rot, reqs, noise, tol=1e-6):
    evaluation = evaluate_ci(solution, rot, reqs, noise, QPSK)
    for margin, req in zip(evaluation.margins, reqs):
        assert margin.slack >= -tol * max(1.0, margin.gamma_thresh)
        assert margin.harvested >= req.energy - tol * max(1.0, req.energy)


def _nonincreasing(history, slop=1e-9):
    return all(b <= a + slop * max(1.0, a) for a, b in zip(history, history[1:]))


class TestRhoStar:
    """Test suite for rho_star."""

    def test_balanced_half(self):
        """Gamma=10, E=15 gives rho*=0.5 with A=-10, B=-15, C=10, disc=625."""
        b = rho_star(UserRequirement(10.0, 15.0), UNIT_NOISE)
        assert (b.A, b.B, b.C, b.discriminant) == (-10.0, -15.0, 10.0, 625.0)
        assert b.rho_star == pytest.approx(0.5, abs=1e-12)

    def test_golden_ratio(self):
        """Gamma=E=100 gives rho* = 0.618034 and balances the thresholds."""
        rho = rho_star(UserRequirement(100.0, 100.0), UNIT_NOISE).rho_star
        assert rho == pytest.approx(0.618034, abs=1e-6)
        assert 100.0 * (1.0 + 1.0 / rho) == pytest.approx(100.0 / (1.0 - rho), rel=1e-9)

    def test_no_energy(self):
        """E=0 gives exactly 1."""
        assert rho_star(UserRequirement(10.0), UNIT_NOISE).rho_star == 1.0

    def test_balance_identity_random(self):
        """Gamma (N0 + NC/rho*) = E/(1 - rho*) over 1000 random draws."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            req = UserRequirement(10.0 ** rng.uniform(0, 4), 10.0 ** rng.uniform(0, 2))
            noise = NoiseModel(10.0 ** rng.uniform(-1, 1), 10.0 ** rng.uniform(-1, 1))
            b = rho_star(req, noise)
            assert 0.0 < b.rho_star <= 1.0
            lhs = req.gamma * noise.decoder_noise(b.rho_star)
            rhs = req.energy / (1.0 - b.rho_star)
            assert lhs == pytest.approx(rhs, rel=1e-9)
            assert b.A * b.rho_star ** 2 + b.B * b.rho_star + b.C == pytest.approx(0.0, abs=1e-10 * max(1.0, abs(b.C)))


class TestSolveSuboptimal:
    """Test suite for solve_suboptimal."""

    def test_scalar_channel(self):
        """N=1, h=1, Gamma=10, E=15 gives rho=0.5 and P=30 with both constraints tight."""
        rot = RotatedChannels(np.array([[1.0 + 0j]]))
        reqs = [UserRequirement(10.0, 15.0)]
        sol = solve_suboptimal(rot, reqs, UNIT_NOISE)
        assert sol.rho[0] == pytest.approx(0.5, abs=1e-9)
        assert sol.transmit_power == pytest.approx(30.0, rel=1e-6)
        margin = evaluate_ci(sol, rot, reqs, UNIT_NOISE, QPSK).margins[0]
        assert margin.alpha_i == pytest.approx(0.0, abs=1e-7)
        assert margin.harvested == pytest.approx(15.0, rel=1e-6)

    def test_two_antennas(self):
        """N=2, h=(1,1) halves the power to 15."""
        rot = RotatedChannels(np.array([[1.0, 1.0]]))
        sol = solve_suboptimal(rot, [UserRequirement(10.0, 15.0)], UNIT_NOISE)
        assert sol.transmit_power == pytest.approx(15.0, rel=1e-6)
        assert np.allclose(sol.w, sol.w[0])

    def test_orthogonal_users(self):
        """Orthogonal K=2 channels decouple into two P=30 problems."""
        channels = ChannelInstance(np.eye(2))
        frame = SymbolFrame.from_indices([0, 2], QPSK)
        rot = rotate_channels(channels, frame)
        sol = solve_suboptimal(rot, [UserRequirement(10.0, 15.0)] * 2, UNIT_NOISE)
        assert sol.transmit_power == pytest.approx(60.0, rel=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_feasible_and_audited(self, seed):
        """Random K=N=4 solutions pass the independent audit."""
        channels, frame, rot = _random_rotated(seed, 4, 4)
        reqs = uniform_requirements(4, 10.0, 0.0)
        sol = solve_suboptimal(rot, reqs, UNIT_NOISE)
        _assert_feasible(sol, rot, reqs, UNIT_NOISE)
        assert check_solution("CI", sol, channels, frame, reqs, UNIT_NOISE).passed

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_channel_scaling_law(self, c):
        """Scaling channels by c scales P_T by 1/c^2."""
        _, _, rot = _random_rotated(3, 3, 4)
        reqs = uniform_requirements(3, 15.0, 5.0)
        base = solve_suboptimal(rot, reqs, UNIT_NOISE).transmit_power
        scaled = solve_suboptimal(rot.scaled(c), reqs, UNIT_NOISE).transmit_power
        assert scaled == pytest.approx(base / c ** 2, rel=1e-6)

    def test_opposite_symbols_single_antenna_infeasible(self):
        """Two users on one antenna with opposite symbols cannot both be served."""
        rot = rotate_channels(ChannelInstance([[1.0], [1.0]]), SymbolFrame([0.0, math.pi]))
        with pytest.raises(InfeasibleError):
            solve_suboptimal(rot, uniform_requirements(2, 0.0, None), UNIT_NOISE)

    def test_requirement_count_mismatch(self):
        """Requirements must match the number of users."""
        with pytest.raises(ArgumentError):
            solve_suboptimal(RotatedChannels(np.eye(2)), [UserRequirement(1.0)], UNIT_NOISE)


class TestSolveSinrOnly:
    """Test suite for solve_sinr_only and find_feasible_start."""

    def test_default_rho_scalar_channel(self):
        """No power splitting: P = Gamma (N0 + NC/(1 - rho_min))."""
        rot = RotatedChannels(np.array([[1.0 + 0j]]))
        sol = solve_sinr_only(rot, [UserRequirement(10.0)], UNIT_NOISE)
        assert sol.rho[0] == pytest.approx(1.0 - RHO_MIN)
        assert sol.transmit_power == pytest.approx(10.0 * (1.0 + 1.0 / (1.0 - RHO_MIN)), rel=1e-6)

    def test_ignores_energy(self):
        """EH targets do not change the SINR-only design."""
        _, _, rot = _random_rotated(1, 2, 3)
        with_eh = solve_sinr_only(rot, uniform_requirements(2, 10.0, 20.0), UNIT_NOISE, rho=[0.5, 0.5])
        without = solve_sinr_only(rot, uniform_requirements(2, 10.0, None), UNIT_NOISE, rho=[0.5, 0.5])
        assert with_eh.transmit_power == pytest.approx(without.transmit_power, rel=1e-9)

    def test_not_worse_than_suboptimal(self):
        """Relaxing Im = 0 never costs power at equal rho."""
        _, _, rot = _random_rotated(2, 3, 3)
        reqs = uniform_requirements(3, 10.0, None)
        sub = solve_suboptimal(rot, reqs, UNIT_NOISE)
        free = solve_sinr_only(rot, reqs, UNIT_NOISE, rho=sub.rho)
        assert free.transmit_power <= sub.transmit_power * (1.0 + 1e-6)

    def test_infeasible(self):
        """Opposite symbols on one antenna are infeasible even with tilt."""
        rot = rotate_channels(ChannelInstance([[1.0], [1.0]]), SymbolFrame([0.0, math.pi]))
        with pytest.raises(InfeasibleError) as info:
            solve_sinr_only(rot, uniform_requirements(2, 0.0, None), UNIT_NOISE)
        assert info.value.solution is not None

    @pytest.mark.parametrize("seed", range(3))
    def test_feasible_start_meets_everything(self, seed):
        """The amplified SINR-only point satisfies both constraint sets."""
        _, _, rot = _random_rotated(10 + seed, 3, 4)
        reqs = uniform_requirements(3, 10.0, 10.0)
        start = find_feasible_start(rot, reqs, UNIT_NOISE, rho_init=[0.9, 0.9, 0.9])
        _assert_feasible(start, rot, reqs, UNIT_NOISE)


class TestPolish:
    """Test suite for the beta amplification."""

    def test_closes_sinr_gap(self):
        """A point short of the wedge apex is scaled onto it."""
        rot = RotatedChannels(np.array([[1.0 + 0j]]))
        reqs = [UserRequirement(4.0 / 3.0)]
        sol = polish(CiSolution(w=[1.0], rho=[0.5]), rot, reqs, UNIT_NOISE)
        assert sol.w[0].real == pytest.approx(2.0)

    def test_feasible_unchanged(self):
        """A feasible point is returned as is."""
        rot = RotatedChannels(np.array([[1.0 + 0j]]))
        original = CiSolution(w=[5.0], rho=[0.5])
        assert polish(original, rot, [UserRequirement(1.0, 1.0)], UNIT_NOISE) is original


class TestSolveDc:
    """Test suite for solve_dc."""

    @pytest.mark.parametrize("N", [1, 2, 4])
    def test_single_user_closed_form(self, N):
        """K=1 converges to the balanced on-axis optimum from a poor start."""
        rng = np.random.default_rng(N)
        h = rng.standard_normal((1, N)) + 1j * rng.standard_normal((1, N))
        rot = RotatedChannels(h)
        reqs = [UserRequirement(10.0, 15.0)]
        init = find_feasible_start(rot, reqs, UNIT_NOISE, rho_init=[0.9])
        sol, trace = solve_dc(rot, reqs, UNIT_NOISE, init)
        assert sol.transmit_power == pytest.approx(_single_user_power(h[0], reqs[0], UNIT_NOISE), rel=1e-3)
        assert sol.transmit_power <= init.transmit_power
        assert isinstance(trace[0], DcState)

    @pytest.mark.parametrize("seed", range(3))
    def test_from_suboptimal_never_worse(self, seed):
        """Starting from the sub-optimal point never increases the power."""
        _, _, rot = _random_rotated(20 + seed, 3, 3)
        reqs = uniform_requirements(3, 10.0, 5.0)
        init = solve_suboptimal(rot, reqs, UNIT_NOISE)
        sol, _ = solve_dc(rot, reqs, UNIT_NOISE, init)
        assert sol.transmit_power <= init.transmit_power + 1e-9 * max(1.0, init.transmit_power)

    @pytest.mark.parametrize("seed", range(4))
    def test_descent_and_feasibility(self, seed):
        """History is nonincreasing and every stored iterate is feasible."""
        channels, frame, rot = _random_rotated(30 + seed, 2, 4)
        reqs = uniform_requirements(2, 12.0, 8.0)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        sol, trace = solve_dc(rot, reqs, UNIT_NOISE, init)
        assert _nonincreasing(sol.history)
        assert sol.history[-1] == pytest.approx(sol.transmit_power)
        for state in trace:
            received = rot.h @ state.w
            assert np.allclose(state.p[:, 0], received.real)
            assert np.allclose(state.p[:, 1], received.imag)
            _assert_feasible(CiSolution(w=state.w, rho=state.rho), rot, reqs, UNIT_NOISE)
        assert check_solution("CI", sol, channels, frame, reqs, UNIT_NOISE).passed

    def test_no_energy_pins_rho(self):
        """With E=0 the splitting ratio stays at 1 - rho_min."""
        _, _, rot = _random_rotated(5, 2, 3)
        reqs = uniform_requirements(2, 10.0, None)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        sol, _ = solve_dc(rot, reqs, UNIT_NOISE, init)
        assert np.allclose(sol.rho, 1.0 - RHO_MIN)

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_channel_scaling_law(self, c):
        """Scaling channels by c and the start by 1/c scales the DC result by 1/c^2."""
        _, _, rot = _random_rotated(6, 3, 4)
        reqs = uniform_requirements(3, 15.0, 5.0)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        base, _ = solve_dc(rot, reqs, UNIT_NOISE, init, tol=1e-10, max_outer=300)
        scaled_init = CiSolution(w=init.w / c, rho=init.rho)
        scaled, _ = solve_dc(rot.scaled(c), reqs, UNIT_NOISE, scaled_init, tol=1e-10, max_outer=300)
        assert scaled.transmit_power == pytest.approx(base.transmit_power / c ** 2, rel=1e-6)

    def test_violating_iterate_rejected(self, monkeypatch, caplog):
        """A candidate that breaks the original constraints is dropped and the start kept."""
        _, _, rot = _random_rotated(8, 2, 3)
        reqs = uniform_requirements(2, 10.0, 5.0)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        monkeypatch.setattr(ci_precoder, "_min_normalized_slack", lambda *args: -1.0)
        with caplog.at_level("WARNING", logger="ciswipt.ci_precoder"):
            sol, trace = solve_dc(rot, reqs, UNIT_NOISE, init)
        assert "violates the original constraints" in caplog.text
        assert sol.history == (init.transmit_power,)
        assert np.array_equal(sol.w, init.w)
        assert len(trace) == 1
        assert not sol.converged

    def test_trace_document(self):
        """DcState serializes to plain lists."""
        rot = RotatedChannels(np.array([[1.0 + 0j]]))
        reqs = [UserRequirement(10.0, 15.0)]
        _, trace = solve_dc(rot, reqs, UNIT_NOISE, solve_suboptimal(rot, reqs, UNIT_NOISE), max_outer=2)
        doc = trace[-1].to_dict()
        assert set(doc) == {"iteration", "p", "w", "rho", "u", "g", "history"}
        assert len(doc["w"]) == 1 and len(doc["w"][0]) == 2

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_phase_grid_oracle(self, seed):
        """K=N=2: DC lands within 2% of the phase-grid reference."""
        _, _, rot = _random_rotated(40 + seed, 2, 2)
        reqs = uniform_requirements(2, 10.0, 0.0)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        sol, _ = solve_dc(rot, reqs, UNIT_NOISE, init)
        oracle = oracle_phase_grid(rot, reqs, UNIT_NOISE, grid_density=64)
        assert sol.transmit_power <= oracle.power * 1.02
        assert oracle.power <= sol.transmit_power * 1.02


class TestCommonPhase:
    """Test suite for invariance under a common rotation of every data symbol."""

    @pytest.mark.parametrize("seed", range(3))
    def test_rotated_channels_unchanged(self, seed):
        """One constellation step on every phase leaves h~ unchanged."""
        channels, frame, rot = _random_rotated(50 + seed, 3, 3)
        shifted = rotate_channels(channels, frame.shifted(2.0 * math.pi / QPSK.order))
        assert np.allclose(shifted.h, rot.h, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_power_unchanged(self, seed):
        """Sub-optimal, SINR-only and DC powers do not move under a common phase shift."""
        channels, frame, rot = _random_rotated(60 + seed, 3, 3)
        shifted = rotate_channels(channels, frame.shifted(2.0 * math.pi / QPSK.order))
        reqs = uniform_requirements(3, 12.0, 6.0)

        def powers(r):
            init = find_feasible_start(r, reqs, UNIT_NOISE)
            dc, _ = solve_dc(r, reqs, UNIT_NOISE, init)
            return [solve_suboptimal(r, reqs, UNIT_NOISE).transmit_power,
                    solve_sinr_only(r, reqs, UNIT_NOISE).transmit_power,
                    dc.transmit_power]

        assert powers(shifted) == pytest.approx(powers(rot), rel=1e-6)


@pytest.mark.slow
class TestPropertyBatteries:
    """Large seeded batteries over random instances."""

    def test_single_user_closed_form(self):
        """200 K=1 instances: DC and sub-optimal both hit the balanced optimum within 1e-3."""
        rng = np.random.default_rng(2024)
        for _ in range(200):
            N = int(rng.integers(1, 5))
            h = (rng.standard_normal((1, N)) + 1j * rng.standard_normal((1, N))) / math.sqrt(2.0)
            req = UserRequirement.from_db(rng.uniform(0.0, 40.0), rng.uniform(0.0, 20.0))
            rot = RotatedChannels(h)
            expected = _single_user_power(h[0], req, UNIT_NOISE)
            sub = solve_suboptimal(rot, [req], UNIT_NOISE)
            dc, _ = solve_dc(rot, [req], UNIT_NOISE, find_feasible_start(rot, [req], UNIT_NOISE))
            assert sub.transmit_power == pytest.approx(expected, rel=1e-3)
            assert dc.transmit_power == pytest.approx(expected, rel=1e-3)

    @pytest.mark.parametrize("seed", range(50))
    def test_dc_against_phase_grid(self, seed):
        """K=N=2: DC is at most 2% above the phase-grid reference and never below it."""
        _, _, rot = _random_rotated(1000 + seed, 2, 2)
        reqs = uniform_requirements(2, (5.0, 10.0, 15.0, 20.0)[seed % 4], 10.0)
        init = find_feasible_start(rot, reqs, UNIT_NOISE)
        sol, _ = solve_dc(rot, reqs, UNIT_NOISE, init)
        oracle = oracle_phase_grid(rot, reqs, UNIT_NOISE, grid_density=64)
        assert sol.transmit_power <= oracle.power * 1.02
        assert sol.transmit_power >= oracle.power * (1.0 - 1e-6)

    def test_dc_descent_and_feasibility(self):
        """500 random instances: monotone history and every stored iterate feasible."""
        rng = np.random.default_rng(77)
        for seed in range(500):
            K = int(rng.integers(1, 4))
            N = int(rng.integers(K, 5))
            _, _, rot = _random_rotated(5000 + seed, K, N)
            reqs = uniform_requirements(K, rng.uniform(0.0, 20.0), rng.uniform(0.0, 15.0))
            init = find_feasible_start(rot, reqs, UNIT_NOISE)
            sol, trace = solve_dc(rot, reqs, UNIT_NOISE, init)
            assert all(b <= a for a, b in zip(sol.history, sol.history[1:]))
            assert sol.transmit_power <= init.transmit_power
            for state in trace:
                _assert_feasible(CiSolution(w=state.w, rho=state.rho), rot, reqs, UNIT_NOISE)
