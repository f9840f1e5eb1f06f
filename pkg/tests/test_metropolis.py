"""Tests for particle_em.metropolis: proposal densities, acceptance, detailed balance."""

import functools

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from particle_em.errors import DivergenceError
from particle_em.metropolis import (
    LOG_RATIO_FLOOR,
    MhState,
    UlaProposal,
    accept,
    joint_log_ratio,
    joint_mh_step,
    log_rho_n,
    marginal_log_ratio,
    marginal_mh_step,
    marginal_transition_matrix,
)
from particle_em.models import ToyHierarchical
from particle_em.oracles import grid_masses
from particle_em.rng import StepRng
from particle_em.samplers import run
from particle_em.types import MH_JOINT, MH_MARGINAL, PGA, PQN, RunConfig


@functools.cache
def _joint_acceptance(n, h, steps=500):
    toy = ToyHierarchical.simulate(10, seed=0)
    config = RunConfig(MH_JOINT, h=h, n_particles=n, n_steps=steps, mh_update_rule=PQN)
    return run(toy, config).acceptance_rate


class TestUlaProposal:
    def test_rejects_bad_step(self, toy):
        with pytest.raises(ValueError):
            UlaProposal(toy, 0.0)

    def test_log_density_is_gaussian(self, toy, rng):
        proposal = UlaProposal(toy, 0.2)
        points = rng.standard_normal((3, toy.d_x))
        proposals = rng.standard_normal((3, toy.d_x))
        theta = np.array([0.5])
        means = proposal.mean(theta, points)
        expected = sum(
            multivariate_normal(mean=m, cov=0.4 * np.eye(toy.d_x)).logpdf(z)
            for m, z in zip(means, proposals)
        )
        assert proposal.log_density_cloud(theta, points, proposals) == pytest.approx(expected)
        assert proposal.log_density(theta, points[0], proposals[0]) == pytest.approx(
            multivariate_normal(mean=means[0], cov=0.4 * np.eye(toy.d_x)).logpdf(proposals[0])
        )

    def test_sample_uses_step_streams(self, toy):
        proposal = UlaProposal(toy, 0.1)
        points = np.zeros((2, toy.d_x))
        a = proposal.sample([0.0], points, StepRng(1), 3)
        b = proposal.sample([0.0], points, StepRng(1), 3)
        np.testing.assert_array_equal(a, b)


class TestAccept:
    def test_zero_log_ratio_always_accepts(self):
        assert all(accept(0.0, u) for u in (1e-12, 0.5, 0.999999))

    def test_positive_ratio_clamped(self):
        assert accept(50.0, 0.999)

    def test_very_negative_ratio(self):
        assert not accept(-1e6, 0.5)
        assert accept(LOG_RATIO_FLOOR - 10, 0.0)

    def test_threshold(self):
        assert accept(np.log(0.3), 0.29)
        assert not accept(np.log(0.3), 0.31)


class TestMhState:
    def test_acceptance_rate(self):
        assert MhState(np.zeros((2, 1))).acceptance_rate == 0.0
        assert MhState(np.zeros((2, 1)), accepted=3, proposed=4).acceptance_rate == 0.75

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            MhState(np.zeros((2, 1)), accepted=2, proposed=1)


class TestLogRatios:
    def test_marginal_antisymmetric(self, toy, rng):
        proposal = UlaProposal(toy, 0.1)
        x = rng.standard_normal((3, toy.d_x))
        z = x + 0.1 * rng.standard_normal((3, toy.d_x))
        forward = marginal_log_ratio(toy, proposal, x, z)
        assert forward == pytest.approx(-marginal_log_ratio(toy, proposal, z, x))

    def test_marginal_target(self, toy, rng):
        x = rng.standard_normal((4, toy.d_x))
        theta = toy.exact_m_step(x)
        assert log_rho_n(toy, x) == pytest.approx(np.sum(toy.log_joint_cloud(theta, x)))

    def test_single_particle_target(self):
        toy = ToyHierarchical([0.0])
        assert log_rho_n(toy, [[0.0]]) == pytest.approx(-1.837877, abs=1e-6)

    def test_joint_antisymmetric(self, toy, rng):
        proposal = UlaProposal(toy, 0.1)
        x = rng.standard_normal((3, toy.d_x))
        z = x + 0.1 * rng.standard_normal((3, toy.d_x))
        theta, psi = np.array([0.2]), np.array([0.25])
        forward = joint_log_ratio(toy, proposal, theta, x, psi, z)
        assert forward == pytest.approx(-joint_log_ratio(toy, proposal, psi, z, theta, x))


class TestMhSteps:
    def test_marginal_step_moves_or_stays(self, toy, rng):
        state = MhState(rng.standard_normal((3, toy.d_x)))
        step_rng = StepRng(2)
        for _ in range(20):
            new = marginal_mh_step(toy, state, 0.05, step_rng)
            assert new.proposed == state.proposed + 1
            if new.accepted == state.accepted:
                assert new.cloud is state.cloud
            state = new
        assert state.proposed == 20
        assert state.theta is None

    def test_joint_step_updates_theta_on_accept(self, toy, rng):
        state = MhState(rng.standard_normal((3, toy.d_x)), theta=[0.0])
        step_rng = StepRng(5)
        for _ in range(20):
            new = joint_mh_step(toy, state, PQN, 0.05, step_rng)
            if new.accepted == state.accepted:
                np.testing.assert_array_equal(new.theta, state.theta)
            state = new
        assert state.accepted > 0

    def test_joint_step_needs_theta(self, toy):
        with pytest.raises(ValueError):
            joint_mh_step(toy, MhState(np.zeros((1, toy.d_x))), PGA, 0.1, StepRng(0))

    def test_non_finite_ratio(self, toy):
        state = MhState(np.full((1, toy.d_x), 1e200), theta=[0.0])
        with pytest.raises(DivergenceError):
            joint_mh_step(toy, state, PGA, 0.1, StepRng(0))


class TestDetailedBalance:
    def test_marginal_chain_on_grid(self, toy1):
        grid = np.linspace(-3.0, 4.5, 31)
        masses = grid_masses(lambda x: log_rho_n(toy1, [[x]]), grid)
        matrix = marginal_transition_matrix(toy1, 0.2, grid)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
        flow = masses[:, None] * matrix
        np.testing.assert_allclose(flow, flow.T, atol=1e-12)


class TestMhRuns:
    def test_marginal_run(self, toy):
        config = RunConfig(MH_MARGINAL, h=0.05, n_particles=4, n_steps=50, snapshot_every=1)
        trace = run(toy, config)
        assert 0.0 < trace.acceptance_rate <= 1.0
        for k in range(49):
            assert trace.theta_path[k + 1, 0] == pytest.approx(trace.clouds[k + 1][1].points.mean())

    def test_joint_run_converges(self, toy):
        config = RunConfig(MH_JOINT, h=0.05, n_particles=10, n_steps=1000, burn_in=500, mh_update_rule=PQN)
        trace = run(toy, config)
        assert trace.acceptance_rate > 0.1
        assert trace.theta_bar_final[0] == pytest.approx(toy.theta_star, abs=0.3)

    @pytest.mark.slow
    def test_joint_theta_bar_across_seeds(self, toy):
        config = RunConfig(MH_JOINT, h=0.05, n_particles=10, n_steps=800, burn_in=400, mh_update_rule=PQN)
        bars = np.array([run(toy, config.replace(seed=seed)).theta_bar_final[0] for seed in range(10)])
        se = bars.std(ddof=1) / np.sqrt(bars.size)
        assert abs(bars.mean() - toy.theta_star) <= 4 * se


@pytest.mark.slow
class TestJointAcceptance:
    PARTICLES = (1, 4, 16, 64)
    STEPS = (0.01, 0.05, 0.2)

    @pytest.mark.parametrize("h", STEPS)
    def test_falls_with_particles(self, h):
        rates = [_joint_acceptance(n, h) for n in self.PARTICLES]
        assert all(later <= earlier + 0.06 for earlier, later in zip(rates, rates[1:])), rates

    @pytest.mark.parametrize("n", PARTICLES)
    def test_falls_with_step_size(self, n):
        rates = [_joint_acceptance(n, h) for h in self.STEPS]
        assert all(later <= earlier + 0.06 for earlier, later in zip(rates, rates[1:])), rates

    def test_degenerates_for_large_populations(self):
        assert _joint_acceptance(64, 0.2) < 0.5 * _joint_acceptance(1, 0.01)
