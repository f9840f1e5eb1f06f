"""Population-wide Metropolis-Hastings corrections of the particle updates.

Both chains propose a whole new cloud with the Langevin kernel and accept or
reject it as one unit. Acceptance is decided in log space: the log-ratio is
clamped to [LOG_RATIO_FLOOR, 0] and compared against log U.
"""

from __future__ import annotations

import logging
from typing import Any, Optional

import numpy as np

from particle_em.errors import DivergenceError
from particle_em.oracles import trapezoid_weights
from particle_em.rng import StepRng
from particle_em.samplers import Preconditioner, check_bounded, pga_theta_update, pqn_theta_update
from particle_em.types import PGA, PQN, Array, ModelSpec, ParticleCloud

logger = logging.getLogger(__name__)

LOG_RATIO_FLOOR = -745.0


class UlaProposal:
    """Langevin kernel K_θ(x, ·) = N(x + h∇_x ℓ(θ, x), 2hI), applied per particle."""

    __slots__ = ["model", "h"]

    def __init__(self, model: ModelSpec, h: float) -> None:
        if not h > 0:
            raise ValueError(f"step size must be positive, got {h}")
        self.model = model
        self.h = float(h)

    def mean(self, theta: Any, points: Array, step: int = 0) -> Array:
        grad = self.model.grad_x_cloud(theta, points)
        check_bounded(grad, "latent gradient", step + 1)
        return points + self.h * grad

    def log_density(self, theta: Any, x: Any, z: Any) -> float:
        """log K_θ(x, z) for single particles."""
        x = self.model.check_x(x)
        z = self.model.check_x(z)
        return self.log_density_cloud(theta, x[None, :], z[None, :])

    def log_density_cloud(self, theta: Any, points: Any, proposals: Any) -> float:
        """Σ_n log K_θ(x^n, z^n)."""
        points = self.model.check_points(points)
        proposals = self.model.check_points(proposals)
        diff = proposals - self.mean(theta, points)
        n, d = points.shape
        return float(-np.sum(diff**2) / (4 * self.h) - 0.5 * n * d * np.log(4 * np.pi * self.h))

    def sample(self, theta: Any, points: Any, rng: StepRng, step: int) -> Array:
        points = self.model.check_points(points)
        noise = rng.normals(step, points.shape[0], self.model.d_x)
        return self.mean(theta, points, step) + np.sqrt(2 * self.h) * noise


class MhState:
    """Current population (and θ, for the joint chain) plus acceptance counts."""

    __slots__ = ["cloud", "theta", "accepted", "proposed"]

    def __init__(
        self,
        cloud: Any,
        theta: Optional[Any] = None,
        accepted: int = 0,
        proposed: int = 0,
    ) -> None:
        if accepted > proposed or accepted < 0:
            raise ValueError("need 0 ≤ accepted ≤ proposed")
        self.cloud = cloud if isinstance(cloud, ParticleCloud) else ParticleCloud(cloud)
        self.theta = None if theta is None else np.atleast_1d(np.array(theta, dtype=np.float64))
        self.accepted = accepted
        self.proposed = proposed

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def __repr__(self) -> str:
        return f"MhState(n={self.cloud.n}, accepted={self.accepted}/{self.proposed})"


def log_rho_n(model: ModelSpec, cloud: Any) -> float:
    """Σ_n ℓ(θ*(x^{1:N}), x^n), the unnormalized log target of the marginal chain."""
    points = model.check_points(cloud)
    theta = model.exact_m_step(points)
    return float(np.sum(model.log_joint_cloud(theta, points)))


def marginal_log_ratio(model: ModelSpec, proposal: UlaProposal, points: Any, proposals: Any) -> float:
    """log ρ(Z) + log K_{θ*(Z)}(Z→X) − log ρ(X) − log K_{θ*(X)}(X→Z)."""
    points = model.check_points(points)
    proposals = model.check_points(proposals)
    theta_x = model.exact_m_step(points)
    theta_z = model.exact_m_step(proposals)
    forward = np.sum(model.log_joint_cloud(theta_x, points)) + proposal.log_density_cloud(
        theta_x, points, proposals
    )
    backward = np.sum(model.log_joint_cloud(theta_z, proposals)) + proposal.log_density_cloud(
        theta_z, proposals, points
    )
    return float(backward - forward)


def joint_log_ratio(
    model: ModelSpec,
    proposal: UlaProposal,
    theta: Any,
    points: Any,
    psi: Any,
    proposals: Any,
) -> float:
    """log K_ψ(Z→X) − log K_θ(X→Z) + Σ_n[ℓ(ψ, Z^n) − ℓ(θ, X^n)]."""
    points = model.check_points(points)
    proposals = model.check_points(proposals)
    forward = np.sum(model.log_joint_cloud(theta, points)) + proposal.log_density_cloud(
        theta, points, proposals
    )
    backward = np.sum(model.log_joint_cloud(psi, proposals)) + proposal.log_density_cloud(
        psi, proposals, points
    )
    return float(backward - forward)


def accept(log_ratio: float, u: float) -> bool:
    clamped = min(max(log_ratio, LOG_RATIO_FLOOR), 0.0)
    assert 0.0 <= np.exp(clamped) <= 1.0
    with np.errstate(divide="ignore"):
        return bool(np.log(u) <= clamped)


def _decide(log_ratio: float, rng: StepRng, step: int) -> bool:
    if not np.isfinite(log_ratio):
        raise DivergenceError("non-finite acceptance log-ratio", step + 1)
    return accept(log_ratio, rng.uniform(step))


def marginal_mh_step(model: ModelSpec, state: MhState, h: float, rng: StepRng) -> MhState:
    """One accept/reject of a whole proposed population under θ*(X)."""
    step = state.proposed
    points = state.cloud.points
    proposal = UlaProposal(model, h)
    proposals = proposal.sample(model.exact_m_step(points), points, rng, step)
    log_ratio = marginal_log_ratio(model, proposal, points, proposals)
    if _decide(log_ratio, rng, step):
        return MhState(ParticleCloud(proposals), None, state.accepted + 1, step + 1)
    return MhState(state.cloud, None, state.accepted, step + 1)


def joint_mh_step(
    model: ModelSpec,
    state: MhState,
    update_rule: str,
    h: float,
    rng: StepRng,
    precond: Optional[Preconditioner] = None,
) -> MhState:
    """Propose (ψ, Z) with ψ from the PGA or PQN θ-rule and Z ~ K_θ; accept jointly."""
    if state.theta is None:
        raise ValueError("joint chain needs a parameter in its state")
    step = state.proposed
    theta, points = state.theta, state.cloud.points
    if update_rule == PGA:
        psi = pga_theta_update(model, theta, points, h, precond, step)
    elif update_rule == PQN:
        psi = pqn_theta_update(model, theta, points, h, step)
    else:
        raise ValueError(f"unknown update rule {update_rule!r}")
    proposal = UlaProposal(model, h)
    proposals = proposal.sample(theta, points, rng, step)
    log_ratio = joint_log_ratio(model, proposal, theta, points, psi, proposals)
    if _decide(log_ratio, rng, step):
        return MhState(ParticleCloud(proposals), psi, state.accepted + 1, step + 1)
    return MhState(state.cloud, theta, state.accepted, step + 1)


def marginal_transition_density(model: ModelSpec, h: float, points: Any, proposals: Any) -> float:
    """Density of the marginal chain moving from X to Z ≠ X (proposal times acceptance)."""
    proposal = UlaProposal(model, h)
    points = model.check_points(points)
    log_kernel = proposal.log_density_cloud(model.exact_m_step(points), points, proposals)
    log_ratio = min(marginal_log_ratio(model, proposal, points, proposals), 0.0)
    return float(np.exp(log_kernel + log_ratio))


def marginal_transition_matrix(model: ModelSpec, h: float, grid: Any) -> Array:
    """Discretized single-particle transition matrix on a 1-D grid.

    Off-diagonal entries integrate the accepted-move density with trapezoid
    weights; the diagonal holds the remaining (rejection) mass.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if model.d_x != 1:
        raise ValueError("transition matrix needs a one-dimensional latent space")
    weights = trapezoid_weights(grid)
    size = grid.size
    matrix = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            if i != j:
                matrix[i, j] = weights[j] * marginal_transition_density(
                    model, h, grid[i : i + 1, None], grid[j : j + 1, None]
                )
        matrix[i, i] = 1.0 - np.sum(matrix[i])
    return matrix
