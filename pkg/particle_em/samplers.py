"""Unadjusted particle algorithms and the run driver.

Every step reads the step-k parameter and the step-k cloud for both of its
halves: the θ update and the latent update are simultaneous, not chained.
Step ``k`` (0-based, the number of completed steps) draws its Gaussians from
the ``(k, particle)`` streams of a ``StepRng``.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from tqdm import tqdm

from particle_em.errors import ConfigError, DivergenceError, SingularHessianError
from particle_em.rng import INIT, StepRng
from particle_em.types import (
    EM_EXACT,
    INIT_CONSTANT,
    INIT_PRIOR,
    INIT_WARM_START,
    MH_JOINT,
    MH_MARGINAL,
    PGA,
    PGA_SCALED,
    PMGA,
    PQN,
    SOUL,
    Array,
    ModelSpec,
    ParameterState,
    ParticleCloud,
    RunConfig,
    Trace,
)

logger = logging.getLogger(__name__)


class Preconditioner:
    """Positive diagonal Λ multiplying the θ-gradient; fixed points are unchanged."""

    __slots__ = ["lambda_"]

    def __init__(self, lambda_: Any) -> None:
        lambda_ = np.atleast_1d(np.array(lambda_, dtype=np.float64))
        if lambda_.ndim != 1 or not np.all(np.isfinite(lambda_)) or not np.all(lambda_ > 0):
            raise ConfigError("entries must be finite and strictly positive", "preconditioner")
        self.lambda_ = lambda_

    @classmethod
    def default_for(cls, model: ModelSpec) -> Preconditioner:
        """Reciprocal of the number of terms in each θ-gradient coordinate."""
        return cls(1.0 / model.theta_term_counts)

    def apply(self, grad: Array) -> Array:
        return self.lambda_ * grad

    def __repr__(self) -> str:
        return f"Preconditioner({self.lambda_})"


def check_bounded(values: Any, what: str, step: int, bound: float = np.inf) -> None:
    """Raise ``DivergenceError`` if any value is non-finite or exceeds ``bound``."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise DivergenceError(f"non-finite {what}", step)
    if np.any(np.abs(values) > bound):
        raise DivergenceError(f"{what} exceeded {bound:g} in magnitude", step)


def resolve_preconditioner(model: ModelSpec, config: RunConfig) -> Optional[Preconditioner]:
    if not (config.precondition or config.algorithm == PGA_SCALED):
        return None
    if config.preconditioner is not None:
        return Preconditioner(config.preconditioner)
    return Preconditioner.default_for(model)


# --- θ updates ---


def pga_theta_update(
    model: ModelSpec,
    theta: Array,
    points: Array,
    h: float,
    precond: Optional[Preconditioner] = None,
    step: int = 0,
) -> Array:
    """θ + h·Λ·(1/N)Σ_n ∇_θ ℓ(θ, X^n)."""
    grad = np.mean(model.grad_theta_cloud(theta, points), axis=0)
    check_bounded(grad, "parameter gradient", step + 1)
    if precond is not None:
        grad = precond.apply(grad)
    return theta + h * grad


def pqn_theta_update(model: ModelSpec, theta: Array, points: Array, h: float, step: int = 0) -> Array:
    """θ + h·[Σ_n H_θ(X^n)]⁻¹ Σ_n ∇_θ ℓ(θ, X^n), solved by Cholesky."""
    grad = np.sum(model.grad_theta_cloud(theta, points), axis=0)
    hess = model.neg_hess_theta_sum(theta, points)
    check_bounded(grad, "parameter gradient", step + 1)
    check_bounded(hess, "parameter Hessian", step + 1)
    try:
        factor = cho_factor(hess)
    except LinAlgError:
        raise SingularHessianError("summed negative Hessian is not positive definite", step + 1) from None
    return theta + h * cho_solve(factor, grad)


# --- latent updates ---


def ula_step(
    model: ModelSpec,
    theta: Any,
    cloud: Any,
    h: float,
    rng: StepRng,
    step: int = 0,
) -> ParticleCloud:
    """Move every particle by one Langevin step at fixed θ, each with its own draw."""
    points = model.check_points(cloud)
    grad = model.grad_x_cloud(theta, points)
    check_bounded(grad, "latent gradient", step + 1)
    noise = rng.normals(step, points.shape[0], model.d_x)
    return ParticleCloud(points + h * grad + np.sqrt(2 * h) * noise)


def pga_step(
    model: ModelSpec,
    state: ParameterState,
    cloud: Any,
    h: float,
    rng: StepRng,
    precond: Optional[Preconditioner] = None,
) -> tuple[ParameterState, ParticleCloud]:
    points = model.check_points(cloud)
    theta = pga_theta_update(model, state.theta, points, h, precond, state.k)
    new_cloud = ula_step(model, state.theta, points, h, rng, state.k)
    return state.advance(theta), new_cloud


def pqn_step(
    model: ModelSpec,
    state: ParameterState,
    cloud: Any,
    h: float,
    rng: StepRng,
) -> tuple[ParameterState, ParticleCloud]:
    points = model.check_points(cloud)
    theta = pqn_theta_update(model, state.theta, points, h, state.k)
    new_cloud = ula_step(model, state.theta, points, h, rng, state.k)
    return state.advance(theta), new_cloud


def pmga_step(
    model: ModelSpec,
    cloud: Any,
    h: float,
    rng: StepRng,
    step: int = 0,
) -> tuple[Array, ParticleCloud]:
    """Latent update at θ*(X_k); returns that θ* and the new cloud."""
    points = model.check_points(cloud)
    theta = model.exact_m_step(points)
    check_bounded(theta, "M-step parameter", step + 1)
    return theta, ula_step(model, theta, points, h, rng, step)


def soul_step(
    model: ModelSpec,
    state: ParameterState,
    cloud: Any,
    h: float,
    rng: StepRng,
    precond: Optional[Preconditioner] = None,
) -> tuple[ParameterState, ParticleCloud]:
    """PGA's θ half, then one serial ULA chain of length N started at X_k^N.

    Particle j of the new cloud is the chain's j-th state, driven by the
    (k, j) draw; with N = 1 this coincides with ``pga_step``.
    """
    points = model.check_points(cloud)
    k = state.k
    theta = pga_theta_update(model, state.theta, points, h, precond, k)
    chain = np.empty_like(points)
    x = points[-1]
    for j in range(points.shape[0]):
        grad = model.grad_x(state.theta, x)
        check_bounded(grad, "latent gradient", k + 1)
        x = x + h * grad + np.sqrt(2 * h) * rng.normal(k, j, model.d_x)
        chain[j] = x
    return state.advance(theta), ParticleCloud(chain)


# --- initialization ---


def initial_state(
    model: ModelSpec, config: RunConfig, rng: StepRng
) -> tuple[ParameterState, Optional[ParticleCloud]]:
    """θ_0 and X_0 for the configured policy; EM-exact runs carry no cloud."""
    n, d_x = config.n_particles, model.d_x
    theta = np.zeros(model.d_theta)
    if config.init == INIT_CONSTANT:
        theta = np.full(model.d_theta, float(config.init_value))
    if config.theta_init is not None:
        theta = np.array(config.theta_init, dtype=np.float64)

    if config.algorithm == EM_EXACT:
        cloud = None
    elif config.init == INIT_WARM_START:
        from particle_em.outputs import read_state

        saved_theta, saved_points = read_state(config.warm_start)
        if config.theta_init is None:
            theta = model.check_theta(saved_theta)
        points = model.check_points(saved_points)
        if points.shape[0] == 1:
            points = np.tile(points, (n, 1))
        elif points.shape[0] != n:
            raise ConfigError(
                f"state has {points.shape[0]} particles, run needs 1 or {n}", "warm_start"
            )
        cloud = ParticleCloud(points)
    elif config.init == INIT_CONSTANT:
        cloud = ParticleCloud(np.full((n, d_x), float(config.init_value)))
    elif config.init == INIT_PRIOR:
        cloud = ParticleCloud(model.sample_prior(theta, n, rng.generator(0, 0, INIT)))
    else:
        cloud = ParticleCloud(np.zeros((n, d_x)))
    return ParameterState(model.check_theta(theta), k_b=config.burn_in), cloud


# --- driver ---


def run(model: ModelSpec, config: RunConfig, progress: bool = False) -> Trace:
    """Drive the configured algorithm for K steps and record its trace."""
    from particle_em import metropolis

    config.validate_for(model)
    rng = StepRng(config.seed)
    state, cloud = initial_state(model, config, rng)
    precond = resolve_preconditioner(model, config)
    algorithm, h, bound = config.algorithm, config.h, config.divergence_bound

    mh_state = None
    if algorithm in (MH_MARGINAL, MH_JOINT):
        mh_state = metropolis.MhState(
            cloud, theta=state.theta if algorithm == MH_JOINT else None
        )

    logger.info(
        "%s: N=%d K=%d h=%g k_b=%d seed=%d",
        algorithm, config.n_particles, config.n_steps, h, config.burn_in, config.seed,
    )
    theta_path = np.empty((config.n_steps, model.d_theta))
    theta_bar_path = np.empty((config.n_steps, model.d_theta))
    clouds: list[tuple[int, ParticleCloud]] = []
    start = time.perf_counter()

    for k in tqdm(range(config.n_steps), desc=algorithm, disable=not progress, leave=False):
        if algorithm in (PGA, PGA_SCALED):
            state, cloud = pga_step(model, state, cloud, h, rng, precond)
        elif algorithm == PQN:
            state, cloud = pqn_step(model, state, cloud, h, rng)
        elif algorithm == PMGA:
            theta, cloud = pmga_step(model, cloud, h, rng, k)
            state = state.advance(theta)
        elif algorithm == SOUL:
            state, cloud = soul_step(model, state, cloud, h, rng, precond)
        elif algorithm == MH_MARGINAL:
            mh_state = metropolis.marginal_mh_step(model, mh_state, h, rng)
            cloud = mh_state.cloud
            state = state.advance(model.exact_m_step(cloud))
        elif algorithm == MH_JOINT:
            mh_state = metropolis.joint_mh_step(
                model, mh_state, config.mh_update_rule, h, rng, precond
            )
            cloud = mh_state.cloud
            state = state.advance(mh_state.theta)
        else:
            state = state.advance(model.em_step(state.theta))

        check_bounded(state.theta, "parameter estimate", k + 1, bound)
        if cloud is not None:
            check_bounded(cloud.points, "particle cloud", k + 1, bound)
            step = k + 1
            if step == config.n_steps or (config.snapshot_every and step % config.snapshot_every == 0):
                clouds.append((step, cloud))
        theta_path[k] = state.theta
        theta_bar_path[k] = state.theta_bar

    wall_time = time.perf_counter() - start
    acceptance = mh_state.acceptance_rate if mh_state is not None else None
    if acceptance is None:
        logger.info("%s done in %.3fs: theta_bar=%s", algorithm, wall_time, state.theta_bar)
    else:
        logger.info(
            "%s done in %.3fs: theta_bar=%s acceptance=%.3f",
            algorithm, wall_time, state.theta_bar, acceptance,
        )
    return Trace(
        algorithm,
        theta_path,
        theta_bar_path,
        state.theta_bar.copy(),
        clouds=clouds,
        acceptance_rate=acceptance,
        wall_time=wall_time,
        burn_in=config.burn_in,
    )
