"""Model-core types: the latent-variable model interface and the run records.

A model is any ``ModelSpec`` subclass; it is the single extension point. The
log joint density ``log_joint`` must keep every θ-dependent additive constant,
since Metropolis-Hastings ratios compare densities at different θ.
"""

from __future__ import annotations

from typing import Any, Optional, Sequence

import numpy as np
import numpy.typing as npt

from particle_em.errors import ConfigError, DimensionError, UnsupportedOperationError

Array = npt.NDArray[np.float64]

PGA = "PGA"
PGA_SCALED = "PGA-scaled"
PQN = "PQN"
PMGA = "PMGA"
SOUL = "SOUL"
MH_MARGINAL = "MH-marginal"
MH_JOINT = "MH-joint"
EM_EXACT = "EM-exact"
ALGORITHMS = (PGA, PGA_SCALED, PQN, PMGA, SOUL, MH_MARGINAL, MH_JOINT, EM_EXACT)

INIT_ZEROS = "zeros"
INIT_CONSTANT = "constant"
INIT_PRIOR = "prior"
INIT_WARM_START = "warm-start"
INIT_POLICIES = (INIT_ZEROS, INIT_CONSTANT, INIT_PRIOR, INIT_WARM_START)

MH_UPDATE_RULES = (PGA, PQN)

# Optional ModelSpec capabilities, by method name.
NEG_HESS_THETA = "neg_hess_theta"
EXACT_M_STEP = "exact_m_step"
EM_STEP = "em_step"
SAMPLE_PRIOR = "sample_prior"
OPTIONAL_CAPABILITIES = (NEG_HESS_THETA, EXACT_M_STEP, EM_STEP, SAMPLE_PRIOR)


class ModelSpec:
    """A latent-variable model p_θ(x, y) with fixed observations y.

    Subclasses set ``d_theta`` and ``d_x`` and implement ``log_joint``,
    ``grad_theta`` and ``grad_x``. The optional capabilities raise
    ``UnsupportedOperationError`` unless overridden. The ``*_cloud`` batch
    methods evaluate an N×D_x matrix of particles at once; the defaults loop
    over rows and models override them when they can vectorize.

    Implementations hold no mutable state after construction, so one
    instance can be shared by concurrent runs.
    """

    d_theta: int
    d_x: int

    def log_joint(self, theta: Array, x: Array) -> float:
        raise NotImplementedError

    def grad_theta(self, theta: Array, x: Array) -> Array:
        raise NotImplementedError

    def grad_x(self, theta: Array, x: Array) -> Array:
        raise NotImplementedError

    def neg_hess_theta(self, theta: Array, x: Array) -> Array:
        raise UnsupportedOperationError(f"{type(self).__name__} has no neg_hess_theta")

    def exact_m_step(self, points: Array) -> Array:
        raise UnsupportedOperationError(f"{type(self).__name__} has no exact_m_step")

    def em_step(self, theta: Array) -> Array:
        raise UnsupportedOperationError(f"{type(self).__name__} has no em_step")

    def sample_prior(self, theta: Array, n: int, rng: np.random.Generator) -> Array:
        raise UnsupportedOperationError(f"{type(self).__name__} has no sample_prior")

    @property
    def theta_term_counts(self) -> Array:
        """Number of additive terms in each θ-gradient coordinate."""
        return np.ones(self.d_theta)

    def capabilities(self) -> frozenset[str]:
        """Names of the optional capabilities this model overrides."""
        return frozenset(
            name
            for name in OPTIONAL_CAPABILITIES
            if getattr(type(self), name) is not getattr(ModelSpec, name)
        )

    def has(self, capability: str) -> bool:
        return capability in self.capabilities()

    # --- batch evaluation over a cloud ---

    def log_joint_cloud(self, theta: Array, points: Array) -> Array:
        points = self.check_points(points)
        return np.array([self.log_joint(theta, x) for x in points])

    def grad_theta_cloud(self, theta: Array, points: Array) -> Array:
        points = self.check_points(points)
        return np.array([self.grad_theta(theta, x) for x in points])

    def grad_x_cloud(self, theta: Array, points: Array) -> Array:
        points = self.check_points(points)
        return np.array([self.grad_x(theta, x) for x in points])

    def neg_hess_theta_sum(self, theta: Array, points: Array) -> Array:
        points = self.check_points(points)
        total = np.zeros((self.d_theta, self.d_theta))
        for x in points:
            total += self.neg_hess_theta(theta, x)
        return total

    # --- shape contracts ---

    def check_theta(self, theta: Any) -> Array:
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        if theta.shape != (self.d_theta,):
            raise DimensionError(f"theta has shape {theta.shape}, expected ({self.d_theta},)")
        return theta

    def check_x(self, x: Any) -> Array:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if x.shape != (self.d_x,):
            raise DimensionError(f"x has shape {x.shape}, expected ({self.d_x},)")
        return x

    def check_points(self, points: Any) -> Array:
        if isinstance(points, ParticleCloud):
            points = points.points
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != self.d_x:
            raise DimensionError(f"cloud has shape {points.shape}, expected (N, {self.d_x})")
        return points


class ParticleCloud:
    """N latent points in R^{D_x}; the empirical posterior approximation."""

    __slots__ = ["points"]

    def __init__(self, points: Any) -> None:
        points = np.array(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[None, :]
        if points.ndim != 2 or points.shape[0] < 1:
            raise DimensionError(f"cloud must be an N×D_x matrix with N ≥ 1, got {points.shape}")
        self.points = points

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d_x(self) -> int:
        return self.points.shape[1]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.points)))

    def copy(self) -> ParticleCloud:
        return ParticleCloud(self.points)

    def __repr__(self) -> str:
        return f"ParticleCloud(n={self.n}, d_x={self.d_x})"


class ParameterState:
    """Current θ_k plus the running mean of the post-burn-in estimates.

    ``theta_bar`` is a streaming mean updated left to right, one step at a
    time, so its value depends only on the sequence of recorded θs.
    """

    __slots__ = ["theta", "theta_bar", "k", "k_b"]

    def __init__(
        self,
        theta: Any,
        k_b: int = 0,
        k: int = 0,
        theta_bar: Optional[Array] = None,
    ) -> None:
        self.theta = np.atleast_1d(np.array(theta, dtype=np.float64))
        self.k = k
        self.k_b = k_b
        if theta_bar is None:
            theta_bar = np.full_like(self.theta, np.nan)
        self.theta_bar = np.array(theta_bar, dtype=np.float64)

    @property
    def n_averaged(self) -> int:
        return max(self.k - self.k_b, 0)

    def advance(self, theta: Any) -> ParameterState:
        """Record θ_{k+1} and return the new state."""
        theta = np.atleast_1d(np.array(theta, dtype=np.float64))
        k = self.k + 1
        count = k - self.k_b
        if count == 1:
            theta_bar = theta.copy()
        elif count > 1:
            theta_bar = self.theta_bar + (theta - self.theta_bar) / count
        else:
            theta_bar = self.theta_bar
        return ParameterState(theta, self.k_b, k, theta_bar)

    def __repr__(self) -> str:
        return f"ParameterState(theta={self.theta}, theta_bar={self.theta_bar}, k={self.k})"


class RunConfig:
    """Everything one algorithm run needs besides the model."""

    __slots__ = [
        "algorithm", "h", "n_particles", "n_steps", "burn_in", "seed",
        "snapshot_every", "init", "init_value", "warm_start", "theta_init",
        "precondition", "preconditioner", "mh_update_rule", "divergence_bound",
    ]

    def __init__(
        self,
        algorithm: str = PGA,
        h: float = 0.01,
        n_particles: int = 10,
        n_steps: int = 100,
        burn_in: int = 0,
        seed: int = 0,
        snapshot_every: int = 0,
        init: str = INIT_ZEROS,
        init_value: float = 0.0,
        warm_start: Optional[str] = None,
        theta_init: Optional[Sequence[float]] = None,
        precondition: bool = False,
        preconditioner: Optional[Sequence[float]] = None,
        mh_update_rule: str = PGA,
        divergence_bound: float = 1e150,
    ) -> None:
        self.algorithm = algorithm
        self.h = h
        self.n_particles = n_particles
        self.n_steps = n_steps
        self.burn_in = burn_in
        self.seed = seed
        self.snapshot_every = snapshot_every
        self.init = init
        self.init_value = init_value
        self.warm_start = warm_start
        self.theta_init = theta_init
        self.precondition = precondition
        self.preconditioner = preconditioner
        self.mh_update_rule = mh_update_rule
        self.divergence_bound = divergence_bound

    def validate(self) -> RunConfig:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}", "algorithm")
        if not (isinstance(self.h, (int, float)) and np.isfinite(self.h) and self.h > 0):
            raise ConfigError(f"step size must be positive, got {self.h!r}", "h")
        if not isinstance(self.n_particles, int) or self.n_particles < 1:
            raise ConfigError(f"must be an integer ≥ 1, got {self.n_particles!r}", "n_particles")
        if not isinstance(self.n_steps, int) or self.n_steps < 1:
            raise ConfigError(f"must be an integer ≥ 1, got {self.n_steps!r}", "n_steps")
        if not isinstance(self.burn_in, int) or not 0 <= self.burn_in < self.n_steps:
            raise ConfigError(f"need 0 ≤ burn_in < n_steps, got {self.burn_in!r}", "burn_in")
        if not isinstance(self.seed, int) or not -(2**63) <= self.seed < 2**64:
            raise ConfigError(f"must be a 64-bit integer, got {self.seed!r}", "seed")
        if not isinstance(self.snapshot_every, int) or self.snapshot_every < 0:
            raise ConfigError(f"must be an integer ≥ 0, got {self.snapshot_every!r}", "snapshot_every")
        if self.init not in INIT_POLICIES:
            raise ConfigError(f"unknown policy {self.init!r}", "init")
        if self.init == INIT_WARM_START and not self.warm_start:
            raise ConfigError("warm-start init needs a state file", "warm_start")
        if self.mh_update_rule not in MH_UPDATE_RULES:
            raise ConfigError(f"unknown update rule {self.mh_update_rule!r}", "mh_update_rule")
        if self.preconditioner is not None:
            lam = np.asarray(self.preconditioner, dtype=np.float64)
            if lam.ndim != 1 or not np.all(lam > 0):
                raise ConfigError("entries must be strictly positive", "preconditioner")
        if not self.divergence_bound > 0:
            raise ConfigError("must be positive", "divergence_bound")
        return self

    def required_capabilities(self) -> set[str]:
        needed = set()
        if self.algorithm == PQN or (self.algorithm == MH_JOINT and self.mh_update_rule == PQN):
            needed.add(NEG_HESS_THETA)
        if self.algorithm in (PMGA, MH_MARGINAL, MH_JOINT):
            needed.add(EXACT_M_STEP)
        if self.algorithm == EM_EXACT:
            needed.add(EM_STEP)
        if self.init == INIT_PRIOR and self.algorithm != EM_EXACT:
            needed.add(SAMPLE_PRIOR)
        return needed

    def validate_for(self, model: ModelSpec) -> RunConfig:
        """Validate and check the model supports everything the run needs."""
        self.validate()
        missing = sorted(self.required_capabilities() - model.capabilities())
        if missing:
            raise UnsupportedOperationError(
                f"{self.algorithm} needs {', '.join(missing)}, "
                f"which {type(model).__name__} does not provide"
            )
        if self.preconditioner is not None and len(self.preconditioner) != model.d_theta:
            raise ConfigError(f"needs {model.d_theta} entries", "preconditioner")
        if self.theta_init is not None and len(self.theta_init) != model.d_theta:
            raise ConfigError(f"needs {model.d_theta} entries", "theta_init")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__slots__}

    def replace(self, **changes: Any) -> RunConfig:
        values = self.to_dict()
        values.update(changes)
        return RunConfig(**values)

    def __repr__(self) -> str:
        return f"RunConfig({self.algorithm}, h={self.h}, N={self.n_particles}, K={self.n_steps})"


class Trace:
    """Per-step record of a run.

    Row i of ``theta_path`` is the estimate after step i + 1. ``clouds``
    always ends with the final cloud; earlier entries appear every
    ``snapshot_every`` steps.
    """

    __slots__ = [
        "algorithm", "theta_path", "theta_bar_path", "theta_bar_final",
        "clouds", "acceptance_rate", "wall_time", "burn_in",
    ]

    def __init__(
        self,
        algorithm: str,
        theta_path: Array,
        theta_bar_path: Array,
        theta_bar_final: Array,
        clouds: Optional[list[tuple[int, ParticleCloud]]] = None,
        acceptance_rate: Optional[float] = None,
        wall_time: float = 0.0,
        burn_in: int = 0,
    ) -> None:
        self.algorithm = algorithm
        self.theta_path = theta_path
        self.theta_bar_path = theta_bar_path
        self.theta_bar_final = theta_bar_final
        self.clouds = clouds if clouds is not None else []
        self.acceptance_rate = acceptance_rate
        self.wall_time = wall_time
        self.burn_in = burn_in

    @property
    def n_steps(self) -> int:
        return self.theta_path.shape[0]

    @property
    def final_cloud(self) -> Optional[ParticleCloud]:
        return self.clouds[-1][1] if self.clouds else None

    def retained_clouds(self, burn_in: Optional[int] = None) -> list[ParticleCloud]:
        """Clouds recorded after the burn-in, falling back to the final cloud."""
        k_b = self.burn_in if burn_in is None else burn_in
        kept = [cloud for step, cloud in self.clouds if step > k_b]
        if not kept and self.clouds:
            kept = [self.clouds[-1][1]]
        return kept

    def __repr__(self) -> str:
        return f"Trace({self.algorithm}, K={self.n_steps}, theta_bar={self.theta_bar_final})"
