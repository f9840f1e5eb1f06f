"""Closed-form and brute-force references the algorithms are checked against.

The toy-model results here are exact: the mean-field recursions of the
particle algorithms reduce to a 2×2 linear system in (θ_k, ν_k), where ν_k is
the expected particle average, and the finite-N stationary law is Gaussian.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy.integrate import simpson, trapezoid
from scipy.optimize import minimize_scalar

from particle_em.errors import DimensionError, OracleError
from particle_em.types import PGA, PMGA, PQN, Array, ModelSpec

logger = logging.getLogger(__name__)

MEANFIELD_VARIANTS = (PGA, PQN, PMGA)

QUADRATURE_POINTS = 4001
QUADRATURE_WIDTH = 8.0
FD_STEP = 1e-5
FD_TOLERANCE = 1e-5


# --- mean-field recursions ---


class MeanFieldState:
    __slots__ = ["theta", "nu"]

    def __init__(self, theta: float, nu: float) -> None:
        self.theta = theta
        self.nu = nu

    def __iter__(self):
        yield self.theta
        yield self.nu

    def __repr__(self) -> str:
        return f"MeanFieldState(theta={self.theta}, nu={self.nu})"


def meanfield_recursion(
    variant: str,
    d_x: int,
    h: float,
    y_bar: float,
    init: tuple[float, float] = (0.0, 0.0),
    k: int = 100,
) -> list[MeanFieldState]:
    """Deterministic toy-model trajectory (θ_0, ν_0), ..., (θ_k, ν_k).

    PMGA has no separate θ: its estimate is θ*(X_k), whose mean is ν_k, so the
    reported θ equals ν and the initial θ is ignored.
    """
    if variant not in MEANFIELD_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    theta, nu = float(init[0]), float(init[1])
    if variant == PMGA:
        theta = nu
    path = [MeanFieldState(theta, nu)]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(k):
            if variant == PGA:
                theta, nu = theta + h * d_x * (nu - theta), nu + h * (y_bar + theta - 2 * nu)
            elif variant == PQN:
                theta, nu = theta + h * (nu - theta), nu + h * (y_bar + theta - 2 * nu)
            else:
                nu = nu + h * (y_bar - nu)
                theta = nu
            path.append(MeanFieldState(theta, nu))
    return path


def iteration_matrix(variant: str, d_x: int, h: float) -> Array:
    """A_h with (θ, ν)_{k+1} − fixed point = A_h · ((θ, ν)_k − fixed point)."""
    if variant == PGA:
        return np.array([[1 - h * d_x, h * d_x], [h, 1 - 2 * h]])
    if variant == PQN:
        return np.array([[1 - h, h], [h, 1 - 2 * h]])
    if variant == PMGA:
        return np.array([[1 - h]])
    raise ValueError(f"unknown variant {variant!r}")


def numeric_spectral_radius(matrix: Any) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(matrix, dtype=np.float64)))))


def rho_pga(d_x: int, h: float) -> float:
    root = np.sqrt(d_x**2 + 4) / 2
    return float(max(abs(1 - h * (1 + d_x / 2 + root)), abs(1 - h * (1 + d_x / 2 - root))))


def rho_pqn(h: float) -> float:
    root = np.sqrt(5) / 2
    return float(max(abs(1 - h * (1.5 + root)), abs(1 - h * (1.5 - root))))


def rho_pmga(h: float) -> float:
    return abs(1 - h)


class SpectralReport:
    """Contraction factors of the three mean-field recursions at one (D_x, h)."""

    __slots__ = [
        "d_x", "h", "rho_g", "rho_n", "rho_m",
        "h_opt_g", "h_opt_n", "h_opt_m",
        "rho_at_opt_g", "rho_at_opt_n", "rho_at_opt_m",
    ]

    def __init__(self, d_x: int, h: float) -> None:
        self.d_x = d_x
        self.h = h
        self.rho_g = rho_pga(d_x, h)
        self.rho_n = rho_pqn(h)
        self.rho_m = rho_pmga(h)
        self.h_opt_g = 2 / (2 + d_x)
        self.h_opt_n = 2 / 3
        self.h_opt_m = 1.0
        self.rho_at_opt_g = float(np.sqrt(d_x**2 + 4) / (d_x + 2))
        self.rho_at_opt_n = float(np.sqrt(5) / 3)
        self.rho_at_opt_m = 0.0

    def to_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.__slots__}

    def __repr__(self) -> str:
        return (
            f"SpectralReport(d_x={self.d_x}, h={self.h}, rho_g={self.rho_g:.6g}, "
            f"rho_n={self.rho_n:.6g}, rho_m={self.rho_m:.6g})"
        )


def spectral_report(d_x: int, h: float, tol: float = 1e-12) -> SpectralReport:
    """Closed-form radii, cross-checked against the eigenvalues of each A_h."""
    if d_x < 1:
        raise ValueError(f"d_x must be ≥ 1, got {d_x}")
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    report = SpectralReport(d_x, h)
    for variant, closed in ((PGA, report.rho_g), (PQN, report.rho_n), (PMGA, report.rho_m)):
        numeric = numeric_spectral_radius(iteration_matrix(variant, d_x, h))
        if abs(numeric - closed) > tol * max(1.0, abs(closed)):
            raise OracleError(
                f"{variant} radius mismatch at d_x={d_x}, h={h}: closed {closed!r}, numeric {numeric!r}"
            )
    return report


# --- toy-model stationary laws ---


def finite_n_stationary_toy(d_x: int, n: int, y: Any) -> tuple[Array, Array, float]:
    """Marginal mean ½(y + ȳ1), covariance ½(I + 11ᵀ/(N·D_x)) and E[θ*] = ȳ."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (d_x,):
        raise DimensionError(f"y has shape {y.shape}, expected ({d_x},)")
    y_bar = float(np.mean(y))
    mean = 0.5 * (y + y_bar)
    cov = 0.5 * (np.eye(d_x) + np.ones((d_x, d_x)) / (n * d_x))
    return mean, cov, y_bar


def ula_stationary_variance_toy(h: float) -> float:
    """Per-coordinate variance of ULA on the toy posterior with θ frozen: 1/(2(1 − h))."""
    if h >= 1:
        return np.inf
    return 1.0 / (2.0 * (1.0 - h))


def pmga_stationary_variance_toy(d_x: int, n: int, h: float) -> float:
    """Per-coordinate stationary variance of unadjusted PMGA on the toy model.

    The grand mean contracts at rate 1 − h and every direction orthogonal to
    it at rate 1 − 2h; as h → 0 this tends to the finite-N law's ½(1 + 1/(N·D_x)).
    """
    if h >= 1:
        return np.inf
    nd = n * d_x
    return 2.0 / (nd * (2.0 - h)) + (1.0 - 1.0 / nd) / (2.0 * (1.0 - h))


# --- finite differences ---


class FiniteDifferenceReport:
    """Worst relative errors |analytic − numeric| / max(1, |numeric|) per capability."""

    __slots__ = ["grad_theta", "grad_x", "neg_hess_theta", "tol", "points"]

    def __init__(
        self,
        grad_theta: float,
        grad_x: float,
        neg_hess_theta: Optional[float],
        tol: float,
        points: int,
    ) -> None:
        self.grad_theta = grad_theta
        self.grad_x = grad_x
        self.neg_hess_theta = neg_hess_theta
        self.tol = tol
        self.points = points

    def errors(self) -> dict[str, float]:
        errors = {"grad_theta": self.grad_theta, "grad_x": self.grad_x}
        if self.neg_hess_theta is not None:
            errors["neg_hess_theta"] = self.neg_hess_theta
        return errors

    @property
    def worst(self) -> float:
        return max(self.errors().values())

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def __repr__(self) -> str:
        body = ", ".join(f"{k}={v:.3g}" for k, v in self.errors().items())
        return f"FiniteDifferenceReport({body}, tol={self.tol:g})"


def _relative_error(analytic: Array, numeric: Array) -> float:
    analytic = np.atleast_1d(analytic)
    numeric = np.atleast_1d(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _central_difference(func: Callable[[Array], Any], at: Array, index: int, step: float) -> Any:
    eps = step * (1.0 + abs(at[index]))
    plus, minus = at.copy(), at.copy()
    plus[index] += eps
    minus[index] -= eps
    return (np.asarray(func(plus)) - np.asarray(func(minus))) / (2 * eps)


def finite_difference_check(
    model: ModelSpec,
    point_count: int = 20,
    tol: float = FD_TOLERANCE,
    seed: int = 0,
    step: float = FD_STEP,
    max_coordinates: Optional[int] = 50,
    theta_scale: float = 0.5,
    x_scale: float = 1.0,
) -> FiniteDifferenceReport:
    """Compare analytic derivatives with central differences at random points.

    Large latent spaces are spot-checked on ``max_coordinates`` random
    coordinates per point. Reports rather than raises.
    """
    rng = np.random.default_rng(seed)
    worst_theta = worst_x = 0.0
    worst_hess: Optional[float] = 0.0 if model.has("neg_hess_theta") else None

    for _ in range(point_count):
        theta = theta_scale * rng.standard_normal(model.d_theta)
        x = x_scale * rng.standard_normal(model.d_x)

        analytic = model.grad_theta(theta, x)
        numeric = np.array([
            _central_difference(lambda t: model.log_joint(t, x), theta, i, step)
            for i in range(model.d_theta)
        ])
        worst_theta = max(worst_theta, _relative_error(analytic, numeric))

        coords: Sequence[int] = range(model.d_x)
        if max_coordinates is not None and model.d_x > max_coordinates:
            coords = rng.choice(model.d_x, size=max_coordinates, replace=False)
        analytic = model.grad_x(theta, x)[np.asarray(coords)]
        numeric = np.array([
            _central_difference(lambda z: model.log_joint(theta, z), x, i, step) for i in coords
        ])
        worst_x = max(worst_x, _relative_error(analytic, numeric))

        if worst_hess is not None:
            hess = model.neg_hess_theta(theta, x)
            numeric = -np.column_stack([
                _central_difference(lambda t: model.grad_theta(t, x), theta, i, step)
                for i in range(model.d_theta)
            ])
            asymmetry = float(np.max(np.abs(hess - hess.T)))
            worst_hess = max(worst_hess, _relative_error(hess.ravel(), numeric.ravel()), asymmetry)

    report = FiniteDifferenceReport(worst_theta, worst_x, worst_hess, tol, point_count)
    logger.info("%s: %r", type(model).__name__, report)
    return report


def m_step_residual(model: ModelSpec, points: Any) -> float:
    """‖(1/N)Σ_n ∇_θ ℓ(θ*, x^n)‖ / (1 + ‖θ*‖) at θ* = exact_m_step(points)."""
    points = model.check_points(points)
    theta = model.exact_m_step(points)
    grad = np.mean(model.grad_theta_cloud(theta, points), axis=0)
    return float(np.linalg.norm(grad) / (1.0 + np.linalg.norm(theta)))


# --- quadrature ---


def quadrature_density_1d(
    log_density: Callable[[float], float], grid: Any, tol: float = 1e-8
) -> Array:
    """Normalize exp(log_density) on ``grid`` by the trapezoid rule.

    Raises ``OracleError`` when trapezoid and Simpson normalizers disagree by
    more than ``tol``, meaning the grid is too coarse or too narrow.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 3:
        raise OracleError("quadrature grid needs at least three points")
    logs = np.array([log_density(float(x)) for x in grid])
    if not np.all(np.isfinite(logs)):
        raise OracleError("log density is not finite on the grid")
    values = np.exp(logs - np.max(logs))
    total = trapezoid(values, x=grid)
    check = simpson(values, x=grid)
    if abs(total - check) > tol * abs(check):
        raise OracleError(f"grid too coarse: trapezoid {total!r} vs Simpson {check!r}")
    return values / total


def quadrature_posterior_1d(
    model: ModelSpec,
    theta: Any,
    grid: Optional[Any] = None,
    points: int = QUADRATURE_POINTS,
    width: float = QUADRATURE_WIDTH,
) -> tuple[Array, Array]:
    """p_θ(x | y) on a grid for a model with a one-dimensional latent space.

    Without an explicit grid, ``points`` nodes span the mode ± ``width``
    Laplace standard deviations.
    """
    if model.d_x != 1:
        raise DimensionError("quadrature oracle needs a one-dimensional latent space")
    theta = model.check_theta(theta)

    def log_density(x: float) -> float:
        return model.log_joint(theta, np.array([x]))

    if grid is None:
        mode = float(minimize_scalar(lambda x: -log_density(x)).x)
        eps = 1e-4 * (1.0 + abs(mode))
        curvature = -(
            model.grad_x(theta, np.array([mode + eps]))[0]
            - model.grad_x(theta, np.array([mode - eps]))[0]
        ) / (2 * eps)
        if not curvature > 0:
            raise OracleError(f"density is not peaked at its mode {mode!r}")
        sd = 1.0 / np.sqrt(curvature)
        grid = np.linspace(mode - width * sd, mode + width * sd, points)
    grid = np.asarray(grid, dtype=np.float64)
    return grid, quadrature_density_1d(log_density, grid)


def trapezoid_weights(grid: Any) -> Array:
    """Weights w with Σ w_i f(x_i) equal to the trapezoid rule on ``grid``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 1:
        return np.ones(1)
    spacing = np.diff(grid)
    weights = np.zeros_like(grid)
    weights[:-1] += spacing / 2
    weights[1:] += spacing / 2
    return weights


def grid_masses(log_density: Callable[[float], float], grid: Any) -> Array:
    """Probability masses of a density discretized onto ``grid`` with trapezoid weights."""
    grid = np.asarray(grid, dtype=np.float64)
    logs = np.array([log_density(float(x)) for x in grid])
    masses = np.exp(logs - np.max(logs)) * trapezoid_weights(grid)
    return masses / np.sum(masses)
