"""Config-driven experiments: TOML loading, replicate runs, emitted files, verify suites.

Config schema (TOML)::

    [model]                 # name = "toy" | "logistic" | "bnn", plus model keys below
    [experiment]            # replicates, output_dir, workers, progress
    [emit]                  # theta_trace, cloud_samples, metrics, meanfield, spectral,
                            # spectral_hmin, spectral_hmax, spectral_steps
    [[run]]                 # label plus any RunConfig field; [run] for a single run

Unknown keys in any section are rejected. A ``warm_start`` of ``"@label"``
refers to the final state written by an earlier run of the same config.
"""

from __future__ import annotations

import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from particle_em import data, metrics, oracles, outputs, samplers
from particle_em.errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    InsufficientSamplesError,
    SingularHessianError,
    UnsupportedOperationError,
)
from particle_em.models import BnnModel, LogisticRegressionModel, ToyHierarchical
from particle_em.rng import StepRng
from particle_em.types import (
    INIT_WARM_START,
    MH_MARGINAL,
    PGA,
    PMGA,
    PQN,
    ModelSpec,
    RunConfig,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
EXIT_VERIFY = 4

TOP_KEYS = {"model", "run", "experiment", "emit"}
MODEL_KEYS = {
    "toy": {"name", "d_x", "theta_true", "data_seed", "y"},
    "logistic": {
        "name", "dataset", "path", "split_seed", "rows", "features", "data_seed",
        "prior_variance", "synthetic_fallback",
    },
    "bnn": {
        "name", "dataset", "images", "labels", "classes", "count", "hidden", "features",
        "data_seed", "split_seed", "synthetic_fallback",
    },
}
RUN_KEYS = set(RunConfig.__slots__) | {"label"}
EXPERIMENT_KEYS = {"replicates", "output_dir", "workers", "progress"}
EMIT_KEYS = {
    "theta_trace", "cloud_samples", "metrics", "meanfield", "spectral",
    "spectral_hmin", "spectral_hmax", "spectral_steps",
}

# Posterior variance vectors are stored in full up to this many coordinates.
VARIANCE_VECTOR_LIMIT = 100


@dataclass
class EmitFlags:
    theta_trace: bool = True
    cloud_samples: bool = False
    metrics: bool = True
    meanfield: bool = False
    spectral: bool = False
    spectral_hmin: float = 0.001
    spectral_hmax: float = 1.5
    spectral_steps: int = 150


@dataclass
class ExperimentConfig:
    model: dict[str, Any]
    runs: list[tuple[str, RunConfig]]
    replicates: int = 1
    output_dir: Path = Path("results")
    workers: int = 1
    progress: bool = False
    emit: EmitFlags = field(default_factory=EmitFlags)
    base_dir: Path = Path(".")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "runs": [{"label": label, **run.to_dict()} for label, run in self.runs],
            "experiment": {
                "replicates": self.replicates,
                "output_dir": str(self.output_dir),
                "workers": self.workers,
                "progress": self.progress,
            },
            "emit": asdict(self.emit),
        }


def _check_keys(section: dict[str, Any], allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", f"{where}.{unknown[0]}" if where else unknown[0])


def _table(raw: dict[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError("must be a table", name)
    return value


def parse_config(raw: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a parsed TOML document into an ``ExperimentConfig``."""
    _check_keys(raw, TOP_KEYS, "")

    model = dict(_table(raw, "model"))
    name = model.get("name")
    if name not in MODEL_KEYS:
        raise ConfigError(f"must be one of {sorted(MODEL_KEYS)}, got {name!r}", "model.name")
    _check_keys(model, MODEL_KEYS[name], "model")

    experiment = _table(raw, "experiment")
    _check_keys(experiment, EXPERIMENT_KEYS, "experiment")
    replicates = experiment.get("replicates", 1)
    if not isinstance(replicates, int) or replicates < 1:
        raise ConfigError(f"must be an integer ≥ 1, got {replicates!r}", "experiment.replicates")
    workers = experiment.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"must be an integer ≥ 1, got {workers!r}", "experiment.workers")

    emit_raw = _table(raw, "emit")
    _check_keys(emit_raw, EMIT_KEYS, "emit")
    emit = EmitFlags(**emit_raw)
    if (emit.meanfield or emit.spectral) and name != "toy":
        raise ConfigError("mean-field and spectral outputs need the toy model", "emit")
    if emit.spectral and not (0 < emit.spectral_hmin <= emit.spectral_hmax and emit.spectral_steps >= 1):
        raise ConfigError("need 0 < spectral_hmin ≤ spectral_hmax and spectral_steps ≥ 1", "emit")

    entries = raw.get("run", [])
    if isinstance(entries, dict):
        entries = [entries]
    if not entries:
        raise ConfigError("at least one run is required", "run")
    runs: list[tuple[str, RunConfig]] = []
    for i, entry in enumerate(entries):
        _check_keys(entry, RUN_KEYS, f"run[{i}]")
        values = dict(entry)
        label = str(values.pop("label", values.get("algorithm", "run")))
        if any(label == existing for existing, _ in runs):
            raise ConfigError(f"duplicate label {label!r}", f"run[{i}].label")
        try:
            config = RunConfig(**values).validate()
        except ConfigError as e:
            raise ConfigError(str(e), f"run[{i}]") from None
        runs.append((label, config))

    return ExperimentConfig(
        model=model,
        runs=runs,
        replicates=replicates,
        output_dir=Path(experiment.get("output_dir", "results")),
        workers=workers,
        progress=bool(experiment.get("progress", False)),
        emit=emit,
        base_dir=base_dir,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw, path.parent)


# --- models ---


def _dataset_or_fallback(spec: dict[str, Any], paths: list[str], load, m: int, d: int):
    """Load the configured files, or synthetic data when they are absent and allowed."""
    missing = [p for p in paths if not data.resolve(p).is_file()]
    if missing and spec.get("synthetic_fallback", False):
        logger.warning("%s not found; using synthetic data", missing[0])
        return data.synthetic_dataset(
            m=m, d=d, seed=spec.get("data_seed", 0), split_seed=spec.get("split_seed", 0)
        )
    return load()


def build_model(spec: dict[str, Any]) -> tuple[ModelSpec, Optional[data.Dataset]]:
    """Construct the configured model and, for classifiers, its dataset."""
    name = spec["name"]
    if name == "toy":
        if "y" in spec:
            return ToyHierarchical(spec["y"]), None
        toy = ToyHierarchical.simulate(
            spec.get("d_x", 100), spec.get("theta_true", 1.0), spec.get("data_seed", 0)
        )
        return toy, None

    source = spec.get("dataset", "synthetic")
    split_seed = spec.get("split_seed", 0)
    if name == "logistic":
        if source == "wbc":
            path = spec.get("path", data.WBC_FILE)
            dataset = _dataset_or_fallback(
                spec, [path], lambda: data.load_wbc(path, split_seed), data.WBC_ROWS, data.WBC_FEATURES
            )
        elif source == "synthetic":
            dataset = data.synthetic_dataset(
                m=spec.get("rows", data.WBC_ROWS),
                d=spec.get("features", data.WBC_FEATURES),
                seed=spec.get("data_seed", 0),
                split_seed=split_seed,
            )
        else:
            raise ConfigError(f"unknown dataset {source!r}", "model.dataset")
        return LogisticRegressionModel.from_dataset(dataset, spec.get("prior_variance", 5.0)), dataset

    count = spec.get("count", 1000)
    if source == "mnist":
        images = spec.get("images", data.MNIST_IMAGES_FILE)
        labels = spec.get("labels", data.MNIST_LABELS_FILE)
        dataset = _dataset_or_fallback(
            spec,
            [images, labels],
            lambda: data.load_mnist_subset(
                images, labels, tuple(spec.get("classes", (4, 9))), count,
                spec.get("data_seed", 0), split_seed,
            ),
            count,
            spec.get("features", 784),
        )
    elif source == "synthetic":
        dataset = data.synthetic_dataset(
            m=count, d=spec.get("features", 20), seed=spec.get("data_seed", 0), split_seed=split_seed
        )
    else:
        raise ConfigError(f"unknown dataset {source!r}", "model.dataset")
    return BnnModel.from_dataset(dataset, hidden=spec.get("hidden", 40)), dataset


# --- runs ---


def replicate_dir(output_dir: Path, label: str, replicate: int, replicates: int) -> Path:
    return output_dir / (label if replicates == 1 else f"{label}_r{replicate}")


def run_replicate(
    model: ModelSpec,
    dataset: Optional[data.Dataset],
    config: RunConfig,
    out_dir: Path,
    emit: EmitFlags,
    replicate: int = 0,
    progress: bool = False,
) -> dict[str, Any]:
    """Run one replicate, write its files and return its metrics."""
    trace = samplers.run(model, config, progress=progress)
    if emit.theta_trace:
        outputs.write_theta_trace(out_dir / "theta_trace.csv", trace)
    cloud = trace.final_cloud
    if cloud is not None:
        outputs.write_state(out_dir / "state_final.npz", trace.theta_path[-1], cloud)
        if emit.cloud_samples:
            outputs.write_cloud(out_dir / "cloud_final.csv", cloud)

    result: dict[str, Any] = {
        "replicate": replicate,
        "seed": config.seed,
        "theta_final": trace.theta_path[-1],
        "theta_bar": trace.theta_bar_final,
        "wall_time": trace.wall_time,
    }
    if trace.acceptance_rate is not None:
        result["acceptance_rate"] = trace.acceptance_rate
    if config.n_steps - config.burn_in >= 2:
        result["theta_variance"] = metrics.stationary_theta_variance(trace)
    retained = trace.retained_clouds()
    if retained and sum(c.n for c in retained) >= 2:
        variance = metrics.posterior_variance_estimate(retained)
        result["posterior_variance_mean"] = float(np.mean(variance))
        if model.d_x <= VARIANCE_VECTOR_LIMIT:
            result["posterior_variance"] = variance
    if dataset is not None and retained:
        classifier = metrics.Classifier.from_trace(model, trace)
        test_set = dataset.test()
        result["test_error"] = metrics.test_error(classifier, test_set)
        result["lppd"] = metrics.lppd(classifier, test_set)
    return result


def aggregate(results: list[dict[str, Any]]) -> dict[str, Any]:
    """Mean and standard deviation of every numeric metric across replicates."""
    summary: dict[str, Any] = {}
    keys = [k for k in results[0] if k not in ("replicate", "seed")]
    for key in keys:
        values = [np.asarray(r[key], dtype=np.float64) for r in results if key in r]
        if len(values) != len(results):
            continue
        stacked = np.stack(values)
        summary[key] = {
            "mean": stacked.mean(axis=0),
            "std": stacked.std(axis=0, ddof=1) if len(values) > 1 else np.zeros_like(stacked[0]),
        }
    return summary


def _resolve_warm_start(config: ExperimentConfig, run: RunConfig, replicate: int) -> RunConfig:
    if run.init != INIT_WARM_START or not run.warm_start:
        return run
    ref = str(run.warm_start)
    if ref.startswith("@"):
        path = replicate_dir(config.output_dir, ref[1:], replicate, config.replicates) / "state_final.npz"
    else:
        path = Path(ref) if Path(ref).is_absolute() else config.base_dir / ref
    return run.replace(warm_start=str(path))


def emit_meanfield(
    config: ExperimentConfig, model: ToyHierarchical, runs: list[tuple[str, RunConfig]]
) -> None:
    """Deterministic mean-field trajectory from each run's initial state."""
    for label, run in runs:
        if run.algorithm not in (PGA, PQN, PMGA):
            continue
        run = _resolve_warm_start(config, run, 0)
        state, cloud = samplers.initial_state(model, run, StepRng(run.seed))
        init = (float(state.theta[0]), float(np.mean(cloud.points)))
        path = oracles.meanfield_recursion(
            run.algorithm, model.d_x, run.h, model.theta_star, init, run.n_steps
        )
        outputs.write_meanfield(config.output_dir / label / "meanfield.csv", {run.algorithm: path})


def emit_spectral(d_x: int, h_grid: Any, path=None) -> list[oracles.SpectralReport]:
    """Spectral report per step size; written as CSV when ``path`` is given."""
    reports = [oracles.spectral_report(d_x, float(h)) for h in np.atleast_1d(h_grid)]
    if path is not None:
        outputs.write_spectral(path, reports)
    return reports


def execute(config: ExperimentConfig, seed: Optional[int] = None, workers: Optional[int] = None) -> None:
    """Run every configured run and replicate, writing all outputs."""
    model, dataset = build_model(config.model)
    workers = config.workers if workers is None else workers
    runs = [(label, run if seed is None else run.replace(seed=seed)) for label, run in config.runs]
    for _, run in runs:
        run.validate_for(model)
    config.output_dir.mkdir(parents=True, exist_ok=True)

    manifest: dict[str, Any] = {"config": config.to_dict(), "runs": {}}
    for label, run in runs:
        jobs = []
        for i in range(config.replicates):
            replicate = _resolve_warm_start(config, run.replace(seed=run.seed + i), i)
            out_dir = replicate_dir(config.output_dir, label, i, config.replicates)
            jobs.append((model, dataset, replicate, out_dir, config.emit, i, config.progress))
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_replicate, *zip(*jobs)))
        else:
            results = [run_replicate(*job) for job in jobs]
        manifest["runs"][label] = {
            "config": run.to_dict(),
            "seeds": [r["seed"] for r in results],
        }
        if config.emit.metrics:
            outputs.write_json(
                config.output_dir / label / "metrics.json",
                {"label": label, "replicates": results, "summary": aggregate(results)},
            )
        logger.info("%s: %d replicate(s) written under %s", label, len(results), config.output_dir)

    if config.emit.meanfield:
        emit_meanfield(config, model, runs)
    if config.emit.spectral:
        grid = np.linspace(config.emit.spectral_hmin, config.emit.spectral_hmax, config.emit.spectral_steps)
        emit_spectral(model.d_x, grid, config.output_dir / "spectral.csv")
    outputs.write_json(config.output_dir / "manifest.json", manifest)


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (ConfigError, UnsupportedOperationError)):
        return EXIT_CONFIG
    if isinstance(error, DataFormatError):
        return EXIT_DATA
    if isinstance(error, (DivergenceError, SingularHessianError)):
        return EXIT_DIVERGENCE
    raise error


def run_experiment(config_path, seed: Optional[int] = None, workers: Optional[int] = None) -> int:
    """Load, run and write one experiment; returns the process exit code."""
    try:
        config = load_config(config_path)
        execute(config, seed=seed, workers=workers)
    except (ConfigError, UnsupportedOperationError, DataFormatError, DivergenceError, SingularHessianError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return exit_code_for(e)
    return EXIT_OK


# --- verify suites ---


class Check:
    """One verified quantity: passes when ``value`` ≤ ``limit``."""

    __slots__ = ["name", "value", "limit"]

    def __init__(self, name: str, value: float, limit: float) -> None:
        self.name = name
        self.value = float(value)
        self.limit = float(limit)

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.limit)

    @property
    def margin(self) -> float:
        return self.limit - self.value

    def __repr__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4} {self.name}: {self.value:.3g} (limit {self.limit:.3g})"


def verify_gradients(seed: int = 0) -> list[Check]:
    """Finite-difference and M-step stationarity checks for all three models."""
    rng = np.random.default_rng(seed)
    toy = ToyHierarchical.simulate(5, seed=seed)
    small = data.synthetic_dataset(m=60, d=9, seed=seed)
    logistic = LogisticRegressionModel.from_dataset(small)
    bnn = BnnModel.from_dataset(data.synthetic_dataset(m=40, d=10, seed=seed), hidden=8)
    checks = []
    for name, model, tol in (("toy", toy, 1e-8), ("logistic", logistic, 1e-5), ("bnn", bnn, 1e-4)):
        report = oracles.finite_difference_check(model, point_count=20, tol=tol, seed=seed)
        for capability, error in report.errors().items():
            checks.append(Check(f"{name} {capability}", error, tol))
        cloud = rng.standard_normal((7, model.d_x))
        checks.append(Check(f"{name} m-step residual", oracles.m_step_residual(model, cloud), 1e-8))
    return checks


def verify_oracles() -> list[Check]:
    """Closed-form spectral radii against eigenvalues, orderings and one-step PMGA."""
    worst = 0.0
    order_violation = 0.0
    for d_x in (1, 4, 100):
        for h in np.linspace(0.001, 1.5, 300):
            report = oracles.spectral_report(d_x, h, tol=np.inf)
            for variant, closed in ((PGA, report.rho_g), (PQN, report.rho_n), (PMGA, report.rho_m)):
                numeric = oracles.numeric_spectral_radius(oracles.iteration_matrix(variant, d_x, h))
                worst = max(worst, abs(numeric - closed) / max(1.0, abs(closed)))
            order_violation = max(order_violation, report.rho_m - report.rho_g, report.rho_m - report.rho_n)
    at_opt = 0.0
    for d_x in (4, 10, 100):
        r = oracles.SpectralReport(d_x, 1.0)
        at_opt = max(at_opt, r.rho_at_opt_n - r.rho_at_opt_g, r.rho_at_opt_m - r.rho_at_opt_n)
    one_step = oracles.meanfield_recursion(PMGA, 100, 1.0, 2.5, (0.0, -3.0), k=1)[1].nu
    return [
        Check("spectral closed form vs eigenvalues", worst, 1e-12),
        Check("rho_m lower bound violation", order_violation, 1e-12),
        Check("optimal-step ordering violation", at_opt, 1e-12),
        Check("PMGA one-step error at h=1", abs(one_step - 2.5), 1e-15),
    ]


def _standard_errors_off(name: str, series: np.ndarray, target: float, sigmas: float) -> Check:
    se = metrics.batch_means_standard_error(series)
    return Check(f"{name} (target {target:.5g}), standard errors off", abs(series.mean() - target) / se, sigmas)


def mh_stationarity_checks(
    d_x: int, n: int, h: float, steps: int, seed: int = 0, sigmas: float = 3.0
) -> list[Check]:
    """Marginal MH on a toy model against the finite-N stationary mean and covariance.

    One check per coordinate mean, one for the average diagonal variance and, when
    d_x > 1, one for the average off-diagonal covariance.
    """
    toy = ToyHierarchical.simulate(d_x, seed=seed)
    mean, cov, _ = oracles.finite_n_stationary_toy(d_x, n, toy.y)
    config = RunConfig(MH_MARGINAL, h=h, n_particles=n, n_steps=steps, seed=seed, snapshot_every=1)
    trace = samplers.run(toy, config)
    keep = steps // 10
    points = np.stack([cloud.points for _, cloud in trace.clouds[keep:]])
    deviations = points - mean
    tag = f"MH d_x={d_x} N={n}"
    checks = [
        _standard_errors_off(f"{tag} mean x_{i}", points[:, :, i].mean(axis=1), float(mean[i]), sigmas)
        for i in range(d_x)
    ]
    checks.append(
        _standard_errors_off(
            f"{tag} variance", np.mean(deviations**2, axis=(1, 2)), float(np.mean(np.diag(cov))), sigmas
        )
    )
    if d_x > 1:
        rows, cols = np.triu_indices(d_x, k=1)
        products = np.einsum("sni,snj->sij", deviations, deviations) / n
        checks.append(
            _standard_errors_off(
                f"{tag} covariance", products[:, rows, cols].mean(axis=1), float(cov[rows[0], cols[0]]), sigmas
            )
        )
    return checks


def verify_stationarity(seed: int = 0, sigmas: float = 3.0) -> list[Check]:
    return [
        *mh_stationarity_checks(1, 1, 0.1, 20000, seed, sigmas),
        *mh_stationarity_checks(1, 16, 0.05, 20000, seed, sigmas),
        *mh_stationarity_checks(3, 4, 0.05, 20000, seed, sigmas),
    ]


SUITES = {
    "gradients": verify_gradients,
    "oracles": verify_oracles,
    "stationarity": verify_stationarity,
}


def verify(suite: str) -> list[Check]:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}", "suite")
    try:
        return SUITES[suite]()
    except InsufficientSamplesError as e:
        return [Check(f"{suite}: {e}", np.inf, 0.0)]
