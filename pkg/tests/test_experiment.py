"""Tests for particle_em.experiment: config parsing, execution, outputs, exit codes, verify suites."""

import json
from pathlib import Path

import numpy as np
import pytest

from particle_em import data, experiment, metrics
from particle_em.errors import ConfigError, DataFormatError, DivergenceError
from particle_em.experiment import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIVERGENCE,
    EXIT_OK,
    Check,
    build_model,
    execute,
    load_config,
    parse_config,
    run_experiment,
)
from particle_em.models import BnnModel, LogisticRegressionModel, ToyHierarchical
from particle_em.samplers import run
from particle_em.types import PGA, PMGA, PQN, SOUL, RunConfig

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
WBC_AVAILABLE = data.resolve(data.WBC_FILE).is_file()
MNIST_AVAILABLE = all(
    data.resolve(name).is_file() for name in (data.MNIST_IMAGES_FILE, data.MNIST_LABELS_FILE)
)

TOY_CONFIG = """
[model]
name = "toy"
d_x = 4
data_seed = 3

[experiment]
replicates = {replicates}
output_dir = "{output_dir}"

[emit]
meanfield = true
spectral = true
spectral_steps = 5
cloud_samples = true

[[run]]
label = "pga"
algorithm = "PGA"
h = 0.05
n_particles = 5
n_steps = 30
burn_in = 10
snapshot_every = 10

[[run]]
label = "pqn"
algorithm = "PQN"
h = 0.3
n_particles = 5
n_steps = 30
burn_in = 10
"""


def _toy_config(tmp_path, replicates=1):
    path = tmp_path / "toy.toml"
    output_dir = tmp_path / "results"
    path.write_text(TOY_CONFIG.format(replicates=replicates, output_dir=output_dir.as_posix()))
    return path, output_dir


def _minimal(**run):
    entry = {"algorithm": PGA, "n_steps": 5}
    entry.update(run)
    return {"model": {"name": "toy", "d_x": 2}, "run": [entry]}


class TestParseConfig:
    def test_minimal(self):
        config = parse_config(_minimal())
        assert config.replicates == 1
        assert config.runs[0][0] == PGA
        assert config.runs[0][1].n_steps == 5

    def test_single_run_table(self):
        raw = _minimal()
        raw["run"] = raw["run"][0]
        assert len(parse_config(raw).runs) == 1

    def test_unknown_run_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(_minimal(step_size=0.1))
        assert info.value.field == "run[0].step_size"

    def test_unknown_top_key(self):
        raw = _minimal()
        raw["extra"] = {}
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_unknown_model(self):
        raw = _minimal()
        raw["model"] = {"name": "gmm"}
        with pytest.raises(ConfigError) as info:
            parse_config(raw)
        assert info.value.field == "model.name"

    def test_model_key_checked_per_model(self):
        raw = _minimal()
        raw["model"]["hidden"] = 10
        with pytest.raises(ConfigError) as info:
            parse_config(raw)
        assert info.value.field == "model.hidden"

    def test_invalid_run_value(self):
        with pytest.raises(ConfigError, match="h"):
            parse_config(_minimal(h=-1.0))

    def test_duplicate_labels(self):
        raw = _minimal()
        raw["run"] = [{"label": "a", "n_steps": 5}, {"label": "a", "n_steps": 5}]
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(raw)

    def test_no_runs(self):
        with pytest.raises(ConfigError):
            parse_config({"model": {"name": "toy"}})

    def test_meanfield_needs_toy(self):
        raw = {"model": {"name": "logistic"}, "run": [{"n_steps": 5}], "emit": {"meanfield": True}}
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_load_config(self, tmp_path):
        path, output_dir = _toy_config(tmp_path)
        config = load_config(path)
        assert config.output_dir == output_dir
        assert [label for label, _ in config.runs] == ["pga", "pqn"]
        assert config.emit.spectral_steps == 5
        assert config.base_dir == tmp_path

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model\nname = ")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")


class TestBuildModel:
    def test_toy(self):
        model, dataset = build_model({"name": "toy", "d_x": 3, "data_seed": 1})
        assert isinstance(model, ToyHierarchical)
        assert model.d_x == 3
        assert dataset is None

    def test_toy_explicit_observations(self):
        model, _ = build_model({"name": "toy", "y": [1.0, 2.0]})
        assert model.theta_star == pytest.approx(1.5)

    def test_logistic_synthetic(self):
        model, dataset = build_model({"name": "logistic", "rows": 50, "features": 4})
        assert isinstance(model, LogisticRegressionModel)
        assert model.d_x == 4
        assert dataset.m == 50

    def test_bnn_synthetic(self):
        model, _ = build_model({"name": "bnn", "count": 40, "features": 6, "hidden": 3})
        assert isinstance(model, BnnModel)
        assert model.d_x == 3 * 6 + 2 * 3

    def test_missing_data_without_fallback(self, tmp_path):
        with pytest.raises(DataFormatError):
            build_model({"name": "logistic", "dataset": "wbc", "path": str(tmp_path / "absent.data")})

    def test_synthetic_fallback(self, tmp_path):
        spec = {
            "name": "logistic",
            "dataset": "wbc",
            "path": str(tmp_path / "absent.data"),
            "synthetic_fallback": True,
        }
        model, dataset = build_model(spec)
        assert dataset.m == 683
        assert model.d_x == 9

    def test_unknown_dataset(self):
        with pytest.raises(ConfigError):
            build_model({"name": "logistic", "dataset": "iris"})


class TestExecute:
    def test_toy_outputs(self, tmp_path):
        path, output_dir = _toy_config(tmp_path)
        execute(load_config(path))
        for label in ("pga", "pqn"):
            assert (output_dir / label / "theta_trace.csv").is_file()
            assert (output_dir / label / "state_final.npz").is_file()
            assert (output_dir / label / "cloud_final.csv").is_file()
            assert (output_dir / label / "meanfield.csv").is_file()
        assert (output_dir / "spectral.csv").is_file()
        manifest = json.loads((output_dir / "manifest.json").read_text())
        assert set(manifest["runs"]) == {"pga", "pqn"}
        metrics = json.loads((output_dir / "pga" / "metrics.json").read_text())
        assert metrics["label"] == "pga"
        assert len(metrics["replicates"]) == 1
        assert "theta_bar" in metrics["summary"]
        assert "posterior_variance" in metrics["replicates"][0]

    def test_replicates_use_consecutive_seeds(self, tmp_path):
        path, output_dir = _toy_config(tmp_path, replicates=2)
        execute(load_config(path), seed=10)
        assert (output_dir / "pga_r0" / "theta_trace.csv").is_file()
        assert (output_dir / "pga_r1" / "theta_trace.csv").is_file()
        metrics = json.loads((output_dir / "pga" / "metrics.json").read_text())
        assert [r["seed"] for r in metrics["replicates"]] == [10, 11]
        assert len(metrics["summary"]["theta_bar"]["std"]) == 1

    def test_logistic_metrics(self, tmp_path):
        raw = {
            "model": {"name": "logistic", "rows": 60, "features": 3},
            "experiment": {"output_dir": str(tmp_path / "out")},
            "run": [{"label": "pga", "h": 0.01, "n_particles": 5, "n_steps": 20, "burn_in": 5}],
        }
        execute(parse_config(raw))
        metrics = json.loads((tmp_path / "out" / "pga" / "metrics.json").read_text())
        result = metrics["replicates"][0]
        assert 0.0 <= result["test_error"] <= 1.0
        assert result["lppd"] <= 0.0

    def test_warm_start_from_earlier_run(self, tmp_path):
        raw = {
            "model": {"name": "toy", "d_x": 3},
            "experiment": {"output_dir": str(tmp_path / "out")},
            "run": [
                {"label": "first", "algorithm": PQN, "h": 0.5, "n_particles": 4, "n_steps": 40},
                {
                    "label": "second",
                    "algorithm": PQN,
                    "h": 0.5,
                    "n_particles": 4,
                    "n_steps": 5,
                    "init": "warm-start",
                    "warm_start": "@first",
                },
            ],
        }
        execute(parse_config(raw))
        first = json.loads((tmp_path / "out" / "first" / "metrics.json").read_text())
        second = json.loads((tmp_path / "out" / "second" / "metrics.json").read_text())
        model, _ = build_model(raw["model"])
        final = first["replicates"][0]["theta_final"][0]
        assert abs(final - model.theta_star) < 0.5
        assert abs(second["replicates"][0]["theta_final"][0] - model.theta_star) < 0.5

    def test_divergence_propagates(self, tmp_path):
        raw = _minimal(h=1.5, n_steps=200, divergence_bound=1e3)
        raw["experiment"] = {"output_dir": str(tmp_path / "out")}
        with pytest.raises(DivergenceError):
            execute(parse_config(raw))


class TestRunExperiment:
    def _write(self, tmp_path, body):
        path = tmp_path / "config.toml"
        path.write_text(body)
        return path

    def test_ok(self, tmp_path):
        path, _ = _toy_config(tmp_path)
        assert run_experiment(path) == EXIT_OK

    def test_config_error(self, tmp_path):
        path = self._write(tmp_path, '[model]\nname = "toy"\n[[run]]\nbogus = 1\n')
        assert run_experiment(path) == EXIT_CONFIG

    def test_unsupported_algorithm(self, tmp_path):
        body = '[model]\nname = "logistic"\nrows = 30\nfeatures = 2\n[[run]]\nalgorithm = "EM-exact"\n'
        assert run_experiment(self._write(tmp_path, body)) == EXIT_CONFIG

    def test_data_error(self, tmp_path):
        absent = (tmp_path / "absent.data").as_posix()
        body = f'[model]\nname = "logistic"\ndataset = "wbc"\npath = "{absent}"\n[[run]]\nn_steps = 2\n'
        assert run_experiment(self._write(tmp_path, body)) == EXIT_DATA

    def test_divergence(self, tmp_path):
        out = (tmp_path / "out").as_posix()
        body = (
            f'[model]\nname = "toy"\nd_x = 5\n[experiment]\noutput_dir = "{out}"\n'
            "[[run]]\nh = 1.5\nn_particles = 2\nn_steps = 200\ndivergence_bound = 1000.0\n"
        )
        assert run_experiment(self._write(tmp_path, body)) == EXIT_DIVERGENCE


class TestVerify:
    def test_check(self):
        assert Check("a", 0.5, 1.0).passed
        assert not Check("a", 2.0, 1.0).passed
        assert Check("a", 0.25, 1.0).margin == 0.75

    def test_oracles_suite(self):
        checks = experiment.verify("oracles")
        assert checks
        assert all(c.passed for c in checks), checks

    def test_gradients_suite(self):
        checks = experiment.verify("gradients")
        assert len(checks) >= 9
        assert all(c.passed for c in checks), checks

    def test_unknown_suite(self):
        with pytest.raises(ConfigError):
            experiment.verify("nothing")

    def test_stationarity_checks_cover_mean_and_covariance(self):
        checks = experiment.mh_stationarity_checks(3, 2, 0.1, 400)
        assert len(checks) == 5
        names = " ".join(c.name for c in checks)
        for part in ("mean x_0", "mean x_2", "variance", "covariance (target 0.08333)"):
            assert part in names
        assert all(np.isfinite(c.value) for c in checks)
        assert len(experiment.mh_stationarity_checks(1, 2, 0.1, 400)) == 2

    @pytest.mark.slow
    def test_stationarity_suite(self):
        # nine checks, so a wider band than the command line default
        checks = experiment.verify_stationarity(sigmas=4.0)
        assert len(checks) == 9
        assert all(np.isfinite(c.value) for c in checks)
        assert all(c.passed for c in checks), checks


class TestShippedConfigs:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.toml")))
    def test_parses(self, name):
        config = load_config(CONFIG_DIR / name)
        assert config.runs

    def test_unstable_pga_config_exits_with_divergence(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run_experiment(CONFIG_DIR / "toy_pga_unstable.toml") == EXIT_DIVERGENCE


class TestWorkers:
    def test_traces_identical_across_worker_counts(self, tmp_path):
        traces = {}
        for workers in (1, 3):
            root = tmp_path / f"workers{workers}"
            root.mkdir()
            path, output_dir = _toy_config(root, replicates=3)
            execute(load_config(path), workers=workers)
            traces[workers] = {
                p.relative_to(output_dir).as_posix(): p.read_bytes() for p in output_dir.glob("*/theta_trace.csv")
            }
        assert len(traces[1]) == 6
        assert traces[1] == traces[3]


def _benchmark_traces(model, burn_in=200):
    """PGA, PQN, PMGA and SOUL traces at N = 100, h = 0.01, K = 400."""
    results = {}
    for algorithm in (PGA, PQN, PMGA, SOUL):
        config = RunConfig(algorithm, h=0.01, n_particles=100, n_steps=400, burn_in=burn_in, snapshot_every=1)
        results[algorithm] = run(model, config)
    return results


@pytest.mark.slow
class TestClassifierBenchmarks:
    def test_algorithms_agree_on_synthetic_logistic(self):
        model = LogisticRegressionModel.from_dataset(data.synthetic_dataset(m=683, d=9, seed=0))
        finals = [trace.theta_path[-1, 0] for trace in _benchmark_traces(model).values()]
        assert np.ptp(finals) <= 0.05, finals

    @pytest.mark.skipif(not WBC_AVAILABLE, reason="WBC data not available")
    def test_wbc_error_and_lppd(self):
        dataset = data.load_wbc()
        model = LogisticRegressionModel.from_dataset(dataset)
        traces = _benchmark_traces(model)
        for algorithm, trace in traces.items():
            classifier = metrics.Classifier.from_trace(model, trace)
            assert 0.025 <= metrics.test_error(classifier, dataset.test()) <= 0.045, algorithm
            assert -0.125 <= metrics.lppd(classifier, dataset.test()) <= -0.07, algorithm
        assert np.ptp([trace.theta_path[-1, 0] for trace in traces.values()]) <= 0.05

    @pytest.mark.skipif(not MNIST_AVAILABLE, reason="MNIST data not available")
    def test_reduced_bnn_error_ordering(self, tmp_path):
        config = load_config(CONFIG_DIR / "bnn_reduced.toml")
        config.output_dir = tmp_path
        execute(config)
        error = {
            label: json.loads((tmp_path / label / "metrics.json").read_text())["summary"]["test_error"]["mean"]
            for label, _ in config.runs
        }
        assert error["pga-n1"] >= error["pga-n10"] >= error["pga-n100"], error
        assert error["pga-n100"] < error["soul-n100"], error
        assert error["pmga-n100"] < error["soul-n100"], error
        assert max(error["pga-n100"], error["pmga-n100"]) <= 0.05, error
