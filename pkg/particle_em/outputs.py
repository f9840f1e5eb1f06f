"""Output sinks: atomic_output, CSV traces and clouds, NPZ state files, JSON."""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from particle_em.errors import DataFormatError
from particle_em.oracles import MeanFieldState, SpectralReport
from particle_em.types import Array, ParticleCloud, Trace

FLOAT_FORMAT = "%.17g"


@contextmanager
def atomic_output(path, mode: str = "w") -> Iterator[Any]:
    """Yield a file open on a temporary sibling of ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, mode, **({} if "b" in mode else {"newline": ""})) as f:
            yield f
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_frame(path, frame: pd.DataFrame) -> None:
    with atomic_output(path) as f:
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)


def _read_frame(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    return pd.read_csv(path, float_precision="round_trip")


def theta_frame(trace: Trace) -> pd.DataFrame:
    d = trace.theta_path.shape[1]
    columns = {"step": np.arange(1, trace.n_steps + 1)}
    columns.update({f"theta_{i}": trace.theta_path[:, i] for i in range(d)})
    columns.update({f"theta_bar_{i}": trace.theta_bar_path[:, i] for i in range(d)})
    return pd.DataFrame(columns)


def write_theta_trace(path, trace: Trace) -> None:
    """step, θ components and θ̄ components (empty before the burn-in ends)."""
    _write_frame(path, theta_frame(trace))


def read_theta_trace(path) -> pd.DataFrame:
    return _read_frame(path)


def write_cloud(path, cloud: ParticleCloud) -> None:
    """One row per particle, one column per latent coordinate."""
    frame = pd.DataFrame(cloud.points, columns=[f"x_{i}" for i in range(cloud.d_x)])
    _write_frame(path, frame)


def read_cloud(path) -> ParticleCloud:
    return ParticleCloud(_read_frame(path).to_numpy(dtype=np.float64))


def write_state(path, theta: Any, cloud: ParticleCloud) -> None:
    """Warm-start file: the final θ and particle matrix."""
    with atomic_output(path, "wb") as f:
        np.savez(f, theta=np.atleast_1d(np.asarray(theta, dtype=np.float64)), points=cloud.points)


def read_state(path) -> tuple[Array, Array]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")
    try:
        with np.load(path) as saved:
            return saved["theta"], saved["points"]
    except KeyError as e:
        raise DataFormatError(f"{path}: missing array {e}") from None
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from None


def write_spectral(path, reports: Sequence[SpectralReport]) -> None:
    _write_frame(path, pd.DataFrame([r.to_row() for r in reports]))


def write_meanfield(path, paths: dict[str, list[MeanFieldState]]) -> None:
    """One row per step with θ and ν columns for each variant."""
    columns: dict[str, Any] = {}
    for variant, states in paths.items():
        columns["step"] = np.arange(len(states))
        columns[f"{variant}_theta"] = [s.theta for s in states]
        columns[f"{variant}_nu"] = [s.nu for s in states]
    _write_frame(path, pd.DataFrame(columns))


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path, obj: Any, indent: Optional[int] = 2) -> None:
    with atomic_output(path) as f:
        json.dump(obj, f, indent=indent, sort_keys=True, default=_jsonable)
        f.write("\n")
