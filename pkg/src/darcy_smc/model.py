"""Gaussian observation model, tempered weights and synthetic data.

The data misfit of a coefficient vector is

    misfit = sum_x (G(x) - y_x)**2 / (2 * sigma2)  >=  0

so the likelihood kernel ``exp(-misfit)`` lies in (0, 1] for every
admissible field, and the tempered incremental weights
``exp(-(phi_next - phi_prev) * misfit)`` telescope exactly across any
temperature ladder from 0 to 1.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .field import FieldConfig, HALF_WIDTH
from .pde import Grid, SourceSpec, forward_map_batch

__all__ = [
    "Dataset",
    "misfit",
    "misfit_batch",
    "incremental_log_weight",
    "observation_layout",
    "generate_data",
    "make_misfit_fn",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class Dataset:
    """Observation locations, observed pressures and the noise variance."""

    obs_points: np.ndarray
    y: np.ndarray
    sigma2: float
    layout_s: int = 0

    def __post_init__(self):
        pts = np.asarray(self.obs_points, dtype=float)
        if pts.ndim != 2:
            raise ValueError("obs_points must be an (n_obs, dim) array")
        object.__setattr__(self, "obs_points", pts)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if len(self.y) != len(pts):
            raise ValueError("obs_points and y must have equal length")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def dim(self) -> int:
        return self.obs_points.shape[1]

    @property
    def n_obs(self) -> int:
        return len(self.y)


def misfit(g_values, data: Dataset) -> float:
    """Data misfit of one forward evaluation; zero iff the fit is exact."""
    g = np.asarray(g_values, dtype=float).ravel()
    if g.shape != data.y.shape:
        raise ValueError(f"expected {data.y.shape[0]} forward values, got {g.shape[0]}")
    return float(np.sum((g - data.y) ** 2) / (2.0 * data.sigma2))


def misfit_batch(g_values: np.ndarray, data: Dataset) -> np.ndarray:
    """Row-wise misfit for a (m, n_obs) batch of forward evaluations."""
    g = np.atleast_2d(np.asarray(g_values, dtype=float))
    if g.shape[1] != data.n_obs:
        raise ValueError(f"expected {data.n_obs} forward values per row, got {g.shape[1]}")
    return np.sum((g - data.y) ** 2, axis=1) / (2.0 * data.sigma2)


def incremental_log_weight(misfit_value, phi_prev: float, phi_next: float):
    """Log incremental weight for moving between two temperatures; always <= 0."""
    if not (0.0 <= phi_prev <= phi_next <= 1.0):
        raise ValueError(
            f"temperatures must satisfy 0 <= phi_prev <= phi_next <= 1, "
            f"got ({phi_prev}, {phi_next})"
        )
    return -(phi_next - phi_prev) * np.asarray(misfit_value, dtype=float)


def observation_layout(dim: int, s: int) -> np.ndarray:
    """``s**dim`` equi-spaced interior points, s points per axis.

    Axis coordinates are ``-pi/2 + pi * i / (s + 1)`` for i = 1..s, so the
    layout never touches the boundary.
    """
    if s < 0:
        raise ValueError(f"layout parameter must be nonnegative, got {s}")
    if s == 0:
        return np.zeros((0, dim))
    axis = -HALF_WIDTH + np.pi * np.arange(1, s + 1) / (s + 1)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def generate_data(
    truth: np.ndarray,
    config: FieldConfig,
    grid_fine: Grid,
    src: SourceSpec,
    s: int,
    sigma2: float,
    rng: np.random.Generator,
) -> Dataset:
    """Synthesize observations from a known truth on a finer grid.

    The forward solve uses ``grid_fine``, which callers should pick at twice
    the inference resolution so the fit is never tested against its own
    discretization.  Noise is i.i.d. Gaussian with variance ``sigma2``.
    """
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    points = observation_layout(config.dim, s)
    if len(points) == 0:
        return Dataset(np.zeros((0, config.dim)), np.zeros(0), sigma2, layout_s=0)
    g = forward_map_batch(config, truth, grid_fine, src, points)[0]
    y = g + rng.normal(0.0, np.sqrt(sigma2), size=len(points))
    return Dataset(points, y, sigma2, layout_s=s)


def make_misfit_fn(
    config: FieldConfig,
    grid: Grid,
    src: SourceSpec,
    dataset: Dataset,
    chunk: int = 4096,
):
    """Batched misfit evaluator: (m, n_params) coefficients -> (m,) misfits.

    Empty datasets short-circuit to zero misfit without any solve.  Large
    batches are processed in chunks to bound memory.
    """

    def misfit_fn(coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        if dataset.n_obs == 0:
            return np.zeros(coeffs.shape[0])
        out = np.empty(coeffs.shape[0])
        for start in range(0, coeffs.shape[0], chunk):
            block = coeffs[start : start + chunk]
            g = forward_map_batch(config, block, grid, src, dataset.obs_points)
            out[start : start + chunk] = misfit_batch(g, dataset)
        return out

    return misfit_fn


def write_dataset(path, data: Dataset, provenance: str = "") -> None:
    """Dataset CSV: one row per observation, header carrying the metadata."""
    buf = io.StringIO()
    if provenance:
        buf.write(f"# {provenance}\n")
    buf.write(f"# sigma2={data.sigma2!r} layout_s={data.layout_s}\n")
    cols = [f"x{d}" for d in range(data.dim)] + ["y"]
    buf.write(",".join(cols) + "\n")
    for pt, val in zip(data.obs_points, data.y):
        buf.write(",".join(repr(float(v)) for v in pt) + f",{float(val)!r}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_dataset(path) -> Dataset:
    """Parse a dataset CSV written by :func:`write_dataset`."""
    sigma2 = None
    layout_s = 0
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("sigma2="):
                        sigma2 = float(token.split("=", 1)[1])
                    elif token.startswith("layout_s="):
                        layout_s = int(token.split("=", 1)[1])
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
    if sigma2 is None:
        raise ValueError(f"{path}: missing sigma2 metadata line")
    if header is None:
        raise ValueError(f"{path}: missing header row")
    dim = len(header) - 1
    if rows:
        arr = np.asarray(rows)
        return Dataset(arr[:, :dim], arr[:, dim], sigma2, layout_s=layout_s)
    return Dataset(np.zeros((0, dim)), np.zeros(0), sigma2, layout_s=layout_s)
