"""Elliptic pressure solver: -div(u grad p) = f with zero boundary pressure.

Discretization is a conservative finite-volume / finite-difference scheme on
a tensor-product grid over ``[-pi/2, pi/2]^d``: fluxes across faces use the
harmonic mean of the permeability at the two adjacent nodes, which keeps the
system symmetric positive definite and flux-continuous for rough
coefficients.  The operator is stored matrix-free as per-axis face
coefficient arrays so that many systems (one per particle) can be solved
simultaneously with vectorized conjugate gradients.

Arrays may carry arbitrary leading batch dimensions; the trailing ``dim``
axes are the grid axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldConfig, evaluate_field_grid, HALF_WIDTH

__all__ = [
    "Grid",
    "SourceSpec",
    "DarcyOperator",
    "SolverError",
    "mollified_source",
    "assemble",
    "solve",
    "observe",
    "forward_map",
    "forward_map_batch",
    "write_pressure_csv",
]

CG_TOL = 1e-10


class SolverError(RuntimeError):
    """Conjugate gradients failed to reach the residual target."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid with ``n`` interior nodes per axis."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.n < 2:
            raise ValueError(f"need at least 2 interior nodes per axis, got {self.n}")

    @property
    def h(self) -> float:
        return np.pi / (self.n + 1)

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def n_unknowns(self) -> int:
        return self.n**self.dim

    def interior_axis(self) -> np.ndarray:
        """Coordinates of interior nodes along one axis."""
        return -HALF_WIDTH + self.h * np.arange(1, self.n + 1)

    def node_axis(self) -> np.ndarray:
        """Coordinates of all nodes along one axis, boundary included."""
        return -HALF_WIDTH + self.h * np.arange(self.n + 2)

    def interior_points(self) -> np.ndarray:
        """All interior node coordinates, shape (n**dim, dim)."""
        axes = np.meshgrid(*([self.interior_axis()] * self.dim), indexing="ij")
        return np.stack([ax.ravel() for ax in axes], axis=1)


@dataclass(frozen=True)
class SourceSpec:
    """Point sources/sinks with a Gaussian mollification width."""

    locations: tuple
    strengths: tuple
    width: float

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float)
        if locs.ndim != 2:
            raise ValueError("locations must be a list of d-vectors")
        if len(locs) != len(self.strengths):
            raise ValueError("locations and strengths must have equal length")
        if np.any(np.abs(locs) >= HALF_WIDTH):
            raise ValueError("source locations must lie strictly inside the domain")
        if self.width <= 0:
            raise ValueError(f"mollification width must be positive, got {self.width}")

    @staticmethod
    def single(location, strength: float, width: float) -> "SourceSpec":
        return SourceSpec((tuple(location),), (float(strength),), width)


def mollified_source(grid: Grid, src: SourceSpec) -> np.ndarray:
    """Gaussian-mollified load on the interior nodes.

    Each point mass is replaced by an isotropic Gaussian bump of standard
    deviation ``src.width``, renormalized so its discrete mass
    ``sum(load) * h**dim`` equals the source strength exactly.
    """
    locs = np.asarray(src.locations, dtype=float)
    if locs.shape[1] != grid.dim:
        raise ValueError("source locations do not match the grid dimension")
    pts = grid.interior_points()
    load = np.zeros(grid.n_unknowns)
    cell = grid.h**grid.dim
    for loc, strength in zip(locs, src.strengths):
        sq = np.sum((pts - loc) ** 2, axis=1)
        bump = np.exp(-sq / (2.0 * src.width**2))
        mass = bump.sum() * cell
        if mass <= 0.0:
            raise ValueError("mollified bump has no support on the grid")
        load += (strength / mass) * bump
    return load.reshape(grid.shape)


def _grid_slices(ndim: int, dim: int, axis: int, sl) -> tuple:
    """Index tuple applying ``sl`` on one grid axis, interior on the others."""
    full = [slice(None)] * ndim
    for d in range(dim):
        full[ndim - dim + d] = sl if d == axis else slice(1, -1)
    return tuple(full)


class DarcyOperator:
    """Matrix-free SPD operator for ``-div(u grad .)`` with Dirichlet rows removed.

    ``lo[d]`` couples each node to its lower neighbor along grid axis ``d``
    and ``hi[d]`` to the upper one; both are already divided by h**2.  The
    stencil is symmetric by construction: the coupling between two nodes is
    the same stored float viewed from either side.
    """

    def __init__(self, grid: Grid, lo: list, hi: list):
        self.grid = grid
        self.lo = lo
        self.hi = hi
        self.diag = sum(lo) + sum(hi)
        self.batch_shape = self.diag.shape[: self.diag.ndim - grid.dim]

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Matrix-vector product on interior values of shape (..., n, ..., n).

        ``p`` may carry more leading batch axes than the operator; the face
        coefficients broadcast across the extras.
        """
        dim = self.grid.dim
        out = self.diag * p
        for d in range(dim):
            p_inner = _axis_slice(p.ndim, p.ndim - dim + d, slice(1, None))
            p_lower = _axis_slice(p.ndim, p.ndim - dim + d, slice(None, -1))
            c_lo, c_hi = self.lo[d], self.hi[d]
            c_inner = _axis_slice(c_lo.ndim, c_lo.ndim - dim + d, slice(1, None))
            c_lower = _axis_slice(c_hi.ndim, c_hi.ndim - dim + d, slice(None, -1))
            # node i picks up neighbor i-1; node i+1 picks up neighbor i.
            # Boundary neighbors carry p = 0 and contribute nothing.
            out[p_inner] -= c_lo[c_inner] * p[p_lower]
            out[p_lower] -= c_hi[c_lower] * p[p_inner]
        return out

    def to_dense(self) -> np.ndarray:
        """Dense (n**dim, n**dim) matrix; single-system operators only."""
        if self.batch_shape:
            raise ValueError("to_dense is only available for unbatched operators")
        n_unk = self.grid.n_unknowns
        cols = np.zeros((n_unk, n_unk))
        eye = np.eye(n_unk).reshape((n_unk,) + self.grid.shape)
        cols = self.apply(eye).reshape(n_unk, n_unk).T
        return cols


def _axis_slice(ndim: int, axis: int, sl) -> tuple:
    full = [slice(None)] * ndim
    full[axis] = sl
    return tuple(full)


def assemble(grid: Grid, u_nodes: np.ndarray) -> DarcyOperator:
    """Build the SPD system from permeability values at all grid nodes.

    Parameters
    ----------
    u_nodes : array of shape (..., n+2, ..., n+2)
        Permeability sampled at every node including the boundary layer;
        leading axes are batch dimensions.  All values must be positive.
    """
    u_nodes = np.asarray(u_nodes, dtype=float)
    dim = grid.dim
    expected = (grid.n + 2,) * dim
    if u_nodes.shape[u_nodes.ndim - dim :] != expected:
        raise ValueError(
            f"u_nodes must end with grid-node shape {expected}, got {u_nodes.shape}"
        )
    if np.any(u_nodes <= 0.0):
        raise ValueError("permeability samples must be strictly positive")

    inv_h2 = 1.0 / grid.h**2
    nd = u_nodes.ndim
    lo, hi = [], []
    for d in range(dim):
        left = u_nodes[_grid_slices(nd, dim, d, slice(None, -1))]
        right = u_nodes[_grid_slices(nd, dim, d, slice(1, None))]
        face = 2.0 * left * right / (left + right)  # harmonic mean, (n+1) faces
        lo.append(face[_axis_slice(nd, nd - dim + d, slice(None, -1))] * inv_h2)
        hi.append(face[_axis_slice(nd, nd - dim + d, slice(1, None))] * inv_h2)
    return DarcyOperator(grid, lo, hi)


def solve(op: DarcyOperator, load: np.ndarray, tol: float = CG_TOL) -> np.ndarray:
    """Diagonally preconditioned conjugate gradients, batched over systems.

    Iterates until every system reaches relative residual ``tol``; raises
    SolverError carrying the worst relative residual if the iteration cap of
    ``10 * n_unknowns`` is exceeded.  Deterministic for fixed inputs.
    """
    grid = op.grid
    dim = grid.dim
    load = np.broadcast_to(np.asarray(load, dtype=float), op.diag.shape).copy()
    batch_shape = load.shape[: load.ndim - dim]
    keep = (1,) * dim

    def dot(a, b):
        flat = np.einsum(
            "bi,bi->b", a.reshape(-1, grid.n_unknowns), b.reshape(-1, grid.n_unknowns)
        )
        return flat.reshape(batch_shape + keep)

    b_norm = np.sqrt(dot(load, load))
    x = np.zeros_like(load)
    trivial = b_norm == 0.0
    if np.all(trivial):
        return x
    target = tol * b_norm

    r = load.copy()
    z = r / op.diag
    p = z.copy()
    rz = dot(r, z)
    active = ~trivial
    cap = 10 * grid.n_unknowns
    for _ in range(cap):
        ap = op.apply(p)
        pap = dot(p, ap)
        alpha = np.where(active, rz / np.where(active, pap, 1.0), 0.0)
        x += alpha * p
        r -= alpha * ap
        res = np.sqrt(dot(r, r))
        active = res > target
        if not np.any(active):
            return x
        z = r / op.diag
        rz_new = dot(r, z)
        beta = np.where(active, rz_new / np.where(rz != 0.0, rz, 1.0), 0.0)
        p = z + beta * p
        rz = rz_new
    worst = float(np.max(np.where(trivial, 0.0, np.sqrt(dot(r, r)) / np.where(trivial, 1.0, b_norm))))
    raise SolverError(
        f"conjugate gradients did not converge within {cap} iterations "
        f"(worst relative residual {worst:.3e})",
        residual=worst,
    )


def observe(p: np.ndarray, grid: Grid, obs_points) -> np.ndarray:
    """Multilinear interpolation of the pressure at points strictly inside.

    ``p`` holds interior nodal values with shape (..., n, ..., n); the zero
    boundary extension is used for cells touching the boundary.  Returns an
    array of shape (..., n_obs).
    """
    obs = np.atleast_2d(np.asarray(obs_points, dtype=float))
    if obs.shape[1] != grid.dim:
        raise ValueError(f"observation points must have {grid.dim} coordinates")
    if np.any(np.abs(obs) >= HALF_WIDTH):
        raise ValueError("observation points must lie strictly inside the domain")

    dim = grid.dim
    p = np.asarray(p, dtype=float)
    pad_spec = [(0, 0)] * (p.ndim - dim) + [(1, 1)] * dim
    p_ext = np.pad(p, pad_spec)

    t = (obs + HALF_WIDTH) / grid.h
    i0 = np.clip(np.floor(t).astype(int), 0, grid.n)
    frac = t - i0

    out = np.zeros(p.shape[: p.ndim - dim] + (obs.shape[0],))
    for corner in range(2**dim):
        bits = [(corner >> d) & 1 for d in range(dim)]
        idx = tuple(i0[:, d] + bits[d] for d in range(dim))
        weight = np.ones(obs.shape[0])
        for d in range(dim):
            weight = weight * (frac[:, d] if bits[d] else 1.0 - frac[:, d])
        out += weight * p_ext[(Ellipsis,) + idx]
    return out


def write_pressure_csv(path, pressure: np.ndarray, comments=()) -> None:
    """Export one nodal pressure field as index pair/triplet plus value rows."""
    pressure = np.asarray(pressure, dtype=float)
    if pressure.ndim not in (2, 3):
        raise ValueError("expected a single 2-d or 3-d pressure field")
    index_cols = ",".join("ijk"[: pressure.ndim])
    with open(path, "w") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        fh.write(f"{index_cols},value\n")
        for idx in np.ndindex(pressure.shape):
            fh.write(",".join(str(i) for i in idx) + f",{float(pressure[idx])!r}\n")


def forward_map(
    config: FieldConfig,
    coeffs: np.ndarray,
    grid: Grid,
    src: SourceSpec,
    obs_points,
) -> np.ndarray:
    """Pressure at the observation points for one coefficient vector."""
    return forward_map_batch(config, np.atleast_2d(coeffs), grid, src, obs_points)[0]


def forward_map_batch(
    config: FieldConfig,
    coeffs: np.ndarray,
    grid: Grid,
    src: SourceSpec,
    obs_points,
) -> np.ndarray:
    """Pressure at the observation points for a batch of coefficient vectors.

    One assembly and one batched CG solve for the whole batch; returns an
    array of shape (n_batch, n_obs).
    """
    if config.dim != grid.dim:
        raise ValueError("field and grid dimensions differ")
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    axes = [grid.node_axis()] * grid.dim
    u_nodes = evaluate_field_grid(config, coeffs, axes)
    op = assemble(grid, u_nodes)
    load = mollified_source(grid, src)
    pressure = solve(op, load)
    return observe(pressure, grid, obs_points)
