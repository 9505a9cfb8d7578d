"""Gaussian-weighted tensor-grid discretization of the confining operator.

The similarity-variable elliptic operator

    L v = -lap(v) - y . grad(v) / 2 = -(1/K) div(K grad v),   K(y) = exp(|y|^2 / 4),

is discretized on a truncated tensor grid [-R, R]^N with homogeneous
Dirichlet conditions at the truncation boundary.  The flux coefficient K
is evaluated at cell faces (half-nodes), which makes the stencil exactly
self-adjoint with respect to the K-weighted trapezoidal inner product on
fields that vanish at the boundary.  Exact self-adjointness is what lets
the time steppers build exact discrete adjoints later on.

The weight grows like exp(R^2/4) toward the boundary, so every quadrature
here is organized around the identity  <L u, v>_K = sum_faces K_face du dv
(summation by parts), which holds to roundoff by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

DENSE_EIG_LIMIT = 4096


class GridMismatchError(ValueError):
    """Raised when two fields do not share the same grid."""


@dataclass(frozen=True)
class Grid:
    """Truncated uniform tensor grid on [-R, R]^dim, nodes symmetric about 0.

    ``n`` counts nodes per axis including the two boundary nodes; the grid
    spacing is ``2R/(n-1)``.  Fields carry values at all ``n**dim`` nodes;
    the discrete solution space is the subspace vanishing at boundary nodes.
    """

    dim: int
    R: float
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 3:
            raise ValueError(f"need n >= 3 nodes per axis, got {self.n}")
        if self.R <= 0:
            raise ValueError(f"truncation radius must be positive, got {self.R}")

    @cached_property
    def dy(self) -> float:
        return 2.0 * self.R / (self.n - 1)

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.n)

    @cached_property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def interior_size(self) -> int:
        return (self.n - 2) ** self.dim

    @cached_property
    def coords(self) -> list:
        """Node coordinates per axis, broadcast to the grid shape."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return [m for m in mesh]

    @cached_property
    def points(self) -> np.ndarray:
        """All node coordinates as an (size, dim) array."""
        return np.stack([c.ravel() for c in self.coords], axis=-1)

    @cached_property
    def K(self) -> np.ndarray:
        """Gaussian weight exp(|y|^2/4) at every node."""
        r2 = sum(c * c for c in self.coords)
        return np.exp(r2 / 4.0)

    @cached_property
    def K_half(self) -> list:
        """Weight at cell faces: K evaluated at half-nodes along each axis."""
        half = 0.5 * (self.axis[:-1] + self.axis[1:])
        out = []
        for a in range(self.dim):
            axes = [half if a == i else self.axis for i in range(self.dim)]
            mesh = np.meshgrid(*axes, indexing="ij")
            r2 = sum(m * m for m in mesh)
            out.append(np.exp(r2 / 4.0))
        return out

    @cached_property
    def trapz_weights(self) -> np.ndarray:
        """Tensor-product trapezoidal quadrature weights (no K factor)."""
        w1 = np.full(self.n, self.dy)
        w1[0] = w1[-1] = 0.5 * self.dy
        w = w1
        for _ in range(self.dim - 1):
            w = np.multiply.outer(w, w1)
        return w

    @cached_property
    def quad_K(self) -> np.ndarray:
        """Quadrature weights for the L^2(K) inner product: trapz * K."""
        return self.trapz_weights * self.K

    @cached_property
    def quad_Kinv(self) -> np.ndarray:
        """Quadrature weights against 1/K (used by the L^1 embedding check)."""
        return self.trapz_weights / self.K

    @cached_property
    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[(slice(1, -1),) * self.dim] = True
        return mask

    @cached_property
    def L_diagonal(self) -> np.ndarray:
        """Diagonal of the discrete L (interior nodes; boundary rows zero)."""
        diag = np.zeros(self.shape)
        inv_dy2 = 1.0 / self.dy**2
        for a in range(self.dim):
            Kh = self.K_half[a]
            lo = tuple(slice(0, -1) if i == a else slice(None) for i in range(self.dim))
            hi = tuple(slice(1, None) if i == a else slice(None) for i in range(self.dim))
            core = tuple(slice(1, -1) if i == a else slice(None) for i in range(self.dim))
            diag[core] += (Kh[hi] + Kh[lo]) * inv_dy2
        diag /= self.K
        diag[~self.interior_mask] = 0.0
        return diag

    def zero_field(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def field_from(self, fn) -> "Field":
        """Sample a callable f(points) -> values on all nodes (boundary kept)."""
        vals = np.asarray(fn(self.points), dtype=float).reshape(self.shape)
        return Field(self, vals)

    def phi1(self) -> "Field":
        """Ground eigenfunction exp(-|y|^2/4) sampled on the grid."""
        return Field(self, 1.0 / self.K)


@dataclass
class Field:
    """Grid function; ``values`` has shape ``grid.shape``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridMismatchError(
                f"field shape {self.values.shape} != grid shape {self.grid.shape}"
            )

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def zero_boundary(self) -> "Field":
        vals = self.values.copy()
        vals[~self.grid.interior_mask] = 0.0
        return Field(self.grid, vals)

    def __add__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, c: float):
        return Field(self.grid, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values)


def _check_same_grid(u: Field, v: Field):
    if u.grid is not v.grid and u.grid != v.grid:
        raise GridMismatchError("fields live on different grids")


def inner_K(u: Field, v: Field) -> float:
    """Weighted inner product  int u v K dy  by trapezoidal quadrature."""
    _check_same_grid(u, v)
    return float(np.sum(u.grid.quad_K * u.values * v.values))


def norm_K(u: Field) -> float:
    return math.sqrt(max(inner_K(u, u), 0.0))


def apply_L_array(grid: Grid, v: np.ndarray) -> np.ndarray:
    """Divergence-form stencil for L on a raw array (batch dims allowed).

    Boundary rows of the output are zero (Dirichlet); the stencil at nodes
    adjacent to the boundary reads whatever neighbor values are stored, so
    sampled fields with nonzero boundary values are differentiated
    consistently rather than against an implicit zero.
    """
    nb = v.ndim - grid.dim
    out = np.zeros_like(v)
    inv_dy2 = 1.0 / grid.dy**2
    for a in range(grid.dim):
        ax = nb + a
        d = np.diff(v, axis=ax)
        flux = grid.K_half[a] * d
        div = np.diff(flux, axis=ax)
        core = tuple(
            slice(1, -1) if i == ax else slice(None) for i in range(v.ndim)
        )
        out[core] += div
    out *= -inv_dy2
    out /= grid.K
    bmask = ~grid.interior_mask
    out[..., bmask] = 0.0
    return out


def apply_L(v: Field) -> Field:
    """Discrete L = -(1/K) div(K grad .), self-adjoint in inner_K."""
    return Field(v.grid, apply_L_array(v.grid, v.values))


def grad_inner(u: Field, v: Field) -> float:
    """Discrete  int grad(u) . grad(v) K dy  via face quadrature.

    Chosen so that inner_K(apply_L(u), v) == grad_inner(u, v) exactly
    (to roundoff) for fields vanishing at the boundary.
    """
    _check_same_grid(u, v)
    grid = u.grid
    acc = 0.0
    scale = grid.dy ** (grid.dim - 2)
    for a in range(grid.dim):
        du = np.diff(u.values, axis=a)
        dv = np.diff(v.values, axis=a)
        acc += float(np.sum(grid.K_half[a] * du * dv)) * scale
    return acc


def norm_H1K(u: Field) -> float:
    """H^1(K) norm: (|u|_{L2(K)}^2 + |grad u|_{L2(K)}^2)^(1/2)."""
    return math.sqrt(max(inner_K(u, u) + grad_inner(u, u), 0.0))


def check_poincare(u: Field) -> tuple:
    """Return (N/2 * |u|_{L2(K)}^2, |grad u|_{L2(K)}^2).

    The weighted Poincare inequality asserts lhs <= rhs; the ground state
    exp(-|y|^2/4) attains equality up to O(dy^2).
    """
    lhs = 0.5 * u.grid.dim * inner_K(u, u)
    rhs = grad_inner(u, u)
    return lhs, rhs


def _sym_tridiag_1d(grid: Grid) -> tuple:
    """Symmetrized interior 1D stencil (diagonal, off-diagonal bands).

    K^(1/2)-similarity turns the K-self-adjoint stencil into a plain
    symmetric tridiagonal matrix with identical spectrum.
    """
    K = np.exp(grid.axis**2 / 4.0)
    half = 0.5 * (grid.axis[:-1] + grid.axis[1:])
    Kh = np.exp(half**2 / 4.0)
    inv_dy2 = 1.0 / grid.dy**2
    diag = (Kh[1:] + Kh[:-1]) / K[1:-1] * inv_dy2
    off = -Kh[1:-1] / np.sqrt(K[1:-2] * K[2:-1]) * inv_dy2
    return diag, off


def spectral_probe(grid: Grid, k: int = 6) -> np.ndarray:
    """k smallest eigenvalues of the discrete L by dense symmetric eigensolve.

    The tensor-product stencil separates exactly across axes (the K factors
    of the other axes cancel), so for dim == 2 the spectrum is the set of
    pairwise sums of the 1D spectrum; the dense solve is done per axis.
    Rejects grids whose interior is larger than DENSE_EIG_LIMIT unknowns.
    """
    if k > 20:
        raise ValueError("spectral probe supports at most 20 eigenvalues")
    if grid.interior_size > DENSE_EIG_LIMIT:
        raise ValueError(
            f"grid interior {grid.interior_size} exceeds dense limit {DENSE_EIG_LIMIT}"
        )
    diag, off = _sym_tridiag_1d(grid)
    lam1 = scipy.linalg.eigh_tridiagonal(diag, off, eigvals_only=True)
    if grid.dim == 1:
        return lam1[:k]
    take = lam1[: min(len(lam1), k)]
    sums = np.sort(np.add.outer(take, take).ravel())
    return sums[:k]
