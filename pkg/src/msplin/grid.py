"""Periodic uniform grids, two-point difference/average operators and
skew-symmetric differentiation matrices.

All spatial operators wrap periodically: node ``M-1`` pairs with node ``0``.

Note that on grids with an even number of nodes the average ``mu`` annihilates
the checkerboard vector ``(-1)**j``; schemes built on it must cope with that.

2D fields are stored as arrays indexed ``u[j, k]`` (``j`` along x, ``k`` along
y).  Whenever a 2D field is flattened for matrix assembly the ordering is
x-major: node ``j + Mx*k``, i.e. ``u.ravel(order="F")``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


def _check_count(name, value, minimum):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def _check_period(name, value):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid ``x_j = j*dx`` on ``[0, P)``."""

    M: int
    P: float

    def __post_init__(self):
        object.__setattr__(self, "M", _check_count("M", self.M, 2))
        object.__setattr__(self, "P", _check_period("P", self.P))

    ndim = 1

    @property
    def dx(self) -> float:
        return self.P / self.M

    @property
    def shape(self) -> tuple[int]:
        return (self.M,)

    @property
    def n_nodes(self) -> int:
        return self.M

    @property
    def cell(self) -> float:
        return self.dx

    @property
    def spacings(self) -> tuple[float]:
        return (self.dx,)

    @property
    def periods(self) -> tuple[float]:
        return (self.P,)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.M) * self.dx


@dataclass(frozen=True)
class Grid2D:
    """Uniform periodic grid on ``[0, Px) x [0, Py)``."""

    Mx: int
    My: int
    Px: float
    Py: float

    def __post_init__(self):
        object.__setattr__(self, "Mx", _check_count("Mx", self.Mx, 2))
        object.__setattr__(self, "My", _check_count("My", self.My, 2))
        object.__setattr__(self, "Px", _check_period("Px", self.Px))
        object.__setattr__(self, "Py", _check_period("Py", self.Py))

    ndim = 2

    @classmethod
    def square(cls, M: int, P: float) -> "Grid2D":
        return cls(M, M, P, P)

    @property
    def dx(self) -> float:
        return self.Px / self.Mx

    @property
    def dy(self) -> float:
        return self.Py / self.My

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Mx, self.My)

    @property
    def n_nodes(self) -> int:
        return self.Mx * self.My

    @property
    def cell(self) -> float:
        return self.dx * self.dy

    @property
    def spacings(self) -> tuple[float, float]:
        return (self.dx, self.dy)

    @property
    def periods(self) -> tuple[float, float]:
        return (self.Px, self.Py)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.Mx) * self.dx

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.My) * self.dy

    def x_axis(self) -> Grid1D:
        return Grid1D(self.Mx, self.Px)

    def y_axis(self) -> Grid1D:
        return Grid1D(self.My, self.Py)


Grid = Grid1D | Grid2D


@dataclass(frozen=True)
class Field:
    """Samples on a periodic grid at time level ``n``.

    ``values`` has the grid shape for scalar fields, or the grid shape plus a
    trailing component axis for multi-component states.
    """

    grid: Grid
    values: np.ndarray
    n: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        gshape = self.grid.shape
        if values.shape[: len(gshape)] != gshape or values.ndim > len(gshape) + 1:
            raise ValueError(
                f"field shape {values.shape} does not match grid shape {gshape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_components(self) -> int:
        return 1 if self.values.ndim == self.grid.ndim else self.values.shape[-1]


def _axis_index(grid, axis):
    if axis in ("x", 0):
        return 0, grid.spacings[0]
    if axis in ("y", 1) and grid.ndim == 2:
        return 1, grid.spacings[1]
    raise ValueError(f"invalid axis {axis!r} for a {grid.ndim}D grid")


def _unwrap(u, grid):
    if isinstance(u, Field):
        return u.values, u.grid
    if grid is None:
        raise TypeError("a grid is required when passing a bare array")
    return np.asarray(u, dtype=float), grid


def delta(u, grid: Grid | None = None, axis="x") -> np.ndarray:
    """Forward difference ``(v[j+1] - v[j]) / h`` along ``axis`` (periodic)."""
    v, grid = _unwrap(u, grid)
    ax, h = _axis_index(grid, axis)
    return (np.roll(v, -1, axis=ax) - v) / h


def mu(u, grid: Grid | None = None, axis="x") -> np.ndarray:
    """Forward two-point average ``(v[j+1] + v[j]) / 2`` along ``axis``."""
    v, grid = _unwrap(u, grid)
    ax, _ = _axis_index(grid, axis)
    return 0.5 * (np.roll(v, -1, axis=ax) + v)


def _time_pair(u0, u1):
    if isinstance(u0, Field) or isinstance(u1, Field):
        if not (isinstance(u0, Field) and isinstance(u1, Field)):
            raise TypeError("both snapshots must be Fields")
        if u0.grid != u1.grid:
            raise ValueError("snapshots live on different grids")
        return u0.values, u1.values
    u0, u1 = np.asarray(u0, dtype=float), np.asarray(u1, dtype=float)
    if u0.shape != u1.shape:
        raise ValueError(f"snapshot shapes differ: {u0.shape} vs {u1.shape}")
    return u0, u1


def delta_t(u0, u1, dt: float) -> np.ndarray:
    """Forward time difference of two consecutive snapshots."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    a, b = _time_pair(u0, u1)
    return (b - a) / dt


def mu_t(u0, u1) -> np.ndarray:
    a, b = _time_pair(u0, u1)
    return 0.5 * (a + b)


# -- explicit matrices --------------------------------------------------------


def shift_matrix(M: int) -> sp.csr_matrix:
    """``(S v)[j] = v[(j+1) % M]``."""
    rows = np.arange(M)
    return sp.csr_matrix((np.ones(M), (rows, (rows + 1) % M)), shape=(M, M))


def _lift(grid, op_x=None, op_y=None):
    # x-major ordering: x operators act on the fastest index
    if grid.ndim == 1:
        return sp.csr_matrix(op_x)
    Ix, Iy = sp.identity(grid.Mx, format="csr"), sp.identity(grid.My, format="csr")
    ox = Ix if op_x is None else op_x
    oy = Iy if op_y is None else op_y
    return sp.kron(oy, ox, format="csr")


def difference_matrix(grid: Grid, axis="x") -> sp.csr_matrix:
    """Sparse matrix of :func:`delta` acting on x-major flattened fields."""
    ax, h = _axis_index(grid, axis)
    n = grid.shape[ax]
    op = (shift_matrix(n) - sp.identity(n, format="csr")) / h
    return _lift(grid, op, None) if ax == 0 else _lift(grid, None, op)


def average_matrix(grid: Grid, axis="x") -> sp.csr_matrix:
    """Sparse matrix of :func:`mu` acting on x-major flattened fields."""
    ax, _ = _axis_index(grid, axis)
    n = grid.shape[ax]
    op = 0.5 * (shift_matrix(n) + sp.identity(n, format="csr"))
    return _lift(grid, op, None) if ax == 0 else _lift(grid, None, op)


def flatten(u: np.ndarray) -> np.ndarray:
    """Flatten a scalar field in x-major order."""
    return np.asarray(u).ravel(order="F")


def unflatten(v: np.ndarray, grid: Grid) -> np.ndarray:
    return np.asarray(v).reshape(grid.shape, order="F")


# -- differentiation matrices -------------------------------------------------


@dataclass(frozen=True)
class DiffMatrix:
    """Skew-symmetric approximation of ``d/dx`` on a periodic 1D grid.

    ``matrix`` is sparse for ``kind="central"`` and dense for
    ``kind="pseudospectral"``.
    """

    matrix: object
    kind: str
    grid: Grid1D

    @property
    def M(self) -> int:
        return self.grid.M

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else np.array(self.matrix)

    @cached_property
    def cube(self):
        """``D @ D @ D`` in the same storage as ``matrix``."""
        D = self.matrix
        out = D @ (D @ D)
        return out.tocsr() if self.is_sparse else out

    def __matmul__(self, other):
        return self.matrix @ other

    def apply(self, u: np.ndarray, axis: int = 0) -> np.ndarray:
        """Differentiate ``u`` along ``axis`` (any trailing shape)."""
        u = np.moveaxis(np.asarray(u, dtype=float), axis, 0)
        out = self.matrix @ u.reshape(u.shape[0], -1)
        return np.moveaxis(np.asarray(out).reshape(u.shape), 0, axis)


def central_diff_matrix(grid: Grid1D) -> DiffMatrix:
    """``(v[j+1] - v[j-1]) / (2 dx)`` with periodic wrap."""
    if grid.M < 3:
        raise ValueError("central differences need M >= 3")
    S = shift_matrix(grid.M)
    D = ((S - S.T) / (2.0 * grid.dx)).tocsr()
    return DiffMatrix(D, "central", grid)


def pseudospectral_diff_matrix(grid: Grid1D) -> DiffMatrix:
    """First-order Fourier pseudospectral differentiation matrix on ``[0, P)``.

    Even ``M`` uses ``(pi/P) (-1)**(i+j) cot(pi (i-j) / M)``; odd ``M`` uses the
    cosecant kernel ``(pi/P) (-1)**(i-j) / sin(pi (i-j) / M)``, which is the
    exact derivative of the odd-length trigonometric interpolant.
    """
    M, P = grid.M, grid.P
    if M < 3:
        raise ValueError("pseudospectral differentiation needs M >= 3")
    k = np.arange(1, M)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    if M % 2 == 0:
        col = (np.pi / P) * sign / np.tan(np.pi * k / M)
    else:
        col = (np.pi / P) * sign / np.sin(np.pi * k / M)
    # D[i, j] depends on (i - j) mod M only; entry for offset k is col[k-1]
    c = np.concatenate(([0.0], col))
    idx = (np.arange(M)[:, None] - np.arange(M)[None, :]) % M
    D = c[idx]
    # enforce exact skew-symmetry against roundoff in the kernel
    D = 0.5 * (D - D.T)
    return DiffMatrix(D, "pseudospectral", grid)


def diff_matrix(grid: Grid1D, kind: str) -> DiffMatrix:
    if kind == "central":
        return central_diff_matrix(grid)
    if kind == "pseudospectral":
        return pseudospectral_diff_matrix(grid)
    raise ValueError(f"unknown differentiation matrix kind {kind!r}")
