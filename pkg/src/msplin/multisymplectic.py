"""Multi-symplectic PDEs ``K z_t + sum_a L^a z_{x_a} = grad S(z)`` with cubic
``S`` on periodic 1D and 2D grids.

States are arrays of shape ``grid.shape + (l,)``.  Two spatial
discretisations are provided:

* the box (midpoint) discretisation, giving the local energy-preserving
  schemes: :func:`lilep_step` (Kahan in time, one linear solve) and
  :func:`lep_step` (AVF in time, Newton);
* a skew differentiation matrix per axis, giving the global schemes
  :func:`ligep_step` and :func:`gep_step`.

Potential-type components (e.g. ``phi`` with ``phi_x = u``) are in general
not periodic: they may grow by a fixed amount across the periodic seam.
Such states carry ``jumps``: for 1D an ``(l,)`` vector, for 2D a pair
``(jx, jy)`` with ``jx`` of shape ``(My, l)`` (x-seam jump of each row) and
``jy`` of shape ``(Mx, l)``.  Jumps are held fixed along a trajectory.  The box
stencils read the affinely extended field; the matrix derivatives act on the
periodic remainder and differentiate the linear ramp exactly.

Step matrices are rank deficient whenever the state contains gauge
components; every step solves for the increment in the minimum-norm
least-squares sense (relative rank cutoff ``1e-10``) and then checks that
the scheme residual is at roundoff, so genuinely inconsistent systems raise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cubic import CubicForm
from .grid import DiffMatrix, Grid1D, Grid2D, shift_matrix
from .linalg import (NEWTON_MAXITER, NEWTON_TOL, SolverError, ensure_stats,
                     newton, solve_min_norm)

RESIDUAL_RTOL = 1e-8
MAX_DENSE_UNKNOWNS = 12_000


def split_matrix(A: np.ndarray, splitting: str) -> np.ndarray:
    """Return ``A_plus`` with ``A == A_plus - A_plus.T``."""
    if splitting == "half":
        return 0.5 * A
    if splitting == "upper":
        return np.triu(A)
    raise ValueError(f"unknown splitting {splitting!r}; use 'half' or 'upper'")


@dataclass(frozen=True, eq=False)
class MSSystem:
    """``K z_t + sum_a L[a] z_{x_a} = grad S(z)`` with splittings ``Kplus``, ``Lplus``."""

    K: np.ndarray
    L: tuple
    S: CubicForm
    Kplus: np.ndarray
    Lplus: tuple
    splitting: str = "custom"
    names: tuple = ()

    def __post_init__(self):
        l = self.S.l
        mats = [self.K, *self.L, self.Kplus, *self.Lplus]
        if any(np.shape(m) != (l, l) for m in mats):
            raise ValueError("all structure matrices must be l x l")
        if len(self.L) != len(self.Lplus) or len(self.L) not in (1, 2):
            raise ValueError("need one L (and one splitting) per spatial axis, d in {1, 2}")
        K = np.asarray(self.K, dtype=float)
        if not np.array_equal(K, self.Kplus - self.Kplus.T):
            raise ValueError("K != Kplus - Kplus^T")
        for La, Lp in zip(self.L, self.Lplus):
            if not np.array_equal(La, Lp - Lp.T):
                raise ValueError("L != Lplus - Lplus^T")

    @classmethod
    def create(cls, K, L, S: CubicForm, splitting: str = "half", names=()):
        K = np.array(K, dtype=float)
        L = tuple(np.array(La, dtype=float) for La in L)
        for A in (K, *L):
            if not np.array_equal(A, -A.T):
                raise ValueError("K and L must be skew-symmetric")
        return cls(K, L, S, split_matrix(K, splitting),
                   tuple(split_matrix(La, splitting) for La in L),
                   splitting, tuple(names))

    def with_splitting(self, splitting: str) -> "MSSystem":
        return MSSystem.create(self.K, self.L, self.S, splitting, self.names)

    @property
    def l(self) -> int:
        return self.S.l

    @property
    def d(self) -> int:
        return len(self.L)

    @property
    def constraint_rows(self) -> np.ndarray:
        """Rows without time derivative and with affine ``grad S``."""
        no_time = ~np.any(self.K != 0, axis=1)
        linear = ~np.any(self.S.T != 0, axis=(1, 2))
        return np.flatnonzero(no_time & linear)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class LocalEnergyReport:
    """Polarised energy density, fluxes and (optionally) the local-law residual."""

    density: np.ndarray
    flux: list | None
    residual: np.ndarray | None
    boundary_flux: float | None = None

    @property
    def max_abs_residual(self) -> float:
        if self.residual is None:
            raise ValueError("no residual: a third snapshot is required")
        return float(np.max(np.abs(self.residual)))


# -- layout helpers -----------------------------------------------------------


def _check_state(sys, grid, z):
    z = np.asarray(z, dtype=float)
    if z.shape != grid.shape + (sys.l,):
        raise ValueError(f"state shape {z.shape} != {grid.shape + (sys.l,)}")
    if sys.d != grid.ndim:
        raise ValueError(f"{sys.d}D system on a {grid.ndim}D grid")
    return z


def flat_state(z: np.ndarray) -> np.ndarray:
    """Node-major, x-major flattening: index ``(j + Mx*k)*l + c``."""
    if z.ndim == 2:
        return z.reshape(-1)
    return z.transpose(1, 0, 2).reshape(-1)


def unflat_state(v: np.ndarray, grid, l: int) -> np.ndarray:
    if grid.ndim == 1:
        return v.reshape(grid.M, l)
    return v.reshape(grid.My, grid.Mx, l).transpose(1, 0, 2)


def _normalize_jumps(grid, l, jumps):
    if grid.ndim == 1:
        jx = np.zeros(l) if jumps is None else np.asarray(jumps, dtype=float).reshape(l)
        return (jx,)
    if jumps is None:
        return (np.zeros((grid.My, l)), np.zeros((grid.Mx, l)))
    jx, jy = jumps
    jx = np.zeros((grid.My, l)) if jx is None else np.broadcast_to(
        np.asarray(jx, dtype=float), (grid.My, l))
    jy = np.zeros((grid.Mx, l)) if jy is None else np.broadcast_to(
        np.asarray(jy, dtype=float), (grid.Mx, l))
    return (jx, jy)


def _blockdiag(blocks: np.ndarray) -> sp.csr_matrix:
    n, l, _ = blocks.shape
    base = (np.arange(n) * l)[:, None, None]
    rows = base + np.arange(l)[None, :, None]
    cols = base + np.arange(l)[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(n * l, n * l))


def _node_blocks(a: np.ndarray, grid) -> np.ndarray:
    """Per-node trailing data in flat node order (x-major)."""
    if grid.ndim == 1:
        return a
    return np.swapaxes(a, 0, 1).reshape((grid.n_nodes,) + a.shape[2:])


def _bil(u, M, v):
    return np.einsum("...i,ij,...j->...", u, M, v)


# -- box (midpoint) discretisation ---------------------------------------------


class BoxStencil:
    """Corner values of the affinely extended field and the box operators."""

    def __init__(self, grid, l, jumps=None):
        self.grid = grid
        self.l = l
        self.jumps = _normalize_jumps(grid, l, jumps)

    def corners(self, z):
        g = self.grid
        if g.ndim == 1:
            c1 = np.roll(z, -1, axis=0)
            c1[-1] += self.jumps[0]
            return (z, c1)
        jx, jy = self.jumps
        c10 = np.roll(z, -1, axis=0)
        c10[-1, :] += jx
        c01 = np.roll(z, -1, axis=1)
        c01[:, -1] += jy
        c11 = np.roll(np.roll(z, -1, axis=0), -1, axis=1)
        c11[-1, :] += np.roll(jx, -1, axis=0)
        c11[:, -1] += np.roll(jy, -1, axis=0)
        return (z, c10, c01, c11)

    def parts(self, z):
        """Return ``(avg, grads, sides)`` for the box around every node.

        ``grads[a]`` is the difference along axis ``a`` averaged over the
        other axis; ``sides[a]`` holds the other-axis averages on the near
        and far faces normal to ``a`` (where the flux ``F^a`` is sampled).
        """
        g = self.grid
        c = self.corners(z)
        if g.ndim == 1:
            c0, c1 = c
            return 0.5 * (c0 + c1), [(c1 - c0) / g.dx], [(c0, c1)]
        c00, c10, c01, c11 = c
        avg = 0.25 * (c00 + c10 + c01 + c11)
        gx = (c10 + c11 - c00 - c01) / (2.0 * g.dx)
        gy = (c01 + c11 - c00 - c10) / (2.0 * g.dy)
        sides = [(0.5 * (c00 + c01), 0.5 * (c10 + c11)),
                 (0.5 * (c00 + c10), 0.5 * (c01 + c11))]
        return avg, [gx, gy], sides

    def node_matrices(self):
        """Sparse ``(avg, [grad_a])`` acting on x-major flattened scalars."""
        g = self.grid
        if g.ndim == 1:
            S = shift_matrix(g.M)
            I = sp.identity(g.M, format="csr")
            return 0.5 * (I + S), [(S - I) / g.dx]
        Ix, Iy = sp.identity(g.Mx, format="csr"), sp.identity(g.My, format="csr")
        Sx = sp.kron(Iy, shift_matrix(g.Mx), format="csr")
        Sy = sp.kron(shift_matrix(g.My), Ix, format="csr")
        Sxy = Sx @ Sy
        I = sp.identity(g.n_nodes, format="csr")
        avg = 0.25 * (I + Sx + Sy + Sxy)
        gx = (Sx + Sxy - I - Sy) / (2.0 * g.dx)
        gy = (Sy + Sxy - I - Sx) / (2.0 * g.dy)
        return avg, [gx, gy]


class MatrixStencil:
    """Derivatives by skew differentiation matrices, one per axis."""

    def __init__(self, grid, l, Ds, jumps=None):
        if isinstance(Ds, DiffMatrix):
            Ds = (Ds,)
        Ds = tuple(Ds)
        if len(Ds) != grid.ndim:
            raise ValueError("need one differentiation matrix per axis")
        for D, n in zip(Ds, grid.shape):
            if D.M != n:
                raise ValueError(f"differentiation matrix of size {D.M} on axis with {n} nodes")
        self.grid = grid
        self.l = l
        self.Ds = Ds
        self.jumps = _normalize_jumps(grid, l, jumps)

    def grads(self, z):
        g = self.grid
        if g.ndim == 1:
            (jx,) = self.jumps
            ramp = g.x[:, None] * jx[None, :] / g.P
            return [self.Ds[0].apply(z - ramp, 0) + jx / g.P]
        jx, jy = self.jumps
        ramp_x = g.x[:, None, None] * jx[None, :, :] / g.Px
        ramp_y = g.y[None, :, None] * jy[:, None, :] / g.Py
        return [self.Ds[0].apply(z - ramp_x, 0) + jx[None, :, :] / g.Px,
                self.Ds[1].apply(z - ramp_y, 1) + jy[:, None, :] / g.Py]

    def node_matrices(self):
        g = self.grid
        if g.ndim == 1:
            return [sp.csr_matrix(self.Ds[0].matrix)]
        Ix, Iy = sp.identity(g.Mx, format="csr"), sp.identity(g.My, format="csr")
        return [sp.kron(Iy, sp.csr_matrix(self.Ds[0].matrix), format="csr"),
                sp.kron(sp.csr_matrix(self.Ds[1].matrix), Ix, format="csr")]


def _guard(n_unknowns, limit):
    if n_unknowns > limit:
        raise SolverError("dense z-form solve exceeds the configured size guard",
                          unknowns=n_unknowns, limit=limit)


def _solve_increment(A, rhs, residual_fn, z0_flat, step, what, limit):
    _guard(rhs.size, limit)
    dz, rank = solve_min_norm(A, rhs)
    z1 = z0_flat + dz
    res = float(np.linalg.norm(residual_fn(z1)))
    scale = float(np.linalg.norm(rhs))
    # a roundoff-sized rhs (steady states) gets an absolute floor tied to |z|
    floor = 1e-10 * max(1.0, float(np.max(np.abs(z0_flat))))
    if res > RESIDUAL_RTOL * scale and res > floor:
        raise SolverError(f"{what}: step system is inconsistent", residual=res,
                          rhs_norm=scale, rank=rank, size=rhs.size, step=step)
    return z1


# -- local (box) schemes --------------------------------------------------------


def _lilep_residual(sys, box, z0, z1, dt):
    a, g0, _ = box.parts(z0)
    b, g1, _ = box.parts(z1)
    F = (b - a) @ sys.K.T / dt - sys.S.kahan_rhs(a, b)
    for La, ga0, ga1 in zip(sys.L, g0, g1):
        F = F + 0.5 * (ga0 + ga1) @ La.T
    return F


def _lep_residual(sys, box, z0, z1, dt):
    a, g0, _ = box.parts(z0)
    b, g1, _ = box.parts(z1)
    F = (b - a) @ sys.K.T / dt - sys.S.avf_rhs(a, b)
    for La, ga0, ga1 in zip(sys.L, g0, g1):
        F = F + 0.5 * (ga0 + ga1) @ La.T
    return F


def _box_operator(sys, box, dt, blocks):
    """``kron(avg, K)/dt + sum kron(grad_a, L_a)/2 - blockdiag(blocks) kron(avg, I)``."""
    avg, grads = box.node_matrices()
    A = sp.kron(avg, sys.K) / dt
    for Ga, La in zip(grads, sys.L):
        A = A + 0.5 * sp.kron(Ga, La)
    A = A - _blockdiag(blocks) @ sp.kron(avg, sp.identity(sys.l))
    return A.tocsr()


def lilep_step(sys: MSSystem, grid, z, dt: float, *, jumps=None, stats=None,
               step=None, max_unknowns: int = MAX_DENSE_UNKNOWNS):
    """One linearly implicit local energy-preserving step (box + Kahan)."""
    z = _check_state(sys, grid, z)
    if not dt > 0:
        raise ValueError("dt must be positive")
    stats = ensure_stats(stats)
    box = BoxStencil(grid, sys.l, jumps)
    with stats.timing("assembly"):
        a, _, _ = box.parts(z)
        A = _box_operator(sys, box, dt, _node_blocks(0.5 * sys.S.hessian(a), grid))
        rhs = -flat_state(_lilep_residual(sys, box, z, z, dt))

    def resid(v):
        return flat_state(_lilep_residual(sys, box, z, unflat_state(v, grid, sys.l), dt))

    with stats.timing("solve"):
        z1 = _solve_increment(A, rhs, resid, flat_state(z), step, "LILEP", max_unknowns)
    stats.linear_solves += 1
    stats.steps += 1
    return unflat_state(z1, grid, sys.l)


def lep_step(sys: MSSystem, grid, z, dt: float, tol: float = NEWTON_TOL, *,
             jumps=None, stats=None, step=None, maxiter: int = NEWTON_MAXITER,
             max_unknowns: int = MAX_DENSE_UNKNOWNS):
    """One fully implicit local energy-preserving step (box + AVF, Newton)."""
    z = _check_state(sys, grid, z)
    _guard(z.size, max_unknowns)
    box = BoxStencil(grid, sys.l, jumps)
    a, _, _ = box.parts(z)

    def F(v):
        return flat_state(_lep_residual(sys, box, z, unflat_state(v, grid, sys.l), dt))

    def J(v):
        b, _, _ = box.parts(unflat_state(v, grid, sys.l))
        return _box_operator(sys, box, dt, _node_blocks(sys.S.avf_jacobian(a, b), grid))

    v = newton(F, J, flat_state(z), tol=tol, maxiter=maxiter, stats=stats, step=step,
               scale=dt,
               linsolve=lambda A, r: solve_min_norm(A, r)[0])
    if stats is not None:
        stats.steps += 1
    return unflat_state(v, grid, sys.l)


def _polarised_density_box(sys, box, z0, z1):
    a, g0, _ = box.parts(z0)
    b, g1, _ = box.parts(z1)
    E = sys.S.polarized(a, a, b)
    for Lp, ga0, ga1 in zip(sys.Lplus, g0, g1):
        E = E + (_bil(ga0, Lp, a) + _bil(ga0, Lp, b) + _bil(ga1, Lp, a)) / 3.0
    return E


def _flux(Lp, p0, p1, p2, dt):
    dt0, dt1 = (p1 - p0) / dt, (p2 - p1) / dt
    m0, m1 = 0.5 * (p0 + p1), 0.5 * (p1 + p2)
    return -(_bil(dt0, Lp, m0) + _bil(dt0, Lp, m1) + _bil(dt1, Lp, m0)) / 3.0


def local_energy(sys: MSSystem, grid, z_n, z_np1, z_np2=None, dt: float | None = None,
                 *, jumps=None, residual: bool | None = None) -> LocalEnergyReport:
    """Polarised local energy density, flux and conservation-law residual.

    The density at level ``n`` needs ``z_n`` and ``z_np1``; the flux at level
    ``n`` and the residual ``delta_t E + sum_a delta_a F^a`` also need
    ``z_np2`` and ``dt``.
    """
    z0 = _check_state(sys, grid, z_n)
    z1 = _check_state(sys, grid, z_np1)
    if residual is None:
        residual = z_np2 is not None
    if residual and (z_np2 is None or dt is None):
        raise ValueError("the local-law residual needs a third snapshot and dt")
    box = BoxStencil(grid, sys.l, jumps)
    density = _polarised_density_box(sys, box, z0, z1)
    if z_np2 is None:
        return LocalEnergyReport(density, None, None)
    z2 = _check_state(sys, grid, z_np2)
    sides = [box.parts(zz)[2] for zz in (z0, z1, z2)]
    fluxes, res = [], None
    if residual:
        res = (_polarised_density_box(sys, box, z1, z2) - density) / dt
    bflux = 0.0
    for axis, (Lp, h) in enumerate(zip(sys.Lplus, grid.spacings)):
        near = _flux(Lp, *(s[axis][0] for s in sides), dt)
        far = _flux(Lp, *(s[axis][1] for s in sides), dt)
        fluxes.append(near)
        if residual:
            res = res + (far - near) / h
        bflux += float(np.sum(far - near)) * grid.cell / h
    return LocalEnergyReport(density, fluxes, res, bflux)


def global_energy_polarised(sys: MSSystem, grid, z_n, z_np1, *, jumps=None) -> float:
    """Cell-weighted sum of the polarised local energy density."""
    box = BoxStencil(grid, sys.l, jumps)
    z0 = _check_state(sys, grid, z_n)
    z1 = _check_state(sys, grid, z_np1)
    return float(np.sum(_polarised_density_box(sys, box, z0, z1)) * grid.cell)


def energy_local_plain(sys: MSSystem, grid, z, *, jumps=None) -> float:
    """``cell * sum_j (S(avg z) + sum_a (grad_a z)^T L+_a avg z)``."""
    z = _check_state(sys, grid, z)
    a, gs, _ = BoxStencil(grid, sys.l, jumps).parts(z)
    E = sys.S(a)
    for Lp, ga in zip(sys.Lplus, gs):
        E = E + _bil(ga, Lp, a)
    return float(np.sum(E) * grid.cell)


def modified_energy_lilep(sys: MSSystem, grid, z_n, dt: float, *, jumps=None):
    """Polarised global energy as a function of ``z_n`` alone.

    Returns ``(plain, polarised, dz)`` where ``dz`` solves
    ``R_L dz = dt g_L`` with ``g_L = grad S(avg z) - sum_a L_a grad_a z`` and
    ``R_L = K avg - dt/2 dg_L`` and ``polarised = plain + (1/3) grad(plain) . dz``.
    """
    z = _check_state(sys, grid, z_n)
    box = BoxStencil(grid, sys.l, jumps)
    avg, grads = box.node_matrices()
    a, gs, _ = box.parts(z)
    I = sp.identity(sys.l)
    g = sys.S.grad(a)
    for La, ga in zip(sys.L, gs):
        g = g - ga @ La.T
    dg = _blockdiag(_node_blocks(sys.S.hessian(a), grid)) @ sp.kron(avg, I)
    for Ga, La in zip(grads, sys.L):
        dg = dg - sp.kron(Ga, La)
    R = sp.kron(avg, sys.K) - 0.5 * dt * dg
    _guard(z.size, MAX_DENSE_UNKNOWNS)
    dz, _ = solve_min_norm(R, dt * flat_state(g))

    grad_E = sp.kron(avg, I).T @ flat_state(sys.S.grad(a))
    for Ga, Lp, ga in zip(grads, sys.Lplus, gs):
        grad_E = grad_E + sp.kron(Ga, I).T @ flat_state(a @ Lp.T)
        grad_E = grad_E + sp.kron(avg, I).T @ flat_state(ga @ Lp)
    grad_E = grad_E * grid.cell
    plain = energy_local_plain(sys, grid, z, jumps=jumps)
    return plain, plain + float(grad_E @ dz) / 3.0, unflat_state(dz, grid, sys.l)


# -- global (matrix) schemes ------------------------------------------------------


def _global_residual(sys, ms, z0, z1, dt, rhs_fn):
    g0, g1 = ms.grads(z0), ms.grads(z1)
    F = (z1 - z0) @ sys.K.T / dt - rhs_fn(z0, z1)
    for La, ga0, ga1 in zip(sys.L, g0, g1):
        F = F + 0.5 * (ga0 + ga1) @ La.T
    return F


def _matrix_operator(sys, ms, dt, blocks):
    n = ms.grid.n_nodes
    A = sp.kron(sp.identity(n), sys.K) / dt
    for Da, La in zip(ms.node_matrices(), sys.L):
        A = A + 0.5 * sp.kron(Da, La)
    return (A - _blockdiag(blocks)).tocsr()


def ligep_step(sys: MSSystem, grid, Ds, z, dt: float, *, jumps=None, stats=None,
               step=None, max_unknowns: int = MAX_DENSE_UNKNOWNS):
    """One linearly implicit global energy-preserving step (matrix D + Kahan)."""
    z = _check_state(sys, grid, z)
    if not dt > 0:
        raise ValueError("dt must be positive")
    stats = ensure_stats(stats)
    ms = MatrixStencil(grid, sys.l, Ds, jumps)
    with stats.timing("assembly"):
        A = _matrix_operator(sys, ms, dt, _node_blocks(0.5 * sys.S.hessian(z), grid))
        rhs = -flat_state(_global_residual(sys, ms, z, z, dt, sys.S.kahan_rhs))

    def resid(v):
        return flat_state(_global_residual(sys, ms, z, unflat_state(v, grid, sys.l),
                                           dt, sys.S.kahan_rhs))

    with stats.timing("solve"):
        z1 = _solve_increment(A, rhs, resid, flat_state(z), step, "LIGEP", max_unknowns)
    stats.linear_solves += 1
    stats.steps += 1
    return unflat_state(z1, grid, sys.l)


def gep_step(sys: MSSystem, grid, Ds, z, dt: float, tol: float = NEWTON_TOL, *,
             jumps=None, stats=None, step=None, maxiter: int = NEWTON_MAXITER,
             max_unknowns: int = MAX_DENSE_UNKNOWNS):
    """One fully implicit global energy-preserving step (matrix D + AVF)."""
    z = _check_state(sys, grid, z)
    _guard(z.size, max_unknowns)
    ms = MatrixStencil(grid, sys.l, Ds, jumps)

    def F(v):
        return flat_state(_global_residual(sys, ms, z, unflat_state(v, grid, sys.l),
                                           dt, sys.S.avf_rhs))

    def J(v):
        b = unflat_state(v, grid, sys.l)
        return _matrix_operator(sys, ms, dt, _node_blocks(sys.S.avf_jacobian(z, b), grid))

    v = newton(F, J, flat_state(z), tol=tol, maxiter=maxiter, stats=stats, step=step,
               scale=dt,
               linsolve=lambda A, r: solve_min_norm(A, r)[0])
    if stats is not None:
        stats.steps += 1
    return unflat_state(v, grid, sys.l)


def _polarised_density_matrix(sys, ms, z0, z1):
    g0, g1 = ms.grads(z0), ms.grads(z1)
    E = sys.S.polarized(z0, z0, z1)
    for Lp, ga0, ga1 in zip(sys.Lplus, g0, g1):
        E = E + (_bil(ga0, Lp, z0) + _bil(ga0, Lp, z1) + _bil(ga1, Lp, z0)) / 3.0
    return E


def global_energy_ligep(sys: MSSystem, grid, Ds, z_n, z_np1, *, jumps=None) -> float:
    ms = MatrixStencil(grid, sys.l, Ds, jumps)
    z0 = _check_state(sys, grid, z_n)
    z1 = _check_state(sys, grid, z_np1)
    return float(np.sum(_polarised_density_matrix(sys, ms, z0, z1)) * grid.cell)


def energy_global_plain(sys: MSSystem, grid, Ds, z, *, jumps=None) -> float:
    """``cell * sum_j (S(z_j) + sum_a (D_a z)_j^T L+_a z_j)``."""
    z = _check_state(sys, grid, z)
    ms = MatrixStencil(grid, sys.l, Ds, jumps)
    E = sys.S(z)
    for Lp, ga in zip(sys.Lplus, ms.grads(z)):
        E = E + _bil(ga, Lp, z)
    return float(np.sum(E) * grid.cell)


def modified_energy_ligep(sys: MSSystem, grid, Ds, z_n, dt: float, *, jumps=None):
    """Global counterpart of :func:`modified_energy_lilep`.

    ``dz`` solves ``R dz = dt g`` with ``g = grad S(z) - sum_a L_a D_a z`` and
    ``R = K - dt/2 dg``.
    """
    z = _check_state(sys, grid, z_n)
    ms = MatrixStencil(grid, sys.l, Ds, jumps)
    n = grid.n_nodes
    I = sp.identity(sys.l)
    gs = ms.grads(z)
    g = sys.S.grad(z)
    for La, ga in zip(sys.L, gs):
        g = g - ga @ La.T
    Dn = ms.node_matrices()
    dg = _blockdiag(_node_blocks(sys.S.hessian(z), grid))
    for Da, La in zip(Dn, sys.L):
        dg = dg - sp.kron(Da, La)
    R = sp.kron(sp.identity(n), sys.K) - 0.5 * dt * dg
    _guard(z.size, MAX_DENSE_UNKNOWNS)
    dz, _ = solve_min_norm(R, dt * flat_state(g))

    grad_E = flat_state(sys.S.grad(z))
    for Da, Lp, ga in zip(Dn, sys.Lplus, gs):
        grad_E = grad_E + sp.kron(Da, I).T @ flat_state(z @ Lp.T)
        grad_E = grad_E + flat_state(ga @ Lp)
    grad_E = grad_E * grid.cell
    plain = energy_global_plain(sys, grid, Ds, z, jumps=jumps)
    return plain, plain + float(grad_E @ dz) / 3.0, unflat_state(dz, grid, sys.l)


# -- initial data -----------------------------------------------------------------


def consistent_state(sys: MSSystem, grid, z, free, *, jumps=None, Ds=None):
    """Adjust the ``free`` components of ``z`` so the constraint rows hold.

    Constraint rows are equations with no time derivative and affine
    ``grad S``; with the time average in the schemes, a violation at the
    initial level would otherwise persist as a period-two oscillation.  The
    correction is minimum-norm.  Box stencils are used unless ``Ds`` is given.
    """
    z = np.array(_check_state(sys, grid, z))
    rows = sys.constraint_rows
    free = np.asarray(sorted(free), dtype=int)
    if rows.size == 0 or free.size == 0:
        return z
    l, n = sys.l, grid.n_nodes
    if Ds is None:
        box = BoxStencil(grid, l, jumps)
        avg, grads = box.node_matrices()

        def constraint(zz):
            a, gs, _ = box.parts(zz)
            r = -sys.S.grad(a)
            for La, ga in zip(sys.L, gs):
                r = r + ga @ La.T
            return r
    else:
        ms = MatrixStencil(grid, l, Ds, jumps)
        avg, grads = sp.identity(n, format="csr"), ms.node_matrices()

        def constraint(zz):
            r = -sys.S.grad(zz)
            for La, ga in zip(sys.L, ms.grads(zz)):
                r = r + ga @ La.T
            return r

    C = -sp.kron(avg, 2.0 * sys.S.B)
    for Ga, La in zip(grads, sys.L):
        C = C + sp.kron(Ga, La)
    C = C.tocsr()
    sel_rows = (np.arange(n)[:, None] * l + rows[None, :]).ravel()
    sel_cols = (np.arange(n)[:, None] * l + free[None, :]).ravel()
    Csub = C[sel_rows][:, sel_cols]
    r0 = flat_state(constraint(z))[sel_rows]
    _guard(sel_cols.size, MAX_DENSE_UNKNOWNS)
    corr, _ = solve_min_norm(Csub, -r0)
    v = flat_state(z)
    v[sel_cols] += corr
    z = unflat_state(v, grid, l)
    res = float(np.linalg.norm(flat_state(constraint(z))[sel_rows]))
    if res > RESIDUAL_RTOL * max(1.0, float(np.linalg.norm(r0))):
        raise SolverError("constraints cannot be satisfied with the given free "
                          "components and jumps", residual=res)
    return z


def settled_components(sys: MSSystem, free) -> np.ndarray:
    """Components that are neither evolved by ``K`` nor fixed by the constraints.

    The schemes only ever see their time averages, so an arbitrary initial
    value shows up as a period-two oscillation.
    """
    evolved = np.any(sys.K != 0, axis=0)
    mask = ~evolved
    mask[np.asarray(list(free), dtype=int)] = False
    return np.flatnonzero(mask)


def settle_state(step, z, comps):
    """Replace ``z[..., comps]`` by an oscillation-free value.

    Two trial steps give the half-level averages ``m_1/2`` and ``m_3/2``;
    ``1.5 m_1/2 - 0.5 m_3/2`` estimates the level-0 value to second order.
    The other components, and hence the trajectory, are unaffected.
    """
    comps = np.asarray(comps, dtype=int)
    if comps.size == 0:
        return z
    z1 = step(z)
    z2 = step(z1)
    m1 = 0.5 * (z[..., comps] + z1[..., comps])
    m3 = 0.5 * (z1[..., comps] + z2[..., comps])
    out = np.array(z)
    out[..., comps] = 1.5 * m1 - 0.5 * m3
    return out
