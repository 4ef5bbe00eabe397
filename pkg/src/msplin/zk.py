"""Zakharov-Kuznetsov equation ``u_t + u u_x + u_xxx + u_xyy = 0`` on a periodic square.

Reduced schemes on ``u`` are assembled as sparse Kronecker products in
x-major ordering.  The reduced box scheme is the exact elimination of the
auxiliary variables from the six-component box scheme::

    d_t mx^3 my^3 u + 1/2 dx mx my^2 (a^n a^{n+1})
        + (dx^3 my^3 + dx dy^2 mx^2 my) mu_t u = 0,      a = mx my u

so it conserves the same two-level energy.  When ``My`` is even every
operator carries a factor ``my``, which annihilates all fields that
alternate in sign along y; the step system stays consistent and the
increment is taken orthogonal to that kernel through a bordered solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cubic import CubicForm
from .grid import (DiffMatrix, Field, Grid2D, average_matrix, difference_matrix, flatten,
                   unflatten)
from .linalg import (NEWTON_MAXITER, NEWTON_TOL, SolverError, ensure_stats, newton,
                     solve_bordered, solve_linear)
from .multisymplectic import (MSSystem, consistent_state, ligep_step, lilep_step,
                              settle_state, settled_components)

P_, U, Q, PHI, V, W = range(6)
CONSTRAINED = (Q, PHI, V, W)


@dataclass(frozen=True)
class ZKParams:
    grid: Grid2D
    c: float = 4.0
    seed: int = 0
    amplitude: float = 0.1

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("perturbation amplitude must be >= 0")
        if not self.c > 0:
            raise ValueError("pulse speed must be positive")

    @property
    def P(self) -> float:
        return self.grid.Px


def zk_params(M: int, P: float = 30.0, **kw) -> ZKParams:
    return ZKParams(Grid2D.square(M, P), **kw)


def zk_mssystem(splitting: str = "half") -> MSSystem:
    """``z = (p, u, q, phi, v, w)``."""
    K = np.zeros((6, 6))
    K[U, PHI], K[PHI, U] = 0.5, -0.5
    L1 = np.zeros((6, 6))
    for i, j in ((P_, PHI), (U, V), (Q, W)):
        L1[i, j], L1[j, i] = 1.0, -1.0
    L2 = np.zeros((6, 6))
    L2[U, W], L2[W, U] = 1.0, -1.0
    L2[V, Q], L2[Q, V] = 1.0, -1.0
    # S = u p - (v^2 + w^2)/2 - u^3/6
    S = CubicForm.from_terms(6, cubic=[((U, U, U), -1.0 / 6.0)],
                             quadratic=[((U, P_), 1.0), ((V, V), -0.5), ((W, W), -0.5)])
    return MSSystem.create(K, [L1, L2], S, splitting, names=("p", "u", "q", "phi", "v", "w"))


def zk_jumps(grid: Grid2D, u):
    """``phi`` grows along x by the row mass ``dx * sum_j u[j, k]``; no y jump."""
    u = _values(u)
    jx = np.zeros((grid.My, 6))
    jx[:, PHI] = grid.dx * u.sum(axis=0)
    return jx, np.zeros((grid.Mx, 6))


def zk_initial_zstate(grid: Grid2D, u, *, Ds=None, dt: float | None = None,
                      sys: MSSystem | None = None):
    """Lift ``u`` to ``(z, jumps)``: ``q, phi, v, w`` from the constraints, ``p`` settled."""
    u = _values(u)
    sys = zk_mssystem() if sys is None else sys
    z = np.zeros(grid.shape + (6,))
    z[..., U] = u
    jumps = zk_jumps(grid, u)
    z = consistent_state(sys, grid, z, free=CONSTRAINED, jumps=jumps, Ds=Ds)
    if dt is not None:
        if Ds is None:
            def step(zz):
                return lilep_step(sys, grid, zz, dt, jumps=jumps)
        else:
            def step(zz):
                return ligep_step(sys, grid, Ds, zz, dt, jumps=jumps)
        z = settle_state(step, z, settled_components(sys, CONSTRAINED))
    return z, jumps


# -- helpers ---------------------------------------------------------------------


def _values(u):
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def _wrap(like, values):
    if isinstance(like, Field):
        return Field(like.grid, values, like.n + 1)
    return values


def _check(params, u, dt=None):
    if u.shape != params.grid.shape:
        raise ValueError(f"field of shape {u.shape} on a {params.grid.shape} grid")
    if dt is not None and not dt > 0:
        raise ValueError("dt must be positive")


@dataclass
class _BoxOps:
    grid: Grid2D
    mass: sp.csr_matrix = field(init=False)
    avg: sp.csr_matrix = field(init=False)
    dxavg: sp.csr_matrix = field(init=False)
    lin: sp.csr_matrix = field(init=False)
    kernel: np.ndarray | None = field(init=False)

    def __post_init__(self):
        g = self.grid
        Mx, My = average_matrix(g, "x"), average_matrix(g, "y")
        Dx, Dy = difference_matrix(g, "x"), difference_matrix(g, "y")
        My3 = My @ My @ My
        self.mass = (Mx @ Mx @ Mx @ My3).tocsr()
        self.avg = (Mx @ My).tocsr()
        self.dxavg = (Dx @ Mx @ My @ My).tocsr()
        self.lin = (Dx @ Dx @ Dx @ My3 + Dx @ Dy @ Dy @ Mx @ Mx @ My).tocsr()
        self.kernel = box_kernel(g)


_BOX_CACHE: dict = {}


def _box_ops(grid: Grid2D) -> _BoxOps:
    ops = _BOX_CACHE.get(grid)
    if ops is None:
        if len(_BOX_CACHE) > 16:
            _BOX_CACHE.clear()
        ops = _BOX_CACHE[grid] = _BoxOps(grid)
    return ops


def box_kernel(grid: Grid2D):
    """Orthonormal kernel basis (sparse, x-major) of the box step matrix.

    Empty for odd ``My``; otherwise the fields ``g(x) (-1)**k``, one column
    per x node.
    """
    if grid.My % 2:
        return None
    n = grid.n_nodes
    idx = np.arange(n)
    j, k = idx % grid.Mx, idx // grid.Mx
    vals = (-1.0) ** k / np.sqrt(grid.My)
    return sp.csr_matrix((vals, (idx, j)), shape=(n, grid.Mx))


def _solve_box(A, b, kernel, step):
    try:
        if kernel is None:
            x = solve_linear(A, b)
        else:
            x = solve_bordered(A, b, kernel)
    except RuntimeError as exc:
        if isinstance(exc, SolverError):
            raise
        raise SolverError("singular step matrix", step=step) from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("singular step matrix", step=step)
    return x


def _global_ops(grid, Dx: DiffMatrix, Dy: DiffMatrix):
    if Dx.M != grid.Mx or Dy.M != grid.My:
        raise ValueError("differentiation matrices do not match the grid")
    Ix, Iy = sp.identity(grid.Mx, format="csr"), sp.identity(grid.My, format="csr")
    dense = not (Dx.is_sparse and Dy.is_sparse)
    X = sp.kron(Iy, sp.csr_matrix(Dx.matrix), format="csr")
    Y = sp.kron(sp.csr_matrix(Dy.matrix), Ix, format="csr")
    lin = (X @ X @ X + X @ Y @ Y).tocsr()
    if dense:
        return X.toarray(), lin.toarray(), True
    return X, lin, False


# -- reduced steppers -----------------------------------------------------------------


def lilep_step_zk(params: ZKParams, u, dt: float, *, stats=None, step=None):
    """Box scheme with Kahan time stepping: one sparse solve."""
    u0 = _values(u)
    _check(params, u0, dt)
    stats = ensure_stats(stats)
    g = params.grid
    with stats.timing("assembly"):
        ops = _box_ops(g)
        v0 = flatten(u0)
        a = ops.avg @ v0
        A = (ops.mass / dt + 0.5 * ops.dxavg @ sp.diags(a) @ ops.avg + 0.5 * ops.lin).tocsc()
        rhs = -(0.5 * ops.dxavg @ (a * a) + ops.lin @ v0)
    with stats.timing("solve"):
        du = _solve_box(A, rhs, ops.kernel, step)
    stats.linear_solves += 1
    stats.steps += 1
    return _wrap(u, unflatten(v0 + du, g))


def lep_step_zk(params: ZKParams, u, dt: float, tol: float = NEWTON_TOL, *, stats=None,
                step=None, maxiter: int = NEWTON_MAXITER):
    """Box scheme with the AVF average of the square, Newton-solved."""
    u0 = _values(u)
    _check(params, u0, dt)
    g = params.grid
    ops = _box_ops(g)
    v0 = flatten(u0)
    a = ops.avg @ v0
    lin0 = ops.lin @ v0

    def F(v):
        b = ops.avg @ v
        return (ops.mass @ (v - v0) / dt + 0.5 * ops.dxavg @ ((a * a + a * b + b * b) / 3.0)
                + 0.5 * (lin0 + ops.lin @ v))

    def J(v):
        w = (a + 2.0 * (ops.avg @ v)) / 3.0
        return (ops.mass / dt + 0.5 * ops.dxavg @ sp.diags(w) @ ops.avg + 0.5 * ops.lin).tocsc()

    v = newton(F, J, v0, tol=tol, maxiter=maxiter, stats=stats, step=step, scale=dt,
               linsolve=lambda A, r: _solve_box(A, r, ops.kernel, step))
    if stats is not None:
        stats.steps += 1
    return _wrap(u, unflatten(v, g))


def ligep_step_zk(params: ZKParams, Dx: DiffMatrix, Dy: DiffMatrix, u, dt: float, *,
                  stats=None, step=None):
    """``d_t u + 1/2 Dx(u^n u^{n+1}) + mu_t (Dx^3 + Dx Dy^2) u = 0``."""
    u0 = _values(u)
    _check(params, u0, dt)
    stats = ensure_stats(stats)
    g = params.grid
    with stats.timing("assembly"):
        X, lin, dense = _global_ops(g, Dx, Dy)
        v0 = flatten(u0)
        if dense:
            A = np.eye(g.n_nodes) / dt + 0.5 * X * v0[None, :] + 0.5 * lin
        else:
            A = (sp.identity(g.n_nodes) / dt + 0.5 * X @ sp.diags(v0) + 0.5 * lin).tocsc()
        rhs = v0 / dt - 0.5 * (lin @ v0)
    with stats.timing("solve"):
        v1 = _solve_box(A, rhs, None, step)
    stats.linear_solves += 1
    stats.steps += 1
    return _wrap(u, unflatten(v1, g))


def gep_step_zk(params: ZKParams, Dx: DiffMatrix, Dy: DiffMatrix, u, dt: float,
                tol: float = NEWTON_TOL, *, stats=None, step=None,
                maxiter: int = NEWTON_MAXITER):
    u0 = _values(u)
    _check(params, u0, dt)
    g = params.grid
    X, lin, dense = _global_ops(g, Dx, Dy)
    v0 = flatten(u0)
    lin0 = lin @ v0
    eye = np.eye(g.n_nodes) if dense else sp.identity(g.n_nodes, format="csr")

    def F(v):
        return ((v - v0) / dt + 0.5 * X @ ((v0 * v0 + v0 * v + v * v) / 3.0)
                + 0.5 * (lin0 + lin @ v))

    def J(v):
        w = (v0 + 2.0 * v) / 3.0
        if dense:
            return eye / dt + 0.5 * X * w[None, :] + 0.5 * lin
        return (eye / dt + 0.5 * X @ sp.diags(w) + 0.5 * lin).tocsc()

    v = newton(F, J, v0, tol=tol, maxiter=maxiter, stats=stats, step=step, scale=dt,
               linsolve=lambda A, r: _solve_box(A, r, None, step))
    if stats is not None:
        stats.steps += 1
    return _wrap(u, unflatten(v, g))


# -- energies ----------------------------------------------------------------------------


def _box_parts(grid, u):
    mx = 0.5 * (u + np.roll(u, -1, axis=0))
    my = 0.5 * (u + np.roll(u, -1, axis=1))
    gx = (np.roll(my, -1, axis=0) - my) / grid.dx
    gy = (np.roll(mx, -1, axis=1) - mx) / grid.dy
    a = 0.5 * (my + np.roll(my, -1, axis=0))
    return gx, gy, a


def energy_lilep_zk(params: ZKParams, u_n, u_np1) -> float:
    """Two-level energy conserved by :func:`lilep_step_zk`."""
    g = params.grid
    gx0, gy0, a0 = _box_parts(g, _values(u_n))
    gx1, gy1, a1 = _box_parts(g, _values(u_np1))
    dens = 2 * gx1 * gx0 + gx0**2 + 2 * gy1 * gy0 + gy0**2 - a0**2 * a1
    return float(g.cell * np.sum(dens) / 6.0)


def energy_lep_zk(params: ZKParams, u_n) -> float:
    g = params.grid
    gx, gy, a = _box_parts(g, _values(u_n))
    return float(g.cell * np.sum(0.5 * gx**2 + 0.5 * gy**2 - a**3 / 6.0))


def energy_ligep_zk(params: ZKParams, Dx: DiffMatrix, Dy: DiffMatrix, u_n, u_np1) -> float:
    g = params.grid
    u0, u1 = _values(u_n), _values(u_np1)
    x0, x1 = Dx.apply(u0, 0), Dx.apply(u1, 0)
    y0, y1 = Dy.apply(u0, 1), Dy.apply(u1, 1)
    dens = 2 * x0 * x1 + x0**2 + 2 * y0 * y1 + y0**2 - u0**2 * u1
    return float(g.cell * np.sum(dens) / 6.0)


def energy_gep_zk(params: ZKParams, Dx: DiffMatrix, Dy: DiffMatrix, u_n) -> float:
    g = params.grid
    u0 = _values(u_n)
    x0, y0 = Dx.apply(u0, 0), Dy.apply(u0, 1)
    return float(g.cell * np.sum(0.5 * x0**2 + 0.5 * y0**2 - u0**3 / 6.0))


def energy_continuous_zk(grid: Grid2D, u) -> float:
    """``int (|grad u|^2 / 2 - u^3 / 6)`` with spectral gradients of the samples."""
    u = _values(u)
    kx = 2 * np.pi * np.fft.fftfreq(grid.Mx, d=grid.dx)
    ky = 2 * np.pi * np.fft.fftfreq(grid.My, d=grid.dy)
    uh = np.fft.fft2(u)
    if grid.Mx % 2 == 0:
        kx[grid.Mx // 2] = 0.0
    if grid.My % 2 == 0:
        ky[grid.My // 2] = 0.0
    ux = np.fft.ifft2(1j * kx[:, None] * uh).real
    uy = np.fft.ifft2(1j * ky[None, :] * uh).real
    return float(grid.cell * np.sum(0.5 * (ux**2 + uy**2) - u**3 / 6.0))


# -- test problem ------------------------------------------------------------------------


def init_pulse(params: ZKParams) -> Field:
    """``3c sech^2(sqrt(c)/2 (x - P/2)) + xi(y)``, ``xi`` i.i.d. uniform per row."""
    g = params.grid
    c = params.c
    pulse = 3.0 * c / np.cosh(0.5 * np.sqrt(c) * (g.x - g.Px / 2.0)) ** 2
    rng = np.random.default_rng(params.seed)
    xi = rng.uniform(-params.amplitude, params.amplitude, size=g.My)
    if params.amplitude == 0:
        xi = np.zeros(g.My)
    return Field(g, pulse[:, None] + xi[None, :])


def interpolate_rows(u, My_new: int):
    """Periodic linear interpolation of every x-column onto ``My_new`` rows."""
    if isinstance(u, Field):
        g = u.grid
        vals = u.values
    else:
        raise TypeError("interpolate_rows needs a Field")
    if My_new < g.My:
        raise ValueError("interpolation target must not be coarser")
    if My_new == g.My:
        return Field(g, vals, u.n)
    new = Grid2D(g.Mx, My_new, g.Px, g.Py)
    y_old, y_new = g.y, new.y
    out = np.stack([np.interp(y_new, y_old, row, period=g.Py) for row in vals])
    return Field(new, out, u.n)


def y_oscillation_ratio(u) -> float:
    """Share of the y-variation energy held by wavenumbers above ``My/4``."""
    u = _values(u)
    uh = np.fft.rfft(u - u.mean(axis=1, keepdims=True), axis=1)
    power = np.sum(np.abs(uh) ** 2, axis=0)
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    cut = u.shape[1] / 4.0
    return float(power[np.arange(power.size) > cut].sum() / total)
