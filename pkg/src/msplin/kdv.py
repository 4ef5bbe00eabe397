"""KdV equation ``u_t + eta u u_x + gamma^2 u_xxx = 0`` on a periodic interval.

Two views of the same discretisations:

* the four-component first-order system ``z = (phi, u, v, w)`` handled by
  :mod:`msplin.multisymplectic`;
* reduced schemes acting on ``u`` only.  The box schemes (LILEP/LEP) give a
  cyclic banded system of half-bandwidth 3, solved in O(M); the matrix
  schemes (LIGEP/GEP) are banded for central differences and dense for the
  pseudospectral matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .cubic import CubicForm
from .grid import DiffMatrix, Field, Grid1D, average_matrix, diff_matrix, difference_matrix
from .linalg import (NEWTON_MAXITER, NEWTON_TOL, SolverError, ensure_stats, newton,
                     solve_cyclic_banded, solve_linear)
from .multisymplectic import (MSSystem, consistent_state, ligep_step, lilep_step,
                              settle_state, settled_components)

PHI, U, V, W = range(4)


@dataclass(frozen=True)
class KdVParams:
    eta: float
    gamma: float
    grid: Grid1D

    def __post_init__(self):
        if not (np.isfinite(self.eta) and np.isfinite(self.gamma)):
            raise ValueError("eta and gamma must be finite")


def kdv_mssystem(params: KdVParams, splitting: str = "half") -> MSSystem:
    g = params.gamma
    K = np.zeros((4, 4))
    K[PHI, U], K[U, PHI] = 0.5, -0.5
    L = np.zeros((4, 4))
    L[PHI, W], L[W, PHI] = 1.0, -1.0
    L[U, V], L[V, U] = -g, g
    # S = v^2/2 - u w + eta u^3/6
    S = CubicForm.from_terms(4, cubic=[((U, U, U), params.eta / 6.0)],
                             quadratic=[((V, V), 0.5), ((U, W), -1.0)])
    return MSSystem.create(K, [L], S, splitting, names=("phi", "u", "v", "w"))


def kdv_jump(params: KdVParams, u) -> np.ndarray:
    """Seam jumps of ``z``: ``phi`` grows by the mass ``dx * sum(u)`` per period."""
    j = np.zeros(4)
    j[PHI] = params.grid.dx * float(np.sum(_values(u)))
    return j


def kdv_initial_zstate(params: KdVParams, u, *, D: DiffMatrix | None = None,
                       dt: float | None = None, sys: MSSystem | None = None):
    """Lift ``u`` to a consistent state ``(z, jumps)``.

    ``phi`` and ``v`` are solved from the constraint equations (box stencil,
    or the matrix ``D`` when given).  ``w`` starts from ``eta u^2 / 2``; when
    ``dt`` is given it is then settled for the matching scheme so that it
    carries no period-two oscillation (this does not change ``u``).
    """
    u = _values(u)
    sys = kdv_mssystem(params) if sys is None else sys
    z = np.zeros((u.size, 4))
    z[:, U] = u
    z[:, W] = 0.5 * params.eta * u**2
    jumps = kdv_jump(params, u)
    z = consistent_state(sys, params.grid, z, free=[PHI, V], jumps=jumps, Ds=D)
    if dt is not None:
        if D is None:
            def step(zz):
                return lilep_step(sys, params.grid, zz, dt, jumps=jumps)
        else:
            def step(zz):
                return ligep_step(sys, params.grid, D, zz, dt, jumps=jumps)
        z = settle_state(step, z, settled_components(sys, [PHI, V]))
    return z, jumps


# -- helpers -------------------------------------------------------------------


def _values(u):
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def _wrap(like, values, n_inc=1):
    if isinstance(like, Field):
        return Field(like.grid, values, like.n + n_inc)
    return values


def _check_dt(dt):
    if not dt > 0:
        raise ValueError("dt must be positive")


def _mu(u):
    return 0.5 * (u + np.roll(u, -1))


def _delta(u, dx):
    return (np.roll(u, -1) - u) / dx


def _delta3(u, dx):
    return (np.roll(u, -3) - 3 * np.roll(u, -2) + 3 * np.roll(u, -1) - u) / dx**3


def _mu3(u):
    return (u + 3 * np.roll(u, -1) + 3 * np.roll(u, -2) + np.roll(u, -3)) / 8.0


def _box_nonlinear(w, dx):
    """``delta_x mu_x w``, i.e. ``(w[j+2] - w[j]) / (2 dx)``."""
    return (np.roll(w, -2) - w) / (2.0 * dx)


BOX_OFFSETS = (0, 1, 2, 3)


def _box_diagonals(params, dt, weight):
    """Rows of ``mu^3/dt + eta/2 d mu diag(weight) mu + gamma^2/2 d^3``; row ``j`` couples nodes ``j..j+3``."""
    dx = params.grid.dx
    g2 = params.gamma**2 / (2.0 * dx**3)
    nl = params.eta / 2.0 / (4.0 * dx)
    left = -nl * weight
    right = nl * np.roll(weight, -2)
    M = weight.size
    one = np.ones(M)
    diags = [one / (8 * dt) - g2 + left,
             3 * one / (8 * dt) + 3 * g2 + left,
             3 * one / (8 * dt) - 3 * g2 + right,
             one / (8 * dt) + g2 + right]
    return diags


def _central_diagonals(params, dt, weight):
    """Rows of ``I/dt + eta/2 D diag(weight) + gamma^2/2 D^3`` for central D."""
    dx = params.grid.dx
    M = weight.size
    c3 = params.gamma**2 / 2.0 / (8.0 * dx**3)
    c1 = params.eta / 2.0 / (2.0 * dx)
    one = np.ones(M)
    offsets = (-3, -1, 0, 1, 3)
    diags = [-c3 * one,
             3 * c3 * one - c1 * np.roll(weight, 1),
             one / dt,
             -3 * c3 * one + c1 * np.roll(weight, -1),
             c3 * one]
    return diags, offsets


def _dense_global(params, D, dt, weight):
    Dd = D.toarray()
    D3 = D.cube.toarray() if D.is_sparse else D.cube
    return (np.eye(weight.size) / dt + 0.5 * params.eta * Dd * weight[None, :]
            + 0.5 * params.gamma**2 * D3)


def _solve_dense(A, b, step):
    try:
        return solve_linear(A, b)
    except SolverError as exc:
        exc.info["step"] = step
        raise


def _solve_banded(diags, offsets, b, step):
    try:
        x = solve_cyclic_banded(diags, offsets, b)
    except SolverError as exc:
        exc.info["step"] = step
        raise
    if not np.all(np.isfinite(x)):
        raise SolverError("singular step matrix", step=step)
    return x


def _d3(params, D, u):
    return D.cube @ u


def _check_grid(params, u, D=None):
    if u.shape != params.grid.shape:
        raise ValueError(f"field of shape {u.shape} on a grid of {params.grid.M} nodes")
    if D is not None and D.M != params.grid.M:
        raise ValueError("differentiation matrix does not match the grid")


# -- reduced steppers ------------------------------------------------------------


def lilep_step_kdv(params: KdVParams, u, dt: float, *, stats=None, step=None):
    """``d_t mu^3 u + eta/2 d mu (mu u^n . mu u^{n+1}) + gamma^2 d^3 mu_t u = 0``."""
    _check_dt(dt)
    u0 = _values(u)
    _check_grid(params, u0)
    stats = ensure_stats(stats)
    dx = params.grid.dx
    with stats.timing("assembly"):
        diags = _box_diagonals(params, dt, _mu(u0))
        rhs = _mu3(u0) / dt - 0.5 * params.gamma**2 * _delta3(u0, dx)
    with stats.timing("solve"):
        u1 = _solve_banded(diags, BOX_OFFSETS, rhs, step)
    stats.linear_solves += 1
    stats.steps += 1
    return _wrap(u, u1)


def ligep_step_kdv(params: KdVParams, D: DiffMatrix, u, dt: float, *, stats=None,
                   step=None):
    """``d_t u + eta/2 D(u^n u^{n+1}) + gamma^2 mu_t D^3 u = 0``."""
    _check_dt(dt)
    u0 = _values(u)
    _check_grid(params, u0, D)
    stats = ensure_stats(stats)
    with stats.timing("assembly"):
        rhs = u0 / dt - 0.5 * params.gamma**2 * _d3(params, D, u0)
        if D.kind == "central":
            diags, offsets = _central_diagonals(params, dt, u0)
        else:
            A = _dense_global(params, D, dt, u0)
    with stats.timing("solve"):
        if D.kind == "central":
            u1 = _solve_banded(diags, offsets, rhs, step)
        else:
            u1 = _solve_dense(A, rhs, step)
    stats.linear_solves += 1
    stats.steps += 1
    return _wrap(u, u1)


def lep_step_kdv(params: KdVParams, u, dt: float, tol: float = NEWTON_TOL, *,
                 stats=None, step=None, maxiter: int = NEWTON_MAXITER):
    """Box scheme with the AVF average ``(a^2 + a b + b^2)/3`` of the square."""
    _check_dt(dt)
    u0 = _values(u)
    _check_grid(params, u0)
    dx = params.grid.dx
    a = _mu(u0)
    g2 = 0.5 * params.gamma**2

    def F(v):
        b = _mu(v)
        return (_mu3(v - u0) / dt
                + 0.5 * params.eta * _box_nonlinear((a * a + a * b + b * b) / 3.0, dx)
                + g2 * _delta3(u0 + v, dx))

    def J(v):
        return _box_diagonals(params, dt, (a + 2.0 * _mu(v)) / 3.0)

    def solve(diags, r):
        return _solve_banded(diags, BOX_OFFSETS, r, step)

    u1 = newton(F, J, u0, tol=tol, maxiter=maxiter, linsolve=solve, stats=stats, step=step,
                scale=dt)
    if stats is not None:
        stats.steps += 1
    return _wrap(u, u1)


def gep_step_kdv(params: KdVParams, D: DiffMatrix, u, dt: float, tol: float = NEWTON_TOL,
                 *, stats=None, step=None, maxiter: int = NEWTON_MAXITER):
    """Matrix scheme with the AVF average of the square."""
    _check_dt(dt)
    u0 = _values(u)
    _check_grid(params, u0, D)
    g2 = 0.5 * params.gamma**2
    d3u0 = _d3(params, D, u0)

    def F(v):
        return ((v - u0) / dt + 0.5 * params.eta * (D @ ((u0 * u0 + u0 * v + v * v) / 3.0))
                + g2 * (d3u0 + _d3(params, D, v)))

    if D.kind == "central":
        def J(v):
            return _central_diagonals(params, dt, (u0 + 2.0 * v) / 3.0)

        def solve(Jv, r):
            return _solve_banded(Jv[0], Jv[1], r, step)
    else:
        def J(v):
            return _dense_global(params, D, dt, (u0 + 2.0 * v) / 3.0)

        def solve(A, r):
            return _solve_dense(A, r, step)

    u1 = newton(F, J, u0, tol=tol, maxiter=maxiter, linsolve=solve, stats=stats, step=step,
                scale=dt)
    if stats is not None:
        stats.steps += 1
    return _wrap(u, u1)


# -- energies --------------------------------------------------------------------


def energy_lilep_kdv(params: KdVParams, u_n, u_np1) -> float:
    """Polarised two-level energy conserved by :func:`lilep_step_kdv`."""
    u0, u1 = _values(u_n), _values(u_np1)
    dx = params.grid.dx
    d0, d1 = _delta(u0, dx), _delta(u1, dx)
    m0, m1 = _mu(u0), _mu(u1)
    dens = (-params.gamma**2 / 6.0 * (d0 * d0 + 2.0 * d0 * d1)
            + params.eta / 6.0 * m0 * m0 * m1)
    return float(dx * np.sum(dens))


def energy_lep_kdv(params: KdVParams, u_n) -> float:
    u0 = _values(u_n)
    dx = params.grid.dx
    d0, m0 = _delta(u0, dx), _mu(u0)
    return float(dx * np.sum(-0.5 * params.gamma**2 * d0 * d0 + params.eta / 6.0 * m0**3))


def energy_ligep_kdv(params: KdVParams, D: DiffMatrix, u_n, u_np1) -> float:
    u0, u1 = _values(u_n), _values(u_np1)
    d0, d1 = D @ u0, D @ u1
    dens = (-params.gamma**2 / 6.0 * (d0 * d0 + 2.0 * d0 * d1)
            + params.eta / 6.0 * u0 * u0 * u1)
    return float(params.grid.dx * np.sum(dens))


def energy_gep_kdv(params: KdVParams, D: DiffMatrix, u_n) -> float:
    u0 = _values(u_n)
    d0 = D @ u0
    return float(params.grid.dx * np.sum(-0.5 * params.gamma**2 * d0 * d0
                                         + params.eta / 6.0 * u0**3))


@dataclass(frozen=True)
class ModifiedEnergy:
    """Plain energy, its one-level modification, and the direct two-level value."""

    plain: float
    modified: float
    direct: float

    @property
    def gap(self) -> float:
        return self.modified - self.plain

    @property
    def identity_error(self) -> float:
        return abs(self.modified - self.direct)


def modified_energy_kdv(params: KdVParams, u_n, dt: float, scheme: str = "lilep",
                        D: DiffMatrix | None = None) -> ModifiedEnergy:
    """Polarised energy written as a function of ``u_n`` only.

    ``modified = E + dt/3 grad(E) . (R - dt/2 zeta')^{-1} zeta`` with ``R`` the
    mass operator (``mu^3`` or ``I``).  ``direct`` evaluates the two-level
    energy after an actual step, for comparison.
    """
    u0 = _values(u_n)
    grid = params.grid
    dx, M = grid.dx, grid.M
    g2, eta = params.gamma**2, params.eta
    if scheme == "lilep":
        Dx = difference_matrix(grid).toarray()
        Mx = average_matrix(grid).toarray()
        a = Mx @ u0
        zeta = -g2 * _delta3(u0, dx) - 0.5 * eta * _box_nonlinear(a * a, dx)
        jac = -g2 * np.linalg.matrix_power(Dx, 3) - eta * Dx @ Mx @ (a[:, None] * Mx)
        R = np.linalg.matrix_power(Mx, 3)
        grad_E = dx * (-g2 * Dx.T @ (Dx @ u0) + 0.5 * eta * Mx.T @ (a * a))
        plain = energy_lep_kdv(params, u0)
        u1 = lilep_step_kdv(params, u0, dt)
        direct = energy_lilep_kdv(params, u0, u1)
    elif scheme == "ligep":
        if D is None:
            raise ValueError("the global scheme needs a differentiation matrix")
        Dd = D.toarray()
        D3 = Dd @ Dd @ Dd
        zeta = -g2 * D3 @ u0 - 0.5 * eta * Dd @ (u0 * u0)
        jac = -g2 * D3 - eta * Dd * u0[None, :]
        R = np.eye(M)
        grad_E = dx * (-g2 * Dd.T @ (Dd @ u0) + 0.5 * eta * u0 * u0)
        plain = energy_gep_kdv(params, D, u0)
        u1 = ligep_step_kdv(params, D, u0, dt)
        direct = energy_ligep_kdv(params, D, u0, u1)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    step = _solve_dense(R - 0.5 * dt * jac, zeta, None)
    modified = plain + dt / 3.0 * float(grad_E @ step)
    return ModifiedEnergy(plain, modified, direct)


# -- soliton test problem ------------------------------------------------------------


@dataclass(frozen=True)
class SolitonSpec:
    """Travelling ``sech^2`` wave of speed ``c`` for ``eta = 6``, ``gamma = 1``."""

    c: float = 4.0
    P: float = 20.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("soliton speed must be positive")
        if not self.P > 0:
            raise ValueError("period must be positive")


def exact_soliton(spec: SolitonSpec, x, t: float):
    s = np.mod(-np.asarray(x, dtype=float) + spec.c * t, spec.P) - spec.P / 2.0
    return 0.5 * spec.c / np.cosh(0.5 * np.sqrt(spec.c) * s) ** 2


def soliton_field(spec: SolitonSpec, grid: Grid1D, t: float = 0.0, n: int = 0) -> Field:
    if not np.isclose(grid.P, spec.P, rtol=0, atol=1e-12 * spec.P):
        raise ValueError("grid period differs from the soliton period")
    return Field(grid, exact_soliton(spec, grid.x, t), n)


def soliton_params(M: int, spec: SolitonSpec = SolitonSpec()) -> KdVParams:
    return KdVParams(eta=6.0, gamma=1.0, grid=Grid1D(M, spec.P))


def shape_phase_errors(U, spec: SolitonSpec, t: float, grid: Grid1D | None = None,
                       xtol: float = 1e-9):
    """``(eps_shape, eps_phase)`` of a numerical soliton at time ``t``.

    ``eps_shape = min_tau ||U - u0(. - tau)||`` in the discrete L2 norm
    ``sqrt(dx * sum_j r_j^2)`` and ``eps_phase`` is the distance of the
    minimiser from ``c t`` modulo the period, in ``[0, P/2]``.  The minimiser
    is bracketed by scanning whole-node shifts and refined by bounded scalar
    minimisation of the analytic profile, to ``xtol * P``.
    """
    if isinstance(U, Field):
        grid, U = U.grid, U.values
    if grid is None:
        raise TypeError("a grid is required when passing a bare array")
    U = np.asarray(U, dtype=float)
    x, P, dx = grid.x, spec.P, grid.dx

    def misfit(tau):
        r = U - exact_soliton(spec, x - tau, 0.0)
        return float(r @ r)

    coarse = np.array([misfit(k * dx) for k in range(grid.M)])
    k = int(np.argmin(coarse))
    res = minimize_scalar(misfit, bounds=((k - 1) * dx, (k + 1) * dx), method="bounded",
                          options={"xatol": xtol * P})
    if res.fun <= coarse[k]:
        tau, best = float(res.x), float(res.fun)
    else:
        tau, best = k * dx, float(coarse[k])
    d = np.mod(tau - spec.c * t, P)
    return float(np.sqrt(dx * best)), float(min(d, P - d))


def weighted_l2_error(params: KdVParams, U, spec: SolitonSpec, t: float) -> float:
    """``sqrt(dx * sum (U - u(x, t))^2)``, the discrete L2 error against the soliton."""
    r = _values(U) - exact_soliton(spec, params.grid.x, t)
    return float(np.sqrt(params.grid.dx * (r @ r)))


# -- test problem 1 -------------------------------------------------------------------


@dataclass(frozen=True)
class KdVProblem:
    params: KdVParams
    u0: Field
    default_D: str


def test_problem_1(M: int = 400) -> KdVProblem:
    """Cosine initial data, ``gamma = 0.022``, ``eta = 1``, period 2.

    The matrix schemes default to the pseudospectral matrix here; central
    differences are too dispersive for this steepening problem.
    """
    grid = Grid1D(M, 2.0)
    params = KdVParams(eta=1.0, gamma=0.022, grid=grid)
    return KdVProblem(params, Field(grid, np.cos(np.pi * grid.x)), "pseudospectral")


test_problem_1.__test__ = False


def soliton_problem(M: int = 250, spec: SolitonSpec = SolitonSpec()) -> KdVProblem:
    params = soliton_params(M, spec)
    return KdVProblem(params, soliton_field(spec, params.grid), "central")


def default_diff(problem: KdVProblem, kind: str | None = None) -> DiffMatrix:
    return diff_matrix(problem.params.grid, kind or problem.default_D)
