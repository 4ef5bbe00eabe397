"""Cubic polynomial functions, their polarisation, and the Kahan / AVF
one-step maps for ``y' = A grad H(y)`` with constant skew ``A``.

A cubic ``H(y) = T(y,y,y) + y.B.y + c.y + d`` is stored through a fully
symmetric 3-tensor ``T``, a symmetric ``B``, a vector ``c`` and a scalar ``d``.
Every evaluation method broadcasts over leading axes, so a whole grid of
states (shape ``(..., l)``) is handled in one call.

The non-homogeneous polarisation used here is the one obtained by
homogenising with an extra coordinate fixed at one; that coordinate is never
materialised, its effect is already folded into :meth:`CubicForm.polarized`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .linalg import (NEWTON_MAXITER, NEWTON_TOL, SolverError, ensure_stats,
                     newton)


def symmetrize3(t: np.ndarray) -> np.ndarray:
    """Average a 3-tensor over the six permutations of its indices."""
    t = np.asarray(t, dtype=float)
    return sum(np.transpose(t, p) for p in itertools.permutations(range(3))) / 6.0


@dataclass(frozen=True, eq=False)
class CubicForm:
    T: np.ndarray
    B: np.ndarray
    c: np.ndarray
    d: float = 0.0

    def __post_init__(self):
        T = np.array(self.T, dtype=float)
        l = T.shape[0]
        if T.shape != (l, l, l):
            raise ValueError(f"T must be l x l x l, got {T.shape}")
        B = np.array(self.B, dtype=float)
        c = np.array(self.c, dtype=float)
        if B.shape != (l, l) or c.shape != (l,):
            raise ValueError("B must be l x l and c of length l")
        T = symmetrize3(T)
        B = 0.5 * (B + B.T)
        for a in (T, B, c):
            a.setflags(write=False)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_terms(cls, l: int, cubic=(), quadratic=(), linear=(), constant=0.0):
        """Build from monomials.

        ``cubic`` holds ``((i, j, k), coef)`` for ``coef*y_i*y_j*y_k``,
        ``quadratic`` holds ``((i, j), coef)`` for ``coef*y_i*y_j`` and
        ``linear`` holds ``(i, coef)``.  Coefficients are symmetrised.
        """
        T = np.zeros((l, l, l))
        B = np.zeros((l, l))
        c = np.zeros(l)
        for (i, j, k), coef in cubic:
            T[i, j, k] += coef
        for (i, j), coef in quadratic:
            B[i, j] += coef
        for i, coef in linear:
            c[i] += coef
        return cls(T, B, c, constant)

    @property
    def l(self) -> int:
        return self.c.shape[0]

    def _check(self, *ys):
        out = []
        for y in ys:
            y = np.asarray(y, dtype=float)
            if y.shape[-1:] != (self.l,):
                raise ValueError(
                    f"expected trailing dimension {self.l}, got shape {y.shape}")
            out.append(y)
        return out

    def __call__(self, y):
        return self.eval(y)

    def eval(self, y):
        (y,) = self._check(y)
        cub = np.einsum("ijk,...i,...j,...k->...", self.T, y, y, y)
        quad = np.einsum("ij,...i,...j->...", self.B, y, y)
        return cub + quad + y @ self.c + self.d

    def grad(self, y):
        (y,) = self._check(y)
        return (3.0 * np.einsum("ijk,...j,...k->...i", self.T, y, y)
                + 2.0 * y @ self.B + self.c)

    def hessian(self, y):
        (y,) = self._check(y)
        return 6.0 * np.einsum("ijk,...k->...ij", self.T, y) + 2.0 * self.B

    def polarized(self, x, y, z):
        """Symmetric three-argument form agreeing with ``H`` on the diagonal."""
        x, y, z = self._check(x, y, z)
        cub = np.einsum("ijk,...i,...j,...k->...", self.T, x, y, z)
        B = self.B
        quad = (np.einsum("ij,...i,...j->...", B, x, y)
                + np.einsum("ij,...i,...j->...", B, y, z)
                + np.einsum("ij,...i,...j->...", B, z, x)) / 3.0
        lin = (x + y + z) @ self.c / 3.0
        return cub + quad + lin + self.d

    def polarized_partial(self, y, z):
        """Derivative of :meth:`polarized` in its first argument at ``(., y, z)``."""
        y, z = self._check(y, z)
        return (np.einsum("ijk,...j,...k->...i", self.T, y, z)
                + (y + z) @ self.B / 3.0 + self.c / 3.0)

    def kahan_rhs(self, y, z):
        """``3 * polarized_partial(y, z)``, the Kahan right-hand side."""
        return 3.0 * self.polarized_partial(y, z)

    def avf_rhs(self, y, z):
        """Exact chord average of ``grad H`` between ``y`` and ``z``.

        Simpson's rule is exact because the integrand is quadratic.
        """
        y, z = self._check(y, z)
        return (self.grad(y) + 4.0 * self.grad(0.5 * (y + z)) + self.grad(z)) / 6.0

    def avf_jacobian(self, y, z):
        """Derivative of :meth:`avf_rhs` with respect to ``z``."""
        y, z = self._check(y, z)
        return (2.0 * self.hessian(0.5 * (y + z)) + self.hessian(z)) / 6.0


def skew(A) -> np.ndarray:
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.array_equal(A, -A.T):
        raise ValueError("matrix is not skew-symmetric")
    return A


def kahan_step(A, H: CubicForm, y, dt: float, *, stats=None):
    """One Kahan step for ``y' = A grad H(y)``: a single linear solve.

    Solves ``(I - dt/2 A hess H(y)) (y_new - y) = dt A grad H(y)``, which is
    the polarised form ``(y_new - y)/dt = 3 A dHbar/dx (y, y_new)`` rearranged.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    stats = ensure_stats(stats)
    with stats.timing("assembly"):
        R = np.eye(H.l) - 0.5 * dt * A @ H.hessian(y)
        rhs = dt * A @ H.grad(y)
    with stats.timing("solve"):
        try:
            dy = np.linalg.solve(R, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular Kahan step matrix", dt=dt,
                              y=y.tolist()) from exc
    stats.linear_solves += 1
    stats.steps += 1
    return y + dy


def avf_step(A, H: CubicForm, y, dt: float, tol: float = NEWTON_TOL, *,
             maxiter: int = NEWTON_MAXITER, stats=None):
    """One averaged-vector-field step, Newton-solved to ``||F||_2 < tol``."""
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    eye = np.eye(H.l)

    def F(z):
        return (z - y) / dt - A @ H.avf_rhs(y, z)

    def J(z):
        return eye / dt - A @ H.avf_jacobian(y, z)

    z = newton(F, J, y, tol=tol, maxiter=maxiter, stats=stats)
    if stats is not None:
        stats.steps += 1
    return z
