"""Linear and nonlinear solve machinery shared by the steppers.

Includes a cyclic banded solver (band LU after an interleaving renumbering
that removes the periodic corners), a minimum-norm least-squares solve for gauge
deficient systems, a plain Newton loop, and :class:`SolveStats`, the counter
object every stepper accepts for instrumentation.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.linalg.lapack as lapack
import scipy.sparse as sp
import scipy.sparse.linalg as spla

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50
RANK_RTOL = 1e-10
# smallest |pivot| / largest |pivot| of an LU factorisation treated as singular
PIVOT_RTOL = 1e-12


class SolverError(RuntimeError):
    """A step could not be computed; ``info`` carries step metadata."""

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info

    def __str__(self):
        base = super().__str__()
        if not self.info:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in self.info.items())
        return f"{base} ({extra})"


class ConvergenceError(SolverError):
    """Newton iteration hit its cap; ``info['residual']`` is the last norm."""


@dataclass
class SolveStats:
    """Counters filled in by the steppers when passed as ``stats=``."""

    steps: int = 0
    linear_solves: int = 0
    newton_iterations: int = 0
    assembly_seconds: float = 0.0
    solve_seconds: float = 0.0

    @contextmanager
    def timing(self, phase: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            if phase == "assembly":
                self.assembly_seconds += dt
            else:
                self.solve_seconds += dt

    def as_dict(self) -> dict:
        return {
            "steps": self.steps,
            "linear_solves": self.linear_solves,
            "newton_iterations": self.newton_iterations,
            "assembly_seconds": self.assembly_seconds,
            "solve_seconds": self.solve_seconds,
        }


class _NullStats(SolveStats):
    @contextmanager
    def timing(self, phase):
        yield


def ensure_stats(stats):
    return _NullStats() if stats is None else stats


# -- cyclic banded systems ----------------------------------------------------


def cyclic_banded_to_dense(diagonals, offsets, M: int) -> np.ndarray:
    """Dense matrix with ``A[j, (j+o) % M] += diagonals[i][j]`` for ``o = offsets[i]``."""
    A = np.zeros((M, M))
    rows = np.arange(M)
    for d, o in zip(diagonals, offsets):
        np.add.at(A, (rows, (rows + o) % M), np.broadcast_to(d, (M,)))
    return A


def _interleave(M: int):
    """Ordering 0, M-1, 1, M-2, ... that keeps periodic neighbours close."""
    order = np.empty(M, dtype=int)
    order[0::2] = np.arange((M + 1) // 2)
    order[1::2] = M - 1 - np.arange(M // 2)
    pos = np.empty(M, dtype=int)
    pos[order] = np.arange(M)
    return order, pos


def solve_cyclic_banded(diagonals, offsets, b: np.ndarray) -> np.ndarray:
    """Solve a periodic banded system given its row-aligned diagonals.

    Row ``j`` of the matrix holds ``diagonals[i][j]`` in column
    ``(j + offsets[i]) % M``.  Renumbering the unknowns as
    ``0, M-1, 1, M-2, ...`` turns the periodic band into an ordinary band of
    roughly twice the width, which is then solved by band LU with partial
    pivoting (LAPACK ``gbsv``).  Cost is O(M r^2) for half-bandwidth ``r``.
    """
    b = np.asarray(b, dtype=float)
    M = b.shape[0]
    offsets = [int(o) for o in offsets]
    r = max(abs(o) for o in offsets)
    if r == 0:
        diag = sum(np.broadcast_to(d, (M,)) for d in diagonals)
        return b / (diag if b.ndim == 1 else diag[:, None])
    if M <= 4 * r + 2:
        return np.linalg.solve(cyclic_banded_to_dense(diagonals, offsets, M), b)

    order, pos = _interleave(M)
    rows = np.arange(M)
    prow, pcol, vals = [], [], []
    for d, o in zip(diagonals, offsets):
        prow.append(pos[rows])
        pcol.append(pos[(rows + o) % M])
        vals.append(np.broadcast_to(np.asarray(d, dtype=float), (M,)))
    prow, pcol, vals = map(np.concatenate, (prow, pcol, vals))
    kl = int(max(0, np.max(prow - pcol)))
    ku = int(max(0, np.max(pcol - prow)))
    # LAPACK band storage with kl spare rows for the pivoting fill-in
    ab = np.zeros((2 * kl + ku + 1, M))
    np.add.at(ab, (kl + ku + prow - pcol, pcol), vals)
    lu, piv, info = lapack.dgbtrf(ab, kl, ku)
    check_pivots(lu[kl + ku], info)
    y, info = lapack.dgbtrs(lu, kl, ku, b[order], piv)
    if info != 0:
        raise SolverError("band solve failed", info=info)
    x = np.empty_like(y)
    x[order] = y
    return x


def check_pivots(pivots, info: int = 0, **meta):
    """Raise :class:`SolverError` when LU pivots reveal a singular matrix."""
    d = np.abs(np.asarray(pivots))
    big = float(d.max()) if d.size else 0.0
    ratio = float(d.min()) / big if big > 0 else 0.0
    if info > 0 or not ratio > PIVOT_RTOL:
        raise SolverError("singular step matrix", pivot_ratio=ratio, **meta)


def diagonals_of(A, offsets) -> list[np.ndarray]:
    """Row-aligned cyclic diagonals of a (sparse or dense) square matrix."""
    M = A.shape[0]
    rows = np.arange(M)
    if sp.issparse(A):
        A = A.tocsr()
        return [np.asarray(A[rows, (rows + o) % M]).ravel() for o in offsets]
    return [np.asarray(A)[rows, (rows + o) % M] for o in offsets]


# -- general linear solves ----------------------------------------------------


def solve_linear(A, b: np.ndarray) -> np.ndarray:
    """Solve a nonsingular square system, sparse or dense."""
    if sp.issparse(A):
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError("singular step matrix") from exc
        check_pivots(lu.U.diagonal())
        x = lu.solve(b)
    else:
        lu, piv = sla.lu_factor(A, check_finite=False)
        check_pivots(np.diag(lu))
        x = sla.lu_solve((lu, piv), b, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    return x


def solve_bordered(A, b: np.ndarray, null_basis: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of a consistent singular system with known kernel.

    ``null_basis`` (n x k, orthonormal columns) spans the kernel of ``A``; the
    system is augmented with the constraint ``null_basis.T @ x = 0`` and a
    Lagrange multiplier block, which is nonsingular when the left kernel is
    not orthogonal to ``null_basis``.
    """
    if sp.issparse(null_basis):
        N = null_basis
    else:
        N = np.asarray(null_basis, dtype=float).reshape(A.shape[0], -1)
    k = N.shape[1]
    if sp.issparse(A):
        Nsp = sp.csr_matrix(N)
        big = sp.bmat([[A, Nsp], [Nsp.T, None]], format="csc")
    else:
        N = N.toarray() if sp.issparse(N) else N
        big = np.block([[A, N], [N.T, np.zeros((k, k))]])
    x = solve_linear(big, np.concatenate([b, np.zeros(k)]))
    return x[: A.shape[0]]


def solve_min_norm(A, b: np.ndarray, rtol: float = RANK_RTOL):
    """Minimum-norm least-squares solve with a relative rank cutoff.

    Returns ``(x, rank)``.  ``A`` is densified; callers guard the size.
    """
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A)
    x, _, rank, _ = sla.lstsq(Ad, b, cond=rtol, lapack_driver="gelsd",
                              check_finite=False)
    return x, rank


def newton(residual, jacobian, x0, *, tol=NEWTON_TOL, maxiter=NEWTON_MAXITER,
           linsolve=None, stats=None, step=None, scale=1.0):
    """Plain (undamped) Newton iteration until ``scale * ||F(x)||_2 < tol``.

    The steppers pass their residual in difference-quotient form together
    with ``scale=dt``, so the test is applied to the increment form
    ``x - x0 - dt * f``.  ``linsolve(J, rhs)`` defaults to
    :func:`solve_linear`.  Raises :class:`ConvergenceError` after
    ``maxiter`` linear solves.
    """
    stats = ensure_stats(stats)
    scale = abs(scale)
    linsolve = solve_linear if linsolve is None else linsolve
    x = np.array(x0, dtype=float)
    F = residual(x)
    res = scale * float(np.linalg.norm(F))
    it = 0
    while res >= tol:
        if it >= maxiter:
            raise ConvergenceError("Newton iteration did not converge",
                                   residual=res, iterations=it, step=step)
        with stats.timing("assembly"):
            J = jacobian(x)
        with stats.timing("solve"):
            x = x - linsolve(J, F)
        stats.linear_solves += 1
        stats.newton_iterations += 1
        it += 1
        F = residual(x)
        res = scale * float(np.linalg.norm(F))
        if not np.isfinite(res):
            raise ConvergenceError("Newton iteration diverged", residual=res,
                                   iterations=it, step=step)
    return x
