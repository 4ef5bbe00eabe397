"""Experiment driver behind the command line: single runs, convergence
studies and timing matrices.

Column contract (all times in seconds, lengths in grid units):

``trace.csv``
    ``step, t, energy_polarised, energy_plain, local_residual,
    linear_solves, newton_iterations``.  One row per step; row ``k`` holds the
    state after step ``k``.  ``energy_polarised`` is the two-level energy of
    levels ``k-1, k``; ``local_residual`` is the max local-law residual
    centred on level ``k-1`` (empty unless enabled).
``timings.csv``
    ``step, assembly_seconds, solve_seconds, step_seconds``.  Kept out of
    ``trace.csv`` so that the trace is byte-identical between runs.
``fields_<t>.csv``
    ``node, x, u`` (1D) or ``node, x, y, u`` (2D, x-major node numbering).
``report.json``
    The resolved config, final errors, drift maxima and counter totals.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kdv, zk
from .grid import Field, Grid1D, Grid2D, diff_matrix
from .linalg import NEWTON_TOL, SolveStats, SolverError
from .multisymplectic import local_energy, lilep_step

PROBLEMS = ("kdv-tp1", "kdv-soliton", "zk-pulse", "custom")
SCHEMES = ("lilep", "ligep", "lep", "gep")
D_KINDS = ("central", "pseudospectral")
LINEAR_SCHEMES = ("lilep", "ligep")
MAX_DENSE_ENTRIES = 10**9

TRACE_COLUMNS = ("step", "t", "energy_polarised", "energy_plain", "local_residual",
                 "linear_solves", "newton_iterations")
TIMING_COLUMNS = ("step", "assembly_seconds", "solve_seconds", "step_seconds")

_CUSTOM_NAMES = {name: getattr(np, name) for name in
                 ("sin", "cos", "tan", "exp", "log", "sqrt", "cosh", "sinh", "tanh",
                  "pi", "abs", "mod", "where")}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Resolved description of one trajectory.

    ``D_kind`` and ``P`` default per problem when left as ``None``.  ``eta``,
    ``gamma`` and ``u0`` only apply to ``custom`` (a periodic KdV problem
    whose initial data is a numpy expression in ``x`` and ``P``).
    """

    problem: str = "kdv-soliton"
    scheme: str = "lilep"
    D_kind: str | None = None
    M: int = 250
    My: int | None = None
    dt: float = 0.01
    t_end: float = 1.0
    tol: float = NEWTON_TOL
    splitting: str = "half"
    seed: int = 0
    stride: int = 0
    out: str | None = None
    P: float | None = None
    c: float = 4.0
    amplitude: float = 0.1
    eta: float = 1.0
    gamma: float = 1.0
    u0: str = "cos(2*pi*x/P)"
    local_residual: bool = False
    max_dense_entries: int = MAX_DENSE_ENTRIES

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def is_2d(self) -> bool:
        return self.problem == "zk-pulse"

    def resolved(self) -> "RunConfig":
        """Fill per-problem defaults and validate."""
        cfg = self
        if cfg.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {cfg.problem!r}")
        if cfg.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {cfg.scheme!r}")
        if cfg.D_kind is None:
            cfg = cfg.replace(D_kind="pseudospectral" if cfg.problem == "kdv-tp1" else "central")
        if cfg.D_kind not in D_KINDS:
            raise ConfigError(f"D_kind must be one of {D_KINDS}, got {cfg.D_kind!r}")
        if cfg.P is None:
            cfg = cfg.replace(P={"kdv-tp1": 2.0, "kdv-soliton": 20.0,
                                 "zk-pulse": 30.0, "custom": 2.0}[cfg.problem])
        if cfg.is_2d and cfg.My is None:
            cfg = cfg.replace(My=cfg.M)
        if not cfg.dt > 0:
            raise ConfigError("dt must be positive")
        if not cfg.t_end >= cfg.dt:
            raise ConfigError("t_end must be at least dt")
        if abs(cfg.n_steps * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
            raise ConfigError("t_end must be a whole number of steps")
        if cfg.M < 4 or (cfg.My is not None and cfg.My < 4):
            raise ConfigError("grids need at least 4 nodes per direction")
        if cfg.stride < 0:
            raise ConfigError("stride must be >= 0")
        if cfg.local_residual and cfg.scheme != "lilep":
            raise ConfigError("the local-law residual is only tracked for lilep")
        cost = dense_cost(cfg)
        if cost > cfg.max_dense_entries:
            raise ConfigError(f"configuration needs ~{cost:.3g} dense matrix entries, "
                              f"above the guard of {cfg.max_dense_entries:.3g}")
        return cfg


def dense_cost(cfg: RunConfig) -> int:
    """Entries of the largest dense matrix a configuration would assemble."""
    n = cfg.M * (cfg.My or cfg.M) if cfg.is_2d else cfg.M
    cost = 0
    if cfg.scheme in ("ligep", "gep") and cfg.D_kind == "pseudospectral":
        cost = n * n
    if cfg.local_residual:
        l = 6 if cfg.is_2d else 4
        cost = max(cost, (l * n) ** 2)
    return cost


@dataclass
class RunReport:
    config: dict
    times: np.ndarray
    energy_polarised: np.ndarray
    energy_plain: np.ndarray
    local_residual: np.ndarray
    step_seconds: np.ndarray
    assembly_seconds: np.ndarray
    solve_seconds: np.ndarray
    linear_solves: np.ndarray
    newton_iterations: np.ndarray
    snapshots: dict = field(default_factory=dict)
    initial_energy_polarised: float = float("nan")
    initial_energy_plain: float = float("nan")
    eps_shape: float | None = None
    eps_phase: float | None = None
    l2_error: float | None = None
    final: Field | None = None

    @property
    def n_steps(self) -> int:
        return len(self.times)

    @property
    def conserved(self) -> str:
        return "polarised" if self.config["scheme"] in LINEAR_SCHEMES else "plain"

    def drift(self, which: str | None = None) -> float:
        """Max relative deviation of an energy trace from its first value."""
        which = which or self.conserved
        if which == "polarised":
            ref, tr = self.energy_polarised[0], self.energy_polarised
        else:
            ref, tr = self.initial_energy_plain, self.energy_plain
        return float(np.max(np.abs(tr - ref)) / max(abs(ref), 1e-300))

    @property
    def max_local_residual(self) -> float | None:
        r = self.local_residual[np.isfinite(self.local_residual)]
        return float(r.max()) if r.size else None

    def summary(self) -> dict:
        return {
            "config": self.config,
            "steps": self.n_steps,
            "t_final": float(self.times[-1]) if self.n_steps else 0.0,
            "conserved_energy": self.conserved,
            "drift_polarised": self.drift("polarised"),
            "drift_plain": self.drift("plain"),
            "max_local_residual": self.max_local_residual,
            "eps_shape": self.eps_shape,
            "eps_phase": self.eps_phase,
            "l2_error": self.l2_error,
            "totals": {
                "linear_solves": int(self.linear_solves.sum()),
                "newton_iterations": int(self.newton_iterations.sum()),
                "assembly_seconds": float(self.assembly_seconds.sum()),
                "solve_seconds": float(self.solve_seconds.sum()),
                "step_seconds": float(self.step_seconds.sum()),
            },
            "snapshot_steps": sorted(self.snapshots),
        }


# -- problem setup ----------------------------------------------------------------


@dataclass
class _Setup:
    u0: Field
    step: object
    pol: object
    plain: object
    zform: object = None
    exact: kdv.SolitonSpec | None = None
    params: object = None


def _kdv_setup(cfg: RunConfig) -> _Setup:
    spec = None
    if cfg.problem == "kdv-tp1":
        prob = kdv.test_problem_1(cfg.M)
        if cfg.P != 2.0:
            raise ConfigError("kdv-tp1 has a fixed period of 2")
        params, u0 = prob.params, prob.u0
    elif cfg.problem == "kdv-soliton":
        spec = kdv.SolitonSpec(c=cfg.c, P=cfg.P)
        params = kdv.soliton_params(cfg.M, spec)
        u0 = kdv.soliton_field(spec, params.grid)
    else:
        grid = Grid1D(cfg.M, cfg.P)
        params = kdv.KdVParams(eta=cfg.eta, gamma=cfg.gamma, grid=grid)
        try:
            vals = eval(cfg.u0, {"__builtins__": {}},  # noqa: S307
                        dict(_CUSTOM_NAMES, x=grid.x, P=cfg.P))
        except Exception as exc:
            raise ConfigError(f"cannot evaluate u0 expression {cfg.u0!r}: {exc}") from exc
        u0 = Field(grid, np.broadcast_to(np.asarray(vals, dtype=float), grid.shape))

    D = diff_matrix(params.grid, cfg.D_kind)
    s = cfg.scheme
    if s == "lilep":
        def step(u, st, n):
            return kdv.lilep_step_kdv(params, u, cfg.dt, stats=st, step=n)
    elif s == "ligep":
        def step(u, st, n):
            return kdv.ligep_step_kdv(params, D, u, cfg.dt, stats=st, step=n)
    elif s == "lep":
        def step(u, st, n):
            return kdv.lep_step_kdv(params, u, cfg.dt, cfg.tol, stats=st, step=n)
    else:
        def step(u, st, n):
            return kdv.gep_step_kdv(params, D, u, cfg.dt, cfg.tol, stats=st, step=n)

    if s in ("lilep", "lep"):
        def pol(a, b):
            return kdv.energy_lilep_kdv(params, a, b)

        def plain(a):
            return kdv.energy_lep_kdv(params, a)
    else:
        def pol(a, b):
            return kdv.energy_ligep_kdv(params, D, a, b)

        def plain(a):
            return kdv.energy_gep_kdv(params, D, a)

    zform = None
    if cfg.local_residual:
        sys = kdv.kdv_mssystem(params, cfg.splitting)

        def zform():
            z, jumps = kdv.kdv_initial_zstate(params, u0, dt=cfg.dt, sys=sys)
            return sys, params.grid, jumps, z, kdv.U
    return _Setup(u0, step, pol, plain, zform, spec, params)


def _zk_setup(cfg: RunConfig) -> _Setup:
    params = zk.ZKParams(Grid2D(cfg.M, cfg.My, cfg.P, cfg.P), c=cfg.c, seed=cfg.seed,
                         amplitude=cfg.amplitude)
    u0 = zk.init_pulse(params)
    g = params.grid
    s = cfg.scheme
    if s in ("ligep", "gep"):
        Dx = diff_matrix(Grid1D(g.Mx, g.Px), cfg.D_kind)
        Dy = diff_matrix(Grid1D(g.My, g.Py), cfg.D_kind)
    if s == "lilep":
        def step(u, st, n):
            return zk.lilep_step_zk(params, u, cfg.dt, stats=st, step=n)
    elif s == "ligep":
        def step(u, st, n):
            return zk.ligep_step_zk(params, Dx, Dy, u, cfg.dt, stats=st, step=n)
    elif s == "lep":
        def step(u, st, n):
            return zk.lep_step_zk(params, u, cfg.dt, cfg.tol, stats=st, step=n)
    else:
        def step(u, st, n):
            return zk.gep_step_zk(params, Dx, Dy, u, cfg.dt, cfg.tol, stats=st, step=n)

    if s in ("lilep", "lep"):
        def pol(a, b):
            return zk.energy_lilep_zk(params, a, b)

        def plain(a):
            return zk.energy_lep_zk(params, a)
    else:
        def pol(a, b):
            return zk.energy_ligep_zk(params, Dx, Dy, a, b)

        def plain(a):
            return zk.energy_gep_zk(params, Dx, Dy, a)

    zform = None
    if cfg.local_residual:
        sys = zk.zk_mssystem(cfg.splitting)

        def zform():
            z, jumps = zk.zk_initial_zstate(g, u0, dt=cfg.dt, sys=sys)
            return sys, g, jumps, z, zk.U
    return _Setup(u0, step, pol, plain, zform, None, params)


def setup(cfg: RunConfig) -> _Setup:
    return _zk_setup(cfg) if cfg.is_2d else _kdv_setup(cfg)


# -- running ------------------------------------------------------------------------


def _snapshot_due(n: int, cfg: RunConfig, n_steps: int) -> bool:
    return n == 0 or n == n_steps or (cfg.stride > 0 and n % cfg.stride == 0)


def run(config: RunConfig, *, write: bool | None = None) -> RunReport:
    """Run one trajectory; write its files when ``config.out`` is set."""
    cfg = config.resolved()
    st = setup(cfg)
    n_steps = cfg.n_steps
    cols = {k: np.full(n_steps, np.nan) for k in
            ("times", "pol", "plain", "res", "wall", "asm", "sol")}
    solves = np.zeros(n_steps, dtype=int)
    newton_its = np.zeros(n_steps, dtype=int)
    snaps = {}

    u = st.u0
    snaps[0] = u
    zstate = None
    if st.zform is not None:
        sys, zgrid, jumps, z, comp = st.zform()
        zstate = [z]

    e_plain0 = st.plain(u)
    for n in range(n_steps):
        stats = SolveStats()
        t0 = time.perf_counter()
        try:
            if zstate is None:
                u_new = st.step(u, stats, n)
            else:
                z_new = lilep_step(sys, zgrid, zstate[-1], cfg.dt, jumps=jumps, stats=stats,
                                   step=n)
                u_new = Field(u.grid, z_new[..., comp], u.n + 1)
        except SolverError as exc:
            exc.info.setdefault("step", n)
            exc.info["config"] = cfg.to_dict()
            raise
        cols["wall"][n] = time.perf_counter() - t0
        cols["asm"][n] = stats.assembly_seconds
        cols["sol"][n] = stats.solve_seconds
        solves[n] = stats.linear_solves
        newton_its[n] = stats.newton_iterations
        cols["times"][n] = (n + 1) * cfg.dt
        cols["pol"][n] = st.pol(u, u_new)
        cols["plain"][n] = st.plain(u_new)
        if zstate is not None:
            zstate.append(z_new)
            if len(zstate) == 3:
                rep = local_energy(sys, zgrid, *zstate, dt=cfg.dt, jumps=jumps)
                cols["res"][n] = rep.max_abs_residual
                zstate.pop(0)
        u = u_new
        if _snapshot_due(n + 1, cfg, n_steps):
            snaps[n + 1] = u

    report = RunReport(
        config=cfg.to_dict(), times=cols["times"], energy_polarised=cols["pol"],
        energy_plain=cols["plain"], local_residual=cols["res"], step_seconds=cols["wall"],
        assembly_seconds=cols["asm"], solve_seconds=cols["sol"], linear_solves=solves,
        newton_iterations=newton_its, snapshots=snaps,
        initial_energy_plain=float(e_plain0), final=u)
    if n_steps:
        report.initial_energy_polarised = float(cols["pol"][0])
    if st.exact is not None:
        t = n_steps * cfg.dt
        report.eps_shape, report.eps_phase = kdv.shape_phase_errors(u, st.exact, t)
        report.l2_error = kdv.weighted_l2_error(st.params, u, st.exact, t)
    if write if write is not None else cfg.out is not None:
        if cfg.out is None:
            raise ConfigError("no output directory configured")
        write_report(report, cfg.out)
    return report


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, int, np.integer)):
        return str(int(v))
    if v is None or not np.isfinite(v):
        return ""
    return repr(float(v))


def _atomic_write(path: Path, writer):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _csv_writer(header, rows):
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return write


def field_rows(u: Field):
    g = u.grid
    if g.ndim == 1:
        for j, (x, v) in enumerate(zip(g.x, u.values)):
            yield j, x, v
    else:
        for k in range(g.My):
            for j in range(g.Mx):
                yield j + g.Mx * k, g.x[j], g.y[k], u.values[j, k]


def time_label(t: float) -> str:
    return f"{t:.10g}"


def write_report(report: RunReport, out) -> Path:
    out = Path(out)
    n = report.n_steps
    steps = range(1, n + 1)
    trace = zip(steps, report.times, report.energy_polarised, report.energy_plain,
                report.local_residual, report.linear_solves, report.newton_iterations)
    _atomic_write(out / "trace.csv", _csv_writer(TRACE_COLUMNS, trace))
    timing = zip(steps, report.assembly_seconds, report.solve_seconds, report.step_seconds)
    _atomic_write(out / "timings.csv", _csv_writer(TIMING_COLUMNS, timing))
    dt = report.config["dt"]
    for k, u in report.snapshots.items():
        header = ("node", "x", "u") if u.grid.ndim == 1 else ("node", "x", "y", "u")
        _atomic_write(out / f"fields_{time_label(k * dt)}.csv",
                      _csv_writer(header, field_rows(u)))
    summary = report.summary()
    _atomic_write(out / "report.json",
                  lambda fh: json.dump(summary, fh, indent=2, sort_keys=True))
    return out


# -- studies --------------------------------------------------------------------------


def converge(base: RunConfig, axis: str, levels) -> list[dict]:
    """Error at ``base.t_end`` against the exact soliton over refinement levels.

    ``axis='space'`` takes grid sizes ``M``, ``axis='time'`` takes step sizes.
    Each row holds ``h``, the discrete L2 error and the observed order
    relative to the previous level.
    """
    if base.problem != "kdv-soliton":
        raise ConfigError("convergence studies need the soliton problem")
    if axis not in ("space", "time"):
        raise ConfigError("axis must be 'space' or 'time'")
    rows = []
    for level in levels:
        if axis == "space":
            cfg = base.replace(M=int(level), out=None, stride=0)
        else:
            cfg = base.replace(dt=float(level), out=None, stride=0)
        cfg = cfg.resolved()
        rep = run(cfg, write=False)
        h = cfg.P / cfg.M if axis == "space" else cfg.dt
        row = {"level": level, "h": h, "error": rep.l2_error, "order": None}
        if rows:
            prev = rows[-1]
            row["order"] = float(np.log(prev["error"] / row["error"]) / np.log(prev["h"] / h))
        rows.append(row)
    return rows


def bench(configs, repeats: int = 3) -> list[dict]:
    """Median stepping wall time of each config over ``repeats`` runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = []
    for cfg in configs:
        cfg = cfg.replace(out=None, stride=0).resolved()
        walls, reps = [], []
        for _ in range(repeats):
            rep = run(cfg, write=False)
            walls.append(float(rep.step_seconds.sum()))
            reps.append(rep)
        rep = reps[-1]
        n = max(rep.n_steps, 1)
        out.append({
            "problem": cfg.problem, "scheme": cfg.scheme, "D_kind": cfg.D_kind,
            "M": cfg.M, "My": cfg.My, "dt": cfg.dt, "t_end": cfg.t_end,
            "median_seconds": statistics.median(walls), "all_seconds": walls,
            "assembly_seconds": float(rep.assembly_seconds.sum()),
            "solve_seconds": float(rep.solve_seconds.sum()),
            "linear_solves_per_step": float(rep.linear_solves.sum()) / n,
            "newton_iterations_per_step": float(rep.newton_iterations.sum()) / n,
            "min_linear_solves": int(rep.linear_solves.min()) if rep.n_steps else 0,
            "min_newton_iterations": int(rep.newton_iterations.min()) if rep.n_steps else 0,
        })
    return out


def write_rows(path, rows: list[dict]):
    if not rows:
        raise ValueError("nothing to write")
    header = [k for k in rows[0] if not isinstance(rows[0][k], list)]
    _atomic_write(Path(path), _csv_writer(header, ([r[k] for k in header] for r in rows)))
