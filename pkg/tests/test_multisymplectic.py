import numpy as np
import pytest

from msplin.cubic import CubicForm
from msplin.grid import Grid1D, central_diff_matrix, pseudospectral_diff_matrix
from msplin.kdv import (PHI, U, V, W, SolitonSpec, kdv_initial_zstate, kdv_mssystem,
                        lilep_step_kdv, soliton_field, soliton_params)
from msplin.linalg import SolverError, SolveStats
from msplin.multisymplectic import (MSSystem, energy_global_plain, energy_local_plain,
                                    gep_step, global_energy_ligep, global_energy_polarised,
                                    lep_step, ligep_step, lilep_step, local_energy,
                                    modified_energy_ligep, modified_energy_lilep, split_matrix)

SPEC = SolitonSpec()
DT = 1e-3


@pytest.fixture(scope="module")
def kdv63():
    p = soliton_params(63)
    return p, kdv_mssystem(p), soliton_field(SPEC, p.grid).values


@pytest.fixture(scope="module")
def lilep_traj(kdv63):
    p, sys, u = kdv63
    z, jumps = kdv_initial_zstate(p, u, dt=DT, sys=sys)
    zs = [z]
    for _ in range(6):
        zs.append(lilep_step(sys, p.grid, zs[-1], DT, jumps=jumps))
    return zs, jumps


def zero_mean_state(p, sys, u, D=None):
    z, jumps = kdv_initial_zstate(p, u - u.mean(), D=D, dt=DT, sys=sys)
    assert np.max(np.abs(jumps)) <= 1e-13
    return z


def test_splittings():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 4))
    A = X - X.T
    for s in ("half", "upper"):
        Ap = split_matrix(A, s)
        np.testing.assert_array_equal(Ap - Ap.T, A)
    with pytest.raises(ValueError):
        split_matrix(A, "lower-left")


def test_kdv_system_matrices(kdv63):
    p, sys, _ = kdv63
    assert sys.l == 4 and sys.d == 1
    assert sys.K[0, 1] == 0.5 and sys.L[0][0, 3] == 1.0 and sys.L[0][1, 2] == -p.gamma
    np.testing.assert_array_equal(sys.K + sys.K.T, 0)
    np.testing.assert_array_equal(sys.Kplus - sys.Kplus.T, sys.K)
    for L, Lp in zip(sys.L, sys.Lplus):
        np.testing.assert_array_equal(Lp - Lp.T, L)


def test_mssystem_validation():
    S = CubicForm.from_terms(2, quadratic=[((0, 0), 1.0)])
    with pytest.raises(ValueError):
        MSSystem.create(np.eye(2), [np.zeros((2, 2))], S)


def test_single_node_grid_rejected():
    with pytest.raises(ValueError):
        Grid1D(1, 1.0)


def test_constant_steady_state(kdv63):
    p, sys, _ = kdv63
    a = 0.7
    z, jumps = kdv_initial_zstate(p, np.full(63, a), sys=sys)
    np.testing.assert_allclose(z[:, W], p.eta * a * a / 2)
    np.testing.assert_allclose(z[:, V], 0.0, atol=1e-12)
    z1 = lilep_step(sys, p.grid, z, DT, jumps=jumps)
    np.testing.assert_allclose(z1[:, U], a, atol=1e-12)
    D = central_diff_matrix(p.grid)
    zg, jg = kdv_initial_zstate(p, np.full(63, a), D=D, sys=sys)
    np.testing.assert_allclose(ligep_step(sys, p.grid, D, zg, DT, jumps=jg)[:, U], a,
                               atol=1e-12)
    rep = local_energy(sys, p.grid, z, z1, lilep_step(sys, p.grid, z1, DT, jumps=jumps),
                       DT, jumps=jumps)
    assert rep.max_abs_residual <= 1e-10


def test_spatially_constant_state_flux(kdv63):
    p, sys, _ = kdv63
    z = np.zeros((63, 4))
    z[:, PHI] = 0.3
    z1 = lilep_step(sys, p.grid, z, DT)
    z2 = lilep_step(sys, p.grid, z1, DT)
    rep = local_energy(sys, p.grid, z, z1, z2, DT)
    assert np.ptp(rep.flux[0]) <= 1e-14
    assert rep.max_abs_residual <= 1e-14


def test_zero_state(kdv63):
    p, sys, _ = kdv63
    z = np.zeros((63, 4))
    np.testing.assert_array_equal(lilep_step(sys, p.grid, z, DT), 0.0)
    D = central_diff_matrix(p.grid)
    np.testing.assert_array_equal(ligep_step(sys, p.grid, D, z, DT), 0.0)


def test_lilep_matches_reduced(kdv63, lilep_traj):
    p, _, u = kdv63
    zs, _ = lilep_traj
    us = [u]
    for _ in range(len(zs) - 1):
        us.append(lilep_step_kdv(p, us[-1], DT))
    assert max(np.max(np.abs(z[:, U] - v)) for z, v in zip(zs, us)) <= 1e-9


def test_local_energy_law(kdv63, lilep_traj):
    p, sys, _ = kdv63
    zs, jumps = lilep_traj
    for n in range(len(zs) - 2):
        rep = local_energy(sys, p.grid, zs[n], zs[n + 1], zs[n + 2], DT, jumps=jumps)
        scale = max(1.0, np.max(np.abs(rep.density)))
        assert rep.max_abs_residual <= 1e-10 * scale
        total = global_energy_polarised(sys, p.grid, zs[n], zs[n + 1], jumps=jumps)
        assert np.sum(rep.density) * p.grid.dx == pytest.approx(total, abs=1e-13)


def test_local_energy_needs_third_snapshot(kdv63, lilep_traj):
    p, sys, _ = kdv63
    zs, jumps = lilep_traj
    rep = local_energy(sys, p.grid, zs[0], zs[1], jumps=jumps)
    assert rep.residual is None
    with pytest.raises(ValueError):
        rep.max_abs_residual
    with pytest.raises(ValueError):
        local_energy(sys, p.grid, zs[0], zs[1], residual=True, jumps=jumps)


def test_boundary_flux_accounts_for_seam(kdv63, lilep_traj):
    # with a potential that grows by the mass per period the global energy
    # changes by exactly the seam flux
    p, sys, _ = kdv63
    zs, jumps = lilep_traj
    E = [global_energy_polarised(sys, p.grid, zs[n], zs[n + 1], jumps=jumps)
         for n in range(len(zs) - 1)]
    for n in range(len(zs) - 2):
        rep = local_energy(sys, p.grid, zs[n], zs[n + 1], zs[n + 2], DT, jumps=jumps)
        assert (E[n + 1] - E[n]) / DT + rep.boundary_flux == pytest.approx(0, abs=1e-9)


@pytest.mark.parametrize("splitting", ["half", "upper"])
def test_global_polarised_energy_conserved(kdv63, splitting):
    p, _, u = kdv63
    sys = kdv_mssystem(p, splitting)
    z = zero_mean_state(p, sys, u)
    E = []
    for _ in range(100):
        z1 = lilep_step(sys, p.grid, z, DT)
        E.append(global_energy_polarised(sys, p.grid, z, z1))
        z = z1
    assert np.ptp(E) <= 1e-10 * abs(E[0])


def test_splitting_changes_flux_not_total(kdv63):
    p, _, u = kdv63
    a, b = kdv_mssystem(p, "half"), kdv_mssystem(p, "upper")
    z0 = zero_mean_state(p, a, u)
    z1 = lilep_step(a, p.grid, z0, DT)
    z2 = lilep_step(a, p.grid, z1, DT)
    ra = local_energy(a, p.grid, z0, z1, z2, DT)
    rb = local_energy(b, p.grid, z0, z1, z2, DT)
    assert np.max(np.abs(ra.flux[0] - rb.flux[0])) > 1e-6
    assert rb.max_abs_residual <= 1e-10 * max(1, np.max(np.abs(rb.density)))


def test_modified_energy_lilep(kdv63, lilep_traj):
    p, sys, _ = kdv63
    zs, jumps = lilep_traj
    plain, pol, _ = modified_energy_lilep(sys, p.grid, zs[0], DT, jumps=jumps)
    direct = global_energy_polarised(sys, p.grid, zs[0], zs[1], jumps=jumps)
    assert abs(pol - direct) <= 1e-12 * max(1, abs(direct))
    assert plain == pytest.approx(energy_local_plain(sys, p.grid, zs[0], jumps=jumps))


def test_modified_energy_gap_order(kdv63):
    # gap = grad(E).dz / 3 with dz = dt f + O(dt^2) and grad(E).f = 0, so O(dt^2)
    p, sys, u = kdv63
    gaps = []
    for dt in (4e-3, 2e-3):
        z, jumps = kdv_initial_zstate(p, u, dt=dt, sys=sys)
        plain, pol, _ = modified_energy_lilep(sys, p.grid, z, dt, jumps=jumps)
        gaps.append(abs(pol - plain))
    assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.1)


def test_modified_energy_constant_field(kdv63):
    p, sys, _ = kdv63
    z, jumps = kdv_initial_zstate(p, np.full(63, 0.4), sys=sys)
    plain, pol, dz = modified_energy_lilep(sys, p.grid, z, DT, jumps=jumps)
    assert pol == pytest.approx(plain, rel=1e-12)


@pytest.fixture(scope="module")
def ligep_traj(kdv63):
    p, sys, u = kdv63
    D = central_diff_matrix(p.grid)
    z, jumps = kdv_initial_zstate(p, u, D=D, dt=DT, sys=sys)
    zs = [z]
    for _ in range(10):
        zs.append(ligep_step(sys, p.grid, D, zs[-1], DT, jumps=jumps))
    return D, zs, jumps


def test_ligep_matches_reduced(kdv63, ligep_traj):
    from msplin.kdv import ligep_step_kdv
    p, _, u = kdv63
    D, zs, _ = ligep_traj
    us = [u]
    for _ in range(len(zs) - 1):
        us.append(ligep_step_kdv(p, D, us[-1], DT))
    assert max(np.max(np.abs(z[:, U] - v)) for z, v in zip(zs, us)) <= 1e-9


def test_even_grid_central_constraints_inconsistent():
    # the checkerboard mode is outside the range of central D when M is even
    p = soliton_params(64)
    D = central_diff_matrix(p.grid)
    with pytest.raises(SolverError):
        kdv_initial_zstate(p, soliton_field(SPEC, p.grid).values, D=D)


def test_modified_energy_ligep(kdv63, ligep_traj):
    p, sys, _ = kdv63
    D, zs, jumps = ligep_traj
    plain, pol, _ = modified_energy_ligep(sys, p.grid, D, zs[0], DT, jumps=jumps)
    direct = global_energy_ligep(sys, p.grid, D, zs[0], zs[1], jumps=jumps)
    assert abs(pol - direct) <= 1e-12 * max(1, abs(direct))
    assert plain == pytest.approx(energy_global_plain(sys, p.grid, D, zs[0], jumps=jumps))


def test_ligep_energy_conserved_pseudospectral(kdv63):
    p, sys, u = kdv63
    D = pseudospectral_diff_matrix(p.grid)
    z = zero_mean_state(p, sys, u, D=D)
    E = []
    for _ in range(100):
        z1 = ligep_step(sys, p.grid, D, z, DT)
        E.append(global_energy_ligep(sys, p.grid, D, z, z1))
        z = z1
    assert np.ptp(E) <= 1e-10 * abs(E[0])


def test_constant_field_global_energy_closed_form(kdv63):
    p, sys, _ = kdv63
    D = pseudospectral_diff_matrix(p.grid)
    z = np.zeros((63, 4))
    z[:, U], z[:, W] = 0.5, p.eta * 0.125
    expected = p.grid.P * float(sys.S(z[0]))
    assert global_energy_ligep(sys, p.grid, D, z, z) == pytest.approx(expected, rel=1e-13)


def test_linear_solve_counts(kdv63, lilep_traj):
    p, sys, u = kdv63
    zs, jumps = lilep_traj
    st_lin, st_newton = SolveStats(), SolveStats()
    lilep_step(sys, p.grid, zs[0], DT, jumps=jumps, stats=st_lin)
    lep_step(sys, p.grid, zs[0], DT, jumps=jumps, stats=st_newton)
    assert st_lin.linear_solves == 1 and st_lin.newton_iterations == 0
    assert st_newton.newton_iterations >= 2


@pytest.mark.slow
def test_fully_implicit_plain_energies(kdv63):
    p, sys, u = kdv63
    z = zero_mean_state(p, sys, u)
    E0 = energy_local_plain(sys, p.grid, z)
    worst = 0.0
    for _ in range(50):
        z = lep_step(sys, p.grid, z, DT)
        worst = max(worst, abs(energy_local_plain(sys, p.grid, z) - E0))
    assert worst <= 1e-9 * abs(E0)

    D = central_diff_matrix(p.grid)
    z = zero_mean_state(p, sys, u, D=D)
    E0 = energy_global_plain(sys, p.grid, D, z)
    worst = 0.0
    for _ in range(50):
        z = gep_step(sys, p.grid, D, z, DT)
        worst = max(worst, abs(energy_global_plain(sys, p.grid, D, z) - E0))
    assert worst <= 1e-9 * abs(E0)


def test_constant_state_fully_implicit(kdv63):
    p, sys, _ = kdv63
    z, jumps = kdv_initial_zstate(p, np.full(63, -0.3), sys=sys)
    np.testing.assert_allclose(lep_step(sys, p.grid, z, DT, jumps=jumps)[:, U], -0.3,
                               atol=1e-12)


def test_potential_components_match_constraints(kdv63):
    p, sys, u = kdv63
    z, jumps = kdv_initial_zstate(p, u, sys=sys)
    # box form of phi_x = u: delta_x phi = mu_x u, with the seam jump
    dphi = (np.roll(z[:, PHI], -1) - z[:, PHI]) / p.grid.dx
    dphi[-1] += jumps[PHI] / p.grid.dx
    np.testing.assert_allclose(dphi, 0.5 * (u + np.roll(u, -1)), atol=1e-9)
