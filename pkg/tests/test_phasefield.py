import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinodal_kbnn.phasefield import (
    BoundaryConditions,
    FieldState,
    GridSpec,
    InvalidInputError,
    MaterialParams,
    NewtonLog,
    SimConfig,
    chemical_potential,
    discrete_total_energy,
    gradient_energy,
    green_lagrange,
    homogeneous_energy,
    mech_density_derivs,
    reparam_strains,
    run_simulation,
    solve_mechanical_equilibrium,
    step_cahn_hilliard,
    stresses,
)
from spinodal_kbnn.homogenize import average_deformation_gradient

P = MaterialParams()


def _state(c, u=None, grid=None):
    grid = grid or GridSpec(13, 11)
    c = np.broadcast_to(np.asarray(c, dtype=float), grid.shape).copy()
    u = np.zeros((2, *grid.shape)) if u is None else u
    return FieldState(c, np.zeros(grid.shape), u)


# -- pointwise kinematics and energies


def test_green_lagrange_identity_and_stretch():
    assert np.allclose(green_lagrange(np.eye(2)), 0.0)
    E = green_lagrange(np.diag([1.001, 1.0]))
    assert E[0, 0] == pytest.approx(1.0005e-3, rel=1e-12)
    assert E[0, 1] == 0.0 and E[1, 1] == 0.0


@given(st.floats(-np.pi, np.pi))
def test_green_lagrange_rigid_rotation(theta):
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert np.abs(green_lagrange(R)).max() < 1e-15


def test_green_lagrange_rejects_nan():
    with pytest.raises(InvalidInputError):
        green_lagrange(np.array([[np.nan, 0], [0, 1]]))


def test_reparam_strains_examples():
    e1, e2, e3 = reparam_strains(np.array([[1e-3, 0.0], [0.0, 1e-3]]))
    assert e2 == 0.0 and e3 == 0.0
    e1, e2, e3 = reparam_strains(np.array([[1e-3, 0.0], [0.0, 0.0]]))
    assert e1 == pytest.approx(7.0711e-4, rel=1e-4) and e2 == pytest.approx(7.0711e-4, rel=1e-4)
    _, _, e3 = reparam_strains(np.array([[0.0, 1e-3], [1e-3, 0.0]]))
    assert e3 == pytest.approx(1.41421e-3, rel=1e-5)


def test_homogeneous_energy_values():
    assert homogeneous_energy(0.0, (0.0, 0.0, 0.0), P) == 0.0
    assert homogeneous_energy(0.5, (0.0, 0.0, 0.0), P) == pytest.approx(2.0, rel=1e-14)


def test_homogeneous_energy_rect_phase_minima():
    def dF(e2, h=1e-7):
        return (homogeneous_energy(1.0, (0, e2 + h, 0), P) - homogeneous_energy(1.0, (0, e2 - h, 0), P)) / (2 * h)

    for e2 in (P.s_e, -P.s_e):
        assert abs(dF(e2)) < 1e-6
    assert dF(0.05) < 0 < dF(0.15)


def test_gradient_energy_examples():
    assert gradient_energy([0, 0], [0, 0], P) == 0.0
    assert gradient_energy([1, 0], [0, 0], P) == pytest.approx(5e-7, rel=1e-14)
    assert gradient_energy([0, 0], [0, 2], P) == pytest.approx(2e-6, rel=1e-14)


def test_density_stress_matches_fd():
    rng = np.random.default_rng(4)
    for _ in range(20):
        f = np.eye(2).ravel() + 3e-2 * rng.standard_normal(4)
        c = rng.random()
        W, Pf, H = mech_density_derivs(f, c, P)
        fd = np.empty(4)
        for k in range(4):
            d = np.zeros(4)
            d[k] = 1e-7
            fd[k] = (mech_density_derivs(f + d, c, P, False)[0] - mech_density_derivs(f - d, c, P, False)[0]) / 2e-7
        assert np.max(np.abs(fd - Pf)) <= 1e-6 * np.max(np.abs(Pf))
        fdH = np.stack(
            [(mech_density_derivs(f + d, c, P, False)[1] - mech_density_derivs(f - d, c, P, False)[1]) / 2e-7
             for d in 1e-7 * np.eye(4)]
        )  # fmt: skip
        assert np.max(np.abs(fdH - H)) <= 1e-5 * np.max(np.abs(H))


# -- fields


def test_chemical_potential_uniform_zero():
    for c in (0.0, 0.5):
        assert np.abs(chemical_potential(_state(c), GridSpec(13, 11), P)).max() < 1e-12


def test_chemical_potential_matches_energy_fd():
    g = GridSpec(13, 11)
    rng = np.random.default_rng(0)
    c = 0.5 + 0.3 * rng.standard_normal(g.shape)
    u = 1e-4 * g.Lx * rng.standard_normal((2, *g.shape))
    mu = chemical_potential(_state(c, u, g), g, P)
    W = g.weights()
    for _ in range(20):
        j, i = rng.integers(g.ny), rng.integers(g.nx)
        cp, cm = c.copy(), c.copy()
        cp[j, i] += 1e-6
        cm[j, i] -= 1e-6
        fd = (discrete_total_energy(cp, u, g, P) - discrete_total_energy(cm, u, g, P)) / 2e-6 / W[j, i]
        assert abs(fd - mu[j, i]) <= 1e-6 * abs(mu[j, i])


def test_stresses_zero_state():
    g = GridSpec(9, 9)
    Pn, B = stresses(_state(0.0, grid=g), g, P)
    assert np.abs(Pn).max() == 0.0 and np.abs(B).max() == 0.0


def test_stresses_uniform_strain_match_density_fd():
    g = GridSpec(9, 9)
    H = np.array([[2e-3, 5e-4], [-3e-4, 1e-3]])
    X, Y = g.coords()
    u = np.stack([H[0, 0] * X + H[0, 1] * Y, H[1, 0] * X + H[1, 1] * Y])
    Pn, B = stresses(_state(0.3, u, g), g, P)
    assert np.abs(B).max() < 1e-12 * P.lambda_e
    f = (np.eye(2) + H).ravel()
    fd = np.array(
        [(mech_density_derivs(f + d, 0.3, P, False)[0] - mech_density_derivs(f - d, 0.3, P, False)[0]) / 2e-8
         for d in 1e-8 * np.eye(4)]
    )  # fmt: skip
    assert np.allclose(Pn[4, 4].ravel(), fd, rtol=1e-6, atol=0)


# -- mechanics


def test_equilibrium_trivial():
    g = GridSpec(9, 9)
    u = solve_mechanical_equilibrium(_state(0.0, grid=g), BoundaryConditions(), g, P)
    assert np.abs(u).max() == 0.0


def test_equilibrium_affine_under_biaxial_load():
    g = GridSpec(15, 13)
    bc = BoundaryConditions(2e-5, -1e-5)
    u = solve_mechanical_equilibrium(_state(0.0, grid=g), bc, g, P, tol=1e-10)
    F = average_deformation_gradient(_state(0.0, u, g), g)
    expect = np.diag([1 + 2e-5 / g.Lx, 1 - 1e-5 / g.Ly])
    assert np.abs(F - expect).max() <= 1e-8 * np.abs(expect).max()


def test_newton_residuals_decrease():
    g = GridSpec(21, 21)
    c = (np.add.outer(np.arange(21), np.arange(21)) % 10 > 4) * 1.0
    bc = BoundaryConditions(1e-5, 2e-5)
    log = NewtonLog()
    solve_mechanical_equilibrium(_state(c, bc.affine_guess(g), g), bc, g, P, tol=1e-9, log_out=log)
    assert log.converged
    energies = np.asarray(log.energies)
    assert np.all(np.diff(energies) <= 1e-12 * np.abs(energies).max())
    assert log.residuals[-1] < log.residuals[0]


# -- Cahn-Hilliard stepping


def test_uniform_state_is_steady():
    g = GridSpec(11, 11)
    s0 = _state(0.46, grid=g)
    s1 = step_cahn_hilliard(s0, 2e-9, g, P)
    assert np.abs(s1.c - s0.c).max() < 1e-14


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_step_conserves_mass_and_dissipates(seed):
    g = GridSpec(13, 13)
    rng = np.random.default_rng(seed)
    s0 = _state(0.46 + 0.05 * rng.uniform(-1, 1, g.shape), grid=g)
    s1 = step_cahn_hilliard(s0, 2e-9, g, P)
    W = g.weights()
    assert abs((W * s1.c).sum() - (W * s0.c).sum()) <= 1e-10 * abs((W * s0.c).sum())
    e0 = discrete_total_energy(s0.c, s0.u, g, P)
    e1 = discrete_total_energy(s1.c, s1.u, g, P)
    assert e1 <= e0 + 1e-10 * abs(e0)


def test_no_fluctuation_no_decomposition():
    g = GridSpec(11, 11)
    cfg = SimConfig(steps=5, discard=0, c0_amplitude=0.0, u0_noise=0.0)
    frames = run_simulation(cfg, BoundaryConditions(), g, P)
    assert len(frames) == 5
    for f in frames:
        assert np.abs(f.c - 0.46).max() < 1e-12


def test_simulation_is_deterministic():
    g = GridSpec(11, 11)
    cfg = SimConfig(steps=4, discard=0, seed=7)
    a = run_simulation(cfg, BoundaryConditions(1e-5, 0.0), g, P)
    b = run_simulation(cfg, BoundaryConditions(1e-5, 0.0), g, P)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.c, fb.c) and np.array_equal(fa.u, fb.u)


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        SimConfig(steps=10, discard=10)
    with pytest.raises(InvalidInputError):
        MaterialParams(d_c=-1.0)
    with pytest.raises(InvalidInputError):
        GridSpec(4, 4)
