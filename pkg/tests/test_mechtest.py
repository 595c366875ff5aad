import numpy as np
import pytest

from spinodal_kbnn.homogenize import homogenize
from spinodal_kbnn.mechtest import (
    DE_NORMAL_RANGE,
    DE_SHEAR_RANGE,
    FrozenFrameTester,
    PerturbationSpec,
    perturbed_boundary,
    run_mech_test,
    sample_loadings,
    select_frames,
)
from spinodal_kbnn.phasefield import (
    BoundaryConditions,
    FieldState,
    GridSpec,
    MaterialParams,
    solve_mechanical_equilibrium,
)

P = MaterialParams()
G = GridSpec(17, 17)


def _frame(c):
    bc = BoundaryConditions(1e-5, 2e-5)
    s = FieldState(np.broadcast_to(c, G.shape).astype(float).copy(), np.zeros(G.shape), bc.affine_guess(G))
    s.u = solve_mechanical_equilibrium(s, bc, G, P, tol=1e-10)
    return s


@pytest.fixture(scope="module")
def striped():
    return _frame((np.add.outer(np.arange(17), np.arange(17)) % 8 > 3) * 1.0)


def test_sampling_is_reproducible():
    assert sample_loadings(1, 42, G) == sample_loadings(1, 42, G)
    assert sample_loadings(3, 1, G) != sample_loadings(3, 2, G)


def test_sampled_strains_in_range():
    for spec in sample_loadings(1600, 0, G):
        d11, d22, d12 = spec.target_strain(G)
        assert abs(d11) <= DE_NORMAL_RANGE and abs(d22) <= DE_NORMAL_RANGE
        assert abs(d12) <= DE_SHEAR_RANGE


def test_sampled_mean_near_midpoint():
    d = np.array([s.target_strain(G)[0] for s in sample_loadings(10_000, 3, G)])
    sigma = 2 * DE_NORMAL_RANGE / np.sqrt(12) / np.sqrt(len(d))
    assert abs(d.mean()) < 3 * sigma


def test_zero_increment_is_noop(striped):
    base = homogenize(striped, G, P)
    rec = run_mech_test(striped, PerturbationSpec(), G, P, tol=1e-10)
    assert abs(rec.delta_psi) <= 1e-10 * abs(base.Psi_mech)
    assert np.abs(rec.P_avg - base.P_avg).max() <= 1e-10 * np.abs(base.P_avg).max()


def test_symmetric_response_on_uniform_frame():
    frame = _frame(0.0)
    t = FrozenFrameTester(frame, G, P)
    d = 1e-8
    up = t.run(PerturbationSpec(d * G.Lx, 0, 0), tol=1e-11).delta_psi
    dn = t.run(PerturbationSpec(-d * G.Lx, 0, 0), tol=1e-11).delta_psi
    # first-order parts cancel; the remainder is second order in the increment
    assert abs(up + dn) <= 1e-4 * abs(up - dn)


def test_tests_oscillate_around_base(striped):
    t = FrozenFrameTester(striped, G, P, "m")
    recs = [t.run(s, i, tol=1e-9) for i, s in enumerate(sample_loadings(12, 5, G))]
    dpsi = np.array([r.delta_psi for r in recs])
    assert (dpsi > 0).any() and (dpsi < 0).any()
    assert np.abs(dpsi).max() < 0.1 * abs(t.base.Psi_mech)


def test_frozen_tester_matches_full_newton(striped):
    spec = sample_loadings(1, 9, G)[0]
    fast = FrozenFrameTester(striped, G, P).run(spec, tol=1e-10)
    bc = perturbed_boundary(striped, spec, G)
    trial = FieldState(striped.c, striped.mu, striped.u.copy())
    trial.u = solve_mechanical_equilibrium(trial, bc, G, P, tol=1e-10)
    slow = homogenize(trial, G, P)
    assert fast.Psi_mech == pytest.approx(slow.Psi_mech, rel=1e-9)
    assert np.allclose(fast.P_avg, slow.P_avg, rtol=1e-6, atol=1e-12)


def test_stress_is_energy_derivative(striped):
    t = FrozenFrameTester(striped, G, P)
    h = 1e-7
    plus = t.run(PerturbationSpec(h, 0, 0), tol=1e-9).Psi_mech
    minus = t.run(PerturbationSpec(-h, 0, 0), tol=1e-9).Psi_mech
    assert (plus - minus) / (2 * h / G.Lx) == pytest.approx(t.base.P_avg[0, 0], rel=1e-4)


def test_select_frames():
    assert select_frames(900, 50, 9)[0] == 51 and select_frames(900, 50, 9)[-1] == 900
    assert len(select_frames(900, 50, 9)) == 9
    with pytest.raises(ValueError):
        select_frames(10, 10, 1)
