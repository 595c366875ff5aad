import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage import measure

from spinodal_kbnn.features import (
    RECT_MINUS,
    RECT_PLUS,
    SQUARE,
    compute_features,
    extract_contours,
    interface_lengths,
    phase_masks,
    volume_fractions,
)
from spinodal_kbnn.phasefield import GridSpec

G = GridSpec()
X, Y = G.coords()


def test_constant_field_has_no_contours():
    cs = extract_contours(np.ones(G.shape), 0.5, G)
    assert len(cs) == 0 and cs.length == 0.0


def test_circle_perimeter():
    r = 0.3 * G.Lx
    f = r - np.hypot(X - G.Lx / 2, Y - G.Ly / 2)
    cs = extract_contours(f, 0.0, G)
    assert len(cs) == 1
    assert cs.length == pytest.approx(2 * np.pi * r, rel=0.02)


def test_circle_matches_skimage_polyline_length():
    r = 0.27 * G.Lx
    f = r - np.hypot(X - 0.52 * G.Lx, Y - 0.47 * G.Ly)
    ours = extract_contours(f, 0.0, G).length
    ref = sum(np.hypot(*np.diff(p, axis=0).T).sum() for p in measure.find_contours(f, 0.0)) * G.hx
    assert ours == pytest.approx(ref, rel=1e-9)


def test_straight_line_length_exact():
    cs = extract_contours(X - G.Lx / 2, 0.0, G)
    assert len(cs) == 1
    assert abs(cs.length - G.Ly) < 1e-9


def test_phase_masks_trivial_cases():
    assert np.all(phase_masks(np.zeros(G.shape), np.zeros(G.shape)) == SQUARE)
    assert np.all(phase_masks(np.ones(G.shape), np.full(G.shape, 0.1)) == RECT_PLUS)
    assert np.all(phase_masks(np.ones(G.shape), np.full(G.shape, -0.1)) == RECT_MINUS)


def test_half_domain_fraction():
    c = (X < G.Lx / 2).astype(float)
    labels = phase_masks(c, np.full(G.shape, 0.1))
    pp, pm = volume_fractions(labels)
    assert pm == 0.0
    assert abs(pp - 0.5) <= 1.0 / (G.nx - 1)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_phi_identity(seed):
    rng = np.random.default_rng(seed)
    c, e2 = rng.random((11, 9)), rng.standard_normal((11, 9))
    f = compute_features(c, e2, GridSpec(9, 11))
    assert f.phi_s == 1.0 - f.phi_r_plus - f.phi_r_minus
    assert 0.0 <= f.phi_s <= 1.0


def test_single_phase_has_no_interfaces():
    assert interface_lengths(np.zeros(G.shape), np.zeros(G.shape), G) == (0.0, 0.0, 0.0)
    assert interface_lengths(np.ones(G.shape), np.full(G.shape, 0.1), G) == (0.0, 0.0, 0.0)


def test_circular_inclusion_lengths():
    r = 0.3 * G.Lx
    c = 0.5 + (r - np.hypot(X - G.Lx / 2, Y - G.Ly / 2)) / 0.002
    ls, lp, lm = interface_lengths(c, np.full(G.shape, 0.1), G)
    assert ls == pytest.approx(2 * np.pi * r, rel=0.02)
    assert lp == pytest.approx(2 * np.pi * r, rel=0.02)
    assert lm == 0.0


def test_bicrystal_lengths():
    c = np.ones(G.shape)
    e2 = X - G.Lx / 2 + 1e-7
    ls, lp, lm = interface_lengths(c, e2, G)
    assert ls == 0.0
    assert abs(lp - G.Ly) < 1e-9 and abs(lm - G.Ly) < 1e-9
    # with the outer boundary counted, each grain adds its own share of the perimeter
    _, lp_b, lm_b = interface_lengths(c, e2, G, include_outer_boundary=True)
    assert lp_b > lp and lm_b > lm
    assert lp_b + lm_b == pytest.approx(2 * G.Ly + 2 * (G.Lx + G.Ly), rel=1e-9)


def test_sign_flip_swaps_variants():
    rng = np.random.default_rng(1)
    c, e2 = rng.random(G.shape), rng.standard_normal(G.shape)
    a = compute_features(c, e2, G)
    b = compute_features(c, -e2, G)
    assert a.phi_r_plus == b.phi_r_minus and a.l_r_plus == pytest.approx(b.l_r_minus, rel=1e-12)
    assert a.l_s_r == b.l_s_r
