import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstomo import geometry as geo
from cstomo.datagen import render_phantom, sample_phantom_params
from cstomo.heatmaps import build_heatmaps, heatmaps_backward, invert_heatmaps, least_prime_factor
from cstomo.spectroscopy import FieldPair, forward
from oracles import enumerate_heatmaps


@pytest.mark.parametrize("R,F", [(8, 2), (9, 3), (7, 7), (2, 2), (15, 3), (49, 7)])
def test_least_prime_factor(R, F):
    assert least_prime_factor(R) == F


def test_least_prime_factor_rejects_small():
    with pytest.raises(ValueError):
        least_prime_factor(1)


def test_default_shapes():
    hm = build_heatmaps(np.zeros(32), np.zeros(32), 4, 8)
    assert hm.S.shape == (8, 8, 1) and hm.P.shape == (4, 8, 2)
    assert not hm.S.any() and not hm.P.any()


def test_ramp_example_cells():
    A1, A2 = np.arange(32.0), np.arange(100.0, 132.0)
    hm = build_heatmaps(A1, A2, 4, 8)
    assert hm.S[0, 5, 0] == 5
    # lower half is the second frequency with its view order reversed
    assert hm.S[4, 3, 0] == A2[3 * 8 + 3]
    assert hm.S[7, 0, 0] == A2[0]
    assert hm.P[0, 0, 0] == 0 and hm.P[0, 1, 0] == 1 and hm.P[1, 0, 0] == 2
    assert hm.P[0, 2, 1] == A2[8]


@pytest.mark.parametrize("Q,R", [(4, 8), (2, 4), (3, 9), (5, 6), (1, 7)])
def test_matches_brute_force_enumeration(Q, R, rng):
    for _ in range(20):
        A1, A2 = rng.normal(size=Q * R), rng.normal(size=Q * R)
        S, P = enumerate_heatmaps(A1, A2, Q, R)
        hm = build_heatmaps(A1, A2, Q, R)
        np.testing.assert_array_equal(hm.S, S)
        np.testing.assert_array_equal(hm.P, P)


def test_batched_equals_per_example(rng):
    A1, A2 = rng.normal(size=(5, 32)), rng.normal(size=(5, 32))
    hm = build_heatmaps(A1, A2, 4, 8)
    for e in range(5):
        single = build_heatmaps(A1[e], A2[e], 4, 8)
        np.testing.assert_array_equal(hm.S[e], single.S)
        np.testing.assert_array_equal(hm.P[e], single.P)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        build_heatmaps(np.zeros(31), np.zeros(31), 4, 8)
    with pytest.raises(ValueError):
        build_heatmaps(np.zeros(32), np.zeros(16), 4, 8)


@settings(max_examples=50, deadline=None)
@given(Q=st.integers(1, 5), R=st.integers(2, 12), seed=st.integers(0, 2**32 - 1))
def test_rearrangement_is_bijective(Q, R, seed):
    r = np.random.default_rng(seed)
    A1, A2 = r.permutation(Q * R) + 0.5, r.permutation(Q * R) + 1000.5
    hm = build_heatmaps(A1, A2, Q, R)
    values = np.sort(np.concatenate([A1, A2]))
    np.testing.assert_array_equal(np.sort(hm.S.ravel()), values)
    np.testing.assert_array_equal(np.sort(hm.P.ravel()), values)
    for which in ("S", "P"):
        b1, b2 = invert_heatmaps(hm.S, hm.P, Q, R, which)
        np.testing.assert_array_equal(b1, A1)
        np.testing.assert_array_equal(b2, A2)


def test_backward_is_inverse_permutation_of_cell_gradients(rng):
    A1, A2 = rng.normal(size=32), rng.normal(size=32)
    wS, wP = rng.normal(size=(8, 8, 1)), rng.normal(size=(4, 8, 2))

    def f(a1, a2):
        hm = build_heatmaps(a1, a2, 4, 8)
        return (wS * hm.S).sum() + (wP * hm.P).sum()

    g1, g2 = heatmaps_backward(wS, wP, 4, 8)
    h = 1e-6
    for k in range(32):
        e = np.zeros(32)
        e[k] = h
        assert g1[k] == pytest.approx((f(A1 + e, A2) - f(A1 - e, A2)) / (2 * h), rel=1e-6)
        assert g2[k] == pytest.approx((f(A1, A2 + e) - f(A1, A2 - e)) / (2 * h), rel=1e-6)


def test_half_turn_mirrors_rows_of_centrosymmetry_map(default_geometry, rng):
    """A rotated phantom gives the left-right mirror of each heatmap row.

    Beam r of a view lands on beam R-1-r of the same view, so every row of
    S is reversed while the row order stays put.
    """
    _, beams, grid, L = default_geometry
    bp, pp = geo.rotation_permutations(beams, grid)
    np.testing.assert_array_equal(bp, [8 * (i // 8) + 7 - i % 8 for i in range(32)])
    for _ in range(20):
        f = render_phantom(sample_phantom_params(rng, grid), grid.pixel_centers)
        p = forward(f, L)
        q = forward(FieldPair(f.X[pp], f.T[pp]), L)
        S = build_heatmaps(p.A1, p.A2, 4, 8).S[:, :, 0]
        Sr = build_heatmaps(q.A1, q.A2, 4, 8).S[:, :, 0]
        np.testing.assert_allclose(Sr, S[:, ::-1], rtol=1e-12)
