import numpy as np
import pytest

from transportlab.grid import (
    GridError,
    build_grid,
    classify_boundary,
    kahan_sum,
    phase_norm_sq,
    surface_norm_sq,
)


def test_build_grid_reference_discretization():
    g = build_grid(x=(0, 1), y=(0, 1), v_x=(-6, 6), v_y=(-6, 6),
                   nx=64, ny=64, nvx=32, nvy=32)
    assert g.dx == 1 / 64
    assert g.dy == 1 / 64
    assert g.dvx == 12 / 32
    assert g.dvy == 12 / 32


def test_build_grid_smallest_legal():
    g = build_grid(x=(0, 1), y=(0, 1), v_x=(-1, 1), v_y=(-1, 1),
                   nx=2, ny=2, nvx=2, nvy=2)
    assert g.dx == 0.5
    assert g.dvx == 1.0


@pytest.mark.parametrize("kwargs", [
    dict(nx=0), dict(ny=-3), dict(nvx=1), dict(nvy=0),
    dict(x=(1, 0)), dict(v_x=(6, -6)), dict(y=(0.5, 0.5)),
])
def test_build_grid_rejects_degenerate(kwargs):
    with pytest.raises(GridError):
        build_grid(**kwargs)


def test_centers_avoid_zero_velocity_for_even_counts():
    g = build_grid(nx=4, ny=4, nvx=8, nvy=6, v_x=(-6, 6), v_y=(-3, 3))
    assert np.all(g.vx_centers() != 0.0)
    assert np.all(g.vy_centers() != 0.0)


def test_partition_covers_all_pairs_once():
    g = build_grid(nx=5, ny=3, nvx=4, nvy=6, v_x=(-2, 2), v_y=(-3, 3))
    p = classify_boundary(g)
    n_faces = 2 * g.nx + 2 * g.ny
    assert p.n_total == n_faces * g.nvx * g.nvy
    # no duplicates: facet identity keys are unique across the union
    keys = set()
    for bundle in (p.outgoing, p.incoming, p.glancing):
        for k in range(len(bundle)):
            key = (int(bundle.axis[k]), int(bundle.side[k]),
                   int(bundle.tang[k]), int(bundle.iv[k]), int(bundle.jv[k]))
            assert key not in keys
            keys.add(key)


def test_symmetric_box_gives_equal_cardinality_and_measure():
    g = build_grid(nx=6, ny=4, nvx=8, nvy=4)
    p = classify_boundary(g)
    assert len(p.outgoing) == len(p.incoming)
    assert len(p.glancing) == 0
    assert p.outgoing.total_sigma == pytest.approx(p.incoming.total_sigma,
                                                   rel=1e-14)


def test_facet_classification_signs_and_weight():
    # x-high face (n = (1,0)) with v = (3, -2): outgoing, sigma = 3*dy*dvx*dvy
    g = build_grid(nx=2, ny=2, nvx=6, nvy=4, v_x=(-6, 6), v_y=(-6, 6))
    p = classify_boundary(g)
    vxc, vyc = g.vx_centers(), g.vy_centers()
    iv = int(np.argmin(np.abs(vxc - 3.0)))
    jv = int(np.argmin(np.abs(vyc + 2.0)))
    vx, vy = vxc[iv], vyc[jv]
    assert vx > 0 and vy < 0

    def find(bundle, axis, side):
        hits = np.nonzero((bundle.axis == axis) & (bundle.side == side)
                          & (bundle.iv == iv) & (bundle.jv == jv))[0]
        return hits

    out_hits = find(p.outgoing, axis=0, side=1)
    assert out_hits.size == g.ny
    k = out_hits[0]
    assert p.outgoing.n_dot_v[k] == pytest.approx(vx)
    assert p.outgoing.sigma[k] == pytest.approx(vx * g.dy * g.dvx * g.dvy)
    # same velocity at x-low face (n = (-1,0)) must be incoming
    assert find(p.incoming, axis=0, side=0).size == g.ny
    assert find(p.outgoing, axis=0, side=0).size == 0


def test_glancing_set_for_odd_velocity_count():
    g = build_grid(nx=2, ny=2, nvx=3, nvy=2, v_x=(-1, 1), v_y=(-1, 1))
    p = classify_boundary(g)
    # middle vx cell center is exactly 0 -> glancing on x-faces
    assert len(p.glancing) == 2 * g.ny * 1 * g.nvy
    assert np.all(p.glancing.sigma == 0.0)
    assert np.all(p.outgoing.sigma > 0.0)
    assert np.all(p.incoming.sigma > 0.0)


def test_surface_norm_zero_and_constant():
    g = build_grid(nx=4, ny=4, nvx=4, nvy=4)
    p = classify_boundary(g)
    nt = 7
    dt = 1.0 / nt
    zeros = np.zeros((nt, len(p.outgoing)))
    assert surface_norm_sq(zeros, p.outgoing, dt) == 0.0
    ones = np.ones((nt, len(p.outgoing)))
    total = surface_norm_sq(ones, p.outgoing, dt)
    assert total == pytest.approx(p.outgoing.total_sigma, rel=1e-13)


def test_surface_norm_single_facet_indicator():
    # hand-summed oracle: one facet lit for all steps gives sigma_f * T
    g = build_grid(nx=3, ny=3, nvx=4, nvy=4)
    p = classify_boundary(g)
    nt, T = 5, 2.0
    trace = np.zeros((nt, len(p.outgoing)))
    f = 11
    trace[:, f] = 1.0
    expected = float(p.outgoing.sigma[f]) * T
    assert surface_norm_sq(trace, p.outgoing, T / nt) == pytest.approx(expected, rel=1e-14)


def test_surface_norm_quadratic_homogeneity_and_mismatch():
    g = build_grid(nx=3, ny=3, nvx=4, nvy=4)
    p = classify_boundary(g)
    rng = np.random.default_rng(7)
    trace = rng.standard_normal((6, len(p.outgoing)))
    base = surface_norm_sq(trace, p.outgoing, 0.25)
    scaled = surface_norm_sq(3.0 * trace, p.outgoing, 0.25)
    assert scaled == pytest.approx(9.0 * base, rel=1e-13)
    with pytest.raises(ValueError):
        surface_norm_sq(trace[:, :-1], p.outgoing, 0.25)


def test_surface_norm_accepts_per_row_dt():
    g = build_grid(nx=2, ny=2, nvx=2, nvy=2)
    p = classify_boundary(g)
    trace = np.ones((3, len(p.outgoing)))
    dts = np.array([0.5, 0.25, 0.25])
    got = surface_norm_sq(trace, p.outgoing, dts)
    assert got == pytest.approx(p.outgoing.total_sigma, rel=1e-14)


def test_phase_norm_matches_hand_quadrature():
    g = build_grid(nx=3, ny=2, nvx=2, nvy=2, v_x=(-1, 1), v_y=(-1, 1))
    rng = np.random.default_rng(3)
    vals = rng.standard_normal(g.shape)
    expected = float(np.sum(vals ** 2)) * g.cell_volume
    assert phase_norm_sq(vals, g) == pytest.approx(expected, rel=1e-13)
    with pytest.raises(ValueError):
        phase_norm_sq(vals[:-1], g)


def test_kahan_sum_handles_cancellation():
    vals = [1e16, 1.0, -1e16]
    assert kahan_sum(vals) == 1.0
