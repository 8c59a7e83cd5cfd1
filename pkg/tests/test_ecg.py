import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.sparse.csgraph import dijkstra

from elecloc.ecg import (
    EcgTrace,
    ElectrodeInsideError,
    HeartPhantom,
    PhantomError,
    PhantomSpec,
    build_phantom,
    compare_ecgs,
    derive_leads,
    dtw,
    pseudo_ecg,
    read_ecg_csv,
    read_phantom_spec,
    rs_ratio,
    simulate_ecg,
    solve_eikonal,
    transmembrane,
    write_ecg_csv,
    write_phantom_spec,
)
from elecloc.ecg.eikonal import edge_graph
from elecloc.ecg.signals import LEADS, lead_field
from elecloc.geometry import SizeError


def box_phantom(n=21, h=0.2, v=0.07, roots=None, origin=(0.0, 0.0, 0.0), velocity=None, mask=None):
    mask = np.ones((n, n, n), bool) if mask is None else mask
    c = n // 2
    roots = np.array([[c, c, c]]) if roots is None else np.asarray(roots)
    vel = np.full(mask.shape, v) if velocity is None else velocity
    return HeartPhantom(mask, h, np.asarray(origin, float), np.eye(3), vel, roots)


def random_phantom(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    spec = PhantomSpec(spacing=0.3, velocity=float(rng.uniform(0.03, 0.1)))
    ph = build_phantom(spec, centre=rng.normal(size=3) * 5, frame=q)
    ph.velocity = ph.velocity * rng.uniform(0.5, 1.5, size=ph.velocity.shape)
    return ph


# --------------------------------------------------------------------------- eikonal


def test_radial_solution_within_grid_diagonal():
    ph = box_phantom(n=31)
    act = solve_eikonal(ph)
    g = ph.grid_coords()
    r = np.linalg.norm(g - g[15, 15, 15], axis=-1)
    err = np.abs(act.tau - r / 0.07)
    assert err.max() <= np.sqrt(3) * 0.2 / 0.07
    assert act.tau[15, 15, 15] == 0 and not act.unreachable


def test_doubling_velocity_halves_tau():
    ph = random_phantom(0)
    a = solve_eikonal(ph).tau
    ph.velocity = ph.velocity * 2
    b = solve_eikonal(ph).tau
    m = ph.mask
    np.testing.assert_allclose(b[m], a[m] / 2, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_dijkstra_upper_bound(seed):
    ph = random_phantom(seed)
    act = solve_eikonal(ph)
    roots = np.ravel_multi_index(tuple(ph.roots.T), ph.shape)
    d = dijkstra(edge_graph(ph), indices=roots, min_only=True).reshape(ph.shape)
    m = ph.mask
    assert np.all(act.tau[m] <= d[m] + 1e-9)
    assert np.all(act.tau[tuple(ph.roots.T)] == 0)


def test_refinement_converges():
    coarse = build_phantom(PhantomSpec(spacing=0.2))
    fine = build_phantom(PhantomSpec(spacing=0.1))
    t1 = solve_eikonal(coarse).max_time
    t2 = solve_eikonal(fine).max_time
    assert abs(t1 - t2) / t2 < 0.05


def test_adding_root_never_increases_tau():
    ph = build_phantom()
    a = solve_eikonal(ph, roots=ph.roots[:2]).tau
    b = solve_eikonal(ph).tau
    assert np.all(b[ph.mask] <= a[ph.mask])


def test_acceptance_order_monotone():
    act = solve_eikonal(random_phantom(3))
    t = act.tau.ravel()[act.order]
    assert np.all(np.diff(t) >= 0)


def test_unreachable_voxels_flagged():
    mask = np.zeros((9, 9, 9), bool)
    mask[1:4, 1:4, 1:4] = True
    mask[6:8, 6:8, 6:8] = True
    ph = box_phantom(n=9, mask=mask, roots=[[2, 2, 2]])
    act = solve_eikonal(ph)
    assert len(act.unreachable) == 8
    assert np.all(np.isinf(act.tau[6:8, 6:8, 6:8]))
    with pytest.raises(PhantomError):
        ph.validate()


def test_anisotropic_speedup_along_fiber():
    ph = box_phantom(n=21)
    ph.fiber, ph.fiber_factor = np.array([1.0, 0, 0]), 2.0
    tau = solve_eikonal(ph).tau
    assert tau[20, 10, 10] == pytest.approx(tau[10, 20, 10] / 2, rel=1e-9)


def test_phantom_spec_round_trip(tmp_path):
    spec = PhantomSpec(spacing=0.25, roots=((0.0, 0.0, -1.0),))
    write_phantom_spec(tmp_path / "p.txt", spec)
    assert read_phantom_spec(tmp_path / "p.txt") == spec
    (tmp_path / "bad.txt").write_text("spacing = 0.2\nvoxel_size = 1\n")
    with pytest.raises(PhantomError):
        read_phantom_spec(tmp_path / "bad.txt")


def test_default_phantom_valid():
    ph = build_phantom()
    ph.validate()
    assert len(ph.roots) == 3


# --------------------------------------------------------------------------- transmembrane & pseudo-ECG


def test_transmembrane_limits():
    tau = np.array([5.0, 20.0, np.inf])
    np.testing.assert_array_equal(transmembrane(tau, -100.0), 0)
    np.testing.assert_array_equal(transmembrane(tau[:2], 1000.0), 1)
    assert transmembrane(np.array([5.0]), 10.0, upstroke_ms=10.0)[0] == 0.5
    with pytest.raises(ValueError):
        transmembrane(tau, 0.0, upstroke_ms=0)


def direct_pseudo_ecg(mask, vm, h, e):
    """Straight loop: masked central differences (out-of-mask neighbour -> centre value) dotted with grad(1/r)."""
    phi = 0.0
    for idx in np.argwhere(mask):
        x = idx * h
        grad_vm = np.zeros(3)
        for ax in range(3):
            up, dn = idx.copy(), idx.copy()
            up[ax] += 1
            dn[ax] -= 1

            def val(j):
                inside = np.all(j >= 0) and np.all(j < mask.shape) and mask[tuple(j)]
                return vm[tuple(j)] if inside else vm[tuple(idx)]

            grad_vm[ax] = (val(up) - val(dn)) / (2 * h)
        d = x - e
        phi += grad_vm @ (-d / np.linalg.norm(d) ** 3) * h**3
    return phi


def test_pseudo_ecg_three_voxel_hand_oracle():
    mask = np.zeros((3, 1, 1), bool)
    mask[:, 0, 0] = True
    ph = box_phantom(n=3, h=0.5, mask=mask, roots=[[0, 0, 0]])
    e = np.array([3.0, 0.0, 0.0])
    vm = np.zeros((3, 1, 1))
    vm[:, 0, 0] = [1.0, 0.5, 0.0]
    # hand: gradients along x are (0.5-1)/(2h)*? with zero-flux ends: voxel0 (0.5-1)/1 = -0.5, voxel1 (0-1)/1 = -1, voxel2 (0-0.5)/1 = -0.5
    # grad(1/r)_x at x = 0, 0.5, 1 with e = 3: 1/r^2 = 1/9, 1/6.25, 1/4; phi = h^3 * sum
    hand = 0.125 * (-0.5 / 9 - 1 / 6.25 - 0.5 / 4)
    w = lead_field(ph, e)
    assert w @ vm[mask] == pytest.approx(hand, rel=1e-12)
    assert hand == pytest.approx(direct_pseudo_ecg(mask, vm, 0.5, e), rel=1e-12)


def test_pseudo_ecg_matches_direct_sum_on_irregular_mask(rng):
    mask = rng.uniform(size=(5, 4, 4)) < 0.6
    ph = box_phantom(n=5, h=0.3, mask=mask, roots=[np.argwhere(mask)[0]])
    e = np.array([4.0, -1.0, 2.5])
    vm = rng.uniform(size=mask.shape)
    assert lead_field(ph, e) @ vm[mask] == pytest.approx(direct_pseudo_ecg(mask, vm, 0.3, e), rel=1e-10)


def test_uniform_vm_gives_zero_potential():
    ph = build_phantom()
    tau = np.where(ph.mask, 7.0, np.inf)
    phi = pseudo_ecg(ph, tau, ph.to_world(np.array([-3.0, 0, 0])), np.arange(0, 30.0))
    np.testing.assert_allclose(phi, 0, atol=1e-12)


def test_mirror_symmetry_cancels():
    ph = box_phantom(n=11, h=0.2)
    e = ph.to_world(np.array([1.0, 4.0, 3.0]))  # x = 1.0 is the mid-plane of voxels 0..10
    w = lead_field(ph, e).reshape(ph.shape)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)
    g = ph.grid_coords()
    vm_odd = np.tanh(g[..., 0] - 1.0)  # antisymmetric about the plane
    assert abs(np.sum(w * vm_odd)) < 1e-12


def test_pseudo_ecg_linear(rng):
    ph = build_phantom(PhantomSpec(spacing=0.3))
    e = ph.to_world(np.array([-4.0, 1.0, 0.0]))
    w = lead_field(ph, e)
    v1, v2 = rng.uniform(size=w.shape), rng.uniform(size=w.shape)
    assert (v1 + v2) @ w == pytest.approx(v1 @ w + v2 @ w, rel=1e-12)


def test_electrode_inside_myocardium():
    ph = build_phantom()
    inside = ph.to_world(ph.grid_coords()[tuple(ph.roots[0])])
    with pytest.raises(ElectrodeInsideError):
        lead_field(ph, inside)


def _electrodes_around(ph, rng):
    centre = ph.to_world(np.array(ph.shape) * ph.spacing / 2)
    d = rng.normal(size=(10, 3))
    return centre + 12.0 * d / np.linalg.norm(d, axis=1, keepdims=True)


def test_rigid_translation_invariance(rng):
    ph = build_phantom(PhantomSpec(spacing=0.3))
    el = _electrodes_around(ph, rng)
    act = solve_eikonal(ph)
    a = simulate_ecg(ph, el, act)
    t = np.array([5.0, -3.0, 20.0])
    ph.origin = ph.origin + t
    b = simulate_ecg(ph, el + t, act)
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-9)


# --------------------------------------------------------------------------- leads


def test_derive_leads_identities(rng):
    chans = rng.normal(size=(9, 50))
    tr = derive_leads(chans)
    assert list(tr.leads) == list(LEADS)
    I, II = tr.lead("I"), tr.lead("II")
    np.testing.assert_allclose(tr.lead("III"), II - I, atol=1e-12)
    np.testing.assert_allclose(tr.lead("aVR"), -(I + II) / 2, atol=1e-12)
    np.testing.assert_allclose(tr.lead("aVL"), I - II / 2, atol=1e-12)
    np.testing.assert_allclose(tr.lead("aVF"), II - I / 2, atol=1e-12)


def test_derive_leads_constant_and_hand():
    tr = derive_leads(np.full((9, 5), 3.0))
    np.testing.assert_array_equal(tr.matrix(), 0)
    vals = {"LA": 1.0, "RA": -2.0, "LL": 4.0, "V1": 0.0, "V2": 1.0, "V3": 2.0, "V4": 3.0, "V5": 4.0, "V6": 5.0}
    tr = derive_leads({k: np.full(3, v) for k, v in vals.items()})
    assert tr.lead("I")[0] == 3.0 and tr.lead("II")[0] == 6.0
    assert tr.lead("V1")[0] == -1.0 and tr.lead("V6")[0] == 4.0  # WCT = 1
    with pytest.raises(SizeError):
        derive_leads([np.zeros(3)] * 8 + [np.zeros(4)])


def test_ecg_csv_round_trip(tmp_path, rng):
    tr = derive_leads(rng.normal(size=(9, 20)), dt=1.0)
    write_ecg_csv(tmp_path / "e.csv", tr)
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t_ms,I,II,V1,V2,V3,V4,V5,V6"
    back = read_ecg_csv(tmp_path / "e.csv")
    np.testing.assert_allclose(back.matrix(), tr.matrix(), rtol=1e-8)


# --------------------------------------------------------------------------- DTW & comparison


def dp_oracle(a, b):
    n, m = len(a), len(b)
    D = [[np.inf] * (m + 1) for _ in range(n + 1)]
    L = [[0] * (m + 1) for _ in range(n + 1)]
    D[0][0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cands = [(D[i - 1][j - 1], L[i - 1][j - 1]), (D[i - 1][j], L[i - 1][j]), (D[i][j - 1], L[i][j - 1])]
            c, l = min(cands)
            D[i][j] = c + abs(a[i - 1] - b[j - 1])
            L[i][j] = l + 1
    return D[n][m] / L[n][m]


def test_dtw_hand_table():
    a = [0.0, 1.0, 2.0, 1.0, 0.0]
    b = [0.0, 0.0, 1.0, 2.0, 1.0]
    # raw costs: the optimal path aligns a0 with b0,b1 and a1..a3 with b2..b4, leaving a4-b4 = 1 -> total 1 over 6 steps
    r = dtw(a, b, normalize=False)
    assert r.distance == pytest.approx(1 / 6) and r.path_length == 6
    assert dtw(a, b).distance == pytest.approx(dp_oracle(*(np.array(x) - np.mean(x) for x in (a, b))) / np.std(a), rel=1e-12)


def test_dtw_identity_and_shift():
    t = np.linspace(0, 1, 200)
    a = np.exp(-((t - 0.4) ** 2) / 0.005)
    b = np.exp(-((t - 0.43) ** 2) / 0.005)
    assert dtw(a, a).distance == 0
    za, zb = (a - a.mean()) / a.std(), (b - b.mean()) / b.std()
    assert dtw(a, b).distance < 0.2 * np.mean(np.abs(za - zb))


def test_dtw_zero_variance_flagged():
    r = dtw(np.ones(5), np.arange(5.0))
    assert r.flags and r.distance >= 0
    with pytest.raises(SizeError):
        dtw([], [1.0])


series = st.integers(2, 25).flatmap(lambda n: arrays(np.float64, n, elements=st.floats(-10, 10, allow_nan=False)))


@settings(max_examples=80, deadline=None)
@given(series, series)
def test_dtw_properties(a, b):
    ab = dtw(a, b)
    assert ab.distance == dtw(b, a).distance
    assert ab.distance >= 0
    assert dtw(a, a).distance == 0
    za = (a - a.mean()) / a.std() if a.std() > 0 else a
    zb = (b - b.mean()) / b.std() if b.std() > 0 else b
    assert ab.distance == pytest.approx(dp_oracle(za, zb), rel=1e-9, abs=1e-12)


def _gaussian_trace(scale=1.0, shift=0.0):
    t = np.arange(0, 120.0)
    chans = []
    for k in range(9):
        c = np.exp(-((t - 40 - 3 * k - shift) ** 2) / 30) - (0.3 + 0.05 * k) * np.exp(-((t - 60 - shift) ** 2) / 40)
        chans.append(scale * c * (1 + 0.2 * k))
    return derive_leads(chans)


def test_compare_identical_and_scaled():
    gt = _gaussian_trace()
    same = compare_ecgs(gt, gt)
    assert same.mean_dtw == 0 and same.mean_pearson == pytest.approx(1) and same.qrs_diff == 0
    assert all(v == 0 for v in same.rs_diff.values() if np.isfinite(v))
    scaled = EcgTrace(gt.dt, {k: 2 * v for k, v in gt.leads.items()})
    c = compare_ecgs(scaled, gt)
    assert c.mean_pearson == pytest.approx(1, abs=1e-12) and c.mean_dtw == pytest.approx(0, abs=1e-12)


def test_rs_ratio_constructed_wave():
    t = np.linspace(0, 1, 1001)
    x = 2 * np.exp(-((t - 0.3) ** 2) / 0.001) - np.exp(-((t - 0.6) ** 2) / 0.001)
    assert rs_ratio(x) == pytest.approx(2.0, rel=1e-6)
    assert np.isnan(rs_ratio(np.abs(x)))


def test_compare_lead_set_mismatch():
    gt = _gaussian_trace()
    with pytest.raises(SizeError):
        compare_ecgs(EcgTrace(2.0, gt.leads), gt)
