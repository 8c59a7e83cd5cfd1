import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from elecloc import io
from elecloc.geometry import (
    Contour,
    ContourSet,
    EmptyInputError,
    SizeError,
    SpatialIndex,
    chamfer,
    denormalize_cloud,
    euclidean_error,
    fps,
    mae_points,
    normalize_cloud,
    resample_contours,
)

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
clouds = st.integers(1, 30).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def brute_chamfer(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return d.min(1).mean() + d.min(0).mean()


def brute_fps(pts, k, seed=0):
    chosen = [seed]
    for _ in range(1, k):
        best, best_d = -1, -1.0
        for i in range(len(pts)):
            d = min(np.sum((pts[i] - pts[j]) ** 2) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


# --------------------------------------------------------------------------- fps


def test_fps_line_picks_far_end():
    cloud = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    assert fps(cloud, 2, 0).tolist() == [0, 2]


def test_fps_exhaustion_is_permutation(rng):
    cloud = rng.normal(size=(20, 3))
    assert sorted(fps(cloud, 20).tolist()) == list(range(20))


def test_fps_matches_brute_force(rng):
    for _ in range(5):
        cloud = rng.uniform(size=(64, 3))
        assert fps(cloud, 8).tolist() == brute_fps(cloud, 8)


def test_fps_errors():
    with pytest.raises(SizeError):
        fps(np.zeros((3, 3)), 4)
    with pytest.raises(EmptyInputError):
        fps(np.zeros((0, 3)), 1)


def test_fps_min_distance_never_increases(rng):
    cloud = rng.normal(size=(50, 3))
    order = fps(cloud, 50)
    prev = np.inf
    for k in range(2, 51):
        sel = cloud[order[:k]]
        d = np.sqrt(((sel[:, None] - sel[None]) ** 2).sum(-1))
        m = d[np.triu_indices(k, 1)].min()
        assert m <= prev + 1e-12
        prev = m


# --------------------------------------------------------------------------- chamfer


def test_chamfer_examples(rng):
    a = rng.normal(size=(10, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(10.0)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-9)


def test_chamfer_empty():
    with pytest.raises(EmptyInputError):
        chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_chamfer_properties(a, b):
    assert chamfer(a, b) == chamfer(b, a)
    assert chamfer(a, b) >= 0
    assert chamfer(a, a) == 0
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-9, abs=1e-9)


def test_spatial_index_matches_brute_force(rng):
    pts = rng.normal(size=(300, 3))
    q = rng.normal(size=(1000, 3))
    d, i = SpatialIndex(pts).nearest(q)
    full = np.sqrt(((q[:, None] - pts[None]) ** 2).sum(-1))
    np.testing.assert_array_equal(i, full.argmin(1))
    np.testing.assert_allclose(d, full.min(1), rtol=1e-12)


# --------------------------------------------------------------------------- mae / ed


def test_mae_examples(rng):
    g = rng.normal(size=(10, 3))
    assert mae_points(g, g) == 0
    assert mae_points(g + 1.0, g) == pytest.approx(1.0)
    p = rng.normal(size=(10, 3))
    oracle = sum(abs(p[i, j] - g[i, j]) for i in range(10) for j in range(3)) / 30
    assert mae_points(p, g) == pytest.approx(oracle, rel=1e-12)
    assert mae_points(p, g, "norm") == pytest.approx(np.mean([np.linalg.norm(p[i] - g[i]) for i in range(10)]), rel=1e-12)
    with pytest.raises(SizeError):
        mae_points(p[:5], g)


def test_euclidean_error_examples(rng):
    g = rng.normal(size=(10, 3))
    per, mean = euclidean_error(g, g)
    assert np.all(per == 0) and mean == 0
    p = g.copy()
    p[3] += [0, 3, 4]
    per, mean = euclidean_error(p, g)
    assert per[3] == pytest.approx(5.0) and mean == pytest.approx(0.5)
    p = g + rng.normal(size=g.shape)
    per, mean = euclidean_error(p, g)
    np.testing.assert_allclose(per, [np.sqrt(sum((p[i] - g[i]) ** 2)) for i in range(10)], rtol=1e-12)


def test_euclidean_error_rigid_invariance(rng):
    p, g = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    t = rng.normal(size=3) * 10
    a = euclidean_error(p, g)[0]
    b = euclidean_error(p @ q.T + t, g @ q.T + t)[0]
    np.testing.assert_allclose(a, b, atol=1e-9)


# --------------------------------------------------------------------------- normalize


def test_normalize_properties(rng):
    c = rng.normal(size=(100, 3)) * 7 + 3
    n, tf = normalize_cloud(c)
    np.testing.assert_allclose(n.mean(0), 0, atol=1e-12)
    assert np.linalg.norm(n, axis=1).max() == pytest.approx(1.0)
    np.testing.assert_allclose(denormalize_cloud(n, tf), c, atol=1e-9)
    n2, _ = normalize_cloud(c * 2)
    np.testing.assert_allclose(n2, n, atol=1e-12)


def test_normalize_unit_sphere_unchanged_up_to_shift(rng):
    s = rng.normal(size=(200, 3))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    s = np.vstack([s, -s])  # centroid exactly 0
    n, tf = normalize_cloud(s)
    np.testing.assert_allclose(n, s, atol=1e-12)


def test_normalize_degenerate_flagged():
    n, tf = normalize_cloud(np.ones((5, 3)))
    assert tf.degenerate and tf.scale == 1.0
    np.testing.assert_array_equal(n, 0)


@settings(max_examples=50, deadline=None)
@given(clouds)
def test_normalize_round_trip(c):
    n, tf = normalize_cloud(c)
    np.testing.assert_allclose(denormalize_cloud(n, tf), c, atol=1e-9 * max(1.0, np.abs(c).max()))


# --------------------------------------------------------------------------- contours


def square_contour(z=0.0):
    pts = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    return Contour([0, 0, z], [1, 0, 0], [0, 1, 0], pts, closed=True)


def test_resample_square_equal_mode():
    out = resample_contours(ContourSet([square_contour()]), 4, mode="equal")
    sides = set()
    for p in out:
        if abs(p[1]) < 1e-12:
            sides.add("bottom")
        elif abs(p[0] - 1) < 1e-12:
            sides.add("right")
        elif abs(p[1] - 1) < 1e-12:
            sides.add("top")
        elif abs(p[0]) < 1e-12:
            sides.add("left")
    assert len(sides) == 4
    np.testing.assert_allclose(out[:, 2], 0)


def test_resample_size_and_determinism():
    cs = ContourSet([square_contour(), square_contour(2.0)])
    a = resample_contours(cs, 2048, 5)
    assert a.shape == (2048, 3)
    np.testing.assert_array_equal(a, resample_contours(cs, 2048, 5))
    assert not np.array_equal(a, resample_contours(cs, 2048, 6))


def test_resample_density_proportional_to_arc_length():
    big = Contour([0, 0, 0], [1, 0, 0], [0, 1, 0], np.array([[0.0, 0], [3, 0], [3, 3], [0, 3]]), closed=True)
    cs = ContourSet([square_contour(5.0), big])  # perimeters 4 and 12
    pts = resample_contours(cs, 100_000, 0)
    frac_small = np.mean(pts[:, 2] > 2.5)
    assert frac_small == pytest.approx(0.25, rel=0.05)


def test_resample_empty():
    with pytest.raises(EmptyInputError):
        resample_contours(ContourSet([]), 10)


# --------------------------------------------------------------------------- io


def test_xyz_and_contour_round_trip(tmp_path, rng):
    pts = rng.normal(size=(17, 3))
    io.write_xyz(tmp_path / "a.xyz", pts)
    back, feats = io.read_xyz(tmp_path / "a.xyz")
    np.testing.assert_allclose(back, pts, atol=1e-6)
    assert feats is None
    cs = ContourSet([square_contour(), square_contour(1.5)])
    io.write_contours(tmp_path / "c.txt", cs)
    cs2 = io.read_contours(tmp_path / "c.txt")
    assert len(cs2) == 2
    np.testing.assert_allclose(cs2.all_points(), cs.all_points(), atol=1e-6)
    assert cs2.contours[0].closed


def test_electrodes_file_has_named_rows(tmp_path, rng):
    el = rng.normal(size=(10, 3))
    io.write_electrodes(tmp_path / "e.txt", el)
    np.testing.assert_allclose(io.read_electrodes(tmp_path / "e.txt"), el, atol=1e-6)
    body = [l for l in (tmp_path / "e.txt").read_text().splitlines() if l and not l.startswith("#")]
    assert [l.split()[0] for l in body] == ["LA", "RA", "LL", "RL", "V1", "V2", "V3", "V4", "V5", "V6"]
