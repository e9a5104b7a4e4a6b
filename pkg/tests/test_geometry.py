import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uclidnet import geometry as G
from uclidnet import scenes
from uclidnet.tensor import Tensor


def axis_camera(z=2.0, focal=64.0, size=64):
    return G.CameraModel(np.eye(3), [0.0, 0.0, z], focal, size / 2, size / 2, size, size)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_project_optical_axis():
    assert np.array_equal(G.project(axis_camera(), [0.0, 0.0, 0.0]), [32.0, 32.0])


def test_project_forced_arithmetic():
    assert np.array_equal(G.project(axis_camera(), [0.5, 0.0, 0.0]), [48.0, 32.0])


def test_project_behind_camera():
    with pytest.raises(G.BehindCameraError):
        G.project(axis_camera(), [0.0, 0.0, -3.0])


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        R = random_rotation(rng)
        t = rng.normal(size=3) + [0, 0, 6]
        cam = G.CameraModel(R, t, 50.0, 31.5, 30.0, 64, 64)
        p = rng.uniform(-1, 1, 3)
        K = np.array([[50.0, 0, 31.5], [0, 50.0, 30.0], [0, 0, 1]])
        h = K @ np.hstack([R, t[:, None]]) @ np.append(p, 1.0)
        np.testing.assert_allclose(G.project(cam, p), h[:2] / h[2], rtol=0, atol=1e-9)


def test_camera_check_rejects_reflection():
    cam = G.CameraModel(np.diag([1.0, 1.0, -1.0]), [0, 0, 3], 10.0, 5, 5, 10, 10)
    with pytest.raises(ValueError):
        cam.check()


def test_voxel_centers_convention():
    c = G.voxel_centers(4)
    assert c.shape == (64, 3)
    np.testing.assert_array_equal(np.unique(c[:, 0]), [-0.75, -0.25, 0.25, 0.75])
    # C order over (x, y, z)
    np.testing.assert_array_equal(c[1], [-0.75, -0.75, -0.25])


# --- feature lifting --------------------------------------------------------------

def test_constant_map_lift():
    cam = scenes.sample_camera(3)
    f = Tensor(np.full((2, 32, 32), 1.25))
    g = G.backproject_features(f, cam, 8).data
    uv = G.lift_coords(cam, 8, 32, 32)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= 31) & (uv[:, 1] >= 0) & (uv[:, 1] <= 31)
    flat = g.reshape(2, -1)
    assert np.all(flat[:, inside] == 1.25)
    assert np.all(flat[:, ~inside] == 0.0)


def test_constant_map_lift_with_frustum_clipping():
    cam = axis_camera(z=2.0, focal=64.0)
    f = Tensor(np.full((1, 16, 16), 2.0))
    g = G.backproject_features(f, cam, 4).data.reshape(-1)
    assert set(np.unique(g)) == {0.0, 2.0}


def test_single_voxel_samples_origin_projection():
    rng = np.random.default_rng(1)
    cam = scenes.sample_camera(5)
    f = rng.normal(size=(3, 16, 16))
    g = G.backproject_features(Tensor(f, dtype=np.float64), cam, 1).data
    u, v = G.project(cam, [0.0, 0.0, 0.0]) * (16 / 64)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    a, b = u - u0, v - v0
    want = ((1 - a) * (1 - b) * f[:, v0, u0] + a * (1 - b) * f[:, v0, u0 + 1]
            + (1 - a) * b * f[:, v0 + 1, u0] + a * b * f[:, v0 + 1, u0 + 1])
    np.testing.assert_allclose(g[:, 0, 0, 0], want, atol=1e-12)


def test_lift_matches_per_voxel_oracle():
    rng = np.random.default_rng(2)
    cam = scenes.sample_camera(11)
    fh, fw = 16, 16
    f = rng.normal(size=(2, fh, fw))
    n = 8
    g = G.backproject_features(Tensor(f, dtype=np.float64), cam, n).data
    for x in range(n):
        for y in range(n):
            for z in range(n):
                c = -1 + (2 * np.array([x, y, z]) + 1) / n
                pc = cam.rotation @ c + cam.translation
                u = (cam.cx + cam.focal * pc[0] / pc[2]) * fw / cam.width
                v = (cam.cy + cam.focal * pc[1] / pc[2]) * fh / cam.height
                if not (0 <= u <= fw - 1 and 0 <= v <= fh - 1):
                    want = np.zeros(2)
                else:
                    u0, v0 = min(int(u), fw - 2), min(int(v), fh - 2)
                    a, b = u - u0, v - v0
                    want = ((1 - a) * (1 - b) * f[:, v0, u0] + a * (1 - b) * f[:, v0, u0 + 1]
                            + (1 - a) * b * f[:, v0 + 1, u0] + a * b * f[:, v0 + 1, u0 + 1])
                np.testing.assert_allclose(g[:, x, y, z], want, atol=1e-7)


def test_ray_invariance_is_exact():
    rng = np.random.default_rng(3)
    f = Tensor(rng.normal(size=(4, 16, 16)), dtype=np.float64)
    # voxels (0,0,0) and (7,7,7) of an N=8 grid lie on one ray from C with p2 - C = 2 (p1 - C)
    p1 = np.full(3, -7 / 8)
    p2 = np.full(3, 7 / 8)
    center = 2 * p1 - p2
    cam = G.CameraModel.look_at(center, target=p1, focal=20.0, height=64, width=64)
    assert np.array_equal(p2 - cam.center, 2 * (p1 - cam.center))
    g = G.backproject_features(f, cam, 8).data
    assert np.any(g[:, 0, 0, 0] != 0)
    assert np.array_equal(g[:, 0, 0, 0], g[:, 7, 7, 7])


def test_lift_is_linear():
    rng = np.random.default_rng(4)
    cam = scenes.sample_camera(2)
    f1, f2 = rng.normal(size=(2, 2, 16, 16))
    lift = lambda f: G.backproject_features(Tensor(f, dtype=np.float64), cam, 6).data
    np.testing.assert_allclose(lift(2.0 * f1 - 0.5 * f2), 2.0 * lift(f1) - 0.5 * lift(f2), atol=1e-12)


# --- depth ------------------------------------------------------------------

def test_depth_round_trip_single_pixel():
    rng = np.random.default_rng(5)
    cam = scenes.sample_camera(7)
    for _ in range(20):
        p = rng.uniform(-0.8, 0.8, 3)
        u, v = G.project(cam, p)
        d = cam.to_camera(p)[2]
        depth = np.zeros((cam.height, cam.width))
        depth[int(round(v)), int(round(u))] = d
        q = G.backproject_depth(depth, cam)
        assert q.shape == (1, 3)
        # one pixel at depth d spans d / f in object units
        assert np.linalg.norm(q[0] - p) <= np.sqrt(0.5) * d / cam.focal + 1e-9


def test_zero_depth_is_empty():
    assert G.backproject_depth(np.zeros((8, 8)), axis_camera(size=8)).shape == (0, 3)


def test_rendered_sphere_residual():
    sc = scenes.sample_scene(0, scenes.SceneSpec(primitives=[scenes.Primitive("sphere", (0, 0, 0), (1.0,))]))
    cam = scenes.sample_camera(9)
    rv = scenes.render(sc, cam)
    pts = G.backproject_depth(rv.depth, cam)
    assert len(pts) > 100
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1.0)) <= 2.0 / cam.height


def test_negative_depth_rejected():
    with pytest.raises(ValueError):
        G.backproject_depth(-np.ones((2, 2)), axis_camera(size=2))


# --- voxelization ------------------------------------------------------------

def test_voxel_center_point():
    g = G.voxelize_points([[-1 + 3 / 8, -1 + 1 / 8, -1 + 15 / 8]], 8)
    assert g.sum() == 1 and g[1, 0, 7] == 1


def test_points_outside_cube_discarded():
    assert G.voxelize_points([[1.01, 0, 0], [0, -1.5, 0], [2, 2, 2]], 4).sum() == 0


def test_face_belongs_to_lower_cell():
    idx, inside = G.voxel_index([[0.0, -0.5, 1.0], [-1.0, 0.25, 0.5]], 4)
    assert inside.all()
    np.testing.assert_array_equal(idx, [[1, 0, 3], [0, 2, 2]])


def test_sphere_cloud_matches_floor_oracle():
    rng = np.random.default_rng(6)
    d = rng.normal(size=(100_000, 3))
    pts = d / np.linalg.norm(d, axis=1, keepdims=True)
    g = G.voxelize_points(pts, 16)
    want = np.zeros((16, 16, 16))
    keep = np.all(np.abs(pts) <= 1, axis=1)
    i = np.minimum(np.floor((pts[keep] + 1) * 8).astype(int), 15)
    want[i[:, 0], i[:, 1], i[:, 2]] = 1
    assert np.array_equal(g, want)


def test_render_backproject_voxelize_near_surface():
    sc = scenes.sample_scene(4)
    cam = scenes.sample_camera(4)
    rv = scenes.render(sc, cam)
    g = G.voxelize_points(G.backproject_depth(rv.depth, cam), 16)
    c = G.voxel_centers(16)[g.reshape(-1) > 0]
    # within one voxel diagonal of the true surface
    assert np.all(np.abs(sc.implicit(c)) <= np.sqrt(3) * 2 / 16)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1.5, 1.5, allow_nan=False)] * 3), min_size=1, max_size=40),
       st.integers(1, 12))
def test_voxelize_property(points, n):
    pts = np.array(points)
    g = G.voxelize_points(pts, n)
    assert set(np.unique(g)) <= {0.0, 1.0}
    inside = np.all(np.abs(pts) <= 1, axis=1)
    idx, _ = G.voxel_index(pts[inside], n)
    # every inside point marks its cell and nothing else is marked
    assert np.all(g[idx[:, 0], idx[:, 1], idx[:, 2]] == 1)
    assert g.sum() == len({tuple(i) for i in idx})
