import numpy as np
import pytest

from diar.geometry import (
    Camera,
    Correspondence,
    Homography,
    apply,
    apply_many,
    dlt,
    homography_error,
    homography_from_cameras,
    normalize_det,
    project,
    projection_error,
    to_normalized_frame,
    from_normalized_frame,
)


def random_homography(rng, scale=0.3):
    while True:
        m = np.eye(3) + scale * rng.standard_normal((3, 3))
        m[2, :2] *= 0.1  # keep perspective terms moderate
        if abs(np.linalg.det(m)) > 1e-3:
            return Homography(m)


def random_camera(rng):
    from diar.datagen import SceneSpec, sample_camera, synthetic_base_image

    spec = SceneSpec(base_image=synthetic_base_image(0, 16, 16), height=64, width=64)
    return sample_camera(spec, rng)


def test_homography_rejects_singular():
    with pytest.raises(ValueError, match="singular"):
        Homography(np.ones((3, 3)))


def test_apply_identity_and_diag():
    assert np.allclose(apply(Homography.identity(), (5.0, 7.0)), [5.0, 7.0])
    assert np.allclose(apply(Homography(np.diag([2.0, 2.0, 1.0])), (1.0, 1.0)), [2.0, 2.0])


def test_apply_translation():
    h = Homography([[1, 0, 2], [0, 1, 3], [0, 0, 1]])
    assert np.allclose(apply(h, (0.0, 0.0)), [2.0, 3.0])


def test_apply_infinity_rejected():
    h = Homography([[1, 0, 0], [0, 1, 0], [1, 0, 0.0001]])
    with pytest.raises(ValueError, match="infinity"):
        apply(h, (-0.0001, 0.0))


def test_project_canonical_camera():
    cam = Camera(np.eye(3), np.eye(3), np.zeros(3))
    assert np.allclose(project(cam, (0.0, 0.0, 1.0)), [0.0, 0.0])


def test_project_pinhole_similar_triangles():
    f = 3.7
    cam = Camera(np.diag([f, f, 1.0]), np.eye(3), np.zeros(3))
    assert np.allclose(project(cam, (1.0, 1.0, 2.0)), [f / 2, f / 2])


def test_project_zero_depth_rejected():
    cam = Camera(np.eye(3), np.eye(3), np.zeros(3))
    with pytest.raises(ValueError, match="depth"):
        project(cam, (1.0, 1.0, 0.0))


def test_camera_invariants_enforced():
    with pytest.raises(ValueError):
        Camera(np.eye(3), 2 * np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(np.tril(np.ones((3, 3))), np.eye(3), np.zeros(3))


def test_dlt_identity_from_corners():
    pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    h = dlt([Correspondence(p, p) for p in pts])
    np.testing.assert_allclose(normalize_det(h).m, np.eye(3), atol=1e-10)


def test_dlt_translation():
    pts = [(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (0.0, 3.0), (2.0, 1.0)]
    h = dlt([Correspondence(p, (p[0] + 2.0, p[1] + 3.0)) for p in pts])
    expected = np.array([[1, 0, 2], [0, 1, 3], [0, 0, 1]], dtype=float)
    np.testing.assert_allclose(normalize_det(h).m, expected, atol=1e-9)


def test_dlt_recovers_random_homographies():
    rng = np.random.default_rng(0)
    for _ in range(25):
        h_true = random_homography(rng)
        src = rng.uniform(-2, 2, size=(8, 2))
        dst = apply_many(h_true, src)
        h_est = dlt(Correspondence(tuple(p), tuple(q)) for p, q in zip(src, dst))
        assert homography_error(h_true, h_est) < 1e-8


def test_dlt_too_few_points():
    with pytest.raises(ValueError, match="4"):
        dlt([Correspondence((0, 0), (0, 0))] * 3)


def test_dlt_degenerate_collinear():
    # all 8 source points on one line -> rank-deficient system
    src = [(float(i), 2.0 * i + 1.0) for i in range(8)]
    with pytest.raises(ValueError, match="degenerate|singular"):
        dlt(Correspondence(p, p) for p in src)


def test_homography_from_cameras_same_camera_identity():
    rng = np.random.default_rng(1)
    cam = random_camera(rng)
    corners = [np.array(c) for c in ([-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0])]
    h = homography_from_cameras(cam, cam, corners)
    np.testing.assert_allclose(normalize_det(h).m, np.eye(3), atol=1e-9)


def test_homography_from_cameras_pure_translation():
    # K = I cameras, second translated parallel to the plane: image points
    # shift by exactly -delta
    k = np.eye(3)
    r = np.eye(3)
    c0 = np.array([0.0, 0.0, -2.0])
    delta = np.array([0.3, -0.2, 0.0])
    cam_i = Camera(k, r, -r @ c0)
    cam_j = Camera(k, r, -r @ (c0 + delta))
    corners = [np.array(c, dtype=float) for c in ([-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0])]
    h = homography_from_cameras(cam_i, cam_j, corners)
    for p3 in [np.array([0.2, 0.1, 0.0]), np.array([-0.4, 0.5, 0.0])]:
        expected = project(cam_j, p3)
        got = apply(h, project(cam_i, p3))
        np.testing.assert_allclose(got, expected, atol=1e-9)
        # analytic: x' = (X - cx - dx)/2 => shift by -dx/2 in normalized image
        np.testing.assert_allclose(expected - project(cam_i, p3), -delta[:2] / 2.0, atol=1e-12)


def test_homography_from_cameras_dense_grid_consistency():
    rng = np.random.default_rng(2)
    corners = [np.array(c, dtype=float) for c in ([-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0])]
    for _ in range(20):
        cam_i, cam_j = random_camera(rng), random_camera(rng)
        h = homography_from_cameras(cam_i, cam_j, corners)
        grid = [(u, v) for u in np.linspace(-1, 1, 5) for v in np.linspace(-1, 1, 5)]
        for u, v in grid:
            x3 = np.array([u, v, 0.0])
            err = np.linalg.norm(apply(h, project(cam_i, x3)) - project(cam_j, x3))
            assert err < 1e-6


def test_homography_from_cameras_corner_behind():
    cam = Camera(np.eye(3), np.eye(3), np.array([0.0, 0.0, -5.0]))
    corners = [np.array(c, dtype=float) for c in ([-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0])]
    with pytest.raises(ValueError, match="behind"):
        homography_from_cameras(cam, cam, corners)


def test_normalize_det_diag_case():
    h = normalize_det(Homography(np.diag([2.0, 2.0, 2.0])))
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)


def test_normalize_det_scale_cancellation():
    rng = np.random.default_rng(3)
    h = random_homography(rng)
    base = normalize_det(h).m
    for lam in (-2.0, 0.5, 10.0):
        np.testing.assert_allclose(normalize_det(Homography(lam * h.m)).m, base, atol=1e-9)


def test_normalize_det_property_1000_random():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        h = random_homography(rng)
        assert abs(np.linalg.det(normalize_det(h).m) - 1.0) < 1e-9


def test_normalize_det_idempotent():
    rng = np.random.default_rng(5)
    h = normalize_det(random_homography(rng))
    np.testing.assert_allclose(normalize_det(h).m, h.m, atol=1e-12)


def test_homography_error_zero_and_scale_invariance():
    rng = np.random.default_rng(6)
    h = random_homography(rng)
    assert homography_error(h, h) == 0.0
    assert homography_error(h, Homography(-3.0 * h.m)) < 1e-12


def test_homography_error_translation_hand_value():
    # translation by (1, 0) already has det 1; difference has a single unit entry
    h_t = Homography([[1, 0, 1], [0, 1, 0], [0, 0, 1]])
    assert abs(homography_error(Homography.identity(), h_t) - 1.0) < 1e-12


def test_projection_error_basics():
    rng = np.random.default_rng(7)
    h = random_homography(rng)
    assert projection_error(h, h) == 0.0
    h_t = Homography([[1, 0, 1], [0, 1, 0], [0, 0, 1]])
    assert abs(projection_error(Homography.identity(), h_t) - 1.0) < 1e-12
    # identity vs diag(2,2,1): every corner moves by sqrt(2)
    h_s = Homography(np.diag([2.0, 2.0, 1.0]))
    assert abs(projection_error(Homography.identity(), h_s) - np.sqrt(2.0)) < 1e-12


def test_projection_error_symmetric():
    rng = np.random.default_rng(8)
    a, b = random_homography(rng), random_homography(rng)
    assert abs(projection_error(a, b) - projection_error(b, a)) < 1e-12


def test_to_normalized_frame_identity_and_translation():
    h = to_normalized_frame(Homography.identity(), 64, 64)
    np.testing.assert_allclose(h.m, np.eye(3), atol=1e-12)
    # pixel translation by (W-1)/2 becomes a unit translation in x
    w = 65
    h_t = Homography([[1, 0, (w - 1) / 2.0], [0, 1, 0], [0, 0, 1]])
    hn = to_normalized_frame(h_t, w, w)
    np.testing.assert_allclose(hn.m, [[1, 0, 1], [0, 1, 0], [0, 0, 1]], atol=1e-12)


def test_normalized_frame_round_trip():
    rng = np.random.default_rng(9)
    for _ in range(50):
        h = random_homography(rng)
        back = from_normalized_frame(to_normalized_frame(h, 128, 96), 128, 96)
        assert homography_error(h, back) < 1e-10


def test_serialization_round_trip():
    rng = np.random.default_rng(10)
    h = random_homography(rng)
    back = Homography.from_list(h.to_list())
    np.testing.assert_array_equal(back.m, h.m)
    with pytest.raises(ValueError, match="9"):
        Homography.from_list([1.0] * 8)
