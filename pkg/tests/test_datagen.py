import json

import numpy as np
import pytest

from diar.datagen import (
    SceneSpec,
    generate_dataset,
    generate_sequence,
    homography_from_cameras,
    plane_corners,
    read_dataset,
    reference_camera,
    render_frame,
    sample_camera,
    synthetic_base_image,
    write_dataset,
)
from diar.geometry import depth, normalize_det
from diar.imaging import resize_to, warp


def make_spec(seed=0, size=32, **kw):
    base = synthetic_base_image(seed, size, size)
    return SceneSpec(base_image=base, seed=seed, height=size, width=size, **kw)


def quiet_spec(seed=0, size=32, **kw):
    """Spec with every distortion turned off."""
    return make_spec(
        seed=seed,
        size=size,
        gain_strength=0.0,
        specular_count_range=(0, 0),
        shadow_count_range=(0, 0),
        occluder_count_range=(0, 0),
        **kw,
    )


def test_spec_rejects_bad_frame_count():
    with pytest.raises(ValueError, match="frame_count"):
        make_spec(frame_count=0)


def test_reference_camera_homography_is_identity():
    # head-on reference camera: the pixel-frame homography from the plane
    # raster to itself is the identity
    spec = make_spec()
    ref = reference_camera(spec)
    h = homography_from_cameras(ref, ref, plane_corners(spec))
    assert np.allclose(normalize_det(h).m, np.eye(3), atol=1e-9)


def test_sample_camera_deterministic():
    spec = make_spec()
    c1 = sample_camera(spec, np.random.default_rng(11))
    c2 = sample_camera(spec, np.random.default_rng(11))
    assert np.array_equal(c1.k, c2.k)
    assert np.array_equal(c1.r, c2.r)
    assert np.array_equal(c1.t, c2.t)


def test_sample_camera_corner_visibility_audit():
    # every sampled camera must see all four plane corners at positive depth
    spec = make_spec()
    corners = plane_corners(spec)
    rng = np.random.default_rng(5)
    for _ in range(1000):
        cam = sample_camera(spec, rng)
        assert all(depth(cam, c) > 0 for c in corners)


def test_sample_camera_impossible_ranges_raise():
    spec = make_spec(radius_range=(0.01, 0.02), cone_angle_deg=89.0,
                     fov_range_deg=(1.0, 1.5))
    with pytest.raises(ValueError, match="100 attempts"):
        sample_camera(spec, np.random.default_rng(0))


def test_render_frame_no_distortion_reference_is_base():
    spec = quiet_spec()
    frame, h = render_frame(spec, reference_camera(spec), np.random.default_rng(0))
    base = resize_to(spec.base_image, spec.height, spec.width)
    assert np.allclose(frame.data, base.data, atol=1e-12)
    assert np.allclose(normalize_det(h).m, np.eye(3), atol=1e-9)


def test_render_frame_deterministic_replay():
    spec = make_spec(occluder_count_range=(1, 2), specular_count_range=(1, 2),
                     shadow_count_range=(1, 2))
    cam = sample_camera(spec, np.random.default_rng(3))
    f1, h1 = render_frame(spec, cam, np.random.default_rng(42))
    f2, h2 = render_frame(spec, cam, np.random.default_rng(42))
    assert np.array_equal(f1.data, f2.data)
    assert np.array_equal(h1.m, h2.m)


def test_opaque_occluder_hides_base():
    # identical rng, two different paintings, a single fully opaque occluder:
    # frames must agree exactly on the occluded region and differ elsewhere
    kw = dict(
        gain_strength=0.0,
        specular_count_range=(0, 0),
        shadow_count_range=(0, 0),
        occluder_count_range=(1, 1),
        occluder_opacity_range=(1.0, 1.0),
        occluder_size_range=(0.3, 0.4),
    )
    spec_a = make_spec(seed=0, **kw)
    spec_b = make_spec(seed=1, **kw)
    cam = reference_camera(spec_a)
    fa, _ = render_frame(spec_a, cam, np.random.default_rng(7))
    fb, _ = render_frame(spec_b, cam, np.random.default_rng(7))
    same = np.all(fa.data == fb.data, axis=2)
    assert same.sum() > 10  # occluded region present and base-independent
    assert (~same).sum() > 10  # paintings still visible elsewhere


def test_generate_sequence_aligned_contract():
    spec = make_spec(frame_count=4, aligned=True)
    seq = generate_sequence(spec)
    assert len(seq.frames) == 4
    for h in seq.homographies:
        assert np.array_equal(h.m, np.eye(3))
    for frame in seq.frames:
        assert not np.array_equal(frame.data, seq.label.data)


def test_generate_sequence_misaligned_contract():
    spec = make_spec(frame_count=4, aligned=False)
    seq = generate_sequence(spec)
    assert np.array_equal(seq.homographies[0].m, np.eye(3))
    assert any(
        not np.allclose(normalize_det(h).m, np.eye(3), atol=1e-9)
        for h in seq.homographies[1:]
    )


def test_generate_sequence_deterministic():
    s1 = generate_sequence(make_spec(seed=9, frame_count=3, aligned=False))
    s2 = generate_sequence(make_spec(seed=9, frame_count=3, aligned=False))
    for f1, f2 in zip(s1.frames, s2.frames):
        assert np.array_equal(f1.data, f2.data)
    for h1, h2 in zip(s1.homographies, s2.homographies):
        assert np.array_equal(h1.m, h2.m)
    assert np.array_equal(s1.label.data, s2.label.data)


def test_label_purity():
    # the label depends on the painting and geometry only, not on the
    # light/occluder random streams
    base = synthetic_base_image(0, 32, 32)
    s1 = generate_sequence(SceneSpec(base_image=base, seed=1, frame_count=2, height=32, width=32))
    s2 = generate_sequence(SceneSpec(base_image=base, seed=2, frame_count=2, height=32, width=32))
    assert np.array_equal(s1.label.data, s2.label.data)


def test_ground_truth_alignment_oracle():
    # warping frame i by its stored homography must beat every wrong
    # homography from the same sequence
    spec = make_spec(seed=4, size=48, frame_count=4, aligned=False,
                     gain_strength=0.1, specular_count_range=(0, 1),
                     shadow_count_range=(0, 0), occluder_count_range=(0, 0))
    seq = generate_sequence(spec)
    label = seq.label.data
    homs = seq.homographies
    for i in range(1, len(seq.frames)):
        def masked_rmse(h):
            warped, mask = warp(seq.frames[i], h, spec.height, spec.width)
            if mask.sum() < 100:
                return np.inf
            d = (warped.data - label)[mask]
            return float(np.sqrt(np.mean(d * d)))

        right = masked_rmse(homs[i])
        wrong = [masked_rmse(homs[j]) for j in range(len(homs)) if j != i
                 and not np.allclose(homs[j].m, homs[i].m)]
        assert right < min(wrong)


def test_dataset_round_trip(tmp_path):
    seqs = generate_dataset(2, master_seed=3, aligned=False, frame_count=3,
                            height=32, width=32)
    write_dataset(seqs, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back) == 2
    for a, b in zip(seqs, back):
        for ha, hb in zip(a.homographies, b.homographies):
            assert np.array_equal(ha.m, hb.m)  # bit-equal through JSON
        for fa, fb in zip(a.frames, b.frames):
            assert np.max(np.abs(fa.data - fb.data)) <= 1.0 / 255.0 + 1e-12
        assert np.max(np.abs(a.label.data - b.label.data)) <= 1.0 / 255.0 + 1e-12


def test_read_dataset_empty_dir(tmp_path):
    assert read_dataset(tmp_path) == []


def test_read_dataset_bad_homography_length(tmp_path):
    seqs = generate_dataset(1, master_seed=0, aligned=True, frame_count=2,
                            height=32, width=32)
    write_dataset(seqs, tmp_path)
    meta_path = tmp_path / "seq_00000" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["homographies"][0] = meta["homographies"][0][:8]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ValueError, match="8 values"):
        read_dataset(tmp_path)


def test_read_dataset_missing_frame(tmp_path):
    seqs = generate_dataset(1, master_seed=0, aligned=True, frame_count=2,
                            height=32, width=32)
    write_dataset(seqs, tmp_path)
    (tmp_path / "seq_00000" / "frame_001.ppm").unlink()
    with pytest.raises(ValueError, match="frame_001"):
        read_dataset(tmp_path)


def test_dataset_write_deterministic(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        write_dataset(
            generate_dataset(2, master_seed=8, aligned=False, frame_count=2,
                             height=32, width=32),
            d,
        )
    for p1 in sorted(d1.rglob("*")):
        p2 = d2 / p1.relative_to(d1)
        if p1.is_file():
            assert p1.read_bytes() == p2.read_bytes()
