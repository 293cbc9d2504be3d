"""Procedural generation of distorted image sequences with ground-truth
labels and homographies.

A base image is treated as a painting on the plane z = 0.  A reference camera
views it head-on so that the plane raster coincides with the output pixel
grid; additional cameras are sampled in a shell in front of the plane.  Each
frame is the base image pull-warped into the sampled view, then composited
with a multiplicative gain field, additive specular blobs, soft shadows and
opaque-to-semi-transparent occluders.  Per-frame homographies map reference
pixel coordinates to frame pixel coordinates and are exact by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Camera, Homography, homography_from_cameras
from .imaging import Image, read_ppm, resize_to, warp, write_ppm


@dataclass
class SceneSpec:
    """Everything needed to deterministically generate one sequence."""

    base_image: Image
    seed: int = 0
    frame_count: int = 10
    height: int = 128
    width: int = 128
    aligned: bool = True
    # camera sampling
    radius_range: tuple[float, float] = (2.2, 3.0)
    cone_angle_deg: float = 25.0
    fov_range_deg: tuple[float, float] = (40.0, 55.0)
    lookat_jitter: float = 0.15
    # lighting
    gain_strength: float = 0.25
    specular_count_range: tuple[int, int] = (0, 2)
    specular_intensity: float = 0.5
    # shadows
    shadow_count_range: tuple[int, int] = (0, 2)
    shadow_softness: float = 2.0
    shadow_darkness_range: tuple[float, float] = (0.3, 0.9)
    # occluders
    occluder_count_range: tuple[int, int] = (0, 2)
    occluder_size_range: tuple[float, float] = (0.1, 0.3)
    occluder_opacity_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if self.height < 2 or self.width < 2:
            raise ValueError("output extents must be >= 2")

    def params_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_image")
        return d


@dataclass
class Sequence:
    frames: list
    label: Image
    homographies: list
    meta: dict


# plane geometry: half-extents; the plane raster [0..W-1]x[0..H-1] spans
# [-sx, sx] x [-sy, sy] at z = 0
REFERENCE_DISTANCE = 2.5


def _plane_half_extents(spec: SceneSpec) -> tuple[float, float]:
    sx = 1.0
    sy = (spec.height - 1.0) / (spec.width - 1.0)
    return sx, sy


def plane_corners(spec: SceneSpec):
    sx, sy = _plane_half_extents(spec)
    return [
        np.array([-sx, -sy, 0.0]),
        np.array([sx, -sy, 0.0]),
        np.array([sx, sy, 0.0]),
        np.array([-sx, sy, 0.0]),
    ]


def reference_camera(spec: SceneSpec) -> Camera:
    """Head-on camera whose pixel grid coincides with the plane raster."""
    sx, sy = _plane_half_extents(spec)
    d = REFERENCE_DISTANCE
    fx = d * (spec.width - 1.0) / (2.0 * sx)
    fy = d * (spec.height - 1.0) / (2.0 * sy)
    k = np.array(
        [[fx, 0.0, (spec.width - 1.0) / 2.0], [0.0, fy, (spec.height - 1.0) / 2.0], [0.0, 0.0, 1.0]]
    )
    r = np.eye(3)
    center = np.array([0.0, 0.0, -d])
    return Camera(k, r, -r @ center)


def _look_at_rotation(position, target):
    """Rows are the camera's right / down / forward axes in world coordinates."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(up_hint, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def sample_camera(spec: SceneSpec, rng: np.random.Generator) -> Camera:
    """Sample a camera in the front half-space shell looking at a jittered
    plane-center target; rejects poses with any plane corner at non-positive
    depth (error after 100 attempts)."""
    corners = plane_corners(spec)
    for _ in range(100):
        radius = rng.uniform(*spec.radius_range)
        theta = np.deg2rad(spec.cone_angle_deg) * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        position = radius * np.array(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)]
        )
        target = np.array(
            [rng.uniform(-spec.lookat_jitter, spec.lookat_jitter),
             rng.uniform(-spec.lookat_jitter, spec.lookat_jitter),
             0.0]
        )
        r = _look_at_rotation(position, target)
        fov = np.deg2rad(rng.uniform(*spec.fov_range_deg))
        f = 0.5 * (spec.width - 1.0) / np.tan(fov / 2.0)
        k = np.array(
            [[f, 0.0, (spec.width - 1.0) / 2.0], [0.0, f, (spec.height - 1.0) / 2.0], [0.0, 0.0, 1.0]]
        )
        cam = Camera(k, r, -r @ position)
        from .geometry import depth

        if all(depth(cam, c) > 0 for c in corners):
            return cam
    raise ValueError("sample_camera: no valid camera after 100 attempts (ranges too extreme)")


# ---------------------------------------------------------------------------
# compositing


def _gaussian_blob(h, w, cx, cy, sx, sy):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.exp(-(((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2) / 2.0)


def _gain_field(spec: SceneSpec, rng) -> np.ndarray:
    """Multiplicative low-frequency field: 1 + a sum of 2-4 random Gaussians,
    clamped to [0.4, 1.4]."""
    h, w = spec.height, spec.width
    field_ = np.ones((h, w))
    for _ in range(rng.integers(2, 5)):
        amp = rng.uniform(-spec.gain_strength, spec.gain_strength)
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        sx = rng.uniform(0.3, 0.8) * w
        sy = rng.uniform(0.3, 0.8) * h
        field_ += amp * _gaussian_blob(h, w, cx, cy, sx, sy)
    return np.clip(field_, 0.4, 1.4)


def _specular_layer(spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    layer = np.zeros((h, w))
    count = rng.integers(spec.specular_count_range[0], spec.specular_count_range[1] + 1)
    for _ in range(count):
        amp = rng.uniform(0.3, 1.0) * spec.specular_intensity
        cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        sx = rng.uniform(0.03, 0.15) * w
        sy = rng.uniform(0.03, 0.15) * h
        layer += amp * _gaussian_blob(h, w, cx, cy, sx, sy)
    return np.clip(layer, 0.0, 1.0)


def _convex_polygon_mask(h, w, rng, size_frac) -> np.ndarray:
    """Random convex polygon as an intersection of half-planes."""
    cx, cy = rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)
    n_verts = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n_verts))
    radii = rng.uniform(0.5, 1.0, size=n_verts) * size_frac * min(h, w)
    vx = cx + radii * np.cos(angles)
    vy = cy + radii * np.sin(angles)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.ones((h, w), dtype=bool)
    for i in range(n_verts):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % n_verts], vy[(i + 1) % n_verts]
        # counter-clockwise edges: interior is on the left
        mask &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
    return mask


def _ellipse_mask(h, w, rng, size_frac) -> np.ndarray:
    cx, cy = rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)
    ax = rng.uniform(0.5, 1.0) * size_frac * w
    ay = rng.uniform(0.5, 1.0) * size_frac * h
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def _apply_shadows(frame: np.ndarray, spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    count = rng.integers(spec.shadow_count_range[0], spec.shadow_count_range[1] + 1)
    for _ in range(count):
        mask = _convex_polygon_mask(h, w, rng, rng.uniform(0.15, 0.4)).astype(np.float64)
        if spec.shadow_softness > 0:
            mask = gaussian_filter(mask, spec.shadow_softness)
        darkness = rng.uniform(*spec.shadow_darkness_range)
        frame = frame * (1.0 - darkness * mask[..., None])
    return frame


def _apply_occluders(frame: np.ndarray, spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    count = rng.integers(spec.occluder_count_range[0], spec.occluder_count_range[1] + 1)
    for _ in range(count):
        size = rng.uniform(*spec.occluder_size_range)
        if rng.uniform() < 0.5:
            mask = _convex_polygon_mask(h, w, rng, size)
        else:
            mask = _ellipse_mask(h, w, rng, size)
        opacity = rng.uniform(*spec.occluder_opacity_range)
        if rng.uniform() < 0.5:
            fill = np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (h, w, 3)).copy()
        else:
            fill = rng.uniform(0.0, 1.0, size=(h, w, 3))
        alpha = opacity * mask[..., None]
        frame = frame * (1.0 - alpha) + fill * alpha
    return frame


def render_frame(spec: SceneSpec, cam: Camera, rng: np.random.Generator,
                 distort: bool = True) -> tuple[Image, Homography]:
    """Warp the base painting into the camera view, then composite the
    distortion layers.  Returns the frame and the homography mapping
    reference pixel coordinates to frame pixel coordinates."""
    ref = reference_camera(spec)
    h = homography_from_cameras(ref, cam, plane_corners(spec))
    base = resize_to(spec.base_image, spec.height, spec.width)
    frame_img, _ = warp(base, h.inverse(), spec.height, spec.width)
    frame = frame_img.data
    if distort:
        frame = frame * _gain_field(spec, rng)[..., None]
        frame = np.clip(frame + _specular_layer(spec, rng)[..., None], 0.0, 1.0)
        frame = _apply_shadows(frame, spec, rng)
        frame = _apply_occluders(frame, spec, rng)
    return Image(np.clip(frame, 0.0, 1.0)), h


def generate_sequence(spec: SceneSpec) -> Sequence:
    """Generate one sequence.

    The label is the base painting rendered from the reference camera with no
    distortions.  Aligned mode uses the reference camera for every frame;
    misaligned mode keeps the reference camera for frame 0 only.
    """
    ref = reference_camera(spec)
    label, _ = render_frame(spec, ref, np.random.default_rng(0), distort=False)
    frames = []
    homs = []
    for i in range(spec.frame_count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(i,)))
        if spec.aligned or i == 0:
            cam = ref
        else:
            cam = sample_camera(spec, rng)
        frame, h = render_frame(spec, cam, rng)
        if spec.aligned or i == 0:
            h = Homography.identity()
        frames.append(frame)
        homs.append(h)
    meta = {"seed": spec.seed, "mode": "aligned" if spec.aligned else "misaligned",
            "params": spec.params_dict()}
    return Sequence(frames, label, homs, meta)


# ---------------------------------------------------------------------------
# dataset I/O: seq_%05d/{frame_%03d.ppm, label.ppm, meta.json}


def write_dataset(sequences, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for idx, seq in enumerate(sequences):
        seq_dir = out_dir / f"seq_{idx:05d}"
        seq_dir.mkdir(exist_ok=True)
        for i, frame in enumerate(seq.frames):
            write_ppm(frame, seq_dir / f"frame_{i:03d}.ppm")
        write_ppm(seq.label, seq_dir / "label.ppm")
        meta = dict(seq.meta)
        meta["frame_count"] = len(seq.frames)
        meta["homographies"] = [h.to_list() for h in seq.homographies]
        with open(seq_dir / "meta.json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
            f.write("\n")


def read_dataset(in_dir) -> list:
    in_dir = Path(in_dir)
    sequences = []
    for seq_dir in sorted(in_dir.glob("seq_*")):
        meta_path = seq_dir / "meta.json"
        try:
            with open(meta_path) as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ValueError(f"{seq_dir.name}: bad or missing meta.json: {e}")
        if "homographies" not in meta or "frame_count" not in meta:
            raise ValueError(f"{seq_dir.name}: meta.json missing required fields")
        homs = []
        for j, values in enumerate(meta["homographies"]):
            if len(values) != 9:
                raise ValueError(
                    f"{seq_dir.name}: homography {j} has {len(values)} values, expected 9"
                )
            homs.append(Homography.from_list(values))
        n = meta["frame_count"]
        if len(homs) != n:
            raise ValueError(f"{seq_dir.name}: {len(homs)} homographies for {n} frames")
        frames = []
        for i in range(n):
            fp = seq_dir / f"frame_{i:03d}.ppm"
            if not fp.exists():
                raise ValueError(f"{seq_dir.name}: missing {fp.name}")
            frames.append(read_ppm(fp))
        lp = seq_dir / "label.ppm"
        if not lp.exists():
            raise ValueError(f"{seq_dir.name}: missing label.ppm")
        label = read_ppm(lp)
        clean_meta = {k: v for k, v in meta.items() if k not in ("homographies", "frame_count")}
        sequences.append(Sequence(frames, label, homs, clean_meta))
    return sequences


def synthetic_base_image(seed: int, height: int = 128, width: int = 128) -> Image:
    """Procedural textured base image (smooth color field plus rectangles and
    ellipses) so the pipeline does not require external image assets."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(999,)))
    img = np.zeros((height, width, 3))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    for ch in range(3):
        img[:, :, ch] = rng.uniform(0.2, 0.8)
        for _ in range(4):
            amp = rng.uniform(-0.4, 0.4)
            cx, cy = rng.uniform(0, width - 1), rng.uniform(0, height - 1)
            s = rng.uniform(0.15, 0.5) * min(height, width)
            img[:, :, ch] += amp * np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s)))
    for _ in range(14):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.uniform() < 0.5:
            x0, y0 = rng.integers(0, width - 8), rng.integers(0, height - 8)
            wbox = rng.integers(4, max(5, width // 3))
            hbox = rng.integers(4, max(5, height // 3))
            img[y0 : y0 + hbox, x0 : x0 + wbox] = color
        else:
            cx, cy = rng.uniform(0, width - 1), rng.uniform(0, height - 1)
            ax, ay = rng.uniform(3, width / 5), rng.uniform(3, height / 5)
            mask = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
            img[mask] = color
    # mild texture so descriptors are informative everywhere
    img += rng.normal(0.0, 0.015, size=img.shape)
    return Image(np.clip(img, 0.0, 1.0))


def generate_dataset(n_sequences: int, master_seed: int, aligned: bool,
                     frame_count: int, height: int, width: int,
                     base_images: list | None = None, **spec_kwargs) -> list:
    """Generate ``n_sequences`` sequences with per-sequence derived seeds."""
    sequences = []
    for i in range(n_sequences):
        seed = int(np.random.SeedSequence(entropy=master_seed, spawn_key=(i,)).generate_state(1)[0])
        if base_images:
            base = base_images[i % len(base_images)]
        else:
            base = synthetic_base_image(seed, height, width)
        spec = SceneSpec(
            base_image=base, seed=seed, frame_count=frame_count,
            height=height, width=width, aligned=aligned, **spec_kwargs,
        )
        sequences.append(generate_sequence(spec))
    return sequences
