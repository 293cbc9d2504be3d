"""Projective geometry: homographies, pinhole cameras, DLT estimation and
homography comparison metrics.

Homographies map 2-D points through a 3x3 matrix followed by dehomogenization
and are equivalent under nonzero scaling of the matrix.  The comparison
metrics therefore normalize determinants (with a sign-preserving real cube
root) before taking norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DET_FLOOR = 1e-12


@dataclass(frozen=True)
class Homography:
    """Invertible 3x3 projective map."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"Homography requires a 3x3 matrix, got {m.shape}")
        if abs(np.linalg.det(m)) <= DET_FLOOR:
            raise ValueError("Homography is singular (|det| <= 1e-12)")
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self.compose(other))(p) == self(other(p))."""
        return Homography(self.m @ other.m)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.m.reshape(-1)]

    @staticmethod
    def from_list(values) -> "Homography":
        values = list(values)
        if len(values) != 9:
            raise ValueError(f"homography needs 9 row-major values, got {len(values)}")
        return Homography(np.asarray(values, dtype=np.float64).reshape(3, 3))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: upper-triangular intrinsics k, rotation r, translation t.

    World point X maps to pixel coordinates via dehomogenize(k @ (r @ X + t)).
    """

    k: np.ndarray
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise ValueError("Camera requires 3x3 k and r")
        if not np.allclose(np.tril(k, -1), 0.0):
            raise ValueError("intrinsics must be upper-triangular")
        if abs(k[2, 2] - 1.0) > 1e-12 or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("intrinsics need k33 == 1 and positive focal entries")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.r.T @ self.t


@dataclass(frozen=True)
class Correspondence:
    """A matched point pair between two images."""

    p: tuple[float, float]
    q: tuple[float, float]
    score: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.p).all() and np.isfinite(self.q).all()):
            raise ValueError("correspondence coordinates must be finite")


def apply(h: Homography, p) -> np.ndarray:
    """Map a 2-D point through the homography and dehomogenize."""
    x, y = float(p[0]), float(p[1])
    v = h.m @ np.array([x, y, 1.0])
    if abs(v[2]) < 1e-12:
        raise ValueError(f"point {(x, y)} maps to the line at infinity")
    return v[:2] / v[2]


def apply_many(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized ``apply`` over an (N, 2) array."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    v = hom @ h.m.T
    w = v[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise ValueError("some points map to the line at infinity")
    return v[:, :2] / w[:, None]


def project(cam: Camera, point) -> np.ndarray:
    """Project a 3-D world point into pixel coordinates."""
    x_cam = cam.r @ np.asarray(point, dtype=np.float64) + cam.t
    if abs(x_cam[2]) < 1e-12:
        raise ValueError("point has zero depth")
    v = cam.k @ x_cam
    return v[:2] / v[2]


def depth(cam: Camera, point) -> float:
    return float((cam.r @ np.asarray(point, dtype=np.float64) + cam.t)[2])


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity transform moving the centroid to the origin and mean length
    to sqrt(2); standard DLT conditioning."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def dlt(correspondences) -> Homography:
    """Least-squares homography from >= 4 point pairs via SVD.

    Inputs are Hartley-normalized before the linear system is assembled and
    the result is de-normalized afterwards.
    """
    pairs = list(correspondences)
    if len(pairs) < 4:
        raise ValueError(f"dlt needs at least 4 correspondences, got {len(pairs)}")
    src = np.array([c.p for c in pairs], dtype=np.float64)
    dst = np.array([c.q for c in pairs], dtype=np.float64)
    t1 = _hartley_normalization(src)
    t2 = _hartley_normalization(dst)
    sn = (src @ t1[:2, :2].T) + t1[:2, 2]
    dn = (dst @ t2[:2, :2].T) + t2[:2, 2]

    n = len(pairs)
    a = np.zeros((2 * n, 9))
    a[0::2, 0] = -sn[:, 0]
    a[0::2, 1] = -sn[:, 1]
    a[0::2, 2] = -1.0
    a[0::2, 6] = dn[:, 0] * sn[:, 0]
    a[0::2, 7] = dn[:, 0] * sn[:, 1]
    a[0::2, 8] = dn[:, 0]
    a[1::2, 3] = -sn[:, 0]
    a[1::2, 4] = -sn[:, 1]
    a[1::2, 5] = -1.0
    a[1::2, 6] = dn[:, 1] * sn[:, 0]
    a[1::2, 7] = dn[:, 1] * sn[:, 1]
    a[1::2, 8] = dn[:, 1]

    # reduced SVD once the system is overdetermined: full matrices would
    # materialize a (2n, 2n) U; the 8x9 minimal case needs the full V for
    # its null-space vector
    _, s, vt = np.linalg.svd(a, full_matrices=a.shape[0] < 9)
    if s[7] <= 1e-9 * max(s[0], 1e-300):
        raise ValueError("dlt: degenerate correspondence configuration (rank < 8)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t2) @ hn @ t1
    if abs(np.linalg.det(h)) <= DET_FLOOR:
        raise ValueError("dlt: estimated homography is singular")
    return Homography(h)


def homography_from_cameras(cam_i: Camera, cam_j: Camera, plane_corners) -> Homography:
    """Exact homography between two views of a plane given its 4 corners.

    Projects the corners into both cameras and fits a homography mapping
    view-i pixel coordinates to view-j pixel coordinates.
    """
    corners = [np.asarray(c, dtype=np.float64) for c in plane_corners]
    if len(corners) != 4:
        raise ValueError("homography_from_cameras requires exactly 4 plane corners")
    pairs = []
    for c in corners:
        if depth(cam_i, c) <= 0 or depth(cam_j, c) <= 0:
            raise ValueError("plane corner behind a camera")
        pairs.append(Correspondence(tuple(project(cam_i, c)), tuple(project(cam_j, c))))
    return dlt(pairs)


def normalize_det(h: Homography) -> Homography:
    """Scale so det == 1 using the sign-preserving real cube root."""
    d = np.linalg.det(h.m)
    return Homography(h.m / np.cbrt(d))


def homography_error(h_true: Homography, h_est: Homography) -> float:
    """Frobenius norm between the det-normalized matrices (scale invariant)."""
    return float(np.linalg.norm(normalize_det(h_true).m - normalize_det(h_est).m))


_UNIT_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])


def projection_error(h_true: Homography, h_est: Homography) -> float:
    """Mean displacement of the four fixed corners (+-1, +-1) between maps."""
    a = apply_many(h_true, _UNIT_CORNERS)
    b = apply_many(h_est, _UNIT_CORNERS)
    return float(np.linalg.norm(a - b, axis=1).mean())


def to_normalized_frame(h: Homography, width: int, height: int) -> Homography:
    """Conjugate a pixel-frame homography so it acts on [-1, 1]^2 coordinates."""
    if width < 2 or height < 2:
        raise ValueError("to_normalized_frame requires extents >= 2")
    n = np.array(
        [
            [2.0 / (width - 1.0), 0.0, -1.0],
            [0.0, 2.0 / (height - 1.0), -1.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return Homography(n @ h.m @ np.linalg.inv(n))


def from_normalized_frame(h: Homography, width: int, height: int) -> Homography:
    n = np.array(
        [
            [2.0 / (width - 1.0), 0.0, -1.0],
            [0.0, 2.0 / (height - 1.0), -1.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return Homography(np.linalg.inv(n) @ h.m @ n)


def corner_projection_error_px(h_true: Homography, h_est: Homography, width: int, height: int) -> float:
    """Mean displacement of the four image corners, in pixels."""
    corners = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]]
    )
    a = apply_many(h_true, corners)
    b = apply_many(h_est, corners)
    return float(np.linalg.norm(a - b, axis=1).mean())


def camera_to_dict(cam: Camera) -> dict:
    return {
        "k": [float(v) for v in cam.k.reshape(-1)],
        "r": [float(v) for v in cam.r.reshape(-1)],
        "t": [float(v) for v in cam.t],
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        np.asarray(d["k"], dtype=np.float64).reshape(3, 3),
        np.asarray(d["r"], dtype=np.float64).reshape(3, 3),
        np.asarray(d["t"], dtype=np.float64),
    )
