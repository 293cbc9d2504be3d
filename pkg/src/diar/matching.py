"""Cosine-similarity scoring, mutual-best matching, RANSAC homography
estimation and whole-sequence alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import KeypointMatrix, cnn_descriptors, patch_descriptors, pyramid_keypoints
from .geometry import Correspondence, Homography, dlt
from .imaging import Image, warp

NORM_FLOOR = 1e-12


@dataclass
class ScoreMatrix:
    """Cosine similarities; s[j, i] compares row i of X1 with row j of X2."""

    s: np.ndarray


@dataclass
class MatchSet:
    """Mutual-best pairs as parallel index arrays plus scores."""

    idx1: np.ndarray
    idx2: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.idx1)


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    keep = norms > NORM_FLOOR
    out = np.zeros_like(x, dtype=np.float32)
    out[keep] = x[keep] / norms[keep, None]
    return out, keep


def score_matrix(x1: KeypointMatrix, x2: KeypointMatrix) -> ScoreMatrix:
    """Full cosine score matrix between two keypoint sets (which may have
    different sizes).  Zero-norm rows score 0 against everything."""
    if len(x1.x) == 0 or len(x2.x) == 0:
        raise ValueError("score_matrix: empty keypoint matrix")
    n1, _ = _normalize_rows(np.asarray(x1.x, dtype=np.float32))
    n2, _ = _normalize_rows(np.asarray(x2.x, dtype=np.float32))
    return ScoreMatrix(n2 @ n1.T)


def mutual_matches(s: ScoreMatrix, min_score: float = 0.0) -> MatchSet:
    """Exactly the double-argmax pairs with score >= min_score; argmax ties
    break toward the lowest index."""
    mat = s.s
    best_for_1 = mat.argmax(axis=0)  # for each column i: best j
    best_for_2 = mat.argmax(axis=1)  # for each row j: best i
    i_idx = np.arange(mat.shape[1])
    j_idx = best_for_1
    mutual = best_for_2[j_idx] == i_idx
    scores = mat[j_idx, i_idx]
    keep = mutual & (scores >= min_score)
    return MatchSet(i_idx[keep], j_idx[keep], scores[keep])


def mutual_matches_chunked(x1: KeypointMatrix, x2: KeypointMatrix,
                           min_score: float = 0.0, chunk: int = 2048) -> MatchSet:
    """Mutual-best matching without materializing the full score matrix;
    equivalent to mutual_matches(score_matrix(x1, x2), min_score)."""
    n1, keep1 = _normalize_rows(np.asarray(x1.x, dtype=np.float32))
    n2, keep2 = _normalize_rows(np.asarray(x2.x, dtype=np.float32))
    n_cols = n1.shape[0]
    col_best = np.full(n_cols, -np.inf, dtype=np.float32)
    col_arg = np.zeros(n_cols, dtype=np.intp)
    row_arg = np.zeros(n2.shape[0], dtype=np.intp)
    row_best = np.zeros(n2.shape[0], dtype=np.float32)
    for lo in range(0, n2.shape[0], chunk):
        hi = min(lo + chunk, n2.shape[0])
        block = n2[lo:hi] @ n1.T  # (hi-lo, n1)
        row_arg[lo:hi] = block.argmax(axis=1)
        row_best[lo:hi] = block[np.arange(hi - lo), row_arg[lo:hi]]
        blk_arg = block.argmax(axis=0)
        blk_best = block[blk_arg, np.arange(n_cols)]
        better = blk_best > col_best
        col_best[better] = blk_best[better]
        col_arg[better] = blk_arg[better] + lo
    i_idx = np.arange(n_cols)
    j_idx = col_arg
    mutual = row_arg[j_idx] == i_idx
    keep = mutual & (col_best >= min_score) & keep1 & keep2[j_idx]
    return MatchSet(i_idx[keep], j_idx[keep], col_best[keep])


@dataclass
class RansacResult:
    ok: bool
    homography: Homography | None
    inlier_mask: np.ndarray
    n_inliers: int
    mean_residual: float


def _symmetric_transfer_errors(h: Homography, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Average of forward (p -> q under h) and backward reprojection errors."""
    m = h.m
    mi = np.linalg.inv(m)

    def proj(mat, pts):
        hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ mat.T
        w = hom[:, 2]
        w = np.where(np.abs(w) < 1e-12, np.nan, w)
        return hom[:, :2] / w[:, None]

    fwd = np.linalg.norm(proj(m, p) - q, axis=1)
    bwd = np.linalg.norm(proj(mi, q) - p, axis=1)
    e = 0.5 * (fwd + bwd)
    return np.where(np.isfinite(e), e, np.inf)


def ransac_homography(matches: MatchSet, coords1: np.ndarray, coords2: np.ndarray,
                      threshold_px: float = 3.0, max_iters: int = 2000,
                      seed: int = 0) -> RansacResult:
    """Robust homography from matched coordinates via 4-point DLT hypotheses
    and symmetric-transfer-error consensus.  Deterministic for a fixed seed.

    Failure (too few matches or consensus below 4 inliers) is reported in the
    result rather than raised."""
    n = len(matches)
    empty = RansacResult(False, None, np.zeros(n, dtype=bool), 0, np.inf)
    if n < 4:
        return empty
    p = np.asarray(coords1, dtype=np.float64)[matches.idx1]
    q = np.asarray(coords2, dtype=np.float64)[matches.idx2]
    rng = np.random.default_rng(seed)
    best_count = 0
    best_res = np.inf
    best_mask = None
    for _ in range(max_iters):
        pick = rng.choice(n, size=4, replace=False)
        sub = [Correspondence(tuple(p[i]), tuple(q[i])) for i in pick]
        try:
            h = dlt(sub)
        except ValueError:
            continue
        err = _symmetric_transfer_errors(h, p, q)
        mask = err < threshold_px
        count = int(mask.sum())
        if count < 4:
            continue
        mean_res = float(err[mask].mean())
        if count > best_count or (count == best_count and mean_res < best_res):
            best_count = count
            best_res = mean_res
            best_mask = mask
    if best_mask is None or best_count < 4:
        return empty
    try:
        refined = dlt(
            Correspondence(tuple(pp), tuple(qq)) for pp, qq in zip(p[best_mask], q[best_mask])
        )
    except ValueError:
        return empty
    err = _symmetric_transfer_errors(refined, p, q)
    mask = err < threshold_px
    if int(mask.sum()) < 4:
        return empty
    return RansacResult(True, refined, mask, int(mask.sum()), float(err[mask].mean()))


@dataclass
class AlignConfig:
    provider: str = "patch"
    patch_k: int = 7
    scales: tuple = (1.0, 0.75, 0.5)
    min_score: float = 0.0
    threshold_px: float = 3.0
    max_iters: int = 2000
    seed: int = 0
    cnn_weights: object = None


@dataclass
class FrameDiagnostics:
    frame: int
    n_matches: int
    n_inliers: int
    homography: Homography | None
    failed: bool


@dataclass
class AlignmentResult:
    warped: list  # Image per frame (original frame for failures)
    masks: list  # boolean validity mask per frame
    homographies: list  # Homography or None per frame
    diagnostics: list  # FrameDiagnostics per frame (reference excluded)


def _make_provider(config: AlignConfig):
    if config.provider == "patch":
        return lambda img: patch_descriptors(img, config.patch_k)
    if config.provider == "cnn":
        if config.cnn_weights is None:
            raise ValueError("align: cnn provider requires cnn_weights")
        return lambda img: cnn_descriptors(img, config.cnn_weights)
    raise ValueError(f"align: unknown provider {config.provider!r}")


def align_sequence(frames, ref_index: int = 0, config: AlignConfig | None = None) -> AlignmentResult:
    """Align every frame to the reference frame.

    For each non-reference frame the estimated homography maps reference
    pixel coordinates to frame coordinates, so the frame is pull-warped onto
    the reference grid.  Per-frame failures are flagged and the original
    frame is carried through with an all-false mask."""
    config = config or AlignConfig()
    if not 0 <= ref_index < len(frames):
        raise ValueError(f"align: ref_index {ref_index} out of range")
    provider = _make_provider(config)
    ref = frames[ref_index]
    kp_ref = pyramid_keypoints(ref, config.scales, provider)
    warped = []
    masks = []
    homs = []
    diagnostics = []
    full_mask = np.ones((ref.height, ref.width), dtype=bool)
    for i, frame in enumerate(frames):
        if i == ref_index:
            warped.append(frame)
            masks.append(full_mask.copy())
            homs.append(Homography.identity())
            continue
        kp = pyramid_keypoints(frame, config.scales, provider)
        ms = mutual_matches_chunked(kp_ref, kp, config.min_score)
        result = ransac_homography(
            ms, kp_ref.coords, kp.coords,
            threshold_px=config.threshold_px, max_iters=config.max_iters,
            seed=config.seed + i,
        )
        if result.ok:
            wimg, wmask = warp(frame, result.homography, ref.height, ref.width)
            warped.append(wimg)
            masks.append(wmask)
            homs.append(result.homography)
        else:
            warped.append(frame)
            masks.append(np.zeros((ref.height, ref.width), dtype=bool))
            homs.append(None)
        diagnostics.append(
            FrameDiagnostics(i, len(ms), result.n_inliers, result.homography, not result.ok)
        )
    return AlignmentResult(warped, masks, homs, diagnostics)
