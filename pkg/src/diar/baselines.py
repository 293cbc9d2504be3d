"""Non-learning reconstruction baselines: per-pixel median and mean, Robust
PCA (principal component pursuit) and a maximum-likelihood intrinsic-image
reconstruction from median log-gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .imaging import Image

LOG_FLOOR = 1.0 / 255.0


def _stack(frames, masks):
    """(T, H, W, C) value stack and (T, H, W) boolean validity stack."""
    data = np.stack([f.data for f in frames], axis=0)
    t, h, w, _ = data.shape
    if masks is None:
        valid = np.ones((t, h, w), dtype=bool)
    else:
        valid = np.stack([np.asarray(m, dtype=bool) for m in masks], axis=0)
    return data, valid


def _report_holes(valid):
    holes = ~valid.any(axis=0)
    if holes.any():
        ys, xs = np.nonzero(holes)
        coords = ", ".join(f"({x},{y})" for x, y in list(zip(xs, ys))[:8])
        raise ValueError(f"{holes.sum()} pixels have no valid observation, e.g. {coords}")


def median_stack(frames, masks=None) -> Image:
    """Per-pixel median over valid entries; even counts take the lower median."""
    data, valid = _stack(frames, masks)
    _report_holes(valid)
    t = data.shape[0]
    # sort invalid entries to the end, then index the lower median per pixel
    keyed = np.where(valid[..., None], data, np.inf)
    srt = np.sort(keyed, axis=0)
    counts = valid.sum(axis=0)
    mid = (counts - 1) // 2
    idx = np.broadcast_to(mid[..., None], srt.shape[1:])[None]
    out = np.take_along_axis(srt, idx, axis=0)[0]
    return Image(out)


def mean_stack(frames, masks=None) -> Image:
    data, valid = _stack(frames, masks)
    _report_holes(valid)
    w = valid[..., None].astype(np.float64)
    return Image((data * w).sum(axis=0) / w.sum(axis=0))


@dataclass
class RpcaResult:
    low_rank: np.ndarray
    sparse: np.ndarray
    converged: bool
    iterations: int
    residuals: list


def rpca(d: np.ndarray, lam: float | None = None, tol: float = 1e-7, max_iters: int = 500) -> RpcaResult:
    """Principal component pursuit via the inexact augmented-Lagrange-multiplier
    iteration (singular-value thresholding on L, elementwise shrinkage on S).

    Stops when ||D - L - S||_F / ||D||_F < tol.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0:
        raise ValueError("rpca: empty matrix")
    m, n = d.shape
    if lam is None:
        lam = 1.0 / np.sqrt(max(m, n))
    d_norm = np.linalg.norm(d)
    if d_norm == 0.0:
        return RpcaResult(np.zeros_like(d), np.zeros_like(d), True, 1, [0.0])

    # standard inexact-ALM initialization (Lin, Chen & Ma)
    two_norm = np.linalg.svd(d, compute_uv=False)[0]
    inf_norm = np.abs(d).max() / lam
    y = d / max(two_norm, inf_norm)
    mu = 1.25 / two_norm
    rho = 1.5
    mu_bar = mu * 1e7
    l = np.zeros_like(d)
    s = np.zeros_like(d)
    residuals = []
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        # shrink the sparse part
        tmp = d - l + y / mu
        s = np.sign(tmp) * np.maximum(np.abs(tmp) - lam / mu, 0.0)
        # singular-value threshold the low-rank part
        u, sig, vt = np.linalg.svd(d - s + y / mu, full_matrices=False)
        sig_t = np.maximum(sig - 1.0 / mu, 0.0)
        keep = sig_t > 0
        l = (u[:, keep] * sig_t[keep]) @ vt[keep]
        z = d - l - s
        y = y + mu * z
        mu = min(mu * rho, mu_bar)
        res = np.linalg.norm(z) / d_norm
        residuals.append(float(res))
        if res < tol:
            converged = True
            break
    return RpcaResult(l, s, converged, it, residuals)


def impute_masked(frames, masks):
    """Replace masked entries with the per-pixel valid median (for methods
    that cannot consume masks directly)."""
    data, valid = _stack(frames, masks)
    _report_holes(valid)
    med = median_stack(frames, masks).data
    filled = np.where(valid[..., None], data, med[None])
    return [Image(filled[i]) for i in range(filled.shape[0])]


def rpca_stack(frames, masks=None, lam=None, tol=1e-7, max_iters=500) -> Image:
    """RPCA over the (pixels x T) stack; the output image is the per-pixel
    median over the columns of the recovered low-rank component."""
    if masks is not None:
        frames = impute_masked(frames, masks)
    h, w, c = frames[0].data.shape
    d = np.stack([f.data.reshape(-1) for f in frames], axis=1)
    result = rpca(d, lam=lam, tol=tol, max_iters=max_iters)
    out = np.median(result.low_rank, axis=1).reshape(h, w, c)
    return Image(out)


@dataclass
class MleResult:
    image: Image
    converged: bool


def _grad_x(a):
    return a[..., :, 1:] - a[..., :, :-1]


def _grad_y(a):
    return a[..., 1:, :] - a[..., :-1, :]


def _div(gx, gy, h, w):
    """Adjoint-consistent divergence of an (H, W-1)/(H-1, W) gradient pair."""
    out = np.zeros((h, w))
    out[:, :-1] -= gx
    out[:, 1:] += gx
    out[:-1, :] -= gy
    out[1:, :] += gy
    return out


def weiss_mle(frames, masks=None, cg_tol=1e-8) -> MleResult:
    """Reconstruct the shared reflectance image as the exponential of the
    reintegrated per-pixel temporal median of log-image gradients.

    Per channel: log-transform (values floored at 1/255), filter with
    [1, -1] in x and y, take temporal medians, and solve the least-squares
    Poisson problem with Neumann boundaries by conjugate gradients.  The free
    constant is fixed so the output mean matches the temporal-median image.
    """
    if len(frames) < 1:
        raise ValueError("weiss_mle needs at least one frame")
    if masks is not None:
        frames = impute_masked(frames, masks)
    h, w, c = frames[0].data.shape
    logs = np.log(np.maximum(np.stack([f.data for f in frames]), LOG_FLOOR))
    med_img = np.median(np.maximum(np.stack([f.data for f in frames]), LOG_FLOOR), axis=0)

    def laplacian(u_flat):
        u = u_flat.reshape(h, w)
        return _div(_grad_x(u), _grad_y(u), h, w).reshape(-1)

    op = LinearOperator((h * w, h * w), matvec=laplacian)
    out = np.zeros((h, w, c))
    converged = True
    maxiter = 10 * h * w
    for ch in range(c):
        gx = np.median(_grad_x(logs[:, :, :, ch]), axis=0)
        gy = np.median(_grad_y(logs[:, :, :, ch]), axis=0)
        b = _div(gx, gy, h, w).reshape(-1)
        x0 = np.median(logs[:, :, :, ch], axis=0).reshape(-1)
        u, info = cg(op, b, x0=x0, rtol=0.0, atol=cg_tol, maxiter=maxiter)
        if info != 0:
            converged = False
        rec = np.exp(u.reshape(h, w))
        target = med_img[:, :, ch].mean()
        rec *= target / rec.mean()
        out[:, :, ch] = rec
    return MleResult(Image(out), converged)
