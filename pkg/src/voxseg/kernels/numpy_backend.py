"""Pure numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable.
conv3d is realized as im2col + one BLAS gemm per call (the input-gradient
pass scatters per kernel tap with strided slice adds, so no indexed
scatter is needed).  grid_sample gathers the 8 trilinear corners with flat
fancy indexing; its value-gradient scatter sorts indices and reduces with
``np.add.reduceat`` so the result is deterministic for a fixed input.

All kernels accept float32 or float64 and preserve the input dtype.
Coordinates for grid_sample use the voxel-center convention: 0.0 and 1.0
map to the centers of the first and last voxel along each axis, and
out-of-range coordinates clamp to the border.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: tuple[int, int, int], stride: int,
            out_shape: tuple[int, int, int]) -> np.ndarray:
    """Gather kernel windows of padded input into (B*Do*Ho*Wo, Ci*kd*kh*kw)."""
    b, ci = xp.shape[:2]
    do, ho, wo = out_shape
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]  # (B,Ci,Do,Ho,Wo,kd,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(b * do * ho * wo, ci * k[0] * k[1] * k[2])


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    do, ho, wo = (_out_extent(d, kd, stride, pad),
                  _out_extent(h, kh, stride, pad),
                  _out_extent(wd, kw, stride, pad))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, (kd, kh, kw), stride, (do, ho, wo))
    wm = np.ascontiguousarray(w.reshape(co, -1).T)  # (Ci*k^3, Co)
    y = cols @ wm  # (B*V, Co)
    return np.ascontiguousarray(
        y.reshape(b, do, ho, wo, co).transpose(0, 4, 1, 2, 3))


def conv3d_backward(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                    gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, ci, d, h, wd = x.shape
    co, _, kd, kh, kw = w.shape
    do, ho, wo = gy.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x

    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 4, 1)).reshape(-1, co)

    cols = _im2col(xp, (kd, kh, kw), stride, (do, ho, wo))
    gw = (cols.T @ gy_mat).T.reshape(co, ci, kd, kh, kw)

    # Input gradient: expand gy back to column space, then scatter per tap
    # with strided slice adds (vectorized, fixed order).
    gcols = gy_mat @ w.reshape(co, -1)  # (B*V, Ci*k^3)
    gcols = gcols.reshape(b, do, ho, wo, ci, kd, kh, kw)
    gxp = np.zeros_like(xp)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                gxp[:, :, a:a + do * stride:stride,
                    bb:bb + ho * stride:stride,
                    c:c + wo * stride:stride] += gcols[..., a, bb, c].transpose(0, 4, 1, 2, 3)
    gx = gxp[:, :, pad:pad + d, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw


# ---------------------------------------------------------------------------
# grid_sample (trilinear, voxel-center convention, border clamp)
# ---------------------------------------------------------------------------

def _axis_coords(u: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map normalized coords to (lower index, fraction, clamp mask) on one axis."""
    if n == 1:
        z = np.zeros_like(u)
        return z.astype(np.int64), z, np.zeros_like(u, dtype=bool)
    g = u * (n - 1)
    inside = (g > 0.0) & (g < n - 1)
    g = np.clip(g, 0.0, float(n - 1))
    i0 = np.minimum(np.floor(g), n - 2).astype(np.int64)
    t = g - i0
    return i0, t, ~inside


def grid_sample_forward(value: np.ndarray, coords: np.ndarray) -> np.ndarray:
    c, d, h, w = value.shape
    i0, td, _ = _axis_coords(coords[:, 0], d)
    j0, th, _ = _axis_coords(coords[:, 1], h)
    k0, tw, _ = _axis_coords(coords[:, 2], w)
    flat = value.reshape(c, -1)
    out = np.zeros((coords.shape[0], c), dtype=value.dtype)
    for bd in (0, 1):
        wd_ = td if bd else 1.0 - td
        ii = np.minimum(i0 + bd, d - 1)
        for bh in (0, 1):
            wh_ = th if bh else 1.0 - th
            jj = np.minimum(j0 + bh, h - 1)
            for bw in (0, 1):
                ww_ = tw if bw else 1.0 - tw
                kk = np.minimum(k0 + bw, w - 1)
                idx = (ii * h + jj) * w + kk
                out += (wd_ * wh_ * ww_)[:, None] * flat[:, idx].T
    return out


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, out_flat: np.ndarray) -> None:
    """out_flat[idx[m]] += rows[m], deterministic via sort + reduceat."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    srows = rows[order]
    starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    sums = np.add.reduceat(srows, starts, axis=0)
    out_flat[sidx[starts]] += sums


def grid_sample_backward(value: np.ndarray, coords: np.ndarray,
                         gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, d, h, w = value.shape
    p = coords.shape[0]
    i0, td, clampd = _axis_coords(coords[:, 0], d)
    j0, th, clamph = _axis_coords(coords[:, 1], h)
    k0, tw, clampw = _axis_coords(coords[:, 2], w)
    flat = value.reshape(c, -1)

    idx_all = np.empty((8, p), dtype=np.int64)
    contrib_all = np.empty((8, p, c), dtype=value.dtype)
    dd = np.zeros(p, dtype=value.dtype)
    dh = np.zeros(p, dtype=value.dtype)
    dw = np.zeros(p, dtype=value.dtype)
    corner = 0
    for bd in (0, 1):
        wd_ = td if bd else 1.0 - td
        sd = 1.0 if bd else -1.0
        ii = np.minimum(i0 + bd, d - 1)
        for bh in (0, 1):
            wh_ = th if bh else 1.0 - th
            sh = 1.0 if bh else -1.0
            jj = np.minimum(j0 + bh, h - 1)
            for bw in (0, 1):
                ww_ = tw if bw else 1.0 - tw
                sw = 1.0 if bw else -1.0
                kk = np.minimum(k0 + bw, w - 1)
                idx = (ii * h + jj) * w + kk
                vals = flat[:, idx].T  # (P, C)
                gdot = np.einsum("pc,pc->p", gy, vals)
                dd += sd * (wh_ * ww_) * gdot
                dh += sh * (wd_ * ww_) * gdot
                dw += sw * (wd_ * wh_) * gdot
                idx_all[corner] = idx
                contrib_all[corner] = (wd_ * wh_ * ww_)[:, None] * gy
                corner += 1

    gflat = np.zeros((d * h * w, c), dtype=value.dtype)
    _scatter_rows(idx_all.reshape(-1), contrib_all.reshape(-1, c), gflat)
    gvalue = np.ascontiguousarray(gflat.T).reshape(c, d, h, w)

    gcoords = np.empty((p, 3), dtype=value.dtype)
    gcoords[:, 0] = np.where(clampd, 0.0, dd * (d - 1 if d > 1 else 0))
    gcoords[:, 1] = np.where(clamph, 0.0, dh * (h - 1 if h > 1 else 0))
    gcoords[:, 2] = np.where(clampw, 0.0, dw * (w - 1 if w > 1 else 0))
    return gvalue, gcoords
