"""Shared oracles and synthetic data for the test suite.

Everything here is deliberately independent of the package internals:
reference convolution by nested loops, plain-numpy bilinear sampling and
flow inversion, and procedural textures/labels. Oracles must stay dumb and
obviously correct.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_reference(x, k, stride=1, padding="same"):
    """Nested-loop correlation in float64; the slow, obviously-right one."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b, c, h, w = x.shape
    kc, _, kh, kw = k.shape
    if padding == "same":
        oh = math.ceil(h / stride)
        ow = math.ceil(w / stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        xp = np.pad(x, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    else:
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        xp = x
    out = np.zeros((b, kc, oh, ow))
    for bi in range(b):
        for ki in range(kc):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, ki, i, j] = np.sum(patch * k[ki])
    return out


def shift_image(img, dr, dc):
    """Backward integer shift: out(p) = img(p + (dr, dc)), zero fill."""
    img = np.asarray(img)
    h, w = img.shape
    out = np.zeros_like(img)
    src_r = slice(max(dr, 0), min(h + dr, h))
    dst_r = slice(max(-dr, 0), max(-dr, 0) + (src_r.stop - src_r.start))
    src_c = slice(max(dc, 0), min(w + dc, w))
    dst_c = slice(max(-dc, 0), max(-dc, 0) + (src_c.stop - src_c.start))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def bilinear_sample_clamped(plane, rows, cols):
    """Plain-numpy bilinear lookup with edge clamping."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    return (
        plane[r0, c0] * (1 - fr) * (1 - fc)
        + plane[r0, c1] * (1 - fr) * fc
        + plane[r1, c0] * fr * (1 - fc)
        + plane[r1, c1] * fr * fc
    )


def invert_flow(flow, iters=50):
    """Fixed-point inversion: find f with f(p) + g(p + f(p)) = 0.

    Converges for smooth flows whose Jacobian stays well below identity;
    also returns the residual magnitude so callers can mask bad pixels.
    """
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    f = np.zeros_like(flow)
    for _ in range(iters):
        sr = bilinear_sample_clamped(flow[..., 0], rr + f[..., 0], cc + f[..., 1])
        sc = bilinear_sample_clamped(flow[..., 1], rr + f[..., 0], cc + f[..., 1])
        f = -np.stack((sr, sc), axis=-1)
    sr = bilinear_sample_clamped(flow[..., 0], rr + f[..., 0], cc + f[..., 1])
    sc = bilinear_sample_clamped(flow[..., 1], rr + f[..., 0], cc + f[..., 1])
    residual = np.hypot(f[..., 0] + sr, f[..., 1] + sc)
    return f, residual


def _box_blur_1d(x, r, axis):
    n = x.shape[axis]
    pads = [(0, 0)] * x.ndim
    pads[axis] = (r + 1, r)
    xp = np.pad(x, pads, mode="edge")
    c = np.cumsum(xp, axis=axis)
    hi = np.take(c, np.arange(n) + 2 * r + 1, axis=axis)
    lo = np.take(c, np.arange(n), axis=axis)
    return (hi - lo) / (2 * r + 1)


def box_blur(x, r, passes=1):
    out = np.asarray(x, dtype=np.float64)
    for _ in range(passes):
        out = _box_blur_1d(_box_blur_1d(out, r, 0), r, 1)
    return out


def make_texture(h, w, seed=0):
    """Smooth multi-scale random texture in [0.05, 0.95] (float32)."""
    rng = np.random.default_rng(seed)
    coarse = box_blur(rng.random((h, w)), max(h // 24, 2), passes=2)
    mid = box_blur(rng.random((h, w)), 2, passes=2)
    img = 0.65 * _normalize(coarse) + 0.35 * _normalize(mid)
    return (0.05 + 0.9 * _normalize(img)).astype(np.float32)


def _normalize(x):
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def make_blob_labels(h, w, n_cells, seed=0, jitter=0.0, jitter_seed=None):
    """Voronoi-cell label image with IDs 1..n_cells (0 never appears).

    `jitter` shifts the fixed cell centers by a small random offset so a
    stack of sections varies slowly from one to the next.
    """
    rng = np.random.default_rng(seed)
    pts = np.column_stack((rng.uniform(0, h - 1, n_cells), rng.uniform(0, w - 1, n_cells)))
    if jitter > 0:
        jrng = np.random.default_rng(jitter_seed if jitter_seed is not None else seed)
        pts = pts + jrng.normal(0, jitter, pts.shape)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (rr[..., None] - pts[:, 0]) ** 2 + (cc[..., None] - pts[:, 1]) ** 2
    return (np.argmin(d2, axis=-1) + 1).astype(np.int32)


def labels_to_raw(labels, lut_seed=0, noise_seed=0, noise=0.02):
    """Render a label image as a raw section: per-label intensity + noise.

    The intensity lookup is seeded separately from the noise so a stack of
    sections shares one appearance while pixel noise varies.
    """
    labels = np.asarray(labels)
    lut = np.random.default_rng(lut_seed).uniform(0.15, 0.95, int(labels.max()) + 1)
    img = lut[labels] + np.random.default_rng(noise_seed).normal(0, noise, labels.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)
