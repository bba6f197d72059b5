"""Coarse displacement grids, their dense interpolation, and image warping.

A :class:`VectorMap` stores one (row, col) pixel displacement per control
point of a regular lattice spanning the image (align-corners placement:
corner control points sit exactly on corner pixels). Upsampling to a dense
per-pixel flow uses either align-corners bilinear interpolation or a thin
plate spline through the control points; warping is backward:
output(p) = input(p + flow(p)).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ssemreg.ndgrad import (
    Tensor,
    add,
    apply_matrix,
    bilinear_resize,
    grid_sample,
    stack_last,
    take_channel,
)

__all__ = [
    "VectorMap",
    "TpsCoefficients",
    "default_grid_shape",
    "control_points",
    "base_grid",
    "upsample_field",
    "upsample_field_graph",
    "tps_solve",
    "tps_eval",
    "warp_image",
    "warp_image_graph",
    "warp_image_nearest",
    "empty_space_mask",
    "mask_to_feature_weights",
]

INTERPOLATIONS = ("bilinear", "tps")


@dataclass
class VectorMap:
    """Coarse grid of 2-D pixel displacements, the optimization variable.

    `displacements` is (gh, gw, 2) float32 in (row, col) order; the grid
    must be no finer than the image it deforms.
    """

    displacements: np.ndarray
    image_shape: tuple[int, int]
    interpolation: str = "bilinear"

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float32)
        if self.displacements.ndim != 3 or self.displacements.shape[-1] != 2:
            raise ValueError(f"displacements must be (gh,gw,2), got {self.displacements.shape}")
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("non-finite displacements in vector map")
        self.image_shape = (int(self.image_shape[0]), int(self.image_shape[1]))
        gh, gw = self.grid_shape
        h, w = self.image_shape
        if gh > h or gw > w:
            raise ValueError(f"grid {gh}x{gw} finer than image {h}x{w}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.displacements.shape[0], self.displacements.shape[1]

    @classmethod
    def zeros(cls, grid_shape, image_shape, interpolation: str = "bilinear") -> "VectorMap":
        gh, gw = grid_shape
        return cls(np.zeros((gh, gw, 2), dtype=np.float32), image_shape, interpolation)


def default_grid_shape(image_shape, spacing: int = 32, minimum: int = 4) -> tuple[int, int]:
    """Control-point counts for roughly one point every `spacing` pixels."""
    h, w = image_shape
    gh = max(minimum, int(round((h - 1) / spacing)) + 1)
    gw = max(minimum, int(round((w - 1) / spacing)) + 1)
    return min(gh, h), min(gw, w)


def control_points(grid_shape, image_shape) -> np.ndarray:
    """(gh*gw, 2) pixel positions of the lattice control points."""
    gh, gw = grid_shape
    h, w = image_shape
    rows = np.linspace(0.0, h - 1.0, gh) if gh > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, gw) if gw > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack((rr.ravel(), cc.ravel()), axis=-1)


def base_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(H,W,2) array of each pixel's own (row, col) position."""
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = np.arange(h, dtype=dtype)[:, None]
    grid[..., 1] = np.arange(w, dtype=dtype)[None, :]
    return grid


# ---------------------------------------------------------------------------
# thin plate splines


@dataclass
class TpsCoefficients:
    """Radial weights + affine part of an exact-interpolation spline."""

    points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)
    affine: np.ndarray  # (3,): constant, row coefficient, col coefficient


def _tps_kernel(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, computed as 0.5 r^2 log r^2 with U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def _tps_system(points: np.ndarray) -> np.ndarray:
    n = len(points)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    k = _tps_kernel(d2)
    p = np.column_stack((np.ones(n), points))
    top = np.hstack((k, p))
    bottom = np.hstack((p.T, np.zeros((3, 3))))
    return np.vstack((top, bottom))


def tps_solve(points, values) -> TpsCoefficients:
    """Exact thin-plate-spline interpolation of scalar values at 2-D points.

    Kernel U(r) = r^2 log r with U(0) = 0, no smoothing; the radial weights
    satisfy the standard orthogonality side conditions (zero sum and zero
    first moments). Needs at least 3 non-collinear points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(pts) != len(vals):
        raise ValueError("points and values must have equal length")
    if len(pts) < 3:
        raise ValueError(f"thin plate spline needs >= 3 points, got {len(pts)}")
    lhs = _tps_system(pts)
    rhs = np.concatenate((vals, np.zeros(3)))
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular thin-plate-spline system (degenerate points): {exc}") from exc
    # LAPACK happily returns garbage for systems that are singular only up
    # to rounding (e.g. collinear points); verify the solution actually fits
    scale = max(float(np.max(np.abs(rhs))), 1.0)
    residual = float(np.max(np.abs(lhs @ sol - rhs)))
    if not np.all(np.isfinite(sol)) or residual > 1e-6 * scale:
        raise ValueError("singular thin-plate-spline system (degenerate points)")
    return TpsCoefficients(pts, sol[:-3], sol[-3:])


def tps_eval(coeffs: TpsCoefficients, query) -> np.ndarray:
    """Evaluate a solved spline at (m, 2) query points."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
    d2 = np.sum((q[:, None, :] - coeffs.points[None, :, :]) ** 2, axis=-1)
    radial = _tps_kernel(d2) @ coeffs.weights
    return radial + coeffs.affine[0] + q @ coeffs.affine[1:]


@lru_cache(maxsize=8)
def _tps_upsample_matrix(grid_shape, image_shape) -> np.ndarray:
    """(H*W, gh*gw) map from control values to dense per-pixel values.

    The spline is linear in its control values, so the whole interpolation
    collapses to one constant matrix per (grid, image) geometry.
    """
    ctrl = control_points(grid_shape, image_shape)
    h, w = image_shape
    lhs = _tps_system(ctrl)
    pixels = base_grid(h, w, dtype=np.float64).reshape(-1, 2)
    d2 = np.sum((pixels[:, None, :] - ctrl[None, :, :]) ** 2, axis=-1)
    basis = np.hstack((_tps_kernel(d2), np.ones((len(pixels), 1)), pixels))
    full = np.linalg.solve(lhs, basis.T).T  # rows: evaluation at each pixel
    return np.ascontiguousarray(full[:, : len(ctrl)])


# ---------------------------------------------------------------------------
# field upsampling and warping


def upsample_field_graph(disp: Tensor, vmap: VectorMap) -> Tensor:
    """Dense (H,W,2) flow from a displacement leaf, differentiable w.r.t. it."""
    h, w = vmap.image_shape
    dr = take_channel(disp, 0)
    dc = take_channel(disp, 1)
    if vmap.interpolation == "bilinear":
        dense_r = bilinear_resize(dr, (h, w))
        dense_c = bilinear_resize(dc, (h, w))
    else:
        m = _tps_upsample_matrix(vmap.grid_shape, vmap.image_shape)
        dense_r = apply_matrix(m, dr, (h, w))
        dense_c = apply_matrix(m, dc, (h, w))
    return stack_last(dense_r, dense_c)


def upsample_field(vmap: VectorMap) -> np.ndarray:
    """Dense per-pixel flow (H,W,2) for a vector map."""
    disp = Tensor(vmap.displacements, (), None, op="leaf")
    return upsample_field_graph(disp, vmap).data


def warp_image_graph(image: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: output(p) = image(p + flow(p)), bilinear, zero outside."""
    h, w = image.data.shape[-2], image.data.shape[-1]
    if flow.data.shape[:2] != (h, w):
        raise ValueError(f"flow extents {flow.data.shape[:2]} do not match image {(h, w)}")
    grid = Tensor(base_grid(h, w, dtype=flow.data.dtype), (), None, op="leaf")
    return grid_sample(image, add(grid, flow))


def warp_image(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Numpy convenience wrapper around :func:`warp_image_graph`."""
    img_t = Tensor(np.asarray(image), (), None, op="leaf")
    flow_t = Tensor(np.asarray(flow), (), None, op="leaf")
    return warp_image_graph(img_t, flow_t).data


def warp_image_nearest(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp with nearest-neighbor sampling (for label images).

    Never invents values: every output pixel is either a source pixel or 0
    (out of bounds). Halfway coordinates round to the nearest even index.
    """
    img = np.asarray(image)
    h, w = img.shape
    target = base_grid(h, w, dtype=np.float64) + flow
    ri = np.rint(target[..., 0]).astype(np.int64)
    ci = np.rint(target[..., 1]).astype(np.int64)
    ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = img[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
    return np.where(ok, out, np.zeros((), dtype=img.dtype))


def empty_space_mask(flow: np.ndarray, source_shape) -> np.ndarray:
    """1 where p + flow(p) lands inside the source image, else 0 (float32)."""
    h, w = int(source_shape[0]), int(source_shape[1])
    target = base_grid(flow.shape[0], flow.shape[1], dtype=np.float64) + flow
    ok = (
        (target[..., 0] >= 0)
        & (target[..., 0] <= h - 1)
        & (target[..., 1] >= 0)
        & (target[..., 1] <= w - 1)
    )
    return ok.astype(np.float32)


def mask_to_feature_weights(mask: np.ndarray, feature_shape) -> np.ndarray:
    """Bilinear resize of a validity mask to feature-map extents.

    Fractional boundary values stay as soft multiplicative weights in [0,1];
    they are not re-thresholded.
    """
    fh, fw = int(feature_shape[0]), int(feature_shape[1])
    if fh < 1 or fw < 1:
        raise ValueError(f"feature extents must be >= 1, got {(fh, fw)}")
    src = Tensor(np.asarray(mask, dtype=np.float32), (), None, op="leaf")
    out = bilinear_resize(src, (fh, fw)).data
    return np.clip(out, 0.0, 1.0)
