"""Ground-truth random smooth deformations for evaluation stacks.

Deformations are thin plate splines through k random control points:
positions uniform over the image rectangle, displacement components i.i.d.
normal with zero mean. Each stack section gets an independent deformation
derived from a per-section sub-seed, so raw and label stacks deformed with
the same seed receive identical geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssemreg.stacks import SectionStack
from ssemreg.warpfield import base_grid, tps_eval, tps_solve, warp_image, warp_image_nearest

__all__ = [
    "SyntheticDeformation",
    "random_tps_deformation",
    "deformation_flow",
    "deform_image",
    "deform_stack",
]


@dataclass
class SyntheticDeformation:
    points: np.ndarray  # (k, 2) control positions, (row, col)
    displacements: np.ndarray  # (k, 2) sampled vectors, (drow, dcol)
    sigma: float
    seed: object

    def __post_init__(self):
        if self.points.shape != self.displacements.shape:
            raise ValueError("points and displacements must have matching shapes")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def random_tps_deformation(extents, k: int, sigma: float, seed) -> SyntheticDeformation:
    """Sample a random deformation for an image of the given extents."""
    if k < 3:
        raise ValueError(f"need at least 3 control points for a spline, got {k}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    h, w = int(extents[0]), int(extents[1])
    rng = np.random.default_rng(seed)
    points = np.column_stack((rng.uniform(0.0, h - 1.0, k), rng.uniform(0.0, w - 1.0, k)))
    disp = rng.normal(0.0, sigma, size=(k, 2)) if sigma > 0 else np.zeros((k, 2))
    return SyntheticDeformation(points, disp, float(sigma), seed)


def deformation_flow(d: SyntheticDeformation, extents) -> np.ndarray:
    """Dense (H,W,2) flow interpolating the control displacements."""
    h, w = int(extents[0]), int(extents[1])
    pixels = base_grid(h, w, dtype=np.float64).reshape(-1, 2)
    flow = np.empty((h * w, 2), dtype=np.float32)
    for comp in range(2):
        coeffs = tps_solve(d.points, d.displacements[:, comp])
        flow[:, comp] = tps_eval(coeffs, pixels).astype(np.float32)
    return flow.reshape(h, w, 2)


def deform_image(image: np.ndarray, d: SyntheticDeformation, kind: str = "raw") -> np.ndarray:
    """Backward-warp an image by the deformation's dense flow.

    Raw images are resampled bilinearly; label images use nearest neighbor
    so the output value set stays inside the input's.
    """
    image = np.asarray(image)
    flow = deformation_flow(d, image.shape)
    if kind == "label":
        return warp_image_nearest(image, flow)
    if kind != "raw":
        raise ValueError(f"unknown image kind {kind!r}")
    return warp_image(image.astype(np.float32, copy=False), flow)


def deform_stack(stack: SectionStack, sigma: float, k: int = 16, seed: int = 0):
    """Deform every section independently; returns (deformed stack, flows).

    The per-section deformation is seeded by (seed, section position), so
    raw and label stacks of equal depth deform identically for equal seeds.
    The returned flows are the applied dense fields, one per section.
    """
    sections = []
    flows = []
    for pos in range(stack.depth):
        d = random_tps_deformation(stack.extents, k, sigma, seed=[seed, pos])
        flow = deformation_flow(d, stack.extents)
        flows.append(flow)
        section = stack.section(pos)
        if stack.kind == "label":
            sections.append(warp_image_nearest(section, flow))
        else:
            sections.append(warp_image(section.astype(np.float32, copy=False), flow))
    deformed = SectionStack.from_arrays(sections, kind=stack.kind, indices=stack.indices)
    return deformed, flows
