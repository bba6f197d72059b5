"""Sliding-window alignment of a whole section stack.

The first section anchors the output frame; every later section registers
against the previously *aligned* sections inside the window (nearest first),
so only window+1 sections are ever resident. Aligned references keep
per-section errors from compounding into drift along deep stacks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ssemreg.autoencoder import AutoencoderModel
from ssemreg.registration import RegistrationConfig, register
from ssemreg.stacks import SectionStack
from ssemreg.warpfield import (
    VectorMap,
    default_grid_shape,
    upsample_field,
    warp_image,
    warp_image_nearest,
)

__all__ = [
    "StackAlignmentPlan",
    "StackAlignmentResult",
    "neighbor_weights",
    "align_stack",
    "resample_section",
]


@dataclass
class StackAlignmentPlan:
    config: RegistrationConfig = field(default_factory=RegistrationConfig)
    window: int = 3

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class StackAlignmentResult:
    maps: list  # one VectorMap per section (identity for the anchor)
    peak_resident: int
    aligned: SectionStack | None  # populated only when no sink was given


def neighbor_weights(n: int, scheme: str = "halving") -> list:
    """Reference weights by distance: 'halving' gives 1, 1/2, 1/4, ...;
    'uniform' gives all ones."""
    if n < 1:
        raise ValueError("need at least one neighbor")
    if scheme == "halving":
        return [2.0 ** (-i) for i in range(n)]
    if scheme == "uniform":
        return [1.0] * n
    raise ValueError(f"unknown neighbor weight scheme {scheme!r}")


def resample_section(section: np.ndarray, vmap: VectorMap, interpolation: str = "bilinear",
                     kind: str = "raw") -> np.ndarray:
    """Warp one section by a vector map.

    Raw sections use bilinear sampling; label sections must use nearest
    neighbor so no new label values are synthesized.
    """
    section = np.asarray(section)
    if section.shape != tuple(vmap.image_shape):
        raise ValueError(f"section extents {section.shape} do not match map {vmap.image_shape}")
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if kind == "label" and interpolation == "bilinear":
        raise ValueError("bilinear resampling would blend label IDs; use nearest for label sections")
    flow = upsample_field(vmap)
    if interpolation == "nearest":
        return warp_image_nearest(section, flow)
    return warp_image(section.astype(np.float32, copy=False), flow)


def align_stack(stack: SectionStack, model: AutoencoderModel, plan: StackAlignmentPlan,
                sink=None) -> StackAlignmentResult:
    """Align a raw stack section by section.

    Section k registers against the min(window, k) previously aligned
    sections. Each aligned section is handed to `sink(position, array)` as
    soon as it is complete; without a sink the aligned stack is collected
    in memory. Deterministic for identical inputs.
    """
    if stack.kind != "raw":
        raise ValueError("align_stack operates on raw stacks (labels follow via resample_section)")
    if stack.depth < 2:
        raise ValueError(f"alignment needs at least 2 sections, stack has {stack.depth}")

    collected = [] if sink is None else None

    def emit(pos, arr):
        if sink is None:
            collected.append(arr)
        else:
            sink(pos, arr)

    window: deque = deque(maxlen=plan.window)
    grid_shape = default_grid_shape(stack.extents, plan.config.grid_spacing)
    maps = [VectorMap.zeros(grid_shape, stack.extents, plan.config.interpolation)]
    peak = 1

    anchor = stack.section(0)
    emit(0, anchor)
    window.append(anchor)

    for pos in range(1, stack.depth):
        moving = stack.section(pos)
        peak = max(peak, len(window) + 1)
        refs = list(window)[::-1]  # nearest aligned section first
        weights = neighbor_weights(len(refs), plan.config.neighbor_scheme)
        result = register(moving, refs, weights, model, plan.config)
        aligned = resample_section(moving, result.vector_map, "bilinear", "raw")
        maps.append(result.vector_map)
        emit(pos, aligned)
        window.append(aligned)

    aligned_stack = None
    if sink is None:
        aligned_stack = SectionStack.from_arrays(collected, kind="raw", indices=stack.indices)
    return StackAlignmentResult(maps, peak, aligned_stack)
