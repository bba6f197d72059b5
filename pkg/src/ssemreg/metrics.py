"""Registration quality scores: NCC, Dice, endpoint error, cross sections."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ssemreg.stacks import SectionStack

__all__ = [
    "ZeroVarianceError",
    "Heatmap",
    "ncc",
    "ncc_heatmap",
    "dice_label",
    "mean_dice_top_k",
    "mean_endpoint_error",
    "cross_section",
]


class ZeroVarianceError(ValueError):
    """NCC is undefined when either image is constant over the valid region."""


def _valid_selector(shape, mask):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise ValueError(f"mask extents {mask.shape} do not match image {shape}")
    return mask >= 0.5


def ncc(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Zero-normalized cross correlation over mask-valid pixels, in [-1, 1].

    Invariant to mean offsets and positive rescaling of either image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch {a.shape} vs {b.shape}")
    sel = _valid_selector(a.shape, mask)
    n = int(sel.sum())
    if n < 2:
        raise ValueError(f"need at least 2 valid pixels, got {n}")
    av = a[sel] - a[sel].mean()
    bv = b[sel] - b[sel].mean()
    va = float(np.dot(av, av))
    vb = float(np.dot(bv, bv))
    if va <= 0.0 or vb <= 0.0:
        raise ZeroVarianceError("constant image over the valid region; correlation undefined")
    return float(np.clip(np.dot(av, bv) / np.sqrt(va * vb), -1.0, 1.0))


@dataclass
class Heatmap:
    """Per-window NCC values on a regular grid; NaN marks windows where the
    correlation is undefined (zero variance)."""

    values: np.ndarray
    window: int
    stride: int

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def summary(self) -> float:
        """Mean over valid windows (NaN when no window is valid)."""
        if not self.valid.any():
            return float("nan")
        return float(self.values[self.valid].mean())


def ncc_heatmap(a: np.ndarray, b: np.ndarray, window: int = 32, stride: int = 16) -> Heatmap:
    """Windowed NCC map; window positions step by `stride` from the origin."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch {a.shape} vs {b.shape}")
    h, w = a.shape
    if window > h or window > w:
        raise ValueError(f"window {window} larger than image {a.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = range(0, h - window + 1, stride)
    cols = range(0, w - window + 1, stride)
    values = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            try:
                values[i, j] = ncc(a[r : r + window, c : c + window], b[r : r + window, c : c + window])
            except ZeroVarianceError:
                pass
    return Heatmap(values, window, stride)


def dice_label(a: np.ndarray, b: np.ndarray, label_id: int) -> float:
    """2|A∩B| / (|A| + |B|) for one label over images or whole stacks."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch {a.shape} vs {b.shape}")
    in_a = a == label_id
    in_b = b == label_id
    total = int(in_a.sum()) + int(in_b.sum())
    if total == 0:
        raise ValueError(f"label {label_id} absent from both inputs")
    return 2.0 * int((in_a & in_b).sum()) / total


def _stack_volume(x) -> np.ndarray:
    if isinstance(x, SectionStack):
        return np.stack([x.section(i) for i in range(x.depth)])
    return np.asarray(x)


def mean_dice_top_k(gt, test, k: int) -> float:
    """Mean Dice over the k largest non-background labels of `gt`.

    Labels are ranked by voxel count (ties by ID); label 0 is background.
    With fewer than k labels available, all are used and a warning reports
    the count.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    gt_vol = _stack_volume(gt)
    test_vol = _stack_volume(test)
    if gt_vol.shape != test_vol.shape:
        raise ValueError(f"extent mismatch {gt_vol.shape} vs {test_vol.shape}")
    labels, counts = np.unique(gt_vol[gt_vol != 0], return_counts=True)
    if labels.size == 0:
        raise ValueError("ground truth contains no non-background labels")
    if labels.size < k:
        warnings.warn(f"only {labels.size} labels available for top-{k} Dice; using all of them")
    order = np.lexsort((labels, -counts))[: min(k, labels.size)]
    return float(np.mean([dice_label(gt_vol, test_vol, int(labels[i])) for i in order]))


def mean_endpoint_error(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean Euclidean distance between two dense flows over valid pixels."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.shape[-1] != 2:
        raise ValueError(f"flows must share a (H,W,2) shape, got {est.shape} vs {gt.shape}")
    sel = _valid_selector(est.shape[:2], mask)
    if not sel.any():
        raise ValueError("no valid pixels to score")
    diff = est - gt
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(norms[sel].mean())


def cross_section(stack: SectionStack, axis: str, index: int) -> np.ndarray:
    """Fixed-row or fixed-column slice through every section.

    Returns a (depth, width) image for axis='row' or (depth, height) for
    axis='column'; straight structures appear as straight stripes once the
    stack is well aligned.
    """
    h, w = stack.extents
    if axis == "row":
        if not 0 <= index < h:
            raise ValueError(f"row {index} out of range for height {h}")
        return np.stack([stack.section(i)[index, :] for i in range(stack.depth)])
    if axis == "column":
        if not 0 <= index < w:
            raise ValueError(f"column {index} out of range for width {w}")
        return np.stack([stack.section(i)[:, index] for i in range(stack.depth)])
    raise ValueError(f"axis must be 'row' or 'column', got {axis!r}")
