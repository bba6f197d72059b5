"""Deformation-field optimization against one or more reference sections.

The moving image is warped by a coarse vector map (upsampled to a dense
flow), re-encoded, and compared against the fixed references either in
autoencoder feature space or directly on pixel intensities. The scalar
objective is

    sum_i w_i * <mask-weighted feature error vs reference i>
    + alpha * |v|^2 + beta * |grad v_x|^2 + gamma * |grad v_y|^2

where the mask downweights positions whose warped sample falls outside the
source image, and an optional loss drop zeroes the highest-error positions
of the pooled error map each iteration. Only the vector map is optimized;
model weights stay fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ssemreg.autoencoder import AutoencoderModel, encode
from ssemreg.ndgrad import (
    Tensor,
    add,
    backward,
    grid_sample,
    mul,
    reshape,
    scale,
    spatial_gradient,
    sub,
    sum_sq,
    take_channel,
)
from ssemreg.optim import AdamState, adam_step
from ssemreg.warpfield import (
    VectorMap,
    base_grid,
    default_grid_shape,
    empty_space_mask,
    mask_to_feature_weights,
    upsample_field_graph,
)

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "RegistrationDiverged",
    "AdamState",
    "feature_loss_pair",
    "multi_neighbor_loss",
    "loss_drop_mask",
    "drop_schedule",
    "adam_update",
    "register",
]

SIMILARITIES = ("feature", "pixel")


class RegistrationDiverged(RuntimeError):
    """Objective went non-finite; carries the loss trace so far."""

    def __init__(self, iteration: int, trace: list):
        super().__init__(f"registration loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class RegistrationConfig:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    window: int = 3
    neighbor_scheme: str = "halving"
    grid_spacing: int = 32
    iterations: int = 200
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    drop_init: float = 0.5
    drop_decay: float = 0.5
    interpolation: str = "bilinear"
    similarity: str = "feature"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.drop_init < 1.0:
            raise ValueError("drop_init must lie in [0, 1)")
        if not 0.0 < self.drop_decay <= 1.0:
            raise ValueError("drop_decay must lie in (0, 1]")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.iterations < 0 or self.grid_spacing < 1:
            raise ValueError("invalid iterations/grid_spacing")


@dataclass
class RegistrationResult:
    vector_map: VectorMap
    loss_trace: list
    term_trace: list  # per-iteration dict: feature/alpha/beta/gamma
    iterations: int


def drop_schedule(iteration: int, initial_rate: float, decay: float = 0.5,
                  floor: float = 0.01) -> float:
    """Drop rate at an iteration: initial * decay^iteration, snapped to 0
    once it falls below `floor` (the geometric decay alone never reaches 0)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    rate = initial_rate * decay**iteration
    return rate if rate >= floor else 0.0


def loss_drop_mask(error_map: np.ndarray, drop_rate: float) -> np.ndarray:
    """Keep-mask that zeroes exactly floor(drop_rate * count) positions with
    the highest error. Ties keep the lowest linear indices."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must lie in [0, 1)")
    err = np.asarray(error_map, dtype=np.float64)
    n = err.size
    drop = int(math.floor(drop_rate * n))
    keep = np.ones(n, dtype=np.float32)
    if drop > 0:
        # primary: error descending; tie-break: linear index descending,
        # so equal-error positions are dropped from the highest index down
        order = np.lexsort((-np.arange(n), -err.ravel()))
        keep[order[:drop]] = 0.0
    return keep.reshape(err.shape)


def adam_update(state: AdamState, vmap: VectorMap, grad: np.ndarray, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step on the displacements; returns the
    advanced state and a vector map with updated displacements."""
    if grad.shape != vmap.displacements.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match displacements {vmap.displacements.shape}")
    delta = adam_step(state, grad, lr, beta1, beta2, eps)
    return state, replace(vmap, displacements=vmap.displacements + delta)


# ---------------------------------------------------------------------------
# objective construction


def _leaf(arr, dtype=None) -> Tensor:
    a = np.asarray(arr)
    if dtype is not None:
        a = a.astype(dtype, copy=False)
    return Tensor(a, (), None, op="leaf")


def _check_images(moving, refs, model, cfg):
    shape = np.asarray(moving).shape
    if len(shape) != 2:
        raise ValueError(f"moving image must be 2-D, got shape {shape}")
    for i, r in enumerate(refs):
        if np.asarray(r).shape != shape:
            raise ValueError(f"reference {i} extents {np.asarray(r).shape} do not match moving {shape}")
    if cfg.similarity == "feature":
        ds = model.spec.downscale
        if shape[0] % ds or shape[1] % ds:
            raise ValueError(f"extents {shape} not divisible by encoder downscale factor {ds}")


def _similarity_features(model, image_t: Tensor, cfg) -> Tensor:
    """(C, fh, fw) map the objective compares: encoder output, or the image
    itself as a single channel in pixel mode."""
    if cfg.similarity == "feature":
        return encode(model, image_t)
    h, w = image_t.data.shape
    return reshape(image_t, (1, h, w))


def _reference_features(model, refs, cfg):
    return [_similarity_features(model, _leaf(r, np.float32), cfg).data for r in refs]


def _warped_features(moving, disp: Tensor, vmap: VectorMap, model, cfg):
    h, w = vmap.image_shape
    img_t = _leaf(moving, np.float32)
    flow_t = upsample_field_graph(disp, vmap)
    grid = _leaf(base_grid(h, w, dtype=flow_t.data.dtype))
    warped = grid_sample(img_t, add(grid, flow_t))
    return _similarity_features(model, warped, cfg), flow_t


def _regularizers(disp: Tensor, cfg):
    norm_term = sum_sq(disp)
    col_disp = take_channel(disp, 1)
    gr, gc = spatial_gradient(col_disp)
    grad_x = sum_sq(gr) + sum_sq(gc)
    row_disp = take_channel(disp, 0)
    gr, gc = spatial_gradient(row_disp)
    grad_y = sum_sq(gr) + sum_sq(gc)
    return norm_term, grad_x, grad_y


def _add_regularizers(loss: Tensor, disp: Tensor, cfg):
    norm_term, grad_x, grad_y = _regularizers(disp, cfg)
    parts = {
        "alpha": cfg.alpha * norm_term.item(),
        "beta": cfg.beta * grad_x.item(),
        "gamma": cfg.gamma * grad_y.item(),
    }
    if cfg.alpha:
        loss = loss + scale(norm_term, cfg.alpha)
    if cfg.beta:
        loss = loss + scale(grad_x, cfg.beta)
    if cfg.gamma:
        loss = loss + scale(grad_y, cfg.gamma)
    return loss, parts


def _pair_loss_graph(moving, ref_feat: np.ndarray, disp: Tensor, vmap: VectorMap, model, cfg):
    feats, _ = _warped_features(moving, disp, vmap, model, cfg)
    feat_term = sum_sq(sub(_leaf(ref_feat), feats))
    loss, parts = _add_regularizers(feat_term, disp, cfg)
    parts["feature"] = feat_term.item()
    return loss, parts


def _neighbor_loss_graph(moving, ref_feats, weights, disp: Tensor, vmap: VectorMap,
                         model, cfg, drop_rate: float, keep_mask=None):
    feats, flow_t = _warped_features(moving, disp, vmap, model, cfg)
    c, fh, fw = feats.data.shape

    # mask and drop weights are recomputed from current values but held
    # constant through the backward pass
    mask = empty_space_mask(flow_t.data, vmap.image_shape)
    mask_w = mask_to_feature_weights(mask, (fh, fw)).astype(np.float64)

    diffs = [sub(_leaf(rf), feats) for rf in ref_feats]
    pooled = np.zeros((fh, fw), dtype=np.float64)
    for w_i, d in zip(weights, diffs):
        pooled += w_i * np.sum(np.square(d.data, dtype=np.float64), axis=0)
    pooled *= mask_w
    keep = np.asarray(keep_mask, dtype=np.float64) if keep_mask is not None else loss_drop_mask(pooled, drop_rate)

    feat_term = None
    for w_i, d in zip(weights, diffs):
        w_full = np.sqrt(w_i * mask_w * keep)
        w_const = _leaf(np.broadcast_to(w_full, (c, fh, fw)).astype(d.data.dtype))
        term = sum_sq(mul(d, w_const))
        feat_term = term if feat_term is None else feat_term + term

    loss, parts = _add_regularizers(feat_term, disp, cfg)
    parts["feature"] = feat_term.item()
    return loss, parts


# ---------------------------------------------------------------------------
# public objective ops


def feature_loss_pair(moving, reference, vmap: VectorMap, model: AutoencoderModel,
                      cfg: RegistrationConfig, displacements: Tensor | None = None) -> Tensor:
    """Pairwise objective (no mask, no drop): similarity error of the warped
    moving image against one reference plus the three field regularizers.

    Pass a `displacements` leaf to differentiate the result w.r.t. it.
    """
    _check_images(moving, [reference], model, cfg)
    disp = displacements if displacements is not None else _leaf(vmap.displacements)
    ref_feat = _reference_features(model, [reference], cfg)[0]
    loss, _ = _pair_loss_graph(np.asarray(moving), ref_feat, disp, vmap, model, cfg)
    return loss


def multi_neighbor_loss(moving, refs, weights, vmap: VectorMap, model: AutoencoderModel,
                        cfg: RegistrationConfig, drop_rate: float = 0.0,
                        displacements: Tensor | None = None, keep_mask=None) -> Tensor:
    """Multi-reference objective with empty-space masking and loss drop.

    Per-reference squared feature errors are weighted per position by the
    resized validity mask and per reference by w_i, pooled, loss-dropped,
    and summed; the field regularizers are added on the coarse grid.
    `keep_mask` overrides the drop computation (used by gradient checks).
    """
    refs = list(refs)
    weights = [float(w) for w in weights]
    if not refs:
        raise ValueError("multi_neighbor_loss needs at least one reference")
    if len(refs) != len(weights):
        raise ValueError(f"{len(refs)} references but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("neighbor weights must be >= 0")
    _check_images(moving, refs, model, cfg)
    disp = displacements if displacements is not None else _leaf(vmap.displacements)
    ref_feats = _reference_features(model, refs, cfg)
    loss, _ = _neighbor_loss_graph(np.asarray(moving), ref_feats, weights, disp, vmap,
                                   model, cfg, drop_rate, keep_mask)
    return loss


def register(moving, refs, weights, model: AutoencoderModel, cfg: RegistrationConfig) -> RegistrationResult:
    """Optimize a zero-initialized vector map that warps `moving` onto the
    references, by Adam descent on the multi-neighbor objective.

    Deterministic for identical inputs. Raises :class:`RegistrationDiverged`
    if the loss goes non-finite.
    """
    refs = list(refs)
    weights = [float(w) for w in weights]
    if len(refs) != len(weights) or not refs:
        raise ValueError("refs and weights must be non-empty and equally long")
    _check_images(moving, refs, model, cfg)

    moving = np.asarray(moving, dtype=np.float32)
    grid_shape = default_grid_shape(moving.shape, cfg.grid_spacing)
    vmap = VectorMap.zeros(grid_shape, moving.shape, cfg.interpolation)
    disp = _leaf(vmap.displacements.copy())
    ref_feats = _reference_features(model, refs, cfg)
    state = AdamState.zeros_like(disp.data)

    trace: list[float] = []
    terms: list[dict] = []
    for it in range(cfg.iterations):
        rate = drop_schedule(it, cfg.drop_init, cfg.drop_decay)
        loss, parts = _neighbor_loss_graph(moving, ref_feats, weights, disp, vmap, model, cfg, rate)
        value = loss.item()
        if not math.isfinite(value):
            raise RegistrationDiverged(it, trace)
        trace.append(value)
        terms.append(parts)
        grad = backward(loss, [disp])[disp]
        disp.data += adam_step(state, grad, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        if not np.all(np.isfinite(disp.data)):
            raise RegistrationDiverged(it, trace)

    final = replace(vmap, displacements=disp.data.copy())
    return RegistrationResult(final, trace, terms, cfg.iterations)
