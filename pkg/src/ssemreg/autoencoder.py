"""Convolutional autoencoder whose encoder supplies similarity features.

The encoder is a stack of strided convolutions with ReLU activations; the
decoder mirrors it with transposed convolutions (no fully connected layers,
no biases), so the network applies to any input whose extents are divisible
by the total downscale factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ssemreg import ndgrad
from ssemreg.ndgrad import Tensor, backward, relu, reshape, sub, sum_sq, tensor
from ssemreg.optim import AdamState, adam_step
from ssemreg.stacks import SectionStack

__all__ = [
    "LayerSpec",
    "ArchitectureSpec",
    "AutoencoderModel",
    "TrainConfig",
    "TrainingDiverged",
    "build_model",
    "encode",
    "decode",
    "ae_loss",
    "sample_patches",
    "train_autoencoder",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the curve up to the failing step."""

    def __init__(self, step: int, losses: list):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step
        self.losses = losses


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    channels: int
    stride: int = 2


@dataclass(frozen=True)
class ArchitectureSpec:
    """Encoder layer list; the decoder is always its exact mirror."""

    layers: tuple
    name: str = "custom"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("architecture needs at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        for l in self.layers:
            if l.kernel < 1 or l.channels < 1 or l.stride < 1:
                raise ValueError(f"invalid layer {l}")
        ds = self.downscale
        if ds & (ds - 1) != 0:
            raise ValueError(f"total downscale factor {ds} is not a power of 2")

    @property
    def downscale(self) -> int:
        return math.prod(l.stride for l in self.layers)

    def encoder_shapes(self):
        """Kernel shapes (out, in, k, k) in application order."""
        shapes = []
        prev = 1
        for l in self.layers:
            shapes.append((l.channels, prev, l.kernel, l.kernel))
            prev = l.channels
        return shapes

    def decoder_shapes(self):
        """Mirrored kernel shapes in application order (deepest first)."""
        return list(reversed(self.encoder_shapes()))

    @classmethod
    def preset(cls, name: str) -> "ArchitectureSpec":
        if name == "shallow7x7":
            return cls(tuple(LayerSpec(7, c) for c in (16, 32, 64)), name="shallow7x7")
        if name == "deep3x3":
            return cls(tuple(LayerSpec(3, c) for c in (16, 32, 64, 64)), name="deep3x3")
        raise ValueError(f"unknown architecture preset {name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [{"kernel": l.kernel, "channels": l.channels, "stride": l.stride} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        layers = tuple(LayerSpec(int(l["kernel"]), int(l["channels"]), int(l["stride"])) for l in d["layers"])
        return cls(layers, name=str(d.get("name", "custom")))


@dataclass
class AutoencoderModel:
    spec: ArchitectureSpec
    encoder: list  # kernel Tensors, application order
    decoder: list  # kernel Tensors, application order (deepest first)

    def parameters(self) -> list:
        return [*self.encoder, *self.decoder]


@dataclass
class TrainConfig:
    weight_decay: float = 1e-4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    patch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0 or self.patch_size < 1:
            raise ValueError("invalid steps/patch_size")


def build_model(spec: ArchitectureSpec, seed: int = 0) -> AutoencoderModel:
    """Glorot-uniform initialization: each kernel ~ U(-b, b) with
    b = sqrt(6 / (fan_in + fan_out)). Deterministic per seed."""
    rng = np.random.default_rng(seed)

    def init(shape):
        out_c, in_c, kh, kw = shape
        b = math.sqrt(6.0 / ((in_c + out_c) * kh * kw))
        return tensor(rng.uniform(-b, b, size=shape).astype(np.float32))

    encoder = [init(s) for s in spec.encoder_shapes()]
    decoder = [init(s) for s in spec.decoder_shapes()]
    return AutoencoderModel(spec, encoder, decoder)


def _as_batch(image: Tensor):
    if image.data.ndim == 2:
        h, w = image.data.shape
        return reshape(image, (1, 1, h, w)), True
    if image.data.ndim == 4:
        return image, False
    raise ValueError(f"expected a (H,W) image or (B,C,H,W) batch, got shape {image.data.shape}")


def encode(model: AutoencoderModel, image: Tensor) -> Tensor:
    """Feature map of an image (graph-differentiable).

    Input extents must be divisible by the architecture's downscale factor;
    a (H,W) image yields (C,H/d,W/d), a batch stays batched.
    """
    x, squeeze = _as_batch(image)
    ds = model.spec.downscale
    h, w = x.data.shape[2], x.data.shape[3]
    if h % ds or w % ds:
        raise ValueError(f"extents {(h, w)} not divisible by downscale factor {ds}")
    for layer, kern in zip(model.spec.layers, model.encoder):
        x = relu(ndgrad.conv2d(x, kern, stride=layer.stride, padding="same"))
    if squeeze:
        b, c, fh, fw = x.data.shape
        x = reshape(x, (c, fh, fw))
    return x


def decode(model: AutoencoderModel, features: Tensor) -> Tensor:
    """Reconstruction from a feature map; inverts the encoder's shapes."""
    squeeze = features.data.ndim == 3
    x = features
    if squeeze:
        c, fh, fw = features.data.shape
        x = reshape(features, (1, c, fh, fw))
    if x.data.shape[1] != model.spec.layers[-1].channels:
        raise ValueError(
            f"feature map has {x.data.shape[1]} channels, architecture produces {model.spec.layers[-1].channels}"
        )
    for layer, kern in zip(reversed(model.spec.layers), model.decoder):
        x = relu(ndgrad.transposed_conv2d(x, kern, stride=layer.stride, padding="same"))
    if squeeze:
        b, c, h, w = x.data.shape  # c == 1: the outermost mirror maps back to one channel
        x = reshape(x, (h, w))
    return x


def ae_loss(model: AutoencoderModel, batch: Tensor, weight_decay: float) -> Tensor:
    """Reconstruction sum-of-squares over the batch plus weight-decay times
    the squared l2 norm of all kernels. Differentiable w.r.t. parameters."""
    if batch.data.ndim != 4 or batch.data.shape[0] < 1:
        raise ValueError(f"batch must be (N,1,H,W) with N >= 1, got shape {batch.data.shape}")
    recon = decode(model, encode(model, batch))
    loss = sum_sq(sub(batch, recon))
    if weight_decay != 0.0:
        reg = None
        for p in model.parameters():
            term = sum_sq(p)
            reg = term if reg is None else reg + term
        loss = loss + weight_decay * reg
    return loss


def _draw_patches(stack: SectionStack, patch: int, count: int, rng) -> np.ndarray:
    h, w = stack.extents
    if patch > h or patch > w:
        raise ValueError(f"patch size {patch} exceeds section extents {(h, w)}")
    out = np.empty((count, 1, patch, patch), dtype=np.float32)
    for i in range(count):
        sec = int(rng.integers(stack.depth))
        r0 = int(rng.integers(h - patch + 1))
        c0 = int(rng.integers(w - patch + 1))
        out[i, 0] = stack.section(sec)[r0 : r0 + patch, c0 : c0 + patch]
    return out


def sample_patches(stack: SectionStack, patch: int, count: int, seed: int = 0) -> Tensor:
    """Uniformly random axis-aligned patches across sections, as a
    (count,1,patch,patch) float32 batch in [0,1]. Deterministic per seed."""
    if stack.kind != "raw":
        raise ValueError("patches are sampled from raw stacks only")
    rng = np.random.default_rng(seed)
    data = _draw_patches(stack, patch, count, rng)
    return Tensor(data, (), None, op="leaf")


def train_autoencoder(model: AutoencoderModel, stack: SectionStack, cfg: TrainConfig):
    """Adam minimization of :func:`ae_loss` on randomly drawn patches.

    Returns (model, per-step loss values). Parameters are updated in place;
    the run is deterministic for a given seed and aborts on divergence.
    """
    params = model.parameters()
    states = [AdamState.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    for step in range(cfg.steps):
        batch = Tensor(_draw_patches(stack, cfg.patch_size, cfg.batch_size, rng), (), None, op="leaf")
        loss = ae_loss(model, batch, cfg.weight_decay)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, losses)
        losses.append(value)
        grads = backward(loss, params)
        for p, st in zip(params, states):
            p.data += adam_step(st, grads[p], cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(step, losses)
    return model, losses
