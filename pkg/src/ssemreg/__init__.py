"""Deformable registration of serial-section microscopy stacks.

A coarse grid of 2-D pixel displacements is optimized by gradient descent
through a differentiable warp; image similarity is measured either on raw
intensities or on feature maps from a convolutional autoencoder trained on
the data itself.
"""

__version__ = "0.1.0"

from ssemreg.autoencoder import (
    ArchitectureSpec,
    AutoencoderModel,
    TrainConfig,
    build_model,
    decode,
    encode,
    train_autoencoder,
)
from ssemreg.registration import RegistrationConfig, RegistrationResult, register
from ssemreg.stackalign import StackAlignmentPlan, align_stack
from ssemreg.stacks import SectionStack
from ssemreg.warpfield import VectorMap, upsample_field, warp_image

__all__ = [
    "ArchitectureSpec",
    "AutoencoderModel",
    "TrainConfig",
    "build_model",
    "encode",
    "decode",
    "train_autoencoder",
    "RegistrationConfig",
    "RegistrationResult",
    "register",
    "StackAlignmentPlan",
    "align_stack",
    "SectionStack",
    "VectorMap",
    "upsample_field",
    "warp_image",
    "__version__",
]
