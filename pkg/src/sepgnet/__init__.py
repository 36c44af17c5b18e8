"""Cross-modality person retrieval at desk scale: SEG image generation, a
weight-shareable dual-stream embedding network, pseudo-anchor aggregation
losses, and a retrieval evaluation harness."""

from .kernels import get_backend, set_backend
from .losses import (
    LossConfig,
    PseudoAnchorSet,
    compute_pseudo_anchors,
    cross_centre_loss,
    id_loss,
    paba_directional,
    paba_loss,
    total_loss,
)
from .model import BackboneConfig, DualStreamNet, EmbeddingBatch
from .numerics import (
    GradTape,
    Parameter,
    Tensor,
    backward,
    conv2d,
    finite_diff_check,
    linear,
    load_checkpoint,
    relu,
    save_checkpoint,
    strip_pool,
)
from .spectral import (
    GrayscaleCoefficients,
    Image,
    Modality,
    SpectralDecomposition,
    compose_seg,
    decompose,
    phase_reconstruct,
    replicate_channels,
    rgb_to_grey,
)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DualStreamNet",
    "EmbeddingBatch",
    "GradTape",
    "GrayscaleCoefficients",
    "Image",
    "LossConfig",
    "Modality",
    "Parameter",
    "PseudoAnchorSet",
    "SpectralDecomposition",
    "Tensor",
    "TrainConfig",
    "backward",
    "compose_seg",
    "conv2d",
    "linear",
    "relu",
    "strip_pool",
    "compute_pseudo_anchors",
    "cross_centre_loss",
    "decompose",
    "finite_diff_check",
    "get_backend",
    "id_loss",
    "load_checkpoint",
    "paba_directional",
    "paba_loss",
    "phase_reconstruct",
    "replicate_channels",
    "rgb_to_grey",
    "save_checkpoint",
    "set_backend",
    "total_loss",
    "train",
]
