"""SDF auto-decoder: decoder network, per-shape codes, losses, training."""

from .decoder import CodeTable, SdfDecoder, spatial_gradient
from .losses import (
    GaussianMixturePrior,
    clamped_sdf_loss,
    eikonal_from_gradients,
    eikonal_loss,
    gmm_prior_loss,
    mixture_nll,
)
from .training import (
    Stage1Config,
    Stage1Result,
    decoder_field,
    load_stage1_checkpoint,
    reconstruct_shape,
    save_stage1_checkpoint,
    train_stage1,
)

__all__ = [
    "CodeTable",
    "GaussianMixturePrior",
    "SdfDecoder",
    "Stage1Config",
    "Stage1Result",
    "clamped_sdf_loss",
    "decoder_field",
    "eikonal_from_gradients",
    "eikonal_loss",
    "gmm_prior_loss",
    "load_stage1_checkpoint",
    "mixture_nll",
    "reconstruct_shape",
    "save_stage1_checkpoint",
    "spatial_gradient",
    "train_stage1",
]
