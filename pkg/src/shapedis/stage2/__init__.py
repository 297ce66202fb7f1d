"""Latent VAE over shape codes with supervised coordinate structure."""

from .losses import (
    adaptive_temperature,
    code_recon_loss,
    covariance_offdiag_loss,
    dis_sen_loss,
    kl_loss,
    renderer_eikonal_loss,
    sdf_passthrough_loss,
    snnl_loss,
)
from .networks import CodeDecoder, CodeEncoder, LatentPosterior
from .training import (
    DisentangleConfig,
    Stage2Result,
    batch_temperatures,
    encode_codes,
    freeze_renderer,
    latent_traverse,
    load_stage2_checkpoint,
    save_stage2_checkpoint,
    stage2_objective,
    train_stage2,
    traversal_values,
)

__all__ = [
    "CodeDecoder",
    "CodeEncoder",
    "DisentangleConfig",
    "LatentPosterior",
    "Stage2Result",
    "adaptive_temperature",
    "batch_temperatures",
    "code_recon_loss",
    "covariance_offdiag_loss",
    "dis_sen_loss",
    "encode_codes",
    "freeze_renderer",
    "kl_loss",
    "latent_traverse",
    "load_stage2_checkpoint",
    "renderer_eikonal_loss",
    "save_stage2_checkpoint",
    "sdf_passthrough_loss",
    "snnl_loss",
    "stage2_objective",
    "train_stage2",
    "traversal_values",
]
