"""Training the disentangling latent VAE on frozen stage-1 codes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, FormatError, FrozenRendererError, InputError, TrainingDiverged
from ..geometry.mesh import TriangleMesh
from ..geometry.sampling import SampleSet
from ..stage1.decoder import CodeTable, SdfDecoder
from ..stage1.training import reconstruct_shape
from ..utils import hash_module_params
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
from .networks import CodeDecoder, CodeEncoder

CHECKPOINT_MAGIC = "S2CKPT"
CHECKPOINT_VERSION = 1

LOSS_TERMS = ("code", "kl", "snnl", "cov", "dis_sen", "sdf")


@dataclass
class DisentangleConfig:
    latent_dim: int = 8
    code_dim: int = 64
    encoder_widths: tuple[int, ...] = (256, 128)
    decoder_widths: tuple[int, ...] = (128, 256, 256)
    disease_coord: int = 0
    age_coord: int = 1
    lambda_code: float = 0.44
    beta: float = 0.008
    lambda_snnl: float = 0.77
    snnl_lambda1: float = 0.5
    snnl_lambda2: float = 0.5
    lambda_cov: float = 0.007
    lambda_dis_sen: float = 0.56
    lambda_sdf: float = 1.0
    disease_threshold: float = 0.0
    age_threshold: float = 0.05
    epsilon: float = 0.02
    eta: float = 0.02
    temperature_mode: str = "adaptive"  # "adaptive" | "fixed"
    fixed_temperature: float = 1.0
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    sdf_points_per_shape: int = 512
    sdf_shapes_per_batch: int = 8
    renderer_eikonal: bool = False
    renderer_eikonal_weight: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 2:
            raise ConfigError("latent_dim: must be >= 2 (designated + free coordinates)")
        if self.code_dim < 1:
            raise ConfigError("code_dim: must be >= 1")
        if self.latent_dim >= self.code_dim:
            raise ConfigError("latent_dim: must be strictly smaller than code_dim")
        for key in ("encoder_widths", "decoder_widths"):
            widths = getattr(self, key)
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f"{key}: must be a non-empty tuple of positive widths")
        for key in ("disease_coord", "age_coord"):
            if not (0 <= getattr(self, key) < self.latent_dim):
                raise ConfigError(f"{key}: out of range for latent_dim={self.latent_dim}")
        if self.disease_coord == self.age_coord:
            raise ConfigError("age_coord: must differ from disease_coord")
        for key in (
            "lambda_code",
            "beta",
            "lambda_snnl",
            "snnl_lambda1",
            "snnl_lambda2",
            "lambda_cov",
            "lambda_dis_sen",
            "lambda_sdf",
            "disease_threshold",
            "age_threshold",
            "renderer_eikonal_weight",
        ):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if self.lambda_snnl > 0 and self.snnl_lambda1 + self.snnl_lambda2 == 0:
            raise ConfigError("snnl_lambda1: lambda1 + lambda2 must be positive when SNNL is on")
        if self.epsilon <= 0 or self.eta <= 0:
            raise ConfigError("epsilon: probe size and eta floor must be positive")
        if self.temperature_mode not in ("adaptive", "fixed"):
            raise ConfigError("temperature_mode: expected 'adaptive' or 'fixed'")
        if self.temperature_mode == "fixed" and self.fixed_temperature <= 0:
            raise ConfigError("fixed_temperature: must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2 (batch statistics need pairs)")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.sdf_points_per_shape < 1 or self.sdf_shapes_per_batch < 1:
            raise ConfigError("sdf_points_per_shape/sdf_shapes_per_batch: must be >= 1")


@dataclass
class Stage2Result:
    encoder: CodeEncoder
    decoder: CodeDecoder
    history: list[dict] = field(default_factory=list)
    config: DisentangleConfig | None = None
    renderer_hash: str | None = None


def stage2_objective(
    z_codes: torch.Tensor,
    mean: torch.Tensor,
    logvar: torch.Tensor,
    z_v: torch.Tensor,
    vae_decoder: CodeDecoder,
    disease_values: torch.Tensor,
    disease_mask: torch.Tensor,
    age_values: torch.Tensor,
    t_disease: float,
    t_age: float,
    config: DisentangleConfig,
    renderer: SdfDecoder | None = None,
    sdf_rows: torch.Tensor | None = None,
    sdf_points: torch.Tensor | None = None,
    sdf_targets: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """All objective terms for one batch. Shared by the trainer and by
    gradient checks (which feed leaf mean/logvar tensors and the mean path).

    The SNNL terms act on the stochastic latents, the spread/sensitivity
    terms on the posterior means; both designated coordinates get both.
    """
    z_hat = vae_decoder(z_v)
    terms: dict[str, torch.Tensor] = {}
    terms["code"] = code_recon_loss(z_hat, z_codes)
    terms["kl"] = kl_loss(mean, logvar)

    if config.lambda_snnl > 0:
        snnl_dis = snnl_loss(
            z_v,
            disease_values,
            disease_mask,
            config.disease_coord,
            t_disease,
            config.disease_threshold,
            config.snnl_lambda1,
            config.snnl_lambda2,
        )
        all_mask = torch.ones_like(disease_mask)
        snnl_age = snnl_loss(
            z_v,
            age_values,
            all_mask,
            config.age_coord,
            t_age,
            config.age_threshold,
            config.snnl_lambda1,
            config.snnl_lambda2,
        )
        terms["snnl"] = snnl_dis + snnl_age
    else:
        terms["snnl"] = z_v.sum() * 0.0

    terms["cov"] = covariance_offdiag_loss(z_v) if config.lambda_cov > 0 else z_v.sum() * 0.0

    if config.lambda_dis_sen > 0:
        terms["dis_sen"] = dis_sen_loss(
            mean, vae_decoder, config.disease_coord, config.epsilon, config.eta
        ) + dis_sen_loss(mean, vae_decoder, config.age_coord, config.epsilon, config.eta)
    else:
        terms["dis_sen"] = mean.sum() * 0.0

    if config.lambda_sdf > 0 and renderer is not None and sdf_rows is not None:
        codes_hat_sel = z_hat[sdf_rows]
        sdf = sdf_passthrough_loss(renderer, codes_hat_sel, sdf_points, sdf_targets)
        if config.renderer_eikonal:
            sdf = sdf + config.renderer_eikonal_weight * renderer_eikonal_loss(
                renderer, codes_hat_sel, sdf_points
            )
        terms["sdf"] = sdf
    else:
        terms["sdf"] = z_v.sum() * 0.0

    terms["total"] = (
        config.lambda_code * terms["code"]
        + config.beta * terms["kl"]
        + config.lambda_snnl * terms["snnl"]
        + config.lambda_cov * terms["cov"]
        + config.lambda_dis_sen * terms["dis_sen"]
        + config.lambda_sdf * terms["sdf"]
    )
    return terms


def freeze_renderer(renderer: SdfDecoder) -> str:
    """Freeze in place and return the parameter hash for later verification."""
    renderer.eval()
    for p in renderer.parameters():
        p.requires_grad_(False)
    return hash_module_params(renderer)


def batch_temperatures(
    z_v: torch.Tensor, config: DisentangleConfig
) -> tuple[float, float]:
    if config.temperature_mode == "fixed":
        return config.fixed_temperature, config.fixed_temperature
    return (
        adaptive_temperature(z_v, config.disease_coord),
        adaptive_temperature(z_v, config.age_coord),
    )


def train_stage2(
    codes: CodeTable,
    disease_labels: dict[str, float | None],
    age_norm: dict[str, float],
    config: DisentangleConfig,
    renderer: SdfDecoder | None = None,
    samples: list[SampleSet] | None = None,
) -> Stage2Result:
    """Optimize the code VAE with the five-term disentanglement objective.

    ``disease_labels`` maps shape_id -> value in [0, 1] or None (unlabeled);
    ``age_norm`` must cover every shape. When lambda_sdf > 0 the frozen
    stage-1 decoder and the per-shape SDF samples are required; a random
    sub-batch of shapes feeds the passthrough term each step.
    """
    config.validate()
    if config.code_dim != codes.dim:
        raise ConfigError(f"code_dim: config says {config.code_dim}, codes have {codes.dim}")
    n = len(codes)
    if n < 2:
        raise InputError("codes: need at least 2 shapes")
    missing_age = [sid for sid in codes.shape_ids if sid not in age_norm]
    if missing_age:
        raise InputError(f"age_norm: missing entries for {missing_age[:3]}...")

    sample_by_id: dict[str, SampleSet] = {}
    renderer_hash = None
    if config.lambda_sdf > 0:
        if renderer is None or samples is None:
            raise InputError("renderer and samples are required when lambda_sdf > 0")
        if renderer.latent_dim != codes.dim:
            raise InputError("renderer latent dim does not match the code table")
        sample_by_id = {s.shape_id: s for s in samples}
        missing = [sid for sid in codes.shape_ids if sid not in sample_by_id]
        if missing:
            raise InputError(f"samples: missing sample sets for {missing[:3]}...")
        renderer_hash = freeze_renderer(renderer)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    encoder = CodeEncoder(codes.dim, config.latent_dim, tuple(config.encoder_widths))
    decoder = CodeDecoder(config.latent_dim, codes.dim, tuple(config.decoder_widths))
    optimizer = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()), lr=config.lr
    )

    z_all = codes.to_tensor()
    dis_vals = torch.zeros(n)
    dis_mask = torch.zeros(n, dtype=torch.bool)
    for i, sid in enumerate(codes.shape_ids):
        val = disease_labels.get(sid)
        if val is not None:
            dis_vals[i] = float(val)
            dis_mask[i] = True
    ages = torch.tensor([float(age_norm[sid]) for sid in codes.shape_ids])

    history: list[dict] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = {t: 0.0 for t in (*LOSS_TERMS, "total")}
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics need at least a pair
            idx_t = torch.as_tensor(idx, dtype=torch.long)
            zb = z_all[idx_t]
            post = encoder(zb)
            z_v = post.sample(gen)
            t_dis, t_age = batch_temperatures(z_v, config)

            sdf_rows = sdf_points = sdf_targets = None
            if config.lambda_sdf > 0:
                n_sdf = min(config.sdf_shapes_per_batch, len(idx))
                chosen = rng.choice(len(idx), size=n_sdf, replace=False)
                pts_list, tgt_list = [], []
                for ci in chosen:
                    ss = sample_by_id[codes.shape_ids[idx[ci]]]
                    rows = rng.integers(0, len(ss), size=config.sdf_points_per_shape)
                    pts_list.append(ss.points[rows])
                    tgt_list.append(ss.sdf[rows])
                sdf_rows = torch.as_tensor(chosen, dtype=torch.long)
                sdf_points = torch.from_numpy(np.stack(pts_list)).float()
                sdf_targets = torch.from_numpy(np.stack(tgt_list)).float()

            terms = stage2_objective(
                zb,
                post.mean,
                post.logvar,
                z_v,
                decoder,
                dis_vals[idx_t],
                dis_mask[idx_t],
                ages[idx_t],
                t_dis,
                t_age,
                config,
                renderer=renderer,
                sdf_rows=sdf_rows,
                sdf_points=sdf_points,
                sdf_targets=sdf_targets,
            )
            values = {k: v.detach().item() for k, v in terms.items()}
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDiverged(
                    f"non-finite stage-2 loss at epoch {epoch}",
                    diagnostics={
                        "epoch": epoch,
                        "step": steps,
                        "terms": values,
                        "shape_ids": [codes.shape_ids[i] for i in idx],
                    },
                )
            optimizer.zero_grad(set_to_none=True)
            terms["total"].backward()
            optimizer.step()
            for k in sums:
                sums[k] += values[k]
            steps += 1
        if steps == 0:
            raise InputError("batch_size: no batch had the >= 2 shapes training requires")
        history.append({"epoch": epoch, **{k: sums[k] / steps for k in sums}})

    if renderer_hash is not None and hash_module_params(renderer) != renderer_hash:
        raise FrozenRendererError("stage-1 decoder weights changed during stage-2 training")

    encoder.eval()
    decoder.eval()
    return Stage2Result(
        encoder=encoder,
        decoder=decoder,
        history=history,
        config=config,
        renderer_hash=renderer_hash,
    )


def encode_codes(encoder: CodeEncoder, codes: CodeTable) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and logvars for every shape, row-aligned with the table."""
    with torch.no_grad():
        post = encoder(codes.to_tensor())
    return post.mean.numpy().copy(), post.logvar.numpy().copy()


def traversal_values(observed: np.ndarray, n_points: int = 7, extend: float = 0.1) -> np.ndarray:
    """Evenly spaced sweep across the observed range, extended both ways."""
    observed = np.asarray(observed, dtype=np.float64)
    if observed.size < 2:
        raise InputError("observed: need at least 2 values to span a range")
    lo, hi = float(observed.min()), float(observed.max())
    span = hi - lo
    if span <= 0:
        raise InputError("observed: the range is degenerate (all values equal)")
    return np.linspace(lo - extend * span, hi + extend * span, n_points)


def latent_traverse(
    vae_decoder: CodeDecoder,
    renderer: SdfDecoder,
    base_latent,
    coord: int,
    values,
    resolution: int = 64,
    iso: float = 0.0,
    smooth: bool = False,
) -> list[TriangleMesh]:
    """Meshes rendered while sweeping one latent coordinate.

    Empty extractions are returned as empty meshes (the caller decides how
    to flag them); all other coordinates stay at the base latent.
    """
    base = torch.as_tensor(np.asarray(base_latent), dtype=torch.float32).reshape(-1)
    if not (0 <= coord < base.numel()):
        raise InputError(f"coord: out of range for latent_dim={base.numel()}")
    meshes = []
    with torch.no_grad():
        for v in values:
            z = base.clone()
            z[coord] = float(v)
            code_hat = vae_decoder(z.unsqueeze(0))[0].numpy()
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                mesh = reconstruct_shape(
                    renderer, code_hat, resolution=resolution, iso=iso, smooth=smooth
                )
            meshes.append(mesh)
    return meshes


def save_stage2_checkpoint(path: str | Path, result: Stage2Result) -> None:
    if result.config is None:
        raise InputError("result.config: required to checkpoint")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(result.config)
    cfg["encoder_widths"] = list(cfg["encoder_widths"])
    cfg["decoder_widths"] = list(cfg["decoder_widths"])
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "config": cfg,
            "encoder_state": result.encoder.state_dict(),
            "decoder_state": result.decoder.state_dict(),
            "renderer_hash": result.renderer_hash,
        },
        path,
    )


def load_stage2_checkpoint(path: str | Path) -> Stage2Result:
    try:
        blob = torch.load(path, weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a stage-2 checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    cfg_dict = dict(blob["config"])
    cfg_dict["encoder_widths"] = tuple(cfg_dict["encoder_widths"])
    cfg_dict["decoder_widths"] = tuple(cfg_dict["decoder_widths"])
    config = DisentangleConfig(**cfg_dict)
    encoder = CodeEncoder(config.code_dim, config.latent_dim, config.encoder_widths)
    decoder = CodeDecoder(config.latent_dim, config.code_dim, config.decoder_widths)
    encoder.load_state_dict(blob["encoder_state"])
    decoder.load_state_dict(blob["decoder_state"])
    encoder.eval()
    decoder.eval()
    return Stage2Result(
        encoder=encoder,
        decoder=decoder,
        history=[],
        config=config,
        renderer_hash=blob.get("renderer_hash"),
    )
