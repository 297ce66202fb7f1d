"""Joint optimization of the SDF decoder, per-shape codes, and code prior."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, FormatError, InputError, TrainingDiverged
from ..geometry.mesh import TriangleMesh, extract_mesh
from ..geometry.sampling import SampleSet
from ..mixture import MixtureModel
from ..pseudo_labels import fit_gmm_em
from ..utils import hash_module_params
from .decoder import CodeTable, SdfDecoder
from .losses import GaussianMixturePrior, clamped_sdf_loss, eikonal_from_gradients

CHECKPOINT_MAGIC = "S1CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Stage1Config:
    latent_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 4
    epochs: int = 200
    batch_shapes: int = 16
    points_per_step: int = 1024
    lr: float = 1e-3
    lr_step_epochs: int = 500
    lr_gamma: float = 0.5
    grad_clip: float = 1.0
    clamp_dist: float = 0.1
    lambda_eik: float = 1e-4
    lambda_reg: float = 1e-4
    lambda_gmm: float = 1e-3
    n_prior_components: int = 2
    code_init_std: float = 0.01
    gmm_warmup_epochs: int = 50
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        for key in ("latent_dim", "hidden_dim", "epochs", "batch_shapes", "points_per_step"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.num_layers < 2:
            raise ConfigError("num_layers: must be >= 2")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.lr_step_epochs < 1:
            raise ConfigError("lr_step_epochs: must be >= 1")
        if not (0 < self.lr_gamma <= 1):
            raise ConfigError("lr_gamma: must be in (0, 1]")
        if self.clamp_dist <= 0:
            raise ConfigError("clamp_dist: must be positive")
        for key in ("grad_clip", "lambda_eik", "lambda_reg", "lambda_gmm", "code_init_std"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if self.n_prior_components < 1:
            raise ConfigError("n_prior_components: must be >= 1")
        if self.gmm_warmup_epochs < 0:
            raise ConfigError("gmm_warmup_epochs: must be non-negative")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every: must be non-negative")

    @classmethod
    def full_size(cls, **overrides) -> "Stage1Config":
        """Large preset: 8 x 512 decoder, long schedule."""
        base = dict(hidden_dim=512, num_layers=8, epochs=2000, points_per_step=16384)
        base.update(overrides)
        return cls(**base)


@dataclass
class Stage1Result:
    decoder: SdfDecoder
    codes: CodeTable
    mixture: MixtureModel
    history: list[dict] = field(default_factory=list)
    config: Stage1Config | None = None


def train_stage1(
    samples: list[SampleSet],
    config: Stage1Config,
    checkpoint_dir: str | Path | None = None,
) -> Stage1Result:
    """Auto-decoder training: codes and decoder weights optimized jointly.

    Every epoch visits each shape once in a seeded random order; each step
    draws ``points_per_step`` sample rows per shape. Loss = clamped SDF
    reconstruction (+ code shrinkage) + lambda_eik * eikonal + lambda_gmm *
    prior NLL on the batch codes. Any non-finite term aborts with
    diagnostics.
    """
    config.validate()
    if config.lambda_gmm > 0 and config.gmm_warmup_epochs >= config.epochs:
        warnings.warn(
            "gmm_warmup_epochs >= epochs: the mixture prior never engages",
            stacklevel=2,
        )
    if not samples:
        raise InputError("samples: need at least one shape")
    ids = [s.shape_id for s in samples]
    if len(set(ids)) != len(ids):
        raise InputError("samples: duplicate shape ids")
    for s in samples:
        if len(s) < 1:
            raise InputError(f"samples[{s.shape_id}]: empty sample set")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    n_shapes = len(samples)

    decoder = SdfDecoder(config.latent_dim, config.hidden_dim, config.num_layers)
    gen = torch.Generator().manual_seed(config.seed)
    codes = torch.nn.Parameter(
        torch.randn(n_shapes, config.latent_dim, generator=gen) * config.code_init_std
    )
    prior = GaussianMixturePrior(config.n_prior_components, config.latent_dim)
    prior.initialize_from_codes(codes.detach(), rng)

    params = list(decoder.parameters()) + [codes] + list(prior.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_step_epochs, gamma=config.lr_gamma
    )

    points_np = [s.points for s in samples]
    sdf_np = [s.sdf for s in samples]

    history: list[dict] = []
    for epoch in range(config.epochs):
        # re-anchor the prior once the codes carry geometric structure;
        # seeding it on epoch-0 noise bakes an arbitrary split into code space
        if (
            config.gmm_warmup_epochs > 0
            and epoch == config.gmm_warmup_epochs
            and n_shapes >= config.n_prior_components
        ):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # collapse on tiny cohorts is fine here
                anchor = fit_gmm_em(
                    codes.detach().double().numpy(),
                    n_components=config.n_prior_components,
                    max_iter=50,
                    n_restarts=4,
                    seed=config.seed,
                )
            prior.load_mixture(anchor.model)
        perm = rng.permutation(n_shapes)
        sums = {"sdf": 0.0, "eik": 0.0, "gmm": 0.0, "total": 0.0}
        steps = 0
        var_clamped = False
        for start in range(0, n_shapes, config.batch_shapes):
            idx = perm[start : start + config.batch_shapes]
            pts_list, val_list = [], []
            for i in idx:
                m = len(sdf_np[i])
                rows = rng.integers(0, m, size=config.points_per_step)
                pts_list.append(points_np[i][rows])
                val_list.append(sdf_np[i][rows])
            pts = torch.from_numpy(np.concatenate(pts_list)).float()
            target = torch.from_numpy(np.concatenate(val_list)).float()
            z_batch = codes[torch.as_tensor(idx, dtype=torch.long)]
            z_points = z_batch.repeat_interleave(config.points_per_step, dim=0)

            optimizer.zero_grad(set_to_none=True)
            if config.lambda_eik > 0:
                pts.requires_grad_(True)
                pred = decoder(pts, z_points)
                (grad,) = torch.autograd.grad(
                    pred.sum(), pts, create_graph=True, retain_graph=True
                )
                eik = eikonal_from_gradients(grad)
            else:
                pred = decoder(pts, z_points)
                eik = torch.zeros((), dtype=pred.dtype)
            sdf = clamped_sdf_loss(
                pred, target, z_batch, clamp_dist=config.clamp_dist, lambda_reg=config.lambda_reg
            )
            if config.lambda_gmm > 0 and epoch >= config.gmm_warmup_epochs:
                gmm = prior.nll(z_batch)
            else:
                gmm = torch.zeros((), dtype=pred.dtype)
            total = sdf + config.lambda_eik * eik + config.lambda_gmm * gmm

            terms = {
                "sdf": sdf.detach().item(),
                "eik": eik.detach().item(),
                "gmm": gmm.detach().item(),
                "total": total.detach().item(),
            }
            if not all(np.isfinite(v) for v in terms.values()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}",
                    diagnostics={
                        "epoch": epoch,
                        "step": steps,
                        "terms": terms,
                        "shape_ids": [ids[i] for i in idx],
                    },
                )
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            var_clamped |= prior.clamp_variances()
            for k, v in terms.items():
                sums[k] += v
            steps += 1
        scheduler.step()
        history.append(
            {
                "epoch": epoch,
                "lr": float(optimizer.param_groups[0]["lr"]),
                "var_clamped": var_clamped,
                **{k: sums[k] / steps for k in sums},
            }
        )
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and (epoch + 1) % config.checkpoint_every == 0
        ):
            path = Path(checkpoint_dir) / f"stage1_epoch{epoch + 1:05d}.pt"
            _save(path, decoder, codes, ids, prior, config, epoch + 1)

    table = CodeTable(shape_ids=list(ids), codes=codes.detach().numpy().copy())
    result = Stage1Result(
        decoder=decoder,
        codes=table,
        mixture=prior.snapshot(),
        history=history,
        config=config,
    )
    if checkpoint_dir is not None:
        _save(
            Path(checkpoint_dir) / "stage1_final.pt",
            decoder,
            codes,
            ids,
            prior,
            config,
            config.epochs,
        )
    return result


def _save(path, decoder, codes, shape_ids, prior, config, epoch) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "config": asdict(config),
            "epoch": int(epoch),
            "decoder_state": decoder.state_dict(),
            "codes": codes.detach().clone(),
            "shape_ids": list(shape_ids),
            "prior_state": prior.state_dict(),
            "decoder_hash": hash_module_params(decoder),
        },
        path,
    )


def save_stage1_checkpoint(path: str | Path, result: Stage1Result) -> None:
    if result.config is None:
        raise InputError("result.config: required to checkpoint")
    codes = torch.nn.Parameter(result.codes.to_tensor())
    prior = GaussianMixturePrior(result.mixture.n_components, result.codes.dim)
    with torch.no_grad():
        prior.logits.copy_(torch.log(torch.as_tensor(result.mixture.weights, dtype=torch.float32)))
        prior.means.copy_(torch.as_tensor(result.mixture.means, dtype=torch.float32))
        prior.log_vars.copy_(torch.log(torch.as_tensor(result.mixture.variances, dtype=torch.float32)))
    _save(path, result.decoder, codes, result.codes.shape_ids, prior, result.config, result.config.epochs)


def load_stage1_checkpoint(path: str | Path) -> Stage1Result:
    try:
        blob = torch.load(path, weights_only=True)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a stage-1 checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('version')!r}")
    config = Stage1Config(**blob["config"])
    decoder = SdfDecoder(config.latent_dim, config.hidden_dim, config.num_layers)
    decoder.load_state_dict(blob["decoder_state"])
    decoder.eval()
    if hash_module_params(decoder) != blob["decoder_hash"]:
        raise FormatError(f"{path}: decoder hash mismatch (corrupt checkpoint)")
    prior = GaussianMixturePrior(config.n_prior_components, config.latent_dim)
    prior.load_state_dict(blob["prior_state"])
    table = CodeTable(shape_ids=list(blob["shape_ids"]), codes=blob["codes"].numpy())
    return Stage1Result(
        decoder=decoder,
        codes=table,
        mixture=prior.snapshot(),
        history=[],
        config=config,
    )


def decoder_field(decoder: SdfDecoder, code, chunk: int = 32768):
    """Numpy field adapter for mesh extraction: (m, 3) -> (m,)."""
    z = torch.as_tensor(np.asarray(code), dtype=torch.float32).reshape(-1)

    def fieldfn(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        with torch.no_grad():
            for start in range(0, len(points), chunk):
                pts = torch.from_numpy(np.ascontiguousarray(points[start : start + chunk])).float()
                out[start : start + chunk] = decoder(pts, z).double().numpy()
        return out

    return fieldfn


def reconstruct_shape(
    decoder: SdfDecoder,
    code,
    resolution: int = 64,
    iso: float = 0.0,
    smooth: bool = False,
    shape_id: str = "",
) -> TriangleMesh:
    """Mesh of the decoded field for one latent code."""
    return extract_mesh(
        decoder_field(decoder, code),
        resolution=resolution,
        iso=iso,
        smooth=smooth,
        shape_id=shape_id,
    )
