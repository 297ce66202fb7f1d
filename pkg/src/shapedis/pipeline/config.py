"""Single-file pipeline configuration: TOML in, validated dataclasses out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from ..errors import ConfigError
from ..geometry.shapes import KINDS
from ..stage1.training import Stage1Config
from ..stage2.training import DisentangleConfig
from ..utils import sha256_json

ABLATIONS = ("none", "no_cov", "fixed_T", "beta_vae")


@dataclass
class GeometryConfig:
    n_shapes: int = 24
    kind: str = "lobed-blob"
    base_radius: float = 0.55
    class_balance: float = 0.5
    age_range: tuple[float, float] = (55.0, 90.0)
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_samples: int = 16384
    mesh_resolution: int = 48
    seed: int = 0

    def validate(self) -> None:
        if self.n_shapes < 2:
            raise ConfigError("geometry.n_shapes: must be >= 2")
        if self.kind not in KINDS:
            raise ConfigError(f"geometry.kind: unknown shape kind {self.kind!r}")
        if not (0.0 < self.base_radius <= 0.95):
            raise ConfigError("geometry.base_radius: must be in (0, 0.95]")
        if not (0.0 < self.class_balance < 1.0):
            raise ConfigError("geometry.class_balance: must be strictly inside (0, 1)")
        if len(self.age_range) != 2 or self.age_range[1] <= self.age_range[0]:
            raise ConfigError("geometry.age_range: expected (min, max) with min < max")
        if self.n_samples < 64:
            raise ConfigError("geometry.n_samples: must be >= 64")
        if self.mesh_resolution < 8:
            raise ConfigError("geometry.mesh_resolution: must be >= 8")


@dataclass
class PseudoConfig:
    n_components: int = 2
    n_restarts: int = 10
    max_iter: int = 200
    tol: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        if self.n_components < 2:
            raise ConfigError("pseudo.n_components: must be >= 2")
        if self.n_restarts < 1 or self.max_iter < 1:
            raise ConfigError("pseudo.n_restarts/max_iter: must be >= 1")
        if self.tol <= 0:
            raise ConfigError("pseudo.tol: must be positive")


@dataclass
class EvalConfig:
    k_neighbors: int = 5
    n_points: int = 4096
    mesh_resolution: int = 48
    recon_max_shapes: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    traversal_points: int = 7
    traversal_extend: float = 0.1
    sweep_fractions: tuple[float, ...] = (0.0, 0.1, 0.3, 0.6, 1.0)

    def validate(self) -> None:
        if self.k_neighbors < 1:
            raise ConfigError("eval.k_neighbors: must be >= 1")
        if self.n_points < 16:
            raise ConfigError("eval.n_points: must be >= 16")
        if self.mesh_resolution < 8:
            raise ConfigError("eval.mesh_resolution: must be >= 8")
        if self.recon_max_shapes < 1:
            raise ConfigError("eval.recon_max_shapes: must be >= 1")
        if not self.seeds:
            raise ConfigError("eval.seeds: need at least one seed")
        if self.traversal_points < 3:
            raise ConfigError("eval.traversal_points: must be >= 3")
        if self.traversal_extend < 0:
            raise ConfigError("eval.traversal_extend: must be non-negative")
        for f in self.sweep_fractions:
            if not (0.0 <= f <= 1.0):
                raise ConfigError(f"eval.sweep_fractions: {f} outside [0, 1]")


@dataclass
class PipelineConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    stage2: DisentangleConfig = field(default_factory=DisentangleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.geometry.validate()
        self.stage1.validate()
        self.pseudo.validate()
        self.stage2.validate()
        self.eval.validate()
        if self.stage2.code_dim != self.stage1.latent_dim:
            raise ConfigError(
                f"stage2.code_dim: {self.stage2.code_dim} must equal "
                f"stage1.latent_dim={self.stage1.latent_dim}"
            )
        if self.stage2.latent_dim >= self.stage1.latent_dim:
            raise ConfigError(
                f"stage2.latent_dim: k={self.stage2.latent_dim} must be strictly "
                f"below stage-1 d={self.stage1.latent_dim}"
            )

    def to_dict(self) -> dict:
        def plain(value):
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, list):
                return [plain(v) for v in value]
            return value

        out = {}
        for section in fields(self):
            cfg = getattr(self, section.name)
            out[section.name] = {k: plain(v) for k, v in dataclasses.asdict(cfg).items()}
        return out

    def hash(self) -> str:
        return sha256_json(self.to_dict())


_TUPLE_KEYS = {
    "age_range",
    "split_fractions",
    "seeds",
    "sweep_fractions",
    "encoder_widths",
    "decoder_widths",
}

_SECTION_TYPES = {
    "geometry": GeometryConfig,
    "stage1": Stage1Config,
    "pseudo": PseudoConfig,
    "stage2": DisentangleConfig,
    "eval": EvalConfig,
}


def _build_section(name: str, cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown configuration key")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_KEYS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    unknown = sorted(set(data) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration section")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        body = data.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a table of keys")
        sections[name] = _build_section(name, cls, body)
    config = PipelineConfig(**sections)
    # stage-2 consumes stage-1 codes: default its input width to match
    if "stage2" not in data or "code_dim" not in data.get("stage2", {}):
        config.stage2.code_dim = config.stage1.latent_dim
    config.validate()
    return config


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Parse and validate a TOML config; no file means all defaults."""
    if path is None:
        return config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path}: {exc}") from exc
    return config_from_dict(data)


def override_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    """One seed drives every stage; eval seeds become consecutive."""
    cfg = dataclasses.replace(
        config,
        geometry=dataclasses.replace(config.geometry, seed=seed),
        stage1=dataclasses.replace(config.stage1, seed=seed),
        pseudo=dataclasses.replace(config.pseudo, seed=seed),
        stage2=dataclasses.replace(config.stage2, seed=seed),
        eval=dataclasses.replace(
            config.eval, seeds=tuple(seed + i for i in range(len(config.eval.seeds)))
        ),
    )
    cfg.validate()
    return cfg


def apply_ablation(stage2: DisentangleConfig, ablation: str) -> DisentangleConfig:
    """Named training-objective reductions used by the comparison tables."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"ablation: expected one of {ABLATIONS}, got {ablation!r}")
    if ablation == "none":
        return dataclasses.replace(stage2)
    if ablation == "no_cov":
        return dataclasses.replace(stage2, lambda_cov=0.0)
    if ablation == "fixed_T":
        return dataclasses.replace(stage2, temperature_mode="fixed", fixed_temperature=1.0)
    # beta_vae: strip every disentanglement-specific term, keep VAE + renderer
    return dataclasses.replace(
        stage2, lambda_snnl=0.0, lambda_cov=0.0, lambda_dis_sen=0.0
    )
