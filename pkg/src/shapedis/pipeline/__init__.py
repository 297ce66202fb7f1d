"""Run orchestration: config files, manifests, CLI commands, reproduction."""

from .config import (
    ABLATIONS,
    EvalConfig,
    GeometryConfig,
    PipelineConfig,
    PseudoConfig,
    apply_ablation,
    config_from_dict,
    load_config,
    override_seed,
)
from .manifest import (
    LOCK_NAME,
    MANIFEST_NAME,
    RunLock,
    RunManifest,
    find_orphans,
    load_manifest,
    manifest_path,
    record_artifact,
    require_stage,
    save_manifest,
    verify_artifact,
)
from .stages import (
    LABEL_POLICIES,
    prepare_run,
    run_cluster,
    run_eval,
    run_make_data,
    run_train_stage1,
    run_train_stage2,
    run_traverse,
)

__all__ = [
    "ABLATIONS",
    "EvalConfig",
    "GeometryConfig",
    "PipelineConfig",
    "PseudoConfig",
    "apply_ablation",
    "config_from_dict",
    "load_config",
    "override_seed",
    "LOCK_NAME",
    "MANIFEST_NAME",
    "RunLock",
    "RunManifest",
    "find_orphans",
    "load_manifest",
    "manifest_path",
    "record_artifact",
    "require_stage",
    "save_manifest",
    "verify_artifact",
    "LABEL_POLICIES",
    "prepare_run",
    "run_cluster",
    "run_eval",
    "run_make_data",
    "run_train_stage1",
    "run_train_stage2",
    "run_traverse",
]
