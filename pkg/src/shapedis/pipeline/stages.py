"""Pipeline stage implementations behind the CLI commands.

Each function takes the resolved config plus a run directory, verifies its
upstream artifacts through the manifest, does the work, and registers what
it wrote. The CLI is a thin argument-parsing layer over these.
"""

from __future__ import annotations

import json
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from ..errors import DependencyError, InputError
from ..evaluation import (
    MetricsReport,
    build_latent_table,
    knn_report,
    make_roundtrip_transform,
    pearson_corr,
    reconstruction_report,
    sap_score,
    spearman_corr,
)
from ..geometry.io import (
    read_metadata_csv,
    read_obj,
    read_sample_cache,
    write_metadata_csv,
    write_obj,
    write_sample_cache,
)
from ..geometry.mesh import extract_mesh, mesh_volume
from ..geometry.sampling import sample_shape
from ..geometry.shapes import AnalyticShape, generate_cohort
from ..pseudo_labels import (
    assign_pseudo_labels,
    cluster_purity,
    export_pseudo_labels,
    fit_gmm_em,
    load_pseudo_labels,
    mean_volume_gap,
)
from ..stage1.decoder import CodeTable
from ..stage1.training import (
    load_stage1_checkpoint,
    save_stage1_checkpoint,
    train_stage1,
)
from ..stage2.training import (
    encode_codes,
    latent_traverse,
    load_stage2_checkpoint,
    save_stage2_checkpoint,
    train_stage2,
    traversal_values,
)
from ..utils import enable_determinism, hash_module_params
from .config import PipelineConfig, apply_ablation
from .manifest import (
    RunManifest,
    load_manifest,
    record_artifact,
    require_stage,
    save_manifest,
    verify_artifact,
)

LABEL_POLICIES = ("pseudo", "real")


def _seed_block(config: PipelineConfig) -> dict:
    return {
        "geometry": config.geometry.seed,
        "stage1": config.stage1.seed,
        "pseudo": config.pseudo.seed,
        "stage2": config.stage2.seed,
        "eval": list(config.eval.seeds),
    }


def _load_samples(manifest: RunManifest, run_dir: Path, shape_ids) -> list:
    samples = []
    for sid in shape_ids:
        path = verify_artifact(manifest, run_dir, f"data/samples/{sid}")
        samples.append(read_sample_cache(path, shape_id=sid))
    return samples


def _load_metadata(manifest: RunManifest, run_dir: Path):
    return read_metadata_csv(verify_artifact(manifest, run_dir, "data/metadata"))


def run_make_data(config: PipelineConfig, run_dir: str | Path, force: bool = False) -> RunManifest:
    """Generate the synthetic cohort: meshes, SDF caches, metadata."""
    run_dir = Path(run_dir)
    data_dir = run_dir / "data"
    if data_dir.exists() and any(data_dir.iterdir()):
        if not force:
            raise InputError(
                f"{data_dir}: already contains files; pass --force to regenerate"
            )
        import shutil

        shutil.rmtree(data_dir)
    t0 = time.perf_counter()
    geo = config.geometry
    shapes, metas = generate_cohort(
        n_shapes=geo.n_shapes,
        class_balance=geo.class_balance,
        age_range=geo.age_range,
        kind=geo.kind,
        base_radius=geo.base_radius,
        seed=geo.seed,
        split_fractions=geo.split_fractions,
    )
    manifest = RunManifest(
        run_id=run_dir.name,
        config=config.to_dict(),
        config_hash=config.hash(),
        seeds=_seed_block(config),
    )
    (data_dir / "meshes").mkdir(parents=True, exist_ok=True)
    (data_dir / "samples").mkdir(parents=True, exist_ok=True)
    sample_seeds = np.random.SeedSequence(geo.seed).generate_state(len(shapes))
    for shape, meta, sseed in zip(shapes, metas, sample_seeds):
        mesh = extract_mesh(
            shape.sdf, resolution=geo.mesh_resolution, shape_id=meta.shape_id
        )
        mesh_path = data_dir / "meshes" / f"{meta.shape_id}.obj"
        write_obj(mesh, mesh_path)
        record_artifact(manifest, run_dir, f"data/mesh/{meta.shape_id}", mesh_path)

        cache = sample_shape(
            shape, geo.n_samples, shape_id=meta.shape_id, seed=int(sseed)
        )
        cache_path = data_dir / "samples" / f"{meta.shape_id}.sdf"
        write_sample_cache(cache, cache_path)
        record_artifact(manifest, run_dir, f"data/samples/{meta.shape_id}", cache_path)

    meta_path = data_dir / "metadata.csv"
    write_metadata_csv(metas, meta_path)
    record_artifact(manifest, run_dir, "data/metadata", meta_path)
    # generator parameters are needed again for ground-truth evaluation
    gen_path = data_dir / "generator.json"
    gen_path.write_text(
        json.dumps(
            {
                m.shape_id: {"severity": m.severity, "rng_seed": s.rng_seed}
                for m, s in zip(metas, shapes)
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    record_artifact(manifest, run_dir, "data/generator", gen_path)
    manifest.timings["make-data"] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed("make-data")
    save_manifest(run_dir, manifest)
    return manifest


def _load_generator_shapes(
    config: PipelineConfig, manifest: RunManifest, run_dir: Path
) -> dict[str, AnalyticShape]:
    blob = json.loads(verify_artifact(manifest, run_dir, "data/generator").read_text())
    metas = {m.shape_id: m for m in _load_metadata(manifest, run_dir)}
    out = {}
    for sid, rec in blob.items():
        out[sid] = AnalyticShape(
            kind=config.geometry.kind,
            base_radius=config.geometry.base_radius,
            disease_severity=rec["severity"],
            age_factor=metas[sid].age_norm,
            rng_seed=rec["rng_seed"],
        )
    return out


def run_train_stage1(config: PipelineConfig, run_dir: str | Path) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    require_stage(manifest, "make-data", "make-data")
    metas = _load_metadata(manifest, run_dir)
    samples = _load_samples(manifest, run_dir, [m.shape_id for m in metas])
    t0 = time.perf_counter()
    result = train_stage1(samples, config.stage1)
    ckpt = run_dir / "stage1.pt"
    save_stage1_checkpoint(ckpt, result)
    record_artifact(manifest, run_dir, "stage1/checkpoint", ckpt)
    hist = run_dir / "stage1_history.json"
    hist.write_text(json.dumps(result.history, indent=2) + "\n")
    record_artifact(manifest, run_dir, "stage1/history", hist)
    manifest.stage_hashes["stage1_decoder"] = hash_module_params(result.decoder)
    manifest.timings["train-stage1"] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed("train-stage1")
    save_manifest(run_dir, manifest)
    return manifest


def _load_stage1(manifest: RunManifest, run_dir: Path):
    path = verify_artifact(manifest, run_dir, "stage1/checkpoint")
    result = load_stage1_checkpoint(path)
    recorded = manifest.stage_hashes.get("stage1_decoder")
    actual = hash_module_params(result.decoder)
    if recorded is not None and recorded != actual:
        raise DependencyError(
            "stage-1 decoder hash does not match the manifest; re-run "
            "`shapedis train-stage1` so downstream stages see one renderer"
        )
    return result


def _mesh_volumes(manifest: RunManifest, run_dir: Path, shape_ids) -> np.ndarray:
    vols = []
    for sid in shape_ids:
        mesh = read_obj(verify_artifact(manifest, run_dir, f"data/mesh/{sid}"))
        vols.append(mesh_volume(mesh))
    return np.asarray(vols)


def run_cluster(config: PipelineConfig, run_dir: str | Path) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    require_stage(manifest, "train-stage1", "train-stage1")
    stage1 = _load_stage1(manifest, run_dir)
    t0 = time.perf_counter()
    em = fit_gmm_em(
        stage1.codes.codes,
        n_components=config.pseudo.n_components,
        max_iter=config.pseudo.max_iter,
        tol=config.pseudo.tol,
        n_restarts=config.pseudo.n_restarts,
        seed=config.pseudo.seed,
    )
    volumes = _mesh_volumes(manifest, run_dir, stage1.codes.shape_ids)
    labeling = assign_pseudo_labels(
        em.model, stage1.codes.codes, stage1.codes.shape_ids, volumes=volumes
    )
    labels_path = run_dir / "pseudo_labels.csv"
    export_pseudo_labels(labeling, labels_path)
    record_artifact(manifest, run_dir, "cluster/labels", labels_path)

    metas = {m.shape_id: m for m in _load_metadata(manifest, run_dir)}
    truth_ids = [sid for sid in stage1.codes.shape_ids if metas[sid].diagnosis is not None]
    report = {
        "n_iterations": em.n_iter,
        "converged": em.converged,
        "collapsed": em.collapsed,
        "restart_index": em.restart_index,
        "final_log_likelihood": em.log_likelihood[-1],
        "purity": None,
        "volume_gap": None,
    }
    if truth_ids:
        idx = [stage1.codes.index_of(sid) for sid in truth_ids]
        truth = np.array([metas[sid].diagnosis for sid in truth_ids])
        report["purity"] = cluster_purity(labeling.labels[idx], truth)
        report["volume_gap"] = mean_volume_gap(labeling.labels, volumes)
    report_path = run_dir / "cluster_report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    record_artifact(manifest, run_dir, "cluster/report", report_path)
    manifest.timings["cluster"] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed("cluster")
    save_manifest(run_dir, manifest)
    return manifest


def _stage2_names(ablation: str) -> tuple[str, str, str]:
    suffix = "" if ablation == "none" else f"_{ablation}"
    return (
        f"stage2{suffix}.pt",
        f"stage2/{ablation}/checkpoint",
        f"train-stage2:{ablation}",
    )


def run_train_stage2(
    config: PipelineConfig,
    run_dir: str | Path,
    ablation: str = "none",
    labels_policy: str = "pseudo",
) -> RunManifest:
    if labels_policy not in LABEL_POLICIES:
        raise InputError(f"labels: expected one of {LABEL_POLICIES}, got {labels_policy!r}")
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    require_stage(manifest, "train-stage1", "train-stage1")
    stage1 = _load_stage1(manifest, run_dir)
    metas = _load_metadata(manifest, run_dir)

    if labels_policy == "pseudo":
        require_stage(manifest, "cluster", "cluster")
        labeling = load_pseudo_labels(verify_artifact(manifest, run_dir, "cluster/labels"))
        by_id = dict(zip(labeling.shape_ids, labeling.labels))
        labels = {sid: float(by_id[sid]) for sid in stage1.codes.shape_ids}
    else:
        by_meta = {m.shape_id: m.diagnosis for m in metas}
        labels = {
            sid: None if by_meta[sid] is None else float(by_meta[sid])
            for sid in stage1.codes.shape_ids
        }
    ages = {m.shape_id: m.age_norm for m in metas}

    stage2_cfg = apply_ablation(config.stage2, ablation)
    samples = None
    if stage2_cfg.lambda_sdf > 0:
        samples = _load_samples(manifest, run_dir, stage1.codes.shape_ids)
    t0 = time.perf_counter()
    result = train_stage2(
        stage1.codes,
        labels,
        ages,
        stage2_cfg,
        renderer=stage1.decoder,
        samples=samples,
    )
    ckpt_name, artifact_name, stage_name = _stage2_names(ablation)
    ckpt = run_dir / ckpt_name
    save_stage2_checkpoint(ckpt, result)
    record_artifact(manifest, run_dir, artifact_name, ckpt)
    hist = run_dir / ckpt_name.replace(".pt", "_history.json")
    hist.write_text(json.dumps(result.history, indent=2) + "\n")
    record_artifact(manifest, run_dir, f"stage2/{ablation}/history", hist)
    if result.renderer_hash is not None:
        recorded = manifest.stage_hashes.get("stage1_decoder")
        if recorded is not None and result.renderer_hash != recorded:
            raise DependencyError(
                "stage-2 trained against a renderer whose hash differs from the "
                "manifest's stage-1 decoder; re-run `shapedis train-stage1`"
            )
        manifest.stage_hashes[f"stage2_{ablation}_renderer"] = result.renderer_hash
    manifest.timings[stage_name] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed(stage_name)
    save_manifest(run_dir, manifest)
    return manifest


def _load_stage2(manifest: RunManifest, run_dir: Path, ablation: str):
    _, artifact_name, stage_name = _stage2_names(ablation)
    require_stage(manifest, stage_name, f"train-stage2 --ablation {ablation}")
    return load_stage2_checkpoint(verify_artifact(manifest, run_dir, artifact_name))


def _recon_subset(shape_ids: list[str], max_shapes: int) -> list[str]:
    if len(shape_ids) <= max_shapes:
        return list(shape_ids)
    idx = np.linspace(0, len(shape_ids) - 1, max_shapes).round().astype(int)
    return [shape_ids[i] for i in sorted(set(idx.tolist()))]


def run_eval(config: PipelineConfig, run_dir: str | Path, ablation: str = "none") -> RunManifest:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    stage1 = _load_stage1(manifest, run_dir)
    stage2 = _load_stage2(manifest, run_dir, ablation)
    require_stage(manifest, "cluster", "cluster")
    if stage2.renderer_hash is not None and stage2.renderer_hash != hash_module_params(
        stage1.decoder
    ):
        raise DependencyError(
            "stage-2 checkpoint references a different stage-1 renderer; "
            "re-run `shapedis train-stage2` after the current stage-1"
        )
    metas = _load_metadata(manifest, run_dir)
    t0 = time.perf_counter()

    table = build_latent_table(stage2.encoder, stage1.codes, metas)
    train_tbl = table.subset("train")
    test_tbl = table.subset("test")
    dis_c = stage2.config.disease_coord
    age_c = stage2.config.age_coord

    def corr_or_none(fn, x, y):
        try:
            return fn(x, y)
        except InputError:
            return None

    disease = {
        "sap": {"train": sap_score(train_tbl, "disease"), "test": sap_score(test_tbl, "disease")},
        "pearson": {
            name: corr_or_none(pearson_corr, tbl.latents[:, dis_c], tbl.disease)
            for name, tbl in (("train", train_tbl), ("test", test_tbl))
        },
        "knn_accuracy": {},
    }
    age = {
        "sap": {"train": sap_score(train_tbl, "age"), "test": sap_score(test_tbl, "age")},
        "pearson": {
            name: corr_or_none(pearson_corr, tbl.latents[:, age_c], tbl.age)
            for name, tbl in (("train", train_tbl), ("test", test_tbl))
        },
        "knn_rmse": {},
    }
    knn = knn_report(
        train_tbl, test_tbl, disease_coord=dis_c, age_coord=age_c,
        k_neighbors=config.eval.k_neighbors,
    )
    disease["knn_accuracy"] = knn["disease_accuracy"]
    age["knn_rmse"] = knn["age_rmse"]

    shapes = _load_generator_shapes(config, manifest, run_dir)
    subset_ids = _recon_subset(stage1.codes.shape_ids, config.eval.recon_max_shapes)
    sub_idx = [stage1.codes.index_of(sid) for sid in subset_ids]
    sub_codes = CodeTable(subset_ids, stage1.codes.codes[sub_idx])
    recon = reconstruction_report(
        stage1.decoder,
        sub_codes,
        {sid: shapes[sid] for sid in subset_ids},
        code_transform=make_roundtrip_transform(stage2.encoder, stage2.decoder),
        n_points=config.eval.n_points,
        resolution=config.eval.mesh_resolution,
        seed=0,
    )

    cluster_report = json.loads(
        verify_artifact(manifest, run_dir, "cluster/report").read_text()
    )
    report = MetricsReport(
        config_hash=config.hash(),
        seeds=[stage2.config.seed],
        disease=disease,
        age=age,
        reconstruction={
            "stage1_cd": recon.stage1_cd,
            "stage2_cd": recon.stage2_cd,
            "n_shapes": len(recon.per_shape),
            "n_excluded": recon.n_excluded,
        },
        clustering={
            "purity": cluster_report["purity"],
            "volume_gap": cluster_report["volume_gap"],
        },
        extras={
            "ablation": ablation,
            "splits": {
                "train": len(train_tbl),
                "test": len(test_tbl),
                "all": len(table),
            },
        },
    )
    report.validate()
    suffix = "" if ablation == "none" else f"_{ablation}"
    metrics_path = run_dir / f"metrics{suffix}.json"
    metrics_path.write_text(report.to_json())
    record_artifact(manifest, run_dir, f"eval/{ablation}/metrics", metrics_path)
    manifest.timings[f"eval:{ablation}"] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed(f"eval:{ablation}")
    save_manifest(run_dir, manifest)
    return manifest


def run_traverse(
    config: PipelineConfig, run_dir: str | Path, ablation: str = "none"
) -> RunManifest:
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    stage1 = _load_stage1(manifest, run_dir)
    stage2 = _load_stage2(manifest, run_dir, ablation)
    t0 = time.perf_counter()
    means, _ = encode_codes(stage2.encoder, stage1.codes)
    base = means.mean(axis=0)
    out_dir = run_dir / "traversals" / ablation
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"ablation": ablation, "coords": {}}
    for factor, coord in (
        ("disease", stage2.config.disease_coord),
        ("age", stage2.config.age_coord),
    ):
        values = traversal_values(
            means[:, coord],
            n_points=config.eval.traversal_points,
            extend=config.eval.traversal_extend,
        )
        meshes = latent_traverse(
            stage2.decoder,
            stage1.decoder,
            base,
            coord,
            values,
            resolution=config.eval.mesh_resolution,
        )
        volumes = []
        for j, mesh in enumerate(meshes):
            path = out_dir / f"{factor}_{j:02d}.obj"
            if mesh.is_empty:
                volumes.append(None)
                continue
            write_obj(mesh, path)
            record_artifact(manifest, run_dir, f"traverse/{ablation}/{factor}/{j:02d}", path)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                volumes.append(mesh_volume(mesh))
        valid = [(v, vol) for v, vol in zip(values, volumes) if vol is not None]
        entry = {
            "coord": coord,
            "values": [float(v) for v in values],
            "volumes": volumes,
            "n_empty": sum(1 for v in volumes if v is None),
        }
        if len(valid) >= 3:
            vv = np.array([v for v, _ in valid])
            vol = np.array([v for _, v in valid])
            try:
                entry["volume_spearman"] = spearman_corr(vv, vol)
            except InputError:
                entry["volume_spearman"] = None
            lo, hi = vol.min(), vol.max()
            entry["volume_change"] = float((hi - lo) / hi) if hi > 0 else None
        report["coords"][factor] = entry
    report_path = run_dir / "traversals" / f"report_{ablation}.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    record_artifact(manifest, run_dir, f"traverse/{ablation}/report", report_path)
    manifest.timings[f"traverse:{ablation}"] = round(time.perf_counter() - t0, 3)
    manifest.mark_completed(f"traverse:{ablation}")
    save_manifest(run_dir, manifest)
    return manifest


def prepare_run(deterministic: bool, seed: int | None = None) -> None:
    """Process-level switches shared by every command."""
    if deterministic:
        enable_determinism()
    if seed is not None:
        torch.manual_seed(seed)
