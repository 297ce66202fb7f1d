"""Pipeline layer: config parsing, manifests, stage orchestration, CLI."""

import dataclasses
import json
import shutil

import numpy as np
import pytest
from click.testing import CliRunner

from shapedis.errors import ConfigError, DependencyError, InputError, LockHeldError
from shapedis.evaluation import MetricsReport
from shapedis.pipeline.cli import main
from shapedis.pipeline.config import (
    ABLATIONS,
    PipelineConfig,
    apply_ablation,
    config_from_dict,
    load_config,
    override_seed,
)
from shapedis.pipeline.manifest import (
    RunLock,
    RunManifest,
    find_orphans,
    load_manifest,
    record_artifact,
    require_stage,
    save_manifest,
    verify_artifact,
)
from shapedis.pipeline.reproduce import (
    Budget,
    desk_config,
    reproduce_table1,
    reproduce_table3,
    run_reproduce,
)
from shapedis.pipeline.stages import (
    run_cluster,
    run_eval,
    run_make_data,
    run_train_stage1,
    run_train_stage2,
    run_traverse,
)

N_TOY = 8


def toy_dict() -> dict:
    # small enough that the full pipeline runs in seconds, big enough that
    # stage-1 learns an actual zero level set
    return {
        "geometry": {
            "n_shapes": N_TOY,
            "n_samples": 1024,
            "mesh_resolution": 24,
            "split_fractions": [0.5, 0.0, 0.5],
            "seed": 0,
        },
        "stage1": {
            "latent_dim": 16,
            "hidden_dim": 64,
            "num_layers": 3,
            "epochs": 120,
            "batch_shapes": 8,
            "points_per_step": 256,
        },
        "pseudo": {"n_restarts": 3, "max_iter": 60},
        "stage2": {
            "latent_dim": 4,
            "epochs": 400,
            "batch_size": 8,
            "sdf_points_per_shape": 64,
            "sdf_shapes_per_batch": 4,
        },
        "eval": {
            "n_points": 256,
            "mesh_resolution": 20,
            "recon_max_shapes": 4,
            "seeds": [0],
        },
    }


def toy_config() -> PipelineConfig:
    return config_from_dict(toy_dict())


def run_full_pipeline(config: PipelineConfig, run_dir) -> None:
    run_make_data(config, run_dir)
    run_train_stage1(config, run_dir)
    run_cluster(config, run_dir)
    run_train_stage2(config, run_dir)
    run_eval(config, run_dir)
    run_traverse(config, run_dir)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("runs") / "toy"
    config = toy_config()
    run_full_pipeline(config, run_dir)
    return config, run_dir


class TestConfig:
    def test_defaults_validate(self):
        config = load_config(None)
        config.validate()
        assert config.stage2.code_dim == config.stage1.latent_dim

    def test_toml_roundtrip(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text(
            "[geometry]\nn_shapes = 12\nage_range = [60.0, 80.0]\n"
            "[stage2]\nlatent_dim = 6\n"
        )
        config = load_config(path)
        assert config.geometry.n_shapes == 12
        assert config.geometry.age_range == (60.0, 80.0)
        assert config.stage2.latent_dim == 6
        assert config.stage2.code_dim == config.stage1.latent_dim

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match=r"geometry\.n_shape_count"):
            config_from_dict({"geometry": {"n_shape_count": 3}})

    def test_unknown_section_is_named(self):
        with pytest.raises(ConfigError, match="stage3"):
            config_from_dict({"stage3": {}})

    def test_section_must_be_table(self):
        with pytest.raises(ConfigError, match="geometry"):
            config_from_dict({"geometry": 7})

    def test_bad_toml_syntax(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[geometry\nn_shapes = 3")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_stage2_k_must_stay_below_stage1_d(self):
        with pytest.raises(ConfigError, match="latent_dim"):
            config_from_dict({"stage1": {"latent_dim": 8}, "stage2": {"latent_dim": 8}})

    def test_explicit_code_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="code_dim"):
            config_from_dict({"stage1": {"latent_dim": 32}, "stage2": {"code_dim": 16}})

    def test_override_seed_touches_every_section(self):
        config = override_seed(toy_config(), 7)
        assert config.geometry.seed == 7
        assert config.stage1.seed == 7
        assert config.pseudo.seed == 7
        assert config.stage2.seed == 7
        assert config.eval.seeds == (7,)

    def test_hash_tracks_values(self):
        a, b = toy_config(), toy_config()
        assert a.hash() == b.hash()
        c = config_from_dict({**toy_dict(), "pseudo": {"n_restarts": 4}})
        assert c.hash() != a.hash()

    def test_ablations(self):
        base = toy_config().stage2
        assert apply_ablation(base, "none") == base
        assert apply_ablation(base, "no_cov").lambda_cov == 0.0
        fixed = apply_ablation(base, "fixed_T")
        assert fixed.temperature_mode == "fixed"
        assert fixed.fixed_temperature == 1.0
        bvae = apply_ablation(base, "beta_vae")
        assert bvae.lambda_snnl == bvae.lambda_cov == bvae.lambda_dis_sen == 0.0
        assert bvae.beta == base.beta
        with pytest.raises(ConfigError, match="ablation"):
            apply_ablation(base, "no_snnl")
        assert set(ABLATIONS) == {"none", "no_cov", "fixed_T", "beta_vae"}


class TestManifest:
    def test_save_load_roundtrip(self, tmp_path):
        manifest = RunManifest(run_id="r", config={"a": 1}, config_hash="h")
        manifest.mark_completed("make-data")
        save_manifest(tmp_path, manifest)
        back = load_manifest(tmp_path)
        assert back == manifest
        assert back.has_stage("make-data")

    def test_load_missing_hints_make_data(self, tmp_path):
        with pytest.raises(DependencyError, match="make-data"):
            load_manifest(tmp_path / "empty")

    def test_record_and_verify(self, tmp_path):
        manifest = RunManifest(run_id="r")
        target = tmp_path / "data" / "x.bin"
        target.parent.mkdir()
        target.write_bytes(b"payload")
        record_artifact(manifest, tmp_path, "data/x", target)
        assert manifest.artifacts["data/x"]["path"] == "data/x.bin"
        assert verify_artifact(manifest, tmp_path, "data/x") == target

    def test_verify_unknown_artifact(self, tmp_path):
        with pytest.raises(DependencyError, match="not in the manifest"):
            verify_artifact(RunManifest(run_id="r"), tmp_path, "data/x")

    def test_verify_missing_file(self, tmp_path):
        manifest = RunManifest(run_id="r")
        target = tmp_path / "x.bin"
        target.write_bytes(b"payload")
        record_artifact(manifest, tmp_path, "x", target)
        target.unlink()
        with pytest.raises(DependencyError, match="missing"):
            verify_artifact(manifest, tmp_path, "x")

    def test_verify_detects_tampering(self, tmp_path):
        manifest = RunManifest(run_id="r")
        target = tmp_path / "x.bin"
        target.write_bytes(b"payload")
        record_artifact(manifest, tmp_path, "x", target)
        target.write_bytes(b"Payload")
        with pytest.raises(DependencyError, match="hash"):
            verify_artifact(manifest, tmp_path, "x")

    def test_require_stage(self):
        manifest = RunManifest(run_id="r")
        with pytest.raises(DependencyError, match="shapedis cluster"):
            require_stage(manifest, "cluster", "cluster")
        manifest.mark_completed("cluster")
        require_stage(manifest, "cluster", "cluster")

    def test_find_orphans(self, tmp_path):
        manifest = RunManifest(run_id="r")
        known = tmp_path / "known.bin"
        known.write_bytes(b"k")
        record_artifact(manifest, tmp_path, "known", known)
        save_manifest(tmp_path, manifest)
        assert find_orphans(tmp_path) == []
        (tmp_path / "stray.bin").write_bytes(b"s")
        assert find_orphans(tmp_path) == ["stray.bin"]

    def test_lock_is_exclusive_and_released(self, tmp_path):
        with RunLock(tmp_path):
            with pytest.raises(LockHeldError, match="locked"):
                with RunLock(tmp_path):
                    pass
        # released on exit, so a fresh acquire succeeds
        with RunLock(tmp_path):
            pass

    def test_lock_message_names_holder_pid(self, tmp_path):
        (tmp_path / ".lock").write_text("12345")
        with pytest.raises(LockHeldError, match="12345"):
            with RunLock(tmp_path):
                pass


class TestMakeData:
    def test_file_count_contract(self, toy_run):
        _, run_dir = toy_run
        assert len(list((run_dir / "data" / "meshes").glob("*.obj"))) == N_TOY
        assert len(list((run_dir / "data" / "samples").glob("*.sdf"))) == N_TOY
        assert (run_dir / "data" / "metadata.csv").exists()

    def test_same_seed_is_byte_identical(self, tmp_path):
        config = toy_config()
        run_make_data(config, tmp_path / "a")
        run_make_data(config, tmp_path / "b")
        for cache_a in sorted((tmp_path / "a" / "data" / "samples").iterdir()):
            cache_b = tmp_path / "b" / "data" / "samples" / cache_a.name
            assert cache_a.read_bytes() == cache_b.read_bytes()
        meta_a = (tmp_path / "a" / "data" / "metadata.csv").read_bytes()
        assert meta_a == (tmp_path / "b" / "data" / "metadata.csv").read_bytes()

    def test_refuses_nonempty_dir_without_force(self, tmp_path):
        config = toy_config()
        run_make_data(config, tmp_path)
        with pytest.raises(InputError, match="--force"):
            run_make_data(config, tmp_path)
        run_make_data(config, tmp_path, force=True)  # replaces cleanly
        assert len(list((tmp_path / "data" / "samples").iterdir())) == N_TOY


class TestStageOrdering:
    def test_cluster_before_stage1(self, tmp_path):
        config = toy_config()
        run_make_data(config, tmp_path)
        with pytest.raises(DependencyError, match="train-stage1"):
            run_cluster(config, tmp_path)

    def test_eval_before_stage2(self, toy_run, tmp_path):
        config, run_dir = toy_run
        partial = tmp_path / "partial"
        shutil.copytree(run_dir, partial)
        manifest = load_manifest(partial)
        manifest.completed = [s for s in manifest.completed if "stage2" not in s]
        save_manifest(partial, manifest)
        with pytest.raises(DependencyError, match="train-stage2"):
            run_eval(config, partial)

    def test_tampered_stage1_checkpoint_detected(self, toy_run, tmp_path):
        config, run_dir = toy_run
        broken = tmp_path / "broken"
        shutil.copytree(run_dir, broken)
        with open(broken / "stage1.pt", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(DependencyError, match="hash"):
            run_cluster(config, broken)

    def test_decoder_hash_mismatch_detected(self, toy_run, tmp_path):
        config, run_dir = toy_run
        broken = tmp_path / "broken"
        shutil.copytree(run_dir, broken)
        manifest = load_manifest(broken)
        manifest.stage_hashes["stage1_decoder"] = "0" * 64
        save_manifest(broken, manifest)
        with pytest.raises(DependencyError, match="decoder hash"):
            run_eval(config, broken)


class TestFullPipeline:
    def test_every_artifact_verifies(self, toy_run):
        _, run_dir = toy_run
        manifest = load_manifest(run_dir)
        assert manifest.artifacts
        for name in manifest.artifacts:
            verify_artifact(manifest, run_dir, name)

    def test_zero_orphans_after_clean_run(self, toy_run):
        _, run_dir = toy_run
        assert find_orphans(run_dir) == []

    def test_manifest_bookkeeping(self, toy_run):
        config, run_dir = toy_run
        manifest = load_manifest(run_dir)
        assert manifest.config_hash == config.hash()
        assert manifest.config == config.to_dict()
        for stage in (
            "make-data", "train-stage1", "cluster",
            "train-stage2:none", "eval:none", "traverse:none",
        ):
            assert manifest.has_stage(stage)
            assert manifest.timings[stage] >= 0
        assert "stage1_decoder" in manifest.stage_hashes
        assert manifest.stage_hashes["stage2_none_renderer"] == (
            manifest.stage_hashes["stage1_decoder"]
        )

    def test_metrics_report_shape(self, toy_run):
        config, run_dir = toy_run
        report = MetricsReport.from_json((run_dir / "metrics.json").read_text())
        report.validate()
        assert report.config_hash == config.hash()
        assert set(report.disease) == {"sap", "pearson", "knn_accuracy"}
        assert set(report.age) == {"sap", "pearson", "knn_rmse"}
        assert report.reconstruction["n_shapes"] > 0
        assert report.extras["splits"]["all"] == N_TOY

    def test_traversal_outputs(self, toy_run):
        config, run_dir = toy_run
        report = json.loads((run_dir / "traversals" / "report_none.json").read_text())
        for factor in ("disease", "age"):
            entry = report["coords"][factor]
            n = config.eval.traversal_points
            assert len(entry["values"]) == n
            assert len(entry["volumes"]) == n
            written = list((run_dir / "traversals" / "none").glob(f"{factor}_*.obj"))
            assert len(written) == n - entry["n_empty"]

    def test_eval_rerun_is_byte_identical(self, toy_run):
        config, run_dir = toy_run
        before = (run_dir / "metrics.json").read_bytes()
        run_eval(config, run_dir)
        assert (run_dir / "metrics.json").read_bytes() == before

    def test_real_label_policy_and_ablation(self, toy_run, tmp_path):
        config, run_dir = toy_run
        side = tmp_path / "side"
        shutil.copytree(run_dir, side)
        run_train_stage2(config, side, ablation="no_cov", labels_policy="real")
        manifest = load_manifest(side)
        assert manifest.has_stage("train-stage2:no_cov")
        assert (side / "stage2_no_cov.pt").exists()
        run_eval(config, side, ablation="no_cov")
        assert (side / "metrics_no_cov.json").exists()
        assert find_orphans(side) == []

    def test_unknown_labels_policy(self, toy_run):
        config, run_dir = toy_run
        with pytest.raises(InputError, match="labels"):
            run_train_stage2(config, run_dir, labels_policy="oracle")


class TestDeterminism:
    def test_fresh_pipelines_write_identical_metrics(self, tmp_path):
        config = toy_config()
        run_full_pipeline(config, tmp_path / "a")
        run_full_pipeline(config, tmp_path / "b")
        metrics_a = (tmp_path / "a" / "metrics.json").read_bytes()
        assert metrics_a == (tmp_path / "b" / "metrics.json").read_bytes()
        report_a = (tmp_path / "a" / "traversals" / "report_none.json").read_bytes()
        assert report_a == (tmp_path / "b" / "traversals" / "report_none.json").read_bytes()


class TestCli:
    def write_config(self, tmp_path) -> str:
        lines = []
        for section, body in toy_dict().items():
            lines.append(f"[{section}]")
            for key, value in body.items():
                lines.append(f"{key} = {json.dumps(value)}")
        path = tmp_path / "toy.toml"
        path.write_text("\n".join(lines) + "\n")
        return str(path)

    def test_make_data_status_orphans(self, tmp_path):
        runner = CliRunner()
        env = {"SHAPEDIS_RUNS_DIR": str(tmp_path / "runs")}
        cfg = self.write_config(tmp_path)
        result = runner.invoke(main, ["make-data", "--config", cfg, "--run-id", "t"], env=env)
        assert result.exit_code == 0, result.output
        assert f"wrote {N_TOY} shapes" in result.output

        result = runner.invoke(main, ["status", "--run-id", "t"], env=env)
        assert result.exit_code == 0
        assert "make-data" in result.output

        result = runner.invoke(main, ["orphans", "--run-id", "t"], env=env)
        assert result.exit_code == 0
        assert "no orphans" in result.output

    def test_friendly_refusal_without_force(self, tmp_path):
        runner = CliRunner()
        env = {"SHAPEDIS_RUNS_DIR": str(tmp_path / "runs")}
        cfg = self.write_config(tmp_path)
        assert runner.invoke(main, ["make-data", "--config", cfg], env=env).exit_code == 0
        result = runner.invoke(main, ["make-data", "--config", cfg], env=env)
        assert result.exit_code == 1
        assert "--force" in result.output
        assert "Traceback" not in result.output

    def test_dependency_error_is_friendly(self, tmp_path):
        runner = CliRunner()
        env = {"SHAPEDIS_RUNS_DIR": str(tmp_path / "runs")}
        result = runner.invoke(main, ["eval", "--run-id", "ghost"], env=env)
        assert result.exit_code == 1
        assert "make-data" in result.output

    def test_rejects_unknown_ablation(self, tmp_path):
        runner = CliRunner()
        env = {"SHAPEDIS_RUNS_DIR": str(tmp_path / "runs")}
        result = runner.invoke(main, ["eval", "--ablation", "everything"], env=env)
        assert result.exit_code == 2

    def test_orphans_flags_strays(self, tmp_path):
        runner = CliRunner()
        env = {"SHAPEDIS_RUNS_DIR": str(tmp_path / "runs")}
        cfg = self.write_config(tmp_path)
        runner.invoke(main, ["make-data", "--config", cfg, "--run-id", "t"], env=env)
        (tmp_path / "runs" / "t" / "stray.txt").write_text("x")
        result = runner.invoke(main, ["orphans", "--run-id", "t"], env=env)
        assert result.exit_code == 1
        assert "stray.txt" in result.output


class TestReproduce:
    def test_budget_zero_marks_everything_skipped(self, tmp_path):
        config = toy_config()
        for table, fn in ((1, reproduce_table1), (3, reproduce_table3)):
            text = fn(config, tmp_path / f"t{table}", budget=Budget(0.0))
            assert "skipped" in text or "-" in text
            blob = json.loads((tmp_path / f"t{table}" / f"table{table}.json").read_text())
            assert blob["table"] == table
        # reference numbers stay visible even when every cell is skipped
        assert "72.43" in (tmp_path / "t1" / "table1.txt").read_text()

    def test_invalid_table_rejected(self, tmp_path):
        with pytest.raises(InputError, match="table"):
            run_reproduce(4, tmp_path)

    def test_desk_config_is_valid(self):
        desk_config().validate()
        desk_config(3).validate()

    def test_toy_table1_grid(self, tmp_path):
        config = toy_config()
        text = reproduce_table1(config, tmp_path, budget=Budget())
        assert "Rec + l2" in text and "+ GMM prior" in text
        blob = json.loads((tmp_path / "table1.json").read_text())
        for row in blob["rows"].values():
            assert 50.0 <= row["purity"] <= 100.0
            assert row["chamfer"] > 0
        rows = (tmp_path / "table1.csv").read_text().splitlines()
        assert len(rows) == 4  # header + three variants

    def test_toy_table3_grid(self, tmp_path):
        config = config_from_dict(toy_dict())
        config = dataclasses.replace(
            config,
            eval=dataclasses.replace(config.eval, sweep_fractions=(0.0, 1.0), seeds=(0,)),
        )
        text = reproduce_table3(config, tmp_path, budget=Budget())
        assert "real+pseudo" in text
        blob = json.loads((tmp_path / "table3.json").read_text())
        assert blob["cells"]["real+none"]["0"] is None
        cell = blob["cells"]["real+pseudo"]["0"]
        assert 0.0 <= cell["mean"] <= 1.0
