import math

import numpy as np
import pytest
import torch

from fieldcascade.errors import ParameterError, TrainingDivergedError
from fieldcascade.nn import (
    MLP,
    FourierFeatureMap,
    TrainConfig,
    fourier_embed,
    load_checkpoint,
    load_into_module,
    mlp_forward,
    module_tensors,
    parameter_checksum,
    save_checkpoint,
    to_tensor,
    train_loop,
)


class TestFourierFeatureMap:
    def test_zero_vector_gives_ones_and_zeros(self):
        fmap = FourierFeatureMap(16, 2, scale=5.0, seed=0)
        out = fourier_embed(np.zeros((1, 2)), fmap)[0]
        np.testing.assert_allclose(out[:16], 1.0)
        np.testing.assert_allclose(out[16:32], 0.0)
        np.testing.assert_allclose(out[32:], 0.0)

    def test_trig_block_norm_is_n_frequencies(self):
        fmap = FourierFeatureMap(16, 2, scale=5.0, seed=1)
        x = np.random.default_rng(0).normal(size=(1000, 2))
        out = fourier_embed(x, fmap)
        norms = (out[:, :32] ** 2).sum(axis=1)
        np.testing.assert_allclose(norms, 16.0, rtol=1e-12)

    def test_output_layout_and_dim(self):
        fmap = FourierFeatureMap(4, 3, scale=1.0, seed=2)
        assert fmap.out_dim == 11
        x = np.random.default_rng(1).normal(size=(5, 3))
        out = fourier_embed(x, fmap)
        assert out.shape == (5, 11)
        np.testing.assert_allclose(out[:, 8:], x)

    def test_rotation_against_scalar_trig_oracle(self):
        # the (cos, sin) pair for frequency row b rotates by 2 pi b . delta
        fmap = FourierFeatureMap(3, 2, scale=2.0, seed=3)
        B = fmap.frequencies.numpy().astype(np.float64)
        rng = np.random.default_rng(4)
        x = rng.normal(size=2)
        delta = rng.normal(size=2) * 0.1
        out_x = fourier_embed(x[None], fmap)[0]
        out_xd = fourier_embed((x + delta)[None], fmap)[0]
        for j in range(3):
            theta = 2.0 * np.pi * float(B[j] @ x)
            dtheta = 2.0 * np.pi * float(B[j] @ delta)
            assert out_x[j] == pytest.approx(math.cos(theta), abs=1e-12)
            assert out_x[3 + j] == pytest.approx(math.sin(theta), abs=1e-12)
            assert out_xd[j] == pytest.approx(math.cos(theta + dtheta), abs=1e-9)
            assert out_xd[3 + j] == pytest.approx(math.sin(theta + dtheta), abs=1e-9)

    def test_frequencies_fixed_by_seed(self):
        a = FourierFeatureMap(8, 2, scale=5.0, seed=7)
        b = FourierFeatureMap(8, 2, scale=5.0, seed=7)
        assert torch.equal(a.frequencies, b.frequencies)

    def test_dimension_mismatch(self):
        fmap = FourierFeatureMap(4, 2, seed=0)
        with pytest.raises(ParameterError):
            fmap(torch.zeros(3, 5))


class TestMLP:
    def test_zero_weights_give_zero_output(self):
        mlp = MLP([3, 8, 2])
        with torch.no_grad():
            for p in mlp.parameters():
                p.zero_()
        out = mlp_forward(mlp, np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_single_linear_identity(self):
        mlp = MLP([3, 3])
        with torch.no_grad():
            mlp.layers[0].weight.copy_(torch.eye(3))
            mlp.layers[0].bias.zero_()
        x = np.random.default_rng(1).normal(size=(6, 3)).astype(np.float32)
        np.testing.assert_array_equal(mlp_forward(mlp, x), x)

    def test_matches_hand_computed_gelu_composition(self):
        # scalar input, widths [1, 2, 1], exact GELU(x) = x * Phi(x)
        mlp = MLP([1, 2, 1])
        w1 = np.array([[0.5], [-0.3]])
        b1 = np.array([0.1, 0.2])
        w2 = np.array([[0.7, -0.4]])
        b2 = np.array([0.05])
        with torch.no_grad():
            mlp.layers[0].weight.copy_(torch.as_tensor(w1, dtype=torch.float32))
            mlp.layers[0].bias.copy_(torch.as_tensor(b1, dtype=torch.float32))
            mlp.layers[2].weight.copy_(torch.as_tensor(w2, dtype=torch.float32))
            mlp.layers[2].bias.copy_(torch.as_tensor(b2, dtype=torch.float32))

        def gelu(v):
            return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))

        for x in (-1.3, 0.0, 0.42, 2.5):
            h = [gelu(w1[i, 0] * x + b1[i]) for i in range(2)]
            expected = w2[0, 0] * h[0] + w2[0, 1] * h[1] + b2[0]
            got = mlp_forward(mlp, np.array([[x]], dtype=np.float32))[0, 0]
            assert got == pytest.approx(expected, abs=1e-6)

    def test_batch_independence_bit_exact_across_sizes(self):
        mlp = MLP([6, 32, 32, 2])
        x = torch.randn(500, 6)
        with torch.no_grad():
            full = mlp(x)
            for n in (1, 2, 3, 5, 17, 64, 255):
                sub = mlp(x[:n])
                assert torch.equal(sub, full[:n]), f"batch size {n} diverged"

    def test_leading_shape_preserved(self):
        mlp = MLP([4, 8, 3])
        x = torch.randn(2, 5, 4)
        out = mlp(x)
        assert out.shape == (2, 5, 3)
        with torch.no_grad():
            flat = mlp(x.reshape(10, 4))
        assert torch.equal(out.reshape(10, 3), flat)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        mlp = MLP([3, 6, 6, 1]).double()
        x = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        target = torch.randn(5, 1, dtype=torch.float64)

        def loss_of(flat_params, x_in):
            offset = 0
            clone = MLP([3, 6, 6, 1]).double()
            with torch.no_grad():
                for p in clone.parameters():
                    n = p.numel()
                    p.copy_(flat_params[offset : offset + n].reshape(p.shape))
                    offset += n
                return float(((clone(x_in) - target) ** 2).mean())

        loss = ((mlp(x) - target) ** 2).mean()
        loss.backward()
        flat = torch.cat([p.detach().reshape(-1) for p in mlp.parameters()])
        grad_flat = torch.cat([p.grad.reshape(-1) for p in mlp.parameters()])
        h = 1e-4
        rng = np.random.default_rng(1)
        for idx in rng.choice(flat.numel(), size=25, replace=False):
            e = torch.zeros_like(flat)
            e[idx] = h
            fd = (loss_of(flat + e, x.detach()) - loss_of(flat - e, x.detach())) / (2 * h)
            assert float(grad_flat[idx]) == pytest.approx(float(fd), rel=1e-3, abs=1e-9)
        # gradient with respect to the input as well
        xg = x.grad.clone()
        for idx in rng.choice(x.numel(), size=8, replace=False):
            e = torch.zeros_like(x.detach().reshape(-1))
            e[idx] = h
            xp = (x.detach().reshape(-1) + e).reshape(x.shape)
            xm = (x.detach().reshape(-1) - e).reshape(x.shape)
            fd = (loss_of(flat, xp) - loss_of(flat, xm)) / (2 * h)
            assert float(xg.reshape(-1)[idx]) == pytest.approx(float(fd), rel=1e-3, abs=1e-9)

    def test_shape_mismatch(self):
        mlp = MLP([4, 2])
        with pytest.raises(ParameterError):
            mlp(torch.zeros(3, 5))


class _Quadratic(torch.nn.Module):
    def __init__(self, dim, start):
        super().__init__()
        self.p = torch.nn.Parameter(torch.as_tensor(start, dtype=torch.float32))


class TestTrainLoop:
    def test_quadratic_converges(self):
        target = torch.tensor([1.0, -2.0, 0.5])
        model = _Quadratic(3, [0.0, 0.0, 0.0])
        cfg = TrainConfig(learning_rate=0.05, batch_size=1, epochs=500, seed=0)
        train_loop(model, lambda m, b: ((m.p - target) ** 2).sum(), lambda e: [None], cfg)
        assert torch.allclose(model.p.detach(), target, atol=1e-3)

    def test_zero_learning_rate_keeps_params(self):
        model = _Quadratic(2, [3.0, -1.0])
        before = model.p.detach().clone()
        cfg = TrainConfig(learning_rate=0.0, batch_size=1, epochs=5, seed=0)
        train_loop(model, lambda m, b: (m.p**2).sum(), lambda e: [None, None], cfg)
        assert torch.equal(model.p.detach(), before)

    def test_rerun_bit_identical_history(self):
        def run():
            torch.manual_seed(3)
            model = torch.nn.Linear(4, 1)
            gen = torch.Generator().manual_seed(5)
            data = [torch.randn(8, 4, generator=gen) for _ in range(4)]

            def loss_fn(m, batch):
                return (m(batch) ** 2).mean()

            cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=3, seed=1)
            return train_loop(model, loss_fn, lambda e: data, cfg)

        assert run() == run()

    def test_non_finite_loss_aborts_with_batch_index(self):
        model = _Quadratic(1, [1.0])

        def loss_fn(m, batch):
            if batch == 2:
                return m.p.sum() * float("nan")
            return (m.p**2).sum()

        cfg = TrainConfig(learning_rate=1e-3, batch_size=1, epochs=1, seed=0)
        with pytest.raises(TrainingDivergedError, match="batch 2"):
            train_loop(model, loss_fn, lambda e: [0, 1, 2, 3], cfg)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ParameterError):
            TrainConfig(batch_size=0)


class TestCheckpoint:
    def test_round_trip_tensors_and_metadata(self, tmp_path):
        torch.manual_seed(0)
        model = MLP([3, 8, 2])
        cfg = TrainConfig(learning_rate=0.01, epochs=3, seed=9)
        save_checkpoint(tmp_path / "ck", module_tensors(model), cfg, extra={"note": "x"})
        tensors, train_cfg, extra = load_checkpoint(tmp_path / "ck")
        assert extra == {"note": "x"}
        assert train_cfg["seed"] == 9
        clone = MLP([3, 8, 2])
        load_into_module(clone, tensors)
        assert parameter_checksum(clone) == parameter_checksum(model)

    def test_blob_layout_matches_manifest(self, tmp_path):
        import json

        t = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.ones(4, np.float32)}
        save_checkpoint(tmp_path / "ck", t)
        manifest = json.loads((tmp_path / "ck" / "checkpoint.json").read_text())
        names = [r["name"] for r in manifest["tensors"]]
        assert names == ["a", "b"]  # sorted
        blob = (tmp_path / "ck" / "params.bin").read_bytes()
        rec_b = manifest["tensors"][1]
        got = np.frombuffer(blob[rec_b["offset"] : rec_b["offset"] + 24], dtype="<f4")
        np.testing.assert_array_equal(got.reshape(2, 3), t["b"])

    def test_truncated_blob_rejected(self, tmp_path):
        from fieldcascade.errors import CheckpointError

        save_checkpoint(tmp_path / "ck", {"w": np.ones(8, np.float32)})
        blob = (tmp_path / "ck" / "params.bin").read_bytes()
        (tmp_path / "ck" / "params.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")


def test_to_tensor_copies_readonly():
    arr = np.arange(4, dtype=np.float32)
    arr.setflags(write=False)
    t = to_tensor(arr)
    t[0] = 99.0
    assert arr[0] == 0.0
