import numpy as np
import pytest

from petrecon.autodiff import Tape, Tensor, grad_check, param_grad_check
from petrecon.autodiff import ops
from petrecon.errors import InputError
from petrecon.networks import (
    NetworkSpec,
    build_denoiser,
    build_generator,
    build_network,
    generator_channels,
    init_params,
    load_paramset,
    save_paramset,
)


def zero_all(ps):
    for p in ps:
        p.data = np.zeros_like(p.data)


def denoiser_count_oracle(c, depth):
    """Closed-form parameter count: conv weights + biases + BN pairs."""
    total = 9 * 1 * c + c  # layer 1, no BN
    total += (depth - 2) * (9 * c * c + c + 2 * c)
    total += 9 * c * 1 + 1  # last layer, no BN
    return total


class TestSpec:
    def test_defaults(self):
        assert NetworkSpec.generator() == NetworkSpec("generator", 64, 4)
        assert NetworkSpec.denoiser().depth == 8

    def test_invalid(self):
        with pytest.raises(InputError):
            NetworkSpec("critic")
        with pytest.raises(InputError):
            NetworkSpec.generator(depth=0)
        with pytest.raises(InputError):
            NetworkSpec.denoiser(depth=1)
        with pytest.raises(InputError):
            build_generator(NetworkSpec.denoiser(), 0)


class TestGenerator:
    def test_channel_sequence_full_size(self):
        enc, mid, dec = generator_channels(NetworkSpec.generator(64, 4))
        assert enc == [64, 128, 256, 512]
        assert dec[::-1] == [256, 128, 64, 64]
        ps, _ = build_generator(NetworkSpec.generator(64, 4), 0)
        assert ps["enc3.conv1.weight"].shape == (512, 256, 3, 3)
        assert ps["dec0.conv1.weight"].shape == (64, 64 + 64, 3, 3)
        assert ps["head.weight"].shape == (1, 64, 1, 1)

    def test_deepest_size_128(self):
        _, fwd = build_generator(NetworkSpec.generator(2, 4), 0)
        z = Tensor(np.random.default_rng(0).random((1, 1, 128, 128)), requires_grad=True)
        out = fwd(z)
        assert out.shape == (1, 1, 128, 128)
        pools = [e.shape for e in Tape.from_loss(out).entries if e.op == "max_pool2"]
        assert pools[-1] == (1, 16, 8, 8)

    def test_shape_64(self):
        _, fwd = build_generator(NetworkSpec.generator(4, 4), 1)
        assert fwd(Tensor(np.ones((1, 1, 64, 64)))).shape == (1, 1, 64, 64)

    def test_indivisible_input(self):
        _, fwd = build_generator(NetworkSpec.generator(2, 3), 0)
        with pytest.raises(InputError):
            fwd(Tensor(np.ones((1, 1, 20, 16))))

    def test_zero_params_constant_output(self, rng):
        ps, fwd = build_generator(NetworkSpec.generator(2, 2), 0)
        zero_all(ps)
        ps["head.bias"].data = np.array([0.37])
        out = fwd(Tensor(rng.random((1, 1, 16, 16)))).data
        np.testing.assert_array_equal(out, 0.37)

    def test_zero_weights_bn_beta_path(self, rng):
        ps, fwd = build_generator(NetworkSpec.generator(2, 2), 0)
        for p in ps:
            if p.role == "weight" and p.name != "head.weight":
                p.data = np.zeros_like(p.data)
        ps["dec0.conv2.bn.beta"].data = np.array([0.5, -1.0])
        ps["head.weight"].data = np.array([2.0, 3.0]).reshape(1, 2, 1, 1)
        ps["head.bias"].data = np.array([0.1])
        out = fwd(Tensor(rng.random((1, 1, 16, 16)))).data
        # constant BN input maps to beta; relu keeps 0.5 and drops -1
        np.testing.assert_allclose(out, 2.0 * 0.5 + 0.1, rtol=1e-12)

    def test_skip_path_alone_carries_input(self, rng):
        spec = NetworkSpec.generator(2, 2)
        ps, fwd = build_generator(spec, 3)
        enc, _, _ = generator_channels(spec)
        for level in range(spec.depth):
            w = ps[f"dec{level}.conv1.weight"].data.copy()
            w[:, enc[level]:] = 0.0  # channels that read the upsampled half
            ps[f"dec{level}.conv1.weight"].data = w
        z = rng.random((1, 1, 16, 16))
        a = fwd(Tensor(z)).data
        b = fwd(Tensor(z + 0.1 * rng.standard_normal(z.shape))).data
        assert np.abs(a - b).max() > 1e-3
        # with the skip half zeroed as well, nothing reaches the decoder
        for level in range(spec.depth):
            ps[f"dec{level}.conv1.weight"].data = np.zeros_like(ps[f"dec{level}.conv1.weight"].data)
        a = fwd(Tensor(z)).data
        b = fwd(Tensor(z + 0.1 * rng.standard_normal(z.shape))).data
        np.testing.assert_array_equal(a, b)

    def test_gradients_16(self, rng):
        ps, fwd = build_generator(NetworkSpec.generator(2, 2), 5)
        w = Tensor(rng.standard_normal((1, 1, 16, 16)))
        z = rng.random((1, 1, 16, 16))
        assert grad_check(lambda t: ops.dot(fwd(t), w), z, 1e-4, max_coords=64) < 1e-3
        picked = [ps["enc0.conv1.weight"], ps["mid.conv2.bn.gamma"], ps["head.bias"]]
        err = param_grad_check(lambda: ops.dot(fwd(Tensor(z)), w), picked, 1e-4, max_coords=32)
        assert err < 1e-3


class TestDenoiser:
    @pytest.mark.parametrize("c,depth", [(64, 8), (8, 5), (3, 2)])
    def test_parameter_count(self, c, depth):
        ps, _ = build_denoiser(NetworkSpec.denoiser(c, depth), 0)
        assert ps.count == denoiser_count_oracle(c, depth)

    @pytest.mark.parametrize("h,w", [(6, 10), (16, 16), (12, 4)])
    def test_shape(self, h, w):
        _, fwd = build_denoiser(NetworkSpec.denoiser(4, 4), 0)
        assert fwd(Tensor(np.ones((1, 1, h, w)))).shape == (1, 1, h, w)

    def test_no_residual(self, rng):
        ps, fwd = build_denoiser(NetworkSpec.denoiser(4, 5), 2)
        ps["layer5.weight"].data = np.zeros_like(ps["layer5.weight"].data)
        ps["layer5.bias"].data = np.array([0.25])
        for _ in range(3):
            out = fwd(Tensor(rng.random((1, 1, 8, 8)))).data
            np.testing.assert_array_equal(out, 0.25)

    def test_layer_structure(self):
        ps, _ = build_denoiser(NetworkSpec.denoiser(8, 4), 0)
        assert ps.names() == [
            "layer1.weight", "layer1.bias",
            "layer2.weight", "layer2.bias", "layer2.bn.gamma", "layer2.bn.beta",
            "layer3.weight", "layer3.bias", "layer3.bn.gamma", "layer3.bn.beta",
            "layer4.weight", "layer4.bias",
        ]
        assert ps["layer4.weight"].shape == (1, 8, 3, 3)

    def test_gradients(self, rng):
        ps, fwd = build_denoiser(NetworkSpec.denoiser(3, 4), 1)
        w = Tensor(rng.standard_normal((1, 1, 8, 8)))
        x = rng.random((1, 1, 8, 8))
        assert grad_check(lambda t: ops.dot(fwd(t), w), x, 1e-4) < 1e-3
        assert param_grad_check(lambda: ops.dot(fwd(Tensor(x)), w), list(ps), 1e-4, max_coords=32) < 1e-3


class TestInit:
    def test_same_seed_same_bytes(self):
        a, _ = build_network(NetworkSpec.generator(4, 2), 9)
        b, _ = build_network(NetworkSpec.generator(4, 2), 9)
        c, _ = build_network(NetworkSpec.generator(4, 2), 10)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_he_std(self):
        vals = init_params([("w", (20, 64, 3, 3), "weight")], seed=4)["w"]
        assert vals.size >= 10**4
        assert abs(vals.std() / np.sqrt(2.0 / 576) - 1.0) < 0.05

    def test_roles(self):
        ps, _ = build_denoiser(NetworkSpec.denoiser(4, 4), 0)
        for p in ps:
            if p.role == "bn_gamma":
                assert np.all(p.data == 1.0)
            elif p.role in ("bias", "bn_beta"):
                assert not p.data.any()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        spec = NetworkSpec.generator(2, 2)
        ps, fwd = build_generator(spec, 7)
        for p in ps:
            p.data = p.data + 0.01 * rng.standard_normal(p.shape)
        save_paramset(tmp_path / "g.bin", spec, ps)
        spec2, ps2, fwd2 = load_paramset(tmp_path / "g.bin")
        assert spec2 == spec
        assert ps2.tobytes() == ps.tobytes()
        z = Tensor(rng.random((1, 1, 8, 8)))
        np.testing.assert_allclose(fwd2(z).data, fwd(z).data, rtol=1e-5, atol=1e-6)

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
        with pytest.raises(InputError):
            load_paramset(tmp_path / "x.bin")

    def test_rejects_truncated(self, tmp_path):
        spec = NetworkSpec.denoiser(2, 3)
        ps, _ = build_denoiser(spec, 0)
        save_paramset(tmp_path / "d.bin", spec, ps)
        raw = (tmp_path / "d.bin").read_bytes()
        (tmp_path / "d.bin").write_bytes(raw[:-8])
        with pytest.raises(InputError):
            load_paramset(tmp_path / "d.bin")
