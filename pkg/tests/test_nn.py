import numpy as np
import pytest

import priormatte.tensor as T
from priormatte.nn import (Conv3x3, ConvNormRelu, GroupNorm, LayerNorm,
                           Linear, Mlp, Module, trunc_normal)
from priormatte.tensor import Parameter, ShapeError, Tensor


class TinyNet(Module):

    def __init__(self):
        rng = np.random.default_rng(0)
        self.fc = Linear(4, 3, rng)
        self.norm = LayerNorm(3)
        self.blocks = [Mlp(3, rng), Mlp(3, rng)]
        self.scale = Parameter(np.ones(1, dtype=np.float32))


class TestModule:

    def test_named_parameters_dotted_paths(self):
        names = {n for n, _ in TinyNet().named_parameters()}
        assert "fc.weight" in names
        assert "fc.bias" in names
        assert "norm.gamma" in names
        assert "blocks.0.fc1.weight" in names
        assert "blocks.1.fc2.bias" in names
        assert "scale" in names

    def test_state_dict_roundtrip(self):
        a, b = TinyNet(), TinyNet()
        for p in a.parameters():
            p.data = p.data + 1.0
        b.load_state_dict(a.state_dict())
        for (n1, p1), (n2, p2) in zip(a.named_parameters(),
                                      b.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_load_missing_key(self):
        net = TinyNet()
        state = net.state_dict()
        del state["fc.weight"]
        with pytest.raises(KeyError):
            net.load_state_dict(state)

    def test_load_shape_mismatch(self):
        net = TinyNet()
        state = net.state_dict()
        state["fc.weight"] = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ShapeError):
            net.load_state_dict(state)

    def test_num_params(self):
        net = TinyNet()
        expect = sum(p.size for p in net.parameters())
        assert net.num_params() == expect

    def test_zero_grad(self):
        net = TinyNet()
        out = T.tsum(net.fc(Tensor(np.ones((2, 4), dtype=np.float32))))
        out.backward()
        assert net.fc.weight.grad is not None
        net.zero_grad()
        assert net.fc.weight.grad is None


class TestTruncNormal:

    def test_clipped_at_two_std(self):
        vals = trunc_normal(np.random.default_rng(1), (10000,), std=0.02)
        assert np.abs(vals).max() <= 0.04 + 1e-7
        assert abs(vals.mean()) < 0.002


class TestGroupNorm:

    def test_group_moments(self):
        rng = np.random.default_rng(2)
        gn = GroupNorm(8, groups=4, dtype=np.float64)
        x = Tensor(rng.standard_normal((8, 5, 5)) * 3.0 + 1.0)
        y = gn(x).data.reshape(4, 2 * 25)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)

    def test_affine_applied_per_channel(self):
        gn = GroupNorm(4, groups=2, dtype=np.float64)
        gn.beta.data = np.arange(4.0)
        y = gn(Tensor(np.random.default_rng(3).standard_normal((4, 3, 3))))
        means = y.data.mean(axis=(1, 2))
        assert means[3] > means[0]

    def test_indivisible_channels(self):
        with pytest.raises(ShapeError):
            GroupNorm(6, groups=4)


class TestConvBlocks:

    def test_conv_norm_relu_shape_and_nonneg(self):
        rng = np.random.default_rng(4)
        blk = ConvNormRelu(3, 8, rng, groups=4, dtype=np.float64)
        y = blk(Tensor(rng.standard_normal((3, 6, 7))))
        assert y.shape == (8, 6, 7)
        assert (y.data >= 0).all()

    def test_bare_conv_shape(self):
        rng = np.random.default_rng(5)
        head = Conv3x3(4, 1, rng, dtype=np.float64)
        y = head(Tensor(rng.standard_normal((4, 6, 6))))
        assert y.shape == (1, 6, 6)

    def test_linear_no_bias(self):
        rng = np.random.default_rng(6)
        lin = Linear(3, 2, rng, bias=False)
        assert lin.bias is None
        assert len(list(lin.named_parameters())) == 1
