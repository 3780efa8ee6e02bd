"""Attention building blocks: forward definitions, oracles, invariants."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from treemtl.attention import LANet, LASEBlock, SENet, dup, global_avg_pool
from treemtl.errors import ConfigError


def rand_map(b=2, h=4, w=5, c=8, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(b, h, w, c, dtype=torch.float64, generator=gen)


class TestDup:
    def test_spatial_replication(self):
        x = torch.tensor([3.0, 7.0]).reshape(1, 1, 1, 2)
        out = dup(x, [1, 2], [2, 2])
        assert out.shape == (1, 2, 2, 2)
        for i in range(2):
            for j in range(2):
                assert torch.equal(out[0, i, j], torch.tensor([3.0, 7.0]))

    def test_channel_replication(self):
        x = torch.arange(4.0).reshape(1, 2, 2, 1)
        out = dup(x, [3], [4])
        assert out.shape == (1, 2, 2, 4)
        for c in range(4):
            assert torch.equal(out[..., c : c + 1], x)

    def test_empty_dims_is_identity(self):
        x = rand_map()
        assert dup(x, [], []) is x

    def test_non_singleton_axis_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            dup(rand_map(), [1], [3])

    def test_axis_out_of_range(self):
        with pytest.raises(IndexError):
            dup(torch.zeros(1, 1, 1, 2), [4], [2])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            dup(torch.zeros(1, 1, 1, 2), [1, 2], [2])

    @given(
        factor_h=st.integers(1, 4),
        factor_w=st.integers(1, 4),
        c=st.integers(1, 3),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_every_slice_equals_source(self, factor_h, factor_w, c, seed):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 1, 1, c, generator=gen, dtype=torch.float64)
        out = dup(x, [1, 2], [factor_h, factor_w])
        assert out.shape == (1, factor_h, factor_w, c)
        for i in range(factor_h):
            for j in range(factor_w):
                assert torch.equal(out[0, i, j], x[0, 0, 0])


class TestGlobalAvgPool:
    def test_mean_of_small_map(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        assert float(global_avg_pool(x)) == pytest.approx(2.5)

    def test_all_ones(self):
        x = torch.ones(3, 5, 4, 6)
        out = global_avg_pool(x)
        assert out.shape == (3, 1, 1, 6)
        assert torch.equal(out, torch.ones(3, 1, 1, 6))

    def test_constant_channels(self):
        x = torch.zeros(1, 3, 3, 2)
        x[..., 1] = 5.0
        out = global_avg_pool(x)
        assert torch.equal(out.reshape(-1), torch.tensor([0.0, 5.0]))

    def test_rank_checked(self):
        with pytest.raises(ValueError):
            global_avg_pool(torch.zeros(3, 3))


def zero_second_layer(net):
    with torch.no_grad():
        if isinstance(net, LANet):
            net.collapse.weight.zero_()
            net.collapse.bias.zero_()
        else:
            net.excite.weight.zero_()
            net.excite.bias.zero_()
    return net


class TestLANet:
    def test_zeroed_output_layer_forces_half(self):
        net = zero_second_layer(LANet(8, reduction=4))
        x = rand_map()
        out, att = net(x)
        assert torch.allclose(att, torch.full_like(att, 0.5))
        assert torch.allclose(out, 0.5 * x)

    def test_zero_input_gives_zero_output(self):
        net = LANet(8, reduction=4)
        out, _ = net(torch.zeros(2, 3, 3, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_matches_scalar_oracle(self):
        net = LANet(8, reduction=4).double()
        torch.manual_seed(3)
        for p in net.parameters():
            with torch.no_grad():
                p.copy_(torch.randn_like(p))
        x = rand_map(seed=11)
        out, att = net(x)
        ref_out, ref_att = oracles.scalar_lanet(
            x.numpy(),
            net.compress.weight.detach().numpy(),
            net.compress.bias.detach().numpy(),
            net.collapse.weight.detach().numpy(),
            net.collapse.bias.detach().numpy(),
        )
        np.testing.assert_allclose(out.detach().numpy(), ref_out, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(att.detach().numpy(), ref_att, rtol=1e-12, atol=1e-12)

    def test_indivisible_reduction_rejected(self):
        with pytest.raises(ConfigError):
            LANet(6, reduction=4)

    def test_single_channel_allowed(self):
        net = LANet(1, reduction=16)
        out, att = net(torch.randn(1, 3, 3, 1))
        assert out.shape == (1, 3, 3, 1)
        assert att.shape == (1, 3, 3, 1)


class TestSENet:
    def test_zeroed_output_layer_forces_half(self):
        net = zero_second_layer(SENet(8, reduction=4))
        x = rand_map()
        out, att = net(x)
        assert torch.allclose(att, torch.full_like(att, 0.5))
        assert torch.allclose(out, 0.5 * x)

    def test_zero_input_gives_zero_output(self):
        net = SENet(8, reduction=4)
        out, _ = net(torch.zeros(2, 3, 3, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_matches_scalar_oracle(self):
        net = SENet(8, reduction=4).double()
        torch.manual_seed(4)
        for p in net.parameters():
            with torch.no_grad():
                p.copy_(torch.randn_like(p))
        x = rand_map(seed=12)
        out, att = net(x)
        ref_out, ref_att = oracles.scalar_senet(
            x.numpy(),
            net.squeeze.weight.detach().numpy(),
            net.squeeze.bias.detach().numpy(),
            net.excite.weight.detach().numpy(),
            net.excite.bias.detach().numpy(),
        )
        np.testing.assert_allclose(out.detach().numpy(), ref_out, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(att.detach().numpy(), ref_att, rtol=1e-12, atol=1e-12)


class TestLASEBlock:
    def test_zeroed_attention_nets_double_the_input(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4)
        zero_second_layer(block.lanet)
        zero_second_layer(block.senet)
        x = rand_map()
        assert torch.allclose(block(x), 2.0 * x)

    def test_zero_input(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4)
        out = block(torch.zeros(1, 4, 4, 8))
        assert torch.equal(out, torch.zeros_like(out))

    def test_equals_sum_of_independent_branches(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4).double()
        x = rand_map(seed=21)
        ref = oracles.scalar_lase(x.numpy(), block)
        np.testing.assert_allclose(block(x).detach().numpy(), ref, rtol=1e-12, atol=1e-12)

    def test_branch_toggles(self):
        x = rand_map()
        neither = LASEBlock(8, use_lanet=False, use_senet=False)
        assert torch.equal(neither(x), x)
        lanet_only = LASEBlock(8, lanet_reduction=4, use_senet=False)
        out, att, chan = lanet_only.forward_with_attention(x)
        assert chan is None and att is not None
        assert out.shape == x.shape


class TestInvariants:
    def test_shape_preserved(self):
        for b, h, w, c in [(1, 1, 1, 1), (2, 3, 5, 8), (3, 7, 2, 16)]:
            x = torch.randn(b, h, w, c, dtype=torch.float64)
            block = LASEBlock(c, lanet_reduction=min(4, c), senet_reduction=min(4, c))
            assert block(x).shape == x.shape

    def test_attention_strictly_inside_unit_interval(self):
        x = 10.0 * rand_map(seed=31)
        _, att = LANet(8, reduction=4)(x)
        assert bool((att > 0).all()) and bool((att < 1).all())
        _, att = SENet(8, reduction=4)(x)
        assert bool((att > 0).all()) and bool((att < 1).all())

    def test_spatial_attention_uniform_across_channels(self):
        x = rand_map(seed=32).abs() + 0.1  # keep every entry nonzero
        out, att = LANet(8, reduction=4)(x)
        ratio = out / x
        expected = att.expand_as(ratio)
        assert torch.allclose(ratio, expected, rtol=1e-12)

    def test_channel_attention_uniform_across_positions(self):
        x = rand_map(seed=33).abs() + 0.1
        out, att = SENet(8, reduction=4)(x)
        ratio = out / x
        expected = att.expand_as(ratio)
        assert torch.allclose(ratio, expected, rtol=1e-12)

    def test_batch_independence(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4)
        x = rand_map(b=4, seed=34)
        perm = torch.tensor([2, 0, 3, 1])
        out = block(x)
        out_permuted = block(x[perm])
        assert torch.allclose(out[perm], out_permuted, rtol=1e-12, atol=1e-14)


class TestBackward:
    def test_doubled_input_gradient_with_zeroed_attention(self):
        # with both attention nets' second layers zeroed the residual path
        # contributes exactly 2 to d(sum)/dx; verify the full derivative
        # (including attention-path terms) against finite differences
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4).double()
        zero_second_layer(block.lanet)
        zero_second_layer(block.senet)
        x = rand_map(b=1, h=3, w=3, seed=41).requires_grad_(True)
        block(x).sum().backward()
        grad = x.grad.clone()

        def loss():
            return block(x).sum()

        rng = np.random.default_rng(0)
        for index in rng.choice(x.numel(), size=10, replace=False):
            fd = oracles.finite_difference(loss, x, int(index))
            assert math.isclose(float(grad.view(-1)[index]), fd, rel_tol=1e-6, abs_tol=1e-8)

    def test_constant_loss_gives_zero_parameter_gradients(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4)
        (block(rand_map()) * 0.0).sum().backward()
        for p in block.parameters():
            assert torch.equal(p.grad, torch.zeros_like(p))

    def test_single_parameter_probe(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4).double()
        x = rand_map(seed=42)

        def loss():
            return (block(x) ** 2).sum()

        value = loss()
        value.backward()
        weight = block.lanet.compress.weight
        fd = oracles.finite_difference(loss, weight, 0)
        assert math.isclose(float(weight.grad.view(-1)[0]), fd, rel_tol=1e-6, abs_tol=1e-9)

    def test_backward_without_live_graph_fails(self):
        block = LASEBlock(8, lanet_reduction=4, senet_reduction=4)
        out = block(rand_map()).sum()
        out.backward()
        with pytest.raises(RuntimeError):
            out.backward()  # graph already consumed; no recorded forward state
