"""Tree assembly, parameter groups, forward contracts, cost accounting."""

import numpy as np
import pytest
import torch

import oracles
from treemtl.errors import ConfigError
from treemtl.model import (
    BackboneSpec,
    BranchConfig,
    ConvStage,
    TreeModel,
    count_backbone_cost,
    count_cost,
    count_split_cost,
    default_backbone_spec,
)


class TestBackboneSpec:
    def test_desk_scale_output_shape(self):
        assert default_backbone_spec().output_shape() == (7, 7, 64)

    def test_collapsing_stage_rejected(self):
        spec = BackboneSpec(input_size=(8, 8, 1), stages=(ConvStage(3, 4, 16),))
        with pytest.raises(ConfigError):
            spec.validate()

    def test_roundtrip_through_dict(self):
        spec = default_backbone_spec()
        assert BackboneSpec.from_dict(spec.to_dict()) == spec


class TestForward:
    def test_branches_recompute_from_captured_shared(self, tiny_model):
        x = torch.randn(3, 8, 8, 1, dtype=torch.float64)
        out = tiny_model.forward_both(x)
        with torch.no_grad():
            logit, fatigue_feat = tiny_model.fatigue_branch(out.shared)
            embedding, face_feat = tiny_model.face_branch(out.shared)
        assert torch.equal(logit, out.fatigue_logit)
        assert torch.equal(embedding, out.embedding)
        assert torch.equal(fatigue_feat, out.fatigue_features)
        assert torch.equal(face_feat, out.face_features)

    def test_zero_image_zero_model_leaves_only_head_bias(self, tiny_model):
        with torch.no_grad():
            for p in tiny_model.parameters():
                p.zero_()
            tiny_model.fatigue_branch.head.bias.fill_(0.7)
        out = tiny_model.forward_both(torch.zeros(2, 8, 8, 1, dtype=torch.float64))
        assert torch.equal(out.fatigue_logit, torch.full((2, 1), 0.7, dtype=torch.float64))

    def test_matches_scalar_recomputation(self, tiny_model):
        gen = torch.Generator().manual_seed(99)
        x = torch.randn(2, 8, 8, 1, dtype=torch.float64, generator=gen)
        out = tiny_model.forward_both(x)
        ref_logits, ref_embeddings = oracles.scalar_tree_forward(x.numpy(), tiny_model)
        np.testing.assert_allclose(
            out.fatigue_logit.detach().numpy(), ref_logits, rtol=1e-10, atol=1e-12
        )
        np.testing.assert_allclose(
            out.embedding.detach().numpy(), ref_embeddings, rtol=1e-10, atol=1e-12
        )

    def test_forward_task_agrees_with_forward_both(self, tiny_model):
        x = torch.randn(2, 8, 8, 1, dtype=torch.float64)
        out = tiny_model.forward_both(x)
        assert torch.equal(tiny_model.forward_task(x, "fatigue"), out.fatigue_logit)
        assert torch.equal(tiny_model.forward_task(x, "face"), out.embedding)

    def test_default_embedding_dimension_is_512(self):
        model = TreeModel(seed=0)
        x = torch.zeros(1, 112, 112, 1, dtype=torch.float32)
        assert tuple(model.forward_task(x, "face").shape) == (1, 512)

    def test_unknown_task_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="unknown task"):
            tiny_model.forward_task(torch.zeros(1, 8, 8, 1, dtype=torch.float64), "gaze")

    def test_shape_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="expected"):
            tiny_model.forward_both(torch.zeros(1, 9, 8, 1, dtype=torch.float64))

    def test_repeated_calls_bit_identical(self, tiny_model):
        x = torch.randn(2, 8, 8, 1, dtype=torch.float64)
        first = tiny_model.forward_both(x)
        second = tiny_model.forward_both(x)
        assert torch.equal(first.fatigue_logit, second.fatigue_logit)
        assert torch.equal(first.embedding, second.embedding)

    def test_embeddings_unit_norm(self, tiny_model):
        x = torch.randn(4, 8, 8, 1, dtype=torch.float64)
        norms = tiny_model.forward_task(x, "face").norm(dim=1)
        assert torch.allclose(norms, torch.ones_like(norms), atol=1e-12)

    def test_same_seed_same_parameters(self, tiny_backbone):
        a = TreeModel(tiny_backbone, BranchConfig(embedding_dim=8), seed=5, dtype=torch.float64)
        b = TreeModel(tiny_backbone, BranchConfig(embedding_dim=8), seed=5, dtype=torch.float64)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestParameterGroups:
    def test_disjoint_and_exhaustive(self, tiny_model):
        groups = tiny_model.parameter_groups()
        names = [name for grp in groups.values() for name, _ in grp]
        assert len(names) == len(set(names))
        assert set(names) == {name for name, _ in tiny_model.named_parameters()}

    def test_gradients_stay_inside_task_groups(self, tiny_model):
        x = torch.randn(2, 8, 8, 1, dtype=torch.float64)
        tiny_model.forward_task(x, "fatigue").sum().backward()
        groups = tiny_model.parameter_groups()
        assert all(p.grad is None for _, p in groups["face"])
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for _, p in groups["root"])
        tiny_model.zero_grad(set_to_none=True)
        tiny_model.forward_task(x, "face").sum().backward()
        groups = tiny_model.parameter_groups()
        assert all(p.grad is None for _, p in groups["fatigue"])
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for _, p in groups["root"])


class TestCost:
    def test_single_pointwise_conv_hand_count(self):
        # 1x1 conv, 4 -> 2 channels, on an 8x8 input, no bias:
        # 8*8*4*2 = 512 MACs = 1024 FLOPs and 4*2 = 8 parameters
        spec = BackboneSpec(
            input_size=(8, 8, 4),
            stages=(ConvStage(1, 2, 1, activation="none"),),
            bias=False,
        )
        params, flops, out_shape = count_backbone_cost(spec)
        assert (params, flops) == (8, 1024)
        assert out_shape == (8, 8, 2)

    def test_empty_model(self):
        params, flops, out_shape = count_backbone_cost(BackboneSpec(input_size=(8, 8, 4)))
        assert (params, flops) == (0, 0)
        assert out_shape == (8, 8, 4)

    def test_conv_plus_fc_hand_count(self, tiny_backbone):
        # stage 1: 3x3x1 -> 4 @ stride 2 on 8x8: out 4x4; params 9*4+4 = 40
        #   flops 2*4*4*4*9*1 + 4*4*4 (bias) + 4*4*4 (relu) = 1152+64+64 = 1280
        # stage 2: 3x3x4 -> 8 @ stride 2: out 2x2; params 9*4*8+8 = 296
        #   flops 2*2*2*8*9*4 + 2*2*8 + 2*2*8 = 2304+32+32 = 2368
        params, flops, out_shape = count_backbone_cost(tiny_backbone)
        assert params == 40 + 296
        assert flops == 1280 + 2368
        assert out_shape == (2, 2, 8)

    def test_totals_match_live_module(self, tiny_model):
        report = count_cost(tiny_model)
        assert report.total_params == sum(p.numel() for p in tiny_model.parameters())
        groups = tiny_model.parameter_groups()
        for name in ("root", "fatigue", "face"):
            assert report.params[name] == sum(p.numel() for _, p in groups[name])

    def test_adding_a_stage_never_decreases_cost(self):
        base = BackboneSpec(input_size=(16, 16, 1), stages=(ConvStage(3, 4, 2),))
        grown = BackboneSpec(
            input_size=(16, 16, 1), stages=(ConvStage(3, 4, 2), ConvStage(3, 4, 1))
        )
        p0, f0, _ = count_backbone_cost(base)
        p1, f1, _ = count_backbone_cost(grown)
        assert p1 >= p0 and f1 >= f0

    def test_split_parallel_pays_the_root_twice(self, tiny_model):
        tree = count_cost(tiny_model)
        split = count_split_cost(tiny_model)
        assert split.total_params == tree.total_params + tree.params["root"]
        assert split.total_flops == tree.total_flops + tree.flops["root"]
        assert split.total_params > tree.total_params

    def test_report_total_is_sum_of_groups(self, tiny_model):
        report = count_cost(tiny_model)
        assert report.total_params == sum(report.params.values())
        assert report.total_flops == sum(report.flops.values())
