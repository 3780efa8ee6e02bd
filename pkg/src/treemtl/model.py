"""Tree-style two-task model: shared convolutional root, two attention branches.

The root backbone turns an image batch into one shared (B, H, W, C) feature
map; a fatigue branch (LASE block + FC -> 1 logit) and a face branch
(LASE block + FC -> unit-norm embedding) both consume that same tensor.
Parameters are addressable by group {root, fatigue, face} for selective
freezing during alternating updates.
"""

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import LASEBlock, init_he_uniform
from .errors import ConfigError

GROUPS = ("root", "fatigue", "face")

_ACTIVATIONS = ("relu", "none")
_POOLS = ("none", "max2", "avg2")


@dataclass(frozen=True)
class ConvStage:
    """One backbone stage: conv (padding k//2) + optional ReLU + optional 2x2 pool."""

    kernel: int
    channels: int
    stride: int = 1
    activation: str = "relu"
    pool: str = "none"

    def validate(self):
        if self.kernel < 1 or self.channels < 1 or self.stride < 1:
            raise ConfigError(f"invalid stage {self}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.pool not in _POOLS:
            raise ConfigError(f"unknown pool {self.pool!r}")


@dataclass(frozen=True)
class BackboneSpec:
    """Stage list plus input image shape (H_in, W_in, channels)."""

    input_size: tuple = (112, 112, 1)
    stages: tuple = ()
    bias: bool = True

    def validate(self):
        if len(self.input_size) != 3 or any(d < 1 for d in self.input_size):
            raise ConfigError(f"invalid input_size {self.input_size}")
        for stage in self.stages:
            stage.validate()
        self.output_shape()  # raises if any stage collapses below 1x1

    def output_shape(self):
        """(H, W, C) of the shared feature map, per stage arithmetic."""
        h, w, c = self.input_size
        for i, s in enumerate(self.stages):
            pad = s.kernel // 2
            h = (h + 2 * pad - s.kernel) // s.stride + 1
            w = (w + 2 * pad - s.kernel) // s.stride + 1
            if s.pool in ("max2", "avg2"):
                h, w = h // 2, w // 2
            c = s.channels
            if h < 1 or w < 1:
                raise ConfigError(f"stage {i} reduces spatial extent below 1x1")
        return (h, w, c)

    def to_dict(self):
        return {
            "input_size": list(self.input_size),
            "bias": self.bias,
            "stages": [
                {
                    "kernel": s.kernel,
                    "channels": s.channels,
                    "stride": s.stride,
                    "activation": s.activation,
                    "pool": s.pool,
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            input_size=tuple(d["input_size"]),
            stages=tuple(ConvStage(**s) for s in d["stages"]),
            bias=d.get("bias", True),
        )
        spec.validate()
        return spec


@dataclass(frozen=True)
class BranchConfig:
    """Shared configuration of the two task branches."""

    lanet_reduction: int = 16
    senet_reduction: int = 16
    use_lanet: bool = True
    use_senet: bool = True
    embedding_dim: int = 512
    bias: bool = True

    def to_dict(self):
        return {
            "lanet_reduction": self.lanet_reduction,
            "senet_reduction": self.senet_reduction,
            "use_lanet": self.use_lanet,
            "use_senet": self.use_senet,
            "embedding_dim": self.embedding_dim,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_backbone_spec(input_size=(112, 112, 1)):
    """Desk-scale default: four 3x3 stride-2 ReLU stages, 16->32->64->64."""
    return BackboneSpec(
        input_size=tuple(input_size),
        stages=(
            ConvStage(3, 16, 2),
            ConvStage(3, 32, 2),
            ConvStage(3, 64, 2),
            ConvStage(3, 64, 2),
        ),
    )


def architecture_fingerprint(config):
    """sha256 of the canonical JSON encoding of a model config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backbone(nn.Module):
    """Stage list applied to (B, H, W, ch) images, emitting a BHWC feature map."""

    def __init__(self, spec):
        super().__init__()
        spec.validate()
        self.spec = spec
        convs = []
        c_in = spec.input_size[2]
        for s in spec.stages:
            convs.append(
                nn.Conv2d(
                    c_in,
                    s.channels,
                    kernel_size=s.kernel,
                    stride=s.stride,
                    padding=s.kernel // 2,
                    bias=spec.bias,
                )
            )
            c_in = s.channels
        self.convs = nn.ModuleList(convs)

    def forward(self, images):
        if images.dim() != 4 or tuple(images.shape[1:]) != tuple(self.spec.input_size):
            raise ValueError(
                f"expected (B,{','.join(map(str, self.spec.input_size))}) images, "
                f"got {tuple(images.shape)}"
            )
        z = images.permute(0, 3, 1, 2)
        for conv, stage in zip(self.convs, self.spec.stages):
            z = conv(z)
            if stage.activation == "relu":
                z = torch.relu(z)
            if stage.pool == "max2":
                z = F.max_pool2d(z, 2)
            elif stage.pool == "avg2":
                z = F.avg_pool2d(z, 2)
        return z.permute(0, 2, 3, 1)


class TaskBranch(nn.Module):
    """LASE block over the shared map, flattened into one FC head."""

    def __init__(self, feature_shape, cfg, out_dim, normalize):
        super().__init__()
        h, w, c = feature_shape
        self.feature_shape = feature_shape
        self.normalize = normalize
        self.lase = LASEBlock(
            c,
            lanet_reduction=cfg.lanet_reduction,
            senet_reduction=cfg.senet_reduction,
            use_lanet=cfg.use_lanet,
            use_senet=cfg.use_senet,
            bias=cfg.bias,
        )
        self.head = nn.Linear(h * w * c, out_dim, bias=cfg.bias)

    def forward(self, shared):
        features = self.lase(shared)
        out = self.head(features.reshape(features.shape[0], -1))
        if self.normalize:
            out = F.normalize(out, dim=1, eps=1e-12)
        return out, features


@dataclass
class ForwardOutputs:
    """Joint forward products; both branch outputs derive from one shared map."""

    fatigue_logit: torch.Tensor  # (B, 1)
    embedding: torch.Tensor  # (B, embedding_dim), unit rows
    shared: torch.Tensor  # (B, H, W, C) root output
    fatigue_features: torch.Tensor  # (B, H, W, C) fatigue LASE output
    face_features: torch.Tensor  # (B, H, W, C) face LASE output


class TreeModel(nn.Module):
    """Shared backbone root with fatigue and face branches.

    Args:
        backbone_spec: root architecture; defaults to the desk-scale stack.
        branch_config: LASE/head configuration shared by both branches.
        seed: He-uniform initialization seed; identical seeds give
            bit-identical parameters.
        dtype: parameter dtype (float64 for gradient work, float32 for speed).
    """

    def __init__(self, backbone_spec=None, branch_config=None, seed=0, dtype=torch.float32):
        super().__init__()
        self.backbone_spec = backbone_spec or default_backbone_spec()
        self.branch_config = branch_config or BranchConfig()
        self.seed = seed
        self.root = Backbone(self.backbone_spec)
        feature_shape = self.backbone_spec.output_shape()
        self.fatigue_branch = TaskBranch(feature_shape, self.branch_config, 1, normalize=False)
        self.face_branch = TaskBranch(
            feature_shape, self.branch_config, self.branch_config.embedding_dim, normalize=True
        )
        gen = torch.Generator().manual_seed(seed)
        init_he_uniform(self, gen)
        self.to(dtype)

    @property
    def feature_shape(self):
        return self.backbone_spec.output_shape()

    def config(self):
        return {
            "backbone": self.backbone_spec.to_dict(),
            "branch": self.branch_config.to_dict(),
        }

    def fingerprint(self):
        return architecture_fingerprint(self.config())

    @classmethod
    def from_config(cls, config, seed=0, dtype=torch.float32):
        return cls(
            backbone_spec=BackboneSpec.from_dict(config["backbone"]),
            branch_config=BranchConfig.from_dict(config["branch"]),
            seed=seed,
            dtype=dtype,
        )

    def forward_both(self, images):
        """Run the root once and both branches on the captured shared map."""
        shared = self.root(images)
        logit, fatigue_features = self.fatigue_branch(shared)
        embedding, face_features = self.face_branch(shared)
        return ForwardOutputs(logit, embedding, shared, fatigue_features, face_features)

    def forward_task(self, images, task):
        """Run the root plus a single branch; used by the alternating trainer."""
        if task not in ("fatigue", "face"):
            raise ValueError(f"unknown task {task!r}; expected 'fatigue' or 'face'")
        shared = self.root(images)
        branch = self.fatigue_branch if task == "fatigue" else self.face_branch
        out, _ = branch(shared)
        return out

    def forward(self, images):
        return self.forward_both(images)

    def parameter_groups(self):
        """{'root'|'fatigue'|'face': [(name, param), ...]} — disjoint, exhaustive."""
        groups = {g: [] for g in GROUPS}
        prefix_map = {"root": "root", "fatigue_branch": "fatigue", "face_branch": "face"}
        for name, param in self.named_parameters():
            top = name.split(".", 1)[0]
            groups[prefix_map[top]].append((name, param))
        return groups


# ---------------------------------------------------------------------------
# Parameter / FLOP accounting.
#
# Conventions (stated in every report): one multiply-accumulate costs two
# FLOPs; bias adds, activations, attention multiplies, residual adds and
# pooling cost one FLOP per element touched; L2 normalization of a D-vector
# costs 3*D. Counts are per sample (batch size 1).
# ---------------------------------------------------------------------------

COST_CONVENTION = (
    "1 MAC = 2 FLOPs; bias/activation/elementwise ops = 1 FLOP per element; "
    "pooling = 1 FLOP per input element; L2 norm of a D-vector = 3*D; per-sample"
)


@dataclass
class CostReport:
    """Exact parameter counts and forward-pass FLOPs, per parameter group."""

    params: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    input_size: tuple = ()
    convention: str = COST_CONVENTION

    @property
    def total_params(self):
        return sum(self.params.values())

    @property
    def total_flops(self):
        return sum(self.flops.values())

    @property
    def params_m(self):
        return self.total_params / 1e6

    @property
    def gflops(self):
        return self.total_flops / 1e9

    def to_dict(self):
        return {
            "params": dict(self.params),
            "flops": dict(self.flops),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "params_m": self.params_m,
            "gflops": self.gflops,
            "input_size": list(self.input_size),
            "convention": self.convention,
        }


def _conv_cost(h_out, w_out, c_in, c_out, kernel, bias):
    params = kernel * kernel * c_in * c_out + (c_out if bias else 0)
    flops = 2 * h_out * w_out * c_out * kernel * kernel * c_in
    if bias:
        flops += h_out * w_out * c_out
    return params, flops


def _fc_cost(d_in, d_out, bias):
    params = d_in * d_out + (d_out if bias else 0)
    flops = 2 * d_in * d_out + (d_out if bias else 0)
    return params, flops


def count_backbone_cost(spec):
    """(params, flops, output_shape) for one backbone forward pass."""
    spec.validate()
    h, w, c = spec.input_size
    params = 0
    flops = 0
    for s in spec.stages:
        pad = s.kernel // 2
        h = (h + 2 * pad - s.kernel) // s.stride + 1
        w = (w + 2 * pad - s.kernel) // s.stride + 1
        p, f = _conv_cost(h, w, c, s.channels, s.kernel, spec.bias)
        params += p
        flops += f
        c = s.channels
        if s.activation == "relu":
            flops += h * w * c
        if s.pool in ("max2", "avg2"):
            flops += h * w * c  # 1 FLOP per pooled input element
            h, w = h // 2, w // 2
    return params, flops, (h, w, c)


def _lase_cost(h, w, c, cfg):
    params = 0
    flops = 0
    n_branches = 0
    if cfg.use_lanet:
        reduced = 1 if c == 1 else c // cfg.lanet_reduction
        p1, f1 = _conv_cost(h, w, c, reduced, 1, cfg.bias)
        p2, f2 = _conv_cost(h, w, reduced, 1, 1, cfg.bias)
        params += p1 + p2
        flops += f1 + h * w * reduced  # relu
        flops += f2 + h * w  # sigmoid
        flops += h * w * c  # attention multiply
        n_branches += 1
    if cfg.use_senet:
        reduced = 1 if c == 1 else c // cfg.senet_reduction
        flops += h * w * c + c  # global average pool: sums + divides
        p1, f1 = _fc_cost(c, reduced, cfg.bias)
        p2, f2 = _fc_cost(reduced, c, cfg.bias)
        params += p1 + p2
        flops += f1 + reduced  # relu
        flops += f2 + c  # sigmoid
        flops += h * w * c  # attention multiply
        n_branches += 1
    flops += n_branches * h * w * c  # residual sums
    return params, flops


def _branch_cost(feature_shape, cfg, out_dim, normalize):
    h, w, c = feature_shape
    params, flops = _lase_cost(h, w, c, cfg)
    p, f = _fc_cost(h * w * c, out_dim, cfg.bias)
    params += p
    flops += f
    if normalize:
        flops += 3 * out_dim
    return params, flops


def count_cost(model):
    """Exact per-group parameter and FLOP counts for one forward pass.

    Walks the architecture specs rather than profiling, so results are
    hand-checkable; parameter totals are cross-checked against the live
    module in the test suite.
    """
    spec = model.backbone_spec
    cfg = model.branch_config
    root_params, root_flops, feature_shape = count_backbone_cost(spec)
    fat_params, fat_flops = _branch_cost(feature_shape, cfg, 1, normalize=False)
    face_params, face_flops = _branch_cost(
        feature_shape, cfg, cfg.embedding_dim, normalize=True
    )
    return CostReport(
        params={"root": root_params, "fatigue": fat_params, "face": face_params},
        flops={"root": root_flops, "fatigue": fat_flops, "face": face_flops},
        input_size=tuple(spec.input_size),
    )


def count_split_cost(model):
    """Cost of the parallel-style split: two single-task models, no sharing.

    Each split model owns its own copy of the backbone plus one branch, so
    the root is paid twice; used to quantify the tree model's economy.
    """
    tree = count_cost(model)
    return CostReport(
        params={
            "fatigue_model": tree.params["root"] + tree.params["fatigue"],
            "face_model": tree.params["root"] + tree.params["face"],
        },
        flops={
            "fatigue_model": tree.flops["root"] + tree.flops["fatigue"],
            "face_model": tree.flops["root"] + tree.flops["face"],
        },
        input_size=tree.input_size,
    )
