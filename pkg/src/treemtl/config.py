"""Run configuration: TOML document, strict schema, CLI overrides.

Unknown keys are rejected with their dotted field path; every section has
defaults, so a minimal config is just a seed and an output directory. The
``TREEMTL_OUT`` environment variable overrides the output directory.
"""

import copy
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import SyntheticSpec, generate_synthetic, load_manifest
from .errors import ConfigError
from .losses import SubcenterClassifier
from .model import (
    BackboneSpec,
    BranchConfig,
    ConvStage,
    TreeModel,
    architecture_fingerprint,
    default_backbone_spec,
)
from .training import TrainingConfig


def _expect_int(value, path):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected integer, got {type(value).__name__}", field=path)
    return value


def _expect_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected number, got {type(value).__name__}", field=path)
    return float(value)


def _expect_bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(f"expected boolean, got {type(value).__name__}", field=path)
    return value


def _expect_str(value, path):
    if not isinstance(value, str):
        raise ConfigError(f"expected string, got {type(value).__name__}", field=path)
    return value


def _expect_size3(value, path):
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 3
        or any(isinstance(v, bool) or not isinstance(v, int) for v in value)
    ):
        raise ConfigError("expected a list of three integers", field=path)
    return list(value)


def _expect_sigma(value, path):
    if value is None:
        return None
    return _expect_float(value, path)


_STAGE_SPEC = {
    "kernel": (3, _expect_int),
    "channels": (16, _expect_int),
    "stride": (1, _expect_int),
    "activation": ("relu", _expect_str),
    "pool": ("none", _expect_str),
}


def _expect_stages(value, path):
    if value is None:
        return None
    if not isinstance(value, list):
        raise ConfigError("expected an array of stage tables", field=path)
    return [_merge(_STAGE_SPEC, stage, f"{path}[{i}]") for i, stage in enumerate(value)]


# Leaves are (default, checker); nested dicts are sections.
_SPEC = {
    "seed": (0, _expect_int),
    "output_dir": ("runs/default", _expect_str),
    "model": {
        "input_size": ([112, 112, 1], _expect_size3),
        "bias": (True, _expect_bool),
        "stages": (None, _expect_stages),
        "branch": {
            "lanet_reduction": (16, _expect_int),
            "senet_reduction": (16, _expect_int),
            "use_lanet": (True, _expect_bool),
            "use_senet": (True, _expect_bool),
            "embedding_dim": (512, _expect_int),
            "bias": (True, _expect_bool),
        },
        "loss": {
            "margin": (0.5, _expect_float),
            "scale": (20.0, _expect_float),
            "subcenters": (3, _expect_int),
        },
    },
    "training": {
        "regime": ("alternating", _expect_str),
        "loss_weight": (0.5, _expect_float),
        "learning_rate": (1e-2, _expect_float),
        "beta1": (0.9, _expect_float),
        "beta2": (0.999, _expect_float),
        "eps": (1e-8, _expect_float),
        "epochs": (20, _expect_int),
        "batch_size": (32, _expect_int),
        "dtype": ("float32", _expect_str),
        "face_first": (False, _expect_bool),
    },
    "data": {
        "source": ("synthetic", _expect_str),
        "synthetic": {
            "image_size": ([112, 112, 1], _expect_size3),
            "fatigue_classes": (2, _expect_int),
            "fatigue_per_class": (500, _expect_int),
            "fatigue_test_per_class": (100, _expect_int),
            "identities": (10, _expect_int),
            "images_per_identity": (100, _expect_int),
            "test_per_identity": (20, _expect_int),
            "noise_sigma": (None, _expect_sigma),
        },
        "manifest": {
            "train": ("", _expect_str),
            "test": ("", _expect_str),
            "channels": (1, _expect_int),
            "mean": (0.5, _expect_float),
            "std": (0.25, _expect_float),
        },
    },
    "eval": {
        "pairs": (200, _expect_int),
        "pair_seed": (0, _expect_int),
        "identify_threshold": (0.5, _expect_float),
    },
}


def _defaults(spec):
    out = {}
    for key, entry in spec.items():
        if isinstance(entry, dict):
            out[key] = _defaults(entry)
        else:
            out[key] = copy.deepcopy(entry[0])
    return out


def _merge(spec, user, path=""):
    out = _defaults(spec)
    for key, value in user.items():
        field = f"{path}.{key}" if path else key
        if key not in spec:
            raise ConfigError("unknown key", field=field)
        entry = spec[key]
        if isinstance(entry, dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a table", field=field)
            out[key] = _merge(entry, value, field)
        else:
            out[key] = entry[1](value, field)
    return out


def parse_override(text):
    """Parse a ``section.key=value`` CLI override; value uses TOML syntax."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()  # bare string
    return key.strip(), value


def _apply_override(doc, key, value):
    parts = key.split(".")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override below a non-table value", field=key)
    node[parts[-1]] = value


@dataclass
class RunConfig:
    """Validated run document plus builders binding the other modules."""

    raw: dict
    base_dir: Path

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    def backbone_spec(self):
        m = self.raw["model"]
        if m["stages"] is None:
            return default_backbone_spec(tuple(m["input_size"]))
        spec = BackboneSpec(
            input_size=tuple(m["input_size"]),
            stages=tuple(ConvStage(**stage) for stage in m["stages"]),
            bias=m["bias"],
        )
        spec.validate()
        return spec

    def branch_config(self):
        return BranchConfig(**self.raw["model"]["branch"])

    def model_config(self):
        return {
            "backbone": self.backbone_spec().to_dict(),
            "branch": self.branch_config().to_dict(),
        }

    def fingerprint(self):
        return architecture_fingerprint(self.model_config())

    def training_config(self):
        cfg = TrainingConfig(seed=self.seed, **self.raw["training"])
        cfg.validate()
        return cfg

    def build_model(self, dtype=None):
        dtype = dtype if dtype is not None else self.training_config().torch_dtype
        return TreeModel(
            backbone_spec=self.backbone_spec(),
            branch_config=self.branch_config(),
            seed=self.seed,
            dtype=dtype,
        )

    def build_classifier(self, num_classes, dtype=None):
        dtype = dtype if dtype is not None else self.training_config().torch_dtype
        loss = self.raw["model"]["loss"]
        return SubcenterClassifier(
            num_classes=num_classes,
            subcenters=loss["subcenters"],
            margin=loss["margin"],
            scale=loss["scale"],
            embedding_dim=self.raw["model"]["branch"]["embedding_dim"],
            seed=self.seed + 1,
            dtype=dtype,
        )

    def synthetic_spec(self):
        d = dict(self.raw["data"]["synthetic"])
        d["image_size"] = tuple(d["image_size"])
        spec = SyntheticSpec(seed=self.seed, **d)
        spec.validate()
        return spec

    def load_datasets(self, split="train"):
        """(fatigue, face) datasets for a split, from the configured source."""
        data = self.raw["data"]
        if data["source"] == "synthetic":
            spec = self.synthetic_spec()
            if tuple(spec.image_size) != tuple(self.raw["model"]["input_size"]):
                raise ConfigError(
                    "data.synthetic.image_size must match model.input_size",
                    field="data.synthetic.image_size",
                )
            return generate_synthetic(spec, split=split)
        if data["source"] == "manifest":
            m = data["manifest"]
            key = "train" if split == "train" else "test"
            if not m[key]:
                raise ConfigError("manifest path not set", field=f"data.manifest.{key}")
            h, w, c = self.raw["model"]["input_size"]
            if m["channels"] != c:
                raise ConfigError(
                    "data.manifest.channels must match model.input_size channels",
                    field="data.manifest.channels",
                )
            manifest = load_manifest(
                self.base_dir / m[key],
                image_size=(h, w),
                channels=m["channels"],
                mean=m["mean"],
                std=m["std"],
            )
            return manifest.subset("fatigue"), manifest.subset("face")
        raise ConfigError(
            f"source must be 'synthetic' or 'manifest', got {data['source']!r}",
            field="data.source",
        )


def load_run_config(path=None, overrides=(), document=None):
    """Load, override, and validate a run config.

    Args:
        path: TOML file; optional when ``document`` (a dict) is given.
        overrides: iterable of ``section.key=value`` strings.
    """
    if document is None:
        if path is None:
            raise ConfigError("a config path is required")
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                document = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
        base_dir = p.parent
    else:
        document = copy.deepcopy(document)
        base_dir = Path(path).parent if path else Path.cwd()

    for override in overrides:
        key, value = parse_override(override)
        _apply_override(document, key, value)

    raw = _merge(_SPEC, document)
    env_out = os.environ.get("TREEMTL_OUT")
    if env_out:
        raw["output_dir"] = env_out
    cfg = RunConfig(raw=raw, base_dir=base_dir)
    cfg.training_config()  # validate eagerly so errors carry field context
    cfg.backbone_spec()
    return cfg
