import numpy as np
import pytest
import torch

from treemtl.data import SyntheticSpec
from treemtl.model import BackboneSpec, BranchConfig, ConvStage, TreeModel


@pytest.fixture(autouse=True)
def _default_double():
    # gradient math throughout the suite runs in double precision
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


@pytest.fixture
def tiny_backbone():
    return BackboneSpec(input_size=(8, 8, 1), stages=(ConvStage(3, 4, 2), ConvStage(3, 8, 2)))


@pytest.fixture
def tiny_model(tiny_backbone):
    cfg = BranchConfig(lanet_reduction=4, senet_reduction=4, embedding_dim=8)
    return TreeModel(tiny_backbone, cfg, seed=7, dtype=torch.float64)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        image_size=(8, 8, 1),
        fatigue_per_class=12,
        fatigue_test_per_class=6,
        identities=4,
        images_per_identity=10,
        test_per_identity=4,
        seed=13,
    )


@pytest.fixture
def tiny_batches(tiny_spec):
    from treemtl.data import Batch, generate_synthetic

    fatigue, face = generate_synthetic(tiny_spec)
    rng = np.random.default_rng(5)
    f_idx = rng.permutation(len(fatigue))[:6]
    c_idx = rng.permutation(len(face))[:6]
    return (
        Batch(fatigue.images[f_idx], fatigue.labels[f_idx]),
        Batch(face.images[c_idx], face.labels[c_idx]),
    )
