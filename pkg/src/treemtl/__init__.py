"""Tree-style two-task model: shared convolutional root, two attention
branches (fatigue detection and face identification), trained from
single-task datasets by alternating updates or gradient accumulation."""

__version__ = "0.1.0"

from .attention import LANet, LASEBlock, SENet, dup, global_avg_pool
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .data import (
    ArrayDataset,
    SyntheticSpec,
    batches,
    generate_synthetic,
    load_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ManifestError,
    TrainingDivergedError,
    TreeMTLError,
    UndefinedMetricError,
)
from .evaluate import (
    ConfusionMatrix,
    Gallery,
    RocCurve,
    accuracy,
    confusion,
    evaluate_model,
    identify,
    roc_auc,
    verify_pairs,
)
from .losses import (
    LossValue,
    SubcenterClassifier,
    arcface_subcenter_loss,
    bce_loss,
    combined_loss,
)
from .model import (
    BackboneSpec,
    BranchConfig,
    ConvStage,
    CostReport,
    TreeModel,
    count_cost,
    count_split_cost,
    default_backbone_spec,
)
from .training import (
    Adam,
    TrainingConfig,
    TrainState,
    accumulate_gradients,
    alternating_step,
    grad_accum_step,
    lr_at,
    make_train_state,
    run_training,
    task_sub_step,
)

__all__ = [
    "__version__",
    "LANet",
    "SENet",
    "LASEBlock",
    "dup",
    "global_avg_pool",
    "TreeModel",
    "BackboneSpec",
    "BranchConfig",
    "ConvStage",
    "CostReport",
    "count_cost",
    "count_split_cost",
    "default_backbone_spec",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointBundle",
    "LossValue",
    "bce_loss",
    "arcface_subcenter_loss",
    "combined_loss",
    "SubcenterClassifier",
    "TrainingConfig",
    "TrainState",
    "Adam",
    "alternating_step",
    "grad_accum_step",
    "task_sub_step",
    "accumulate_gradients",
    "run_training",
    "lr_at",
    "make_train_state",
    "ArrayDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "load_manifest",
    "batches",
    "ConfusionMatrix",
    "RocCurve",
    "Gallery",
    "accuracy",
    "confusion",
    "roc_auc",
    "verify_pairs",
    "identify",
    "evaluate_model",
    "TreeMTLError",
    "ConfigError",
    "ManifestError",
    "CheckpointError",
    "UndefinedMetricError",
    "TrainingDivergedError",
]
