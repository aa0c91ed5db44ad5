"""modgate: modality-aware zero-shot structured pruning and sparse
grouped-query attention for multimodal time-series transformers."""

from .attention import AttentionConfig, AttentionWeights, attention_flops, dense_mha, sentry_attend
from .backbone import Backbone, BackboneConfig, ModelStructure
from .data import Dataset, SyntheticSpec, generate
from .estimator import GatedFusionClassifier
from .gating import GateTable, alignment_loss, binarization_loss
from .harness import SweepGrid, evaluate, sweep
from .pruning import PrunePlan, materialize, model_flops, model_memory, select_by_budget
from .training import RunReport, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionWeights",
    "attention_flops",
    "dense_mha",
    "sentry_attend",
    "Backbone",
    "BackboneConfig",
    "ModelStructure",
    "Dataset",
    "SyntheticSpec",
    "generate",
    "GatedFusionClassifier",
    "GateTable",
    "alignment_loss",
    "binarization_loss",
    "SweepGrid",
    "evaluate",
    "sweep",
    "PrunePlan",
    "materialize",
    "model_flops",
    "model_memory",
    "select_by_budget",
    "RunReport",
    "TrainConfig",
    "train",
]
