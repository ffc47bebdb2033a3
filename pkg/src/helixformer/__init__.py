"""HelixFormer: bidirectional cross-attention for few-shot fine-grained recognition.

Everything runs on a small numpy autodiff engine (:mod:`helixformer.tensor`).
"""

from .data import DatasetSplit, Episode, SyntheticSpec, generate_synthetic, load_dataset, sample_episode
from .errors import (
    ConfigurationError,
    ConsistencyError,
    DataError,
    DimensionError,
    FormatError,
    HelixError,
    NumericError,
    PreconditionError,
    TrainingError,
)
from .helix import HelixLayer, HelixStack, VariantKind, helix_param_count
from .model import Conv4Backbone, RelationHead
from .tensor import Tensor, backward, no_grad
from .trainer import (
    Checkpoint,
    EvalReport,
    FewShotModel,
    TrainConfig,
    evaluate,
    load_checkpoint,
    meta_train,
    pretrain_backbone,
    run_ablation,
    save_checkpoint,
)

__version__ = "0.1.0"
