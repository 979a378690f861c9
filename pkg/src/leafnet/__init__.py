"""leafnet: a numpy-only deep-learning stack for apple-leaf disease classification.

Modules
-------
tensor      dense tensors and reverse-mode differentiation
functional  convolution, pooling, batch norm, softmax and cross-entropy kernels
nn          layers, residual blocks and ResNet builders
data        label parsing, stratified splits and batching
imaging     raster decoding, resizing and augmentation
train       SGD, one-cycle schedule, freezing and fine-tuning
metrics     confusion matrix, ROC and AUC
checkpoint  binary checkpoints and pretrained-weight import
"""

from .errors import (
    CheckpointCorruptError,
    CheckpointSchemaError,
    ContractError,
    DataError,
    ImageDecodeError,
    LabelFormatError,
    LabelIntegrityError,
    LeafnetError,
    NumericError,
    ShapeError,
    StateError,
    StratificationError,
    TrainingDivergenceError,
    WeightImportError,
)
from .tensor import Tensor, default_dtype, no_grad

__all__ = [
    "CheckpointCorruptError",
    "CheckpointSchemaError",
    "ContractError",
    "DataError",
    "ImageDecodeError",
    "LabelFormatError",
    "LabelIntegrityError",
    "LeafnetError",
    "NumericError",
    "ShapeError",
    "StateError",
    "StratificationError",
    "TrainingDivergenceError",
    "WeightImportError",
    "Tensor",
    "default_dtype",
    "no_grad",
]

__version__ = "0.1.0"
