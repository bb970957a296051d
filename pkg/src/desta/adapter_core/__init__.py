"""Toy modality adapter: numeric core, training loop, fixtures, IO."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fixtures import PlantedFixture, load_fixture, make_planted_fixture, save_fixture
from .functional import (
    FusionBatch,
    NonFinite,
    VocabOverflow,
    WidthMismatch,
    adapter_gradients,
    aggregate_layers,
    assemble_audio_repr,
    decoder_loss,
    forward_loss,
    layer_weights,
    qformer_forward,
)
from .params import (
    AdapterDims,
    AdapterParams,
    AggregationParams,
    QFormerBlockParams,
    QFormerParams,
    ShapeMismatch,
    ToyDecoder,
    init_adapter,
    make_decoder,
    zeros_like_params,
)
from .training import (
    GradCheckReport,
    TrainConfig,
    TrainResult,
    cosine_warmup_lr,
    grad_check,
    train_adapter,
)

__all__ = [
    "AdapterDims",
    "AdapterParams",
    "AggregationParams",
    "QFormerBlockParams",
    "QFormerParams",
    "ToyDecoder",
    "FusionBatch",
    "PlantedFixture",
    "ShapeMismatch",
    "WidthMismatch",
    "VocabOverflow",
    "NonFinite",
    "CheckpointError",
    "qformer_forward",
    "aggregate_layers",
    "assemble_audio_repr",
    "decoder_loss",
    "adapter_gradients",
    "forward_loss",
    "layer_weights",
    "init_adapter",
    "make_decoder",
    "zeros_like_params",
    "train_adapter",
    "TrainConfig",
    "TrainResult",
    "GradCheckReport",
    "grad_check",
    "cosine_warmup_lr",
    "make_planted_fixture",
    "save_fixture",
    "load_fixture",
    "save_checkpoint",
    "load_checkpoint",
]
