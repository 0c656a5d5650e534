"""Query-aware graph scoring model."""

from .checkpoint import (
    CheckpointIOError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from .model import (
    ENCODER_PREFIX,
    ModelConfig,
    ModelParams,
    encode,
    fuse_and_score,
    gat_layer_forward,
    init_params,
    query_guided_pool,
    score_batched,
    score_candidates,
)

__all__ = [
    "ENCODER_PREFIX",
    "CheckpointIOError",
    "ModelConfig",
    "ModelParams",
    "checkpoint_bytes",
    "encode",
    "fuse_and_score",
    "gat_layer_forward",
    "init_params",
    "load_checkpoint",
    "parse_checkpoint",
    "query_guided_pool",
    "save_checkpoint",
    "score_batched",
    "score_candidates",
]
