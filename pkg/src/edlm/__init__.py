"""Encoder-decoder language model toolkit on a small numpy autodiff core.

Merged self/cross attention, tied embeddings, UL2 preprocessing,
decoder-only to encoder-decoder adaptation and toy-scale training.
"""
from .attention import GLOBAL, AttentionWeights, LayerKind, RopeConfig, build_encoder_mask, \
    build_merged_mask, merged_attention, rope_apply
from .checkpoint import Checkpoint, adapt_from_decoder_only, average_checkpoints, load, save
from .config import PRESETS, ModelConfig, preset
from .errors import ChecksumError, ConfigError, DataError, EdlmError, FormatError, NumericError, \
    ShapeError, VersionError
from .gradcheck import finite_diff_check
from .model import Model, build_model, count_params, decode, encode, greedy_decode
from .tensor import GradTape, Tensor, tensor
from .training import TrainOptions, clip_global_norm, eval_denoising, eval_needle, lr_at, train
from .ul2 import STANDARD_BANK, DenoiserSpec, ExamplePair, corrupt_spans, read_shard, uncorrupt, \
    write_shard
from .vision import Image

__version__ = "0.1.0"
