"""Retention world models with parallel observation prediction.

Numpy reference implementation: retention kernels, a retention layer stack,
block-parallel next-observation prediction, a token world model with
imagination rollouts, a fixed-codebook tokenizer, actor-critic arithmetic
and an episode store.
"""

from .controller import (
    PolicyStep,
    lambda_returns,
    policy_loss,
    policy_loss_from_logits,
    sample_action,
    value_loss,
)
from .pop import PopChunkOutput, oracle_blockwise_forward, pop_chunkwise_forward
from .replay import EpisodeRecord, FormatError, NoEligibleSegment, TrajectoryStore
from .retention import (
    apply_position_rotation,
    decay_matrix,
    retention_chunkwise,
    retention_parallel,
    retention_recurrent,
    retention_recurrent_step,
)
from .retnet import ModelConfig, StackParams, init_stack, stack_forward
from .serialization import ModelFormatError, load_bundle, load_stack, save_bundle, save_stack
from .tokenizer import Codebook, decode_tokens, encode_observation, quantize, tokenizer_loss_value
from .world_model import (
    Block,
    ImaginationTrace,
    TokenHistogramPolicy,
    TokenTrajectory,
    UniformPolicy,
    VocabularyError,
    WorldModelBundle,
    cross_entropy,
    expected_calls,
    imagine_rollout,
    imagine_step,
    init_bundle,
    summarize_context,
    train_forward,
    wm_loss,
)

__version__ = "0.1.0"
