"""Speculative cascades over small tabular language models, with exact oracles."""

from .deferral import DeferralRule, TargetSpec, TokenRule, target, tune_beta
from .distributions import apply_temperature, tv_distance
from .engine import DecodeConfig, DecodeTrace, Decoder, Rng, Strategy, decode, gen_spec_sample
from .harness import RunConfig, compare_frontiers, cost_model, load_config, run
from .models import SyntheticTask, TabularLM, build_partitioned_task, build_random_truth, derive_model
from .oracle import exact_autoregressive_law, exact_block_law, exact_decode_law

__version__ = "0.1.0"

__all__ = [
    "DecodeConfig",
    "DecodeTrace",
    "Decoder",
    "DeferralRule",
    "Rng",
    "RunConfig",
    "Strategy",
    "SyntheticTask",
    "TabularLM",
    "TargetSpec",
    "TokenRule",
    "apply_temperature",
    "build_partitioned_task",
    "build_random_truth",
    "compare_frontiers",
    "cost_model",
    "decode",
    "derive_model",
    "exact_autoregressive_law",
    "exact_block_law",
    "exact_decode_law",
    "gen_spec_sample",
    "load_config",
    "run",
    "target",
    "tune_beta",
    "tv_distance",
]
