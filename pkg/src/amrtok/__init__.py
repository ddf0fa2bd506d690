"""Shockwave dataset generation, constraint-aware AMR tokenization and an
encoder-only attention solver over the resulting token sets."""
from .errors import (AmrtokError, BadMagicError, ConfigError,
                     ContainerFormatError, CoverageError, PositivityError,
                     ShapeError, TokenFormatError, TruncatedContainerError,
                     UnknownChannelError, VersionMismatchError)
from .grid import (Field, FrameSequence, central_gradient, downsample_mean,
                   grid_mean, mean_pyramid, read_container, write_container)
from .kernels import BACKEND
from .metrics import CostReport, attention_flops, token_stats
from .posenc import PosEncodingConfig, encode_positions
from .pruning import (GlobalRef, Thresholds, cell_props, clause_masks,
                      default_thresholds, global_ref, percentile_cutoff,
                      sample_thresholds, should_subdivide)
from .riemann import RiemannConfig, initial_state, simulate, simulate_case
from .solver import (SolverConfig, SolverParams, attention, evaluate, forward,
                     load_params, lr_schedule, nmse, save_params, train)
from .tokenizer import (Token, TokenizerConfig, TokenSet, detokenize,
                        features_on_tree, read_tokens, tokenize, tokenize_pair,
                        virtual_velocity, write_tokens)

__version__ = "0.1.0"

__all__ = [
    "AmrtokError", "BadMagicError", "ConfigError", "ContainerFormatError",
    "CoverageError", "PositivityError", "ShapeError", "TokenFormatError",
    "TruncatedContainerError", "UnknownChannelError", "VersionMismatchError",
    "Field", "FrameSequence", "central_gradient", "downsample_mean",
    "grid_mean", "mean_pyramid", "read_container", "write_container",
    "BACKEND",
    "CostReport", "attention_flops", "token_stats",
    "PosEncodingConfig", "encode_positions",
    "GlobalRef", "Thresholds", "cell_props", "clause_masks",
    "default_thresholds", "global_ref", "percentile_cutoff",
    "sample_thresholds", "should_subdivide",
    "RiemannConfig", "initial_state", "simulate", "simulate_case",
    "SolverConfig", "SolverParams", "attention", "evaluate", "forward",
    "load_params", "lr_schedule", "nmse", "save_params", "train",
    "Token", "TokenizerConfig", "TokenSet", "detokenize", "features_on_tree",
    "read_tokens", "tokenize", "tokenize_pair", "virtual_velocity",
    "write_tokens",
    "__version__",
]
