"""Token statistics and analytic FLOPs accounting.

Counts are exact Python integers (one multiply-add = 2 FLOPs) and the
reduction ratio is an exact Fraction, so the quadratic-scaling and
reduction invariants hold with == rather than approximately. Softmax,
normalization and bias costs are excluded: they are O(N * d_model) noise
next to the counted matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError
from .solver import SolverConfig


@dataclass(frozen=True)
class CostReport:
    token_count: int
    stored_cells: int
    attention_flops: int
    projection_flops: int
    ffn_flops: int
    total_flops: int
    reduction_vs_regular: Fraction

    def __post_init__(self):
        parts = (self.token_count, self.stored_cells, self.attention_flops,
                 self.projection_flops, self.ffn_flops, self.total_flops)
        if any(p < 0 for p in parts) or self.reduction_vs_regular < 0:
            raise ConfigError("cost report fields must be nonnegative")
        if self.total_flops != self.attention_flops + self.projection_flops + self.ffn_flops:
            raise ConfigError("total_flops must equal the sum of its parts")


def attention_flops(N, cfg=None):
    """FLOPs of one forward pass over N tokens, split by term.

    Per layer: attention (QK^T and AV) 4*N^2*d_model, the four d_model^2
    projections 8*N*d_model^2, the FFN 4*N*d_model*d_ff; all times
    n_layers. Returns a dict of exact integers.
    """
    if N < 1:
        raise ConfigError(f"N must be >= 1, got {N}")
    cfg = SolverConfig() if cfg is None else cfg
    N = int(N)
    attn = 4 * N * N * cfg.d_model * cfg.n_layers
    proj = 8 * N * cfg.d_model ** 2 * cfg.n_layers
    ffn = 4 * N * cfg.d_model * cfg.d_ff * cfg.n_layers
    return {"attention_flops": attn, "projection_flops": proj,
            "ffn_flops": ffn, "total_flops": attn + proj + ffn}


def token_stats(tokens, regular_N, cfg=None):
    """CostReport of a token set against the regular patch-grid baseline."""
    if regular_N < 1:
        raise ConfigError(f"regular_N must be >= 1, got {regular_N}")
    N = len(tokens.tokens)
    fl = attention_flops(N, cfg)
    return CostReport(
        token_count=N,
        stored_cells=tokens.stored_cells(),
        reduction_vs_regular=Fraction(int(regular_N), N),
        **fl,
    )
