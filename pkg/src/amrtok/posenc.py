"""Sinusoidal positional encoding over (x, y, depth) triples.

The embedding width splits into three parts, one per coordinate: x and y
get floor(d_model/3) rounded down to even, depth takes the remainder.
Within a part the slots interleave (sin, cos) pairs at geometrically
decreasing frequencies; an odd-width depth part ends on a lone sin slot.
Depth is encoded raw (0, 1, 2, ...), x and y as-is in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class PosEncodingConfig:
    d_model: int

    def __post_init__(self):
        if self.d_model < 6:
            raise ConfigError(f"d_model must be >= 6, got {self.d_model}")

    @property
    def split(self):
        d_xy = (self.d_model // 3) & ~1  # round down to even
        return d_xy, d_xy, self.d_model - 2 * d_xy


def _encode_part(coord, d_c):
    """One coordinate's slice: interleaved sin/cos at div_term frequencies."""
    n_freq = (d_c + 1) // 2
    j = np.arange(n_freq)
    div_term = np.exp(-math.log(10000.0) * (2.0 * j) / d_c)
    angles = coord[:, None] * div_term[None, :]
    out = np.zeros((coord.shape[0], d_c))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : d_c // 2])
    return out


def encode_positions(positions, cfg):
    """N x d_model encoding of (x, y, depth) rows, parts in [x, y, d] order."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    d_x, d_y, d_d = cfg.split
    parts = [
        _encode_part(pos[:, 0], d_x),
        _encode_part(pos[:, 1], d_y),
        _encode_part(pos[:, 2], d_d),
    ]
    return np.concatenate(parts, axis=1)
