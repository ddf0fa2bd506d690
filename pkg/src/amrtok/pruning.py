"""Physics-based pruning criteria for the quadtree tokenizer.

Four per-region quantities decide whether a region is interesting enough
to subdivide: velocity-gradient magnitude G, vorticity omega, momentum
magnitude M and shear strength S. Each is compared against a global
characteristic value scaled by a threshold factor; a percentile rule on
G catches the most active regions of a level even when every threshold
clause is quiet.

All quantities are built from the same central-difference derivative
fields, so region evaluation is a block mean over precomputed grids.
Note S collapses to |omega| pointwise under the implemented formulas;
a regression test guards that equivalence so any future change to one
formula is a deliberate change to both.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .grid import central_gradient, grid_mean, mean_pyramid

# uniform sampling ranges for the threshold factors
T_GRAD_RANGE = (0.1, 2.0)
T_MOM_RANGE = (0.5, 10.0)
T_VORT_RANGE = (0.2, 4.0)
T_SHEAR_RANGE = (0.2, 4.0)

DEFAULT_R_GRAD = 0.25


@dataclass(frozen=True)
class CellProps:
    G: float
    omega: float
    M: float
    S: float

    def __post_init__(self):
        vals = (self.G, self.omega, self.M, self.S)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"non-finite cell properties {vals}")
        if self.G < 0 or self.M < 0 or self.S < 0:
            raise ConfigError(f"G, M, S must be >= 0, got {vals}")


@dataclass(frozen=True)
class GlobalRef:
    P_G: float
    P_omega: float
    P_M: float
    P_S: float

    def __post_init__(self):
        vals = (self.P_G, self.P_omega, self.P_M, self.P_S)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ConfigError(f"global references must be finite and >= 0, got {vals}")


@dataclass(frozen=True)
class Thresholds:
    t_G: float
    t_omega: float
    t_M: float
    t_S: float
    r_G: float = DEFAULT_R_GRAD

    def __post_init__(self):
        for name in ("t_G", "t_omega", "t_M", "t_S"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        # r_G = 0 disables the percentile clause entirely
        if not 0.0 <= self.r_G <= 1.0:
            raise ConfigError(f"r_G must be in [0, 1], got {self.r_G}")

    def to_json_dict(self):
        return {"t_grad": self.t_G, "t_vort": self.t_omega, "t_mom": self.t_M,
                "t_kh": self.t_S, "r_grad": self.r_G}

    @classmethod
    def from_json_dict(cls, d):
        try:
            return cls(t_G=d["t_grad"], t_omega=d["t_vort"], t_M=d["t_mom"],
                       t_S=d["t_kh"], r_G=d.get("r_grad", DEFAULT_R_GRAD))
        except KeyError as k:
            raise ConfigError(f"thresholds block missing key {k}") from None


def default_thresholds(r_G=DEFAULT_R_GRAD):
    """Midpoint of each sampling range; the documented evaluation setting."""
    mid = lambda r: 0.5 * (r[0] + r[1])
    return Thresholds(t_G=mid(T_GRAD_RANGE), t_omega=mid(T_VORT_RANGE),
                      t_M=mid(T_MOM_RANGE), t_S=mid(T_SHEAR_RANGE), r_G=r_G)


def sample_thresholds(rng, r_G=DEFAULT_R_GRAD):
    """Draw each factor uniformly from its range; r_G stays at the given value."""
    return Thresholds(
        t_G=float(rng.uniform(*T_GRAD_RANGE)),
        t_omega=float(rng.uniform(*T_VORT_RANGE)),
        t_M=float(rng.uniform(*T_MOM_RANGE)),
        t_S=float(rng.uniform(*T_SHEAR_RANGE)),
        r_G=r_G,
    )


def derivative_fields(field):
    """(ux, uy, vx, vy) central-difference grids for the velocity channels."""
    ux, uy = central_gradient(field, "u")
    vx, vy = central_gradient(field, "v")
    return ux, uy, vx, vy


def _pointwise(field):
    """Per-pixel criterion fields (G, omega, M, S) before any region averaging."""
    ux, uy, vx, vy = derivative_fields(field)
    G = np.sqrt(ux * ux + uy * uy + vx * vx + vy * vy)
    omega = vx - uy
    S = np.abs(uy - vx)
    return G, omega, S


def cell_props(field, region):
    """Criterion values for one region (any object with row0/col0/rows/cols)."""
    H, W = field.height, field.width
    r0, c0 = region.row0, region.col0
    r1, c1 = r0 + region.rows, c0 + region.cols
    if r0 < 0 or c0 < 0 or r1 > H or c1 > W or region.rows < 1 or region.cols < 1:
        raise ShapeError(f"region {r0}:{r1}, {c0}:{c1} outside {H}x{W} grid")
    G, omega, S = _pointwise(field)
    sl = (slice(r0, r1), slice(c0, c1))
    u_mean = float(field.channel("u")[sl].mean())
    v_mean = float(field.channel("v")[sl].mean())
    return CellProps(
        G=float(G[sl].mean()),
        omega=float(omega[sl].mean()),
        M=math.sqrt(u_mean * u_mean + v_mean * v_mean),
        S=float(S[sl].mean()),
    )


def global_ref(field, k=2):
    """Grid-wide mean of each per-pixel criterion; omega reduced as mean |omega|."""
    G, omega, S = _pointwise(field)
    u = field.channel("u")
    v = field.channel("v")
    return GlobalRef(
        P_G=grid_mean(G, k),
        P_omega=grid_mean(np.abs(omega), k),
        P_M=grid_mean(np.sqrt(u * u + v * v), k),
        P_S=grid_mean(S, k),
    )


class CriterionGrids:
    """Region criteria at every quadtree level of one square field.

    All four quantities reduce through grid.mean_pyramid; M applies its
    square root to the per-level mean velocity, the others average their
    pointwise fields directly.
    """

    def __init__(self, field, k=2):
        G, omega, S = _pointwise(field)
        self._G = mean_pyramid(G, k)
        self._omega = mean_pyramid(omega, k)
        self._S = mean_pyramid(S, k)
        self._u = mean_pyramid(field.channel("u"), k)
        self._v = mean_pyramid(field.channel("v"), k)

    def at(self, n):
        """(G, omega, M, S) arrays for the n x n partition."""
        if n not in self._G:
            raise ShapeError(f"no {n}x{n} level in the pyramid")
        u, v = self._u[n], self._v[n]
        return self._G[n], self._omega[n], np.sqrt(u * u + v * v), self._S[n]


def props_grids(field, n, k=2):
    """Region criteria for the n x n partition; vectorized cell_props."""
    return CriterionGrids(field, k).at(n)


def percentile_cutoff(level_G_values, r_G):
    """Nearest-rank top-r_G cutoff of a level's G population.

    Values >= the cutoff pass, so ties at the cutoff all pass. r_G = 0
    disables the clause (cutoff inf); r_G = 1 admits the whole level.
    """
    values = np.asarray(level_G_values, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("percentile cutoff needs at least one candidate G value")
    if r_G == 0.0:
        return math.inf
    rank = math.ceil(r_G * values.size)  # 1-based into the descending sort
    return float(np.sort(values)[::-1][rank - 1])


def clause_masks(G, omega, M, S, ref, thr):
    """The four threshold clauses, elementwise. Vorticity compares by |omega|."""
    return {
        "grad": np.asarray(G) > ref.P_G * thr.t_G,
        "vort": np.abs(omega) > ref.P_omega * thr.t_omega,
        "mom": np.asarray(M) > ref.P_M * thr.t_M,
        "shear": np.asarray(S) > ref.P_S * thr.t_S,
    }


def should_subdivide(props, ref, thr, level_G_values):
    """True iff any threshold clause fires or G makes the level's top-r_G cut."""
    masks = clause_masks(props.G, props.omega, props.M, props.S, ref, thr)
    if any(bool(m) for m in masks.values()):
        return True
    return bool(props.G >= percentile_cutoff(level_G_values, thr.r_G))
