"""Quadtree AMR tokenization of flow fields.

The traversal is level-synchronous: depth 0 is the whole domain, each
subdivision splits a region into k x k children, and every candidate
region of a level is evaluated in one vectorized pass before any child
level starts. Depths below min_depth subdivide unconditionally without
storing; between min_depth and max_depth the pruning criteria decide;
at max_depth surviving regions are stored as leaves.

Two modes:
  complete  every evaluated candidate is stored, passing ones also
            subdivide; coarse and fine cells overlap, every pixel is
            covered, and sibling groups are always full.
  lossy     failing candidates vanish entirely; sibling groups may be
            partial and are padded with invalid zero cells.

Stored sibling groups become Tokens of K = k*k cells, sorted by
(parent_depth, parent_row0, parent_col0).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigError, CoverageError, ShapeError,
                     TokenFormatError, TruncatedContainerError,
                     VersionMismatchError)
from .grid import Field, mean_pyramid, sidecar_path
from .pruning import (CriterionGrids, Thresholds, clause_masks,
                      default_thresholds, global_ref, percentile_cutoff)

_MAGIC = b"ATOK"
_VERSION = 1
_MODE_CODES = {"complete": 0, "lossy": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

CLAUSE_NAMES = ("grad", "vort", "mom", "shear", "percentile")


@dataclass(frozen=True)
class Region:
    depth: int
    row0: int
    col0: int
    rows: int
    cols: int
    center: tuple

    @classmethod
    def at(cls, depth, i, j, H, W, k=2):
        """The (i, j)-th region of the depth-d level of an H x W grid."""
        n = k ** depth
        if H % n or W % n:
            raise ShapeError(f"depth {depth} does not partition {H}x{W} with k={k}")
        if not (0 <= i < n and 0 <= j < n):
            raise ShapeError(f"region index ({i}, {j}) outside depth-{depth} level")
        rows, cols = H // n, W // n
        return cls(depth=depth, row0=i * rows, col0=j * cols, rows=rows, cols=cols,
                   center=((j + 0.5) / n, (i + 0.5) / n))


@dataclass
class CellRecord:
    features: np.ndarray
    depth: int
    center: tuple

    def flat(self):
        """[features..., depth, x, y] as used by the solver embedding."""
        return np.concatenate([self.features,
                               [float(self.depth), self.center[0], self.center[1]]])


@dataclass
class Token:
    cells: list
    valid_mask: np.ndarray
    parent_depth: int
    parent_row0: int
    parent_col0: int


@dataclass(frozen=True)
class TokenizerConfig:
    k: int = 2
    min_depth: int = 1
    max_depth: int = 6
    mode: str = "complete"
    thresholds: Thresholds = dc_field(default_factory=default_thresholds)
    use_virtual_velocity: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not 1 <= self.min_depth <= self.max_depth:
            raise ConfigError(
                f"need 1 <= min_depth <= max_depth, got {self.min_depth}, {self.max_depth}")
        if self.mode not in _MODE_CODES:
            raise ConfigError(f"mode must be complete or lossy, got {self.mode!r}")

    def to_json_dict(self):
        return {"k": self.k, "s": self.min_depth, "e": self.max_depth,
                "mode": self.mode, "thresholds": self.thresholds.to_json_dict(),
                "use_virtual_velocity": self.use_virtual_velocity}

    @classmethod
    def from_json_dict(cls, d):
        known = {"k", "s", "e", "mode", "thresholds", "use_virtual_velocity"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown tokenizer config keys {sorted(unknown)}")
        kw = {}
        if "k" in d:
            kw["k"] = d["k"]
        if "s" in d:
            kw["min_depth"] = d["s"]
        if "e" in d:
            kw["max_depth"] = d["e"]
        if "mode" in d:
            kw["mode"] = d["mode"]
        if "thresholds" in d:
            kw["thresholds"] = Thresholds.from_json_dict(d["thresholds"])
        if "use_virtual_velocity" in d:
            kw["use_virtual_velocity"] = bool(d["use_virtual_velocity"])
        return cls(**kw)


@dataclass
class TokenSet:
    tokens: list
    height: int
    width: int
    channels: tuple
    config: TokenizerConfig
    stats: dict = dc_field(default_factory=dict)

    def __len__(self):
        return len(self.tokens)

    @property
    def k(self):
        return self.config.k

    @property
    def K(self):
        return self.config.k ** 2

    @property
    def n_channels(self):
        return len(self.channels)

    def stored_cells(self):
        return int(sum(int(t.valid_mask.sum()) for t in self.tokens))

    def feature_matrix(self):
        """N x K x (c+3) array of [features, depth, x, y] per cell."""
        c = self.n_channels
        out = np.zeros((len(self.tokens), self.K, c + 3))
        for ti, tok in enumerate(self.tokens):
            for ci, cell in enumerate(tok.cells):
                out[ti, ci] = cell.flat()
        return out

    def parent_positions(self):
        """N x 3 array of (x, y, depth) of each token's parent region."""
        out = np.zeros((len(self.tokens), 3))
        for ti, tok in enumerate(self.tokens):
            n = self.k ** tok.parent_depth
            prows, pcols = self.height // n, self.width // n
            out[ti] = ((tok.parent_col0 + pcols / 2.0) / self.width,
                       (tok.parent_row0 + prows / 2.0) / self.height,
                       float(tok.parent_depth))
        return out


def _check_grid(field, cfg):
    H, W = field.height, field.width
    if H != W:
        raise ShapeError(f"tokenizer needs a square grid, got {H}x{W}")
    m = 0
    n = 1
    while n < H:
        n *= cfg.k
        m += 1
    if n != H:
        raise ShapeError(f"grid side {H} is not a power of k={cfg.k}")
    if cfg.k ** cfg.max_depth > H:
        raise ConfigError(
            f"max_depth {cfg.max_depth} exceeds grid: k^e = {cfg.k ** cfg.max_depth} > {H}")
    field.channel_index("u")
    field.channel_index("v")


def _expand(mask, k):
    return np.kron(mask, np.ones((k, k), dtype=bool))


def _store_masks(decision_fields, cfg):
    """Per-depth boolean grids of stored cells, plus clause trigger counts.

    decision_fields is one field (plain tokenize) or [current, virtual]
    (pair mode): subdivision fires if it fires on any of them, each with
    its own global reference and its own level-G percentile population.
    """
    k, s, e = cfg.k, cfg.min_depth, cfg.max_depth
    thr = cfg.thresholds
    refs = [global_ref(f, k) for f in decision_fields]
    grids = [CriterionGrids(f, k) for f in decision_fields]
    active = np.ones((1, 1), dtype=bool)
    store = {}
    triggers = dict.fromkeys(CLAUSE_NAMES, 0)
    for d in range(e + 1):
        if not active.any():
            break
        if d < s:
            active = _expand(active, k)
            continue
        if d == e:
            store[d] = active
            break
        n = k ** d
        passed = np.zeros((n, n), dtype=bool)
        for cg, ref in zip(grids, refs):
            G, omega, M, S = cg.at(n)
            masks = clause_masks(G, omega, M, S, ref, thr)
            cut = percentile_cutoff(G[active], thr.r_G)
            masks["percentile"] = G >= cut if np.isfinite(cut) else np.zeros_like(passed)
            any_clause = np.zeros((n, n), dtype=bool)
            for name in CLAUSE_NAMES:
                fired = masks[name] & active
                triggers[name] += int(fired.sum())
                any_clause |= fired
            passed |= any_clause
        store[d] = active if cfg.mode == "complete" else passed
        active = _expand(passed, k)
    return store, triggers


def aggregate_cell(field, region):
    """Per-channel mean over the region plus its positional information."""
    r0, c0 = region.row0, region.col0
    sl = (slice(r0, r0 + region.rows), slice(c0, c0 + region.cols))
    feats = np.array([float(field.channel(ch)[sl].mean()) for ch in field.channels])
    return CellRecord(features=feats, depth=region.depth, center=region.center)


def _assemble(field, store, cfg, stats):
    k = cfg.k
    H, W = field.height, field.width
    c = len(field.channels)
    pyramids = [mean_pyramid(field.channel(ch), k) for ch in field.channels]
    tokens = []
    for d in sorted(store):
        mask = store[d]
        if not mask.any():
            continue
        n = k ** d
        feat = np.stack([p[n] for p in pyramids], axis=-1)
        pn = n // k
        groups = mask.reshape(pn, k, pn, k)
        group_any = groups.any(axis=(1, 3))
        if cfg.mode == "complete" and not (group_any == groups.all(axis=(1, 3))).all():
            raise TokenFormatError(
                f"depth {d}: complete mode produced a partial sibling group")
        prows, pcols = H // pn, W // pn
        for pi, pj in np.argwhere(group_any):
            cells = []
            valid = np.zeros(k * k, dtype=bool)
            for si in range(k):
                for sj in range(k):
                    i, j = pi * k + si, pj * k + sj
                    idx = si * k + sj
                    if mask[i, j]:
                        valid[idx] = True
                        cells.append(CellRecord(
                            features=feat[i, j].copy(), depth=d,
                            center=((j + 0.5) / n, (i + 0.5) / n)))
                    else:
                        cells.append(CellRecord(
                            features=np.zeros(c), depth=d, center=(0.0, 0.0)))
            tokens.append(Token(cells=cells, valid_mask=valid, parent_depth=d - 1,
                                parent_row0=int(pi) * prows, parent_col0=int(pj) * pcols))
    tokens.sort(key=lambda t: (t.parent_depth, t.parent_row0, t.parent_col0))
    return TokenSet(tokens=tokens, height=H, width=W, channels=field.channels,
                    config=cfg, stats=stats)


def tokenize(field, cfg):
    _check_grid(field, cfg)
    store, triggers = _store_masks([field], cfg)
    return _assemble(field, store, cfg, {"triggers": triggers})


def virtual_velocity(u_t, u_prev):
    """Linear extrapolation 2*u_t - u_prev on the velocity channels."""
    if (u_t.height, u_t.width) != (u_prev.height, u_prev.width):
        raise ShapeError(
            f"frame shapes differ: {u_t.height}x{u_t.width} vs {u_prev.height}x{u_prev.width}")
    if u_t.channels != u_prev.channels:
        raise ShapeError(f"channel sets differ: {u_t.channels} vs {u_prev.channels}")
    data = u_t.data.copy()
    for ch in ("u", "v"):
        ci = u_t.channel_index(ch)
        data[:, :, ci] = 2.0 * u_t.data[:, :, ci] - u_prev.data[:, :, ci]
    return u_t.with_data(data)


def tokenize_pair(u_prev, u_t, cfg):
    """Tokenize u_t with refinement decisions OR-ed with the virtual field.

    The extrapolated field votes on where flow features are heading so
    refinement exists ahead of moving structures; stored values always
    come from u_t.
    """
    _check_grid(u_t, cfg)
    virt = virtual_velocity(u_t, u_prev)
    store, triggers = _store_masks([u_t, virt], cfg)
    return _assemble(u_t, store, cfg, {"triggers": triggers})


def _cell_indices(record, k):
    """Recover (n, i, j) level indices of a cell from its depth and center."""
    n = k ** record.depth
    j = int(round(record.center[0] * n - 0.5))
    i = int(round(record.center[1] * n - 0.5))
    return n, i, j


def detokenize(tokens, H=None, W=None, fill=None):
    """Paint cells coarse-to-fine onto a regular grid; deepest value wins.

    In lossy mode some pixels may stay uncovered; that raises unless a
    fill value is given.
    """
    H = tokens.height if H is None else H
    W = tokens.width if W is None else W
    c = tokens.n_channels
    data = np.zeros((H, W, c))
    if fill is not None:
        data[:] = fill
    covered = np.zeros((H, W), dtype=bool)
    for tok in sorted(tokens.tokens, key=lambda t: t.parent_depth):
        for cell, ok in zip(tok.cells, tok.valid_mask):
            if not ok:
                continue
            n, i, j = _cell_indices(cell, tokens.k)
            if H % n or W % n:
                raise ShapeError(f"depth {cell.depth} cells do not tile {H}x{W}")
            rows, cols = H // n, W // n
            sl = (slice(i * rows, (i + 1) * rows), slice(j * cols, (j + 1) * cols))
            data[sl] = cell.features
            covered[sl] = True
    if fill is None and not covered.all():
        raise CoverageError(float(covered.mean()))
    return Field(height=H, width=W, channels=tokens.channels, data=data)


def features_on_tree(tokens, field):
    """Aggregate a field over an existing tree: N x K x c feature array.

    Used to build training labels that align one-to-one with the input
    tokens. Invalid (padded) cells stay zero.
    """
    if (field.height, field.width) != (tokens.height, tokens.width):
        raise ShapeError("field shape does not match the token tree")
    c = len(field.channels)
    pyramids = [mean_pyramid(field.channel(ch), tokens.k) for ch in field.channels]
    out = np.zeros((len(tokens.tokens), tokens.K, c))
    for ti, tok in enumerate(tokens.tokens):
        for ci, (cell, ok) in enumerate(zip(tok.cells, tok.valid_mask)):
            if not ok:
                continue
            n, i, j = _cell_indices(cell, tokens.k)
            for ch in range(c):
                out[ti, ci, ch] = pyramids[ch][n][i, j]
    return out


def with_features(tokens, feats):
    """Copy of a token set with cell features replaced from an N x K x c array.

    Geometry, validity and ordering are untouched; invalid padded cells
    keep zero features. Lets the solver's predictions ride the input tree
    back through detokenize.
    """
    feats = np.asarray(feats, dtype=np.float64)
    c = tokens.n_channels
    if feats.shape != (len(tokens.tokens), tokens.K, c):
        raise ShapeError(
            f"feature array {feats.shape}, expected {(len(tokens.tokens), tokens.K, c)}")
    new_tokens = []
    for ti, tok in enumerate(tokens.tokens):
        cells = []
        for ci, (cell, ok) in enumerate(zip(tok.cells, tok.valid_mask)):
            f = feats[ti, ci].copy() if ok else np.zeros(c)
            cells.append(CellRecord(features=f, depth=cell.depth, center=cell.center))
        new_tokens.append(Token(cells=cells, valid_mask=tok.valid_mask.copy(),
                                parent_depth=tok.parent_depth,
                                parent_row0=tok.parent_row0,
                                parent_col0=tok.parent_col0))
    return TokenSet(tokens=new_tokens, height=tokens.height, width=tokens.width,
                    channels=tokens.channels, config=tokens.config, stats={})


def write_tokens(tokens, path, extra_meta=None):
    """Binary token file plus a JSON sidecar carrying grid and config info."""
    path = Path(path)
    k = tokens.k
    K = tokens.K
    c = tokens.n_channels
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<IIIIB", _VERSION, len(tokens.tokens), K, c,
                       _MODE_CODES[tokens.config.mode])
    cell_fmt = "<B2f" + f"{c}f"
    for tok in tokens.tokens:
        buf += struct.pack("<BII", tok.parent_depth, tok.parent_row0, tok.parent_col0)
        for cell, ok in zip(tok.cells, tok.valid_mask):
            buf += struct.pack(cell_fmt, int(ok), cell.center[0], cell.center[1],
                               *np.asarray(cell.features, dtype=np.float32))
    path.write_bytes(bytes(buf))
    meta = {
        "height": tokens.height,
        "width": tokens.width,
        "channels": list(tokens.channels),
        "config": tokens.config.to_json_dict(),
        "stats": tokens.stats,
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_tokens(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise BadMagicError(f"{path}: not a token file (magic {raw[:4]!r})")
    if len(raw) < 21:
        raise TruncatedContainerError(f"{path}: header truncated")
    version, n_tokens, K, c, mode_code = struct.unpack_from("<IIIIB", raw, 4)
    if version != _VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {_VERSION}")
    if mode_code not in _MODE_NAMES:
        raise TokenFormatError(f"{path}: unknown mode byte {mode_code}")
    k = int(round(K ** 0.5))
    if k * k != K:
        raise TokenFormatError(f"{path}: K={K} is not a square")

    side = sidecar_path(path)
    if not side.exists():
        raise TokenFormatError(f"{path}: missing sidecar {side.name}")
    meta = json.loads(side.read_text())
    cfg = TokenizerConfig.from_json_dict(meta["config"])
    if cfg.k != k or _MODE_CODES[cfg.mode] != mode_code:
        raise TokenFormatError(f"{path}: sidecar config disagrees with header")

    cell_fmt = "<B2f" + f"{c}f"
    cell_size = struct.calcsize(cell_fmt)
    tok_size = struct.calcsize("<BII") + K * cell_size
    expected = 21 + n_tokens * tok_size
    if len(raw) != expected:
        raise TruncatedContainerError(
            f"{path}: {len(raw)} bytes, expected {expected} for {n_tokens} tokens")

    tokens = []
    off = 21
    for _ in range(n_tokens):
        pd, pr0, pc0 = struct.unpack_from("<BII", raw, off)
        off += 9
        cells = []
        valid = np.zeros(K, dtype=bool)
        for ci in range(K):
            vals = struct.unpack_from(cell_fmt, raw, off)
            off += cell_size
            valid[ci] = bool(vals[0])
            cells.append(CellRecord(features=np.array(vals[3:], dtype=np.float64),
                                    depth=pd + 1, center=(float(vals[1]), float(vals[2]))))
        tokens.append(Token(cells=cells, valid_mask=valid, parent_depth=pd,
                            parent_row0=pr0, parent_col0=pc0))
    return TokenSet(tokens=tokens, height=meta["height"], width=meta["width"],
                    channels=tuple(meta["channels"]), config=cfg,
                    stats=meta.get("stats", {}))
