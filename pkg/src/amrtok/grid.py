"""Structured-grid containers, finite-difference operators and dataset I/O.

A Field is an H x W grid of named physical channels stored as float64
(H, W, C), row-major and channel-minor. Fields are treated as immutable by
every consumer so all operations here are pure functions.

The on-disk container format ``.nsgrid`` stores float32 little-endian data;
the roundtrip invariant read(write(x)) == x holds on the stored 32-bit
values. A JSON sidecar ``<stem>.meta.json`` carries case provenance.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ShapeError,
    TruncatedContainerError,
    UnknownChannelError,
    VersionMismatchError,
)

KNOWN_CHANNELS = ("u", "v", "p", "rho")

_MAGIC = b"AMRT"
_VERSION = 1


@dataclass(frozen=True)
class Field:
    """Dense structured grid of physical channels.

    data has shape (height, width, len(channels)) and dtype float64. Cell
    (i, j) is centered at ((j + 0.5) / W, (i + 0.5) / H) on the unit domain.
    """

    height: int
    width: int
    channels: tuple
    data: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        channels = tuple(self.channels)
        object.__setattr__(self, "channels", channels)
        if len(set(channels)) != len(channels) or any(not c for c in channels):
            raise ConfigError(f"channel names must be unique and nonempty: {channels}")
        for c in channels:
            if c not in KNOWN_CHANNELS:
                raise UnknownChannelError(c, KNOWN_CHANNELS)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        expected = self.height * self.width * len(channels)
        if data.size != expected:
            raise ShapeError(
                f"data has {data.size} values, expected H*W*C = "
                f"{self.height}*{self.width}*{len(channels)} = {expected}"
            )
        object.__setattr__(
            self, "data", data.reshape(self.height, self.width, len(channels))
        )

    @classmethod
    def from_channels(cls, **arrays):
        """Build a Field from 2D arrays keyed by channel name."""
        names = tuple(arrays)
        stacked = np.stack([np.asarray(arrays[n], dtype=np.float64) for n in names], axis=-1)
        h, w = stacked.shape[:2]
        return cls(h, w, names, stacked)

    def channel_index(self, name):
        try:
            return self.channels.index(name)
        except ValueError:
            raise UnknownChannelError(name, self.channels) from None

    def channel(self, name):
        """2D view of one channel."""
        return self.data[:, :, self.channel_index(name)]

    def with_data(self, data):
        return Field(self.height, self.width, self.channels, data)


@dataclass
class FrameSequence:
    """Time-ordered frames of identical shape, plus case provenance.

    dt is the simulation time between stored frames (0 only for the
    degenerate zero-horizon dataset).
    """

    frames: list
    dt: float
    case_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if not self.frames:
            raise ConfigError("FrameSequence needs at least one frame")
        first = self.frames[0]
        for f in self.frames[1:]:
            if (f.height, f.width, f.channels) != (first.height, first.width, first.channels):
                raise ShapeError("all frames must share shape and channels")
        if not np.isfinite(self.dt) or self.dt < 0:
            raise ConfigError(f"dt must be finite and >= 0, got {self.dt}")

    @property
    def shape(self):
        f = self.frames[0]
        return (f.height, f.width, len(f.channels))

    @property
    def channels(self):
        return self.frames[0].channels


def central_gradient(field, channel):
    """Second-order central differences of one channel.

    Grid spacing is h = 1/W horizontally and 1/H vertically (unit domain).
    Boundary rows/columns use first-order one-sided differences. Returns
    (ddx, ddy) as 2D float64 arrays of the input shape.
    """
    f = field.channel(channel)
    h, w = field.height, field.width
    if h < 2 or w < 2:
        raise ShapeError("central_gradient needs H, W >= 2")
    hx = 1.0 / w
    hy = 1.0 / h

    ddx = np.empty_like(f)
    ddx[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / (2.0 * hx)
    ddx[:, 0] = (f[:, 1] - f[:, 0]) / hx
    ddx[:, -1] = (f[:, -1] - f[:, -2]) / hx

    ddy = np.empty_like(f)
    ddy[1:-1, :] = (f[2:, :] - f[:-2, :]) / (2.0 * hy)
    ddy[0, :] = (f[1, :] - f[0, :]) / hy
    ddy[-1, :] = (f[-1, :] - f[-2, :]) / hy
    return ddx, ddy


def downsample_mean(field, factor):
    """Block-average a Field by an integer factor per axis."""
    if factor < 1:
        raise ConfigError(f"factor must be positive, got {factor}")
    if field.height % factor or field.width % factor:
        raise ShapeError(
            f"factor {factor} does not divide grid {field.height}x{field.width}"
        )
    if factor == 1:
        return field
    h2, w2 = field.height // factor, field.width // factor
    c = len(field.channels)
    blocks = field.data.reshape(h2, factor, w2, factor, c)
    return Field(h2, w2, field.channels, blocks.mean(axis=(1, 3)))


def mean_pyramid(arr, k=2):
    """Hierarchical k x k block means of a square grid, keyed by cells per side.

    Every mean in the tokenization pipeline reduces through this pyramid
    with a pinned association: the k*k children of a block accumulate in
    row-major order, one addition at a time, then a single division by
    k*k. Any independent implementation that follows the same order
    reproduces the values bit for bit, which the cross-implementation
    equivalence tests rely on.
    """
    a = np.ascontiguousarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"mean_pyramid needs a square 2D grid, got {a.shape}")
    levels = {a.shape[0]: a}
    n = a.shape[0]
    while n >= k and n % k == 0:
        m = n // k
        v = a.reshape(m, k, m, k)
        s = None
        for si in range(k):
            for sj in range(k):
                child = v[:, si, :, sj]
                s = child.copy() if s is None else s + child
        a = s / float(k * k)
        levels[m] = a
        n = m
    return levels


def grid_mean(arr, k=2):
    """Mean of a grid, via the pyramid reduction whenever it applies."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2 and a.shape[0] == a.shape[1]:
        levels = mean_pyramid(a, k)
        if 1 in levels:
            return float(levels[1][0, 0])
    return float(a.mean())


def sidecar_path(path):
    return Path(path).with_suffix(".meta.json")


def write_container(seq, path, meta=None):
    """Serialize a FrameSequence to ``.nsgrid`` plus a JSON meta sidecar."""
    path = Path(path)
    h, w, c = seq.shape
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IIIII", _VERSION, h, w, c, len(seq.frames))
    out += struct.pack("<d", seq.dt)
    for name in seq.channels:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
    for frame in seq.frames:
        out += frame.data.astype("<f4").tobytes()
    path.write_bytes(bytes(out))

    doc = {"case_id": seq.case_id, "seed": int(seq.seed)}
    if meta:
        doc.update(meta)
    sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_container(path):
    """Parse a ``.nsgrid`` container back into a FrameSequence (float64)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    off = 4
    try:
        version, h, w, c, n_frames = struct.unpack_from("<IIIII", blob, off)
        off += 20
        if version != _VERSION:
            raise VersionMismatchError(
                f"{path}: container version {version}, reader supports {_VERSION}"
            )
        (dt,) = struct.unpack_from("<d", blob, off)
        off += 8
        channels = []
        for _ in range(c):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            if off + ln > len(blob):
                raise TruncatedContainerError(f"{path}: channel table truncated")
            channels.append(blob[off : off + ln].decode("utf-8"))
            off += ln
    except struct.error:
        raise TruncatedContainerError(f"{path}: header truncated") from None

    per_frame = h * w * c * 4
    need = n_frames * per_frame
    if len(blob) - off < need:
        raise TruncatedContainerError(
            f"{path}: payload holds {(len(blob) - off) // max(per_frame, 1)} frames, "
            f"header declares {n_frames}"
        )
    raw = np.frombuffer(blob, dtype="<f4", count=n_frames * h * w * c, offset=off)
    cube = raw.astype(np.float64).reshape(n_frames, h, w, c)

    case_id, seed = "", 0
    sp = sidecar_path(path)
    if sp.exists():
        doc = json.loads(sp.read_text())
        case_id = doc.get("case_id", "")
        seed = int(doc.get("seed", 0))

    frames = [Field(h, w, tuple(channels), cube[i]) for i in range(n_frames)]
    return FrameSequence(frames=frames, dt=dt, case_id=case_id, seed=seed)
