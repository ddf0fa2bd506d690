"""Fixed 256-entry sequential colormap for rendered heatmaps.

Linear interpolation through eleven anchors of the familiar
dark-purple-to-yellow perceptual ramp. Embedded as data so renders are
bit-exact goldens with no plotting dependency.
"""
from __future__ import annotations

import numpy as np

_ANCHORS = np.array([
    [0.267004, 0.004874, 0.329415],
    [0.282623, 0.140926, 0.457517],
    [0.253935, 0.265254, 0.529983],
    [0.206756, 0.371758, 0.553117],
    [0.163625, 0.471133, 0.558148],
    [0.127568, 0.566949, 0.550556],
    [0.134692, 0.658636, 0.517649],
    [0.266941, 0.748751, 0.440573],
    [0.477504, 0.821444, 0.318195],
    [0.741388, 0.873449, 0.149561],
    [0.993248, 0.906157, 0.143936],
])


def _build_table():
    t = np.linspace(0.0, 1.0, 256)
    anchor_t = np.linspace(0.0, 1.0, len(_ANCHORS))
    rgb = np.stack([np.interp(t, anchor_t, _ANCHORS[:, i]) for i in range(3)], axis=1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


TABLE = _build_table()


def apply(values01):
    """Map values in [0, 1] to uint8 RGB rows of the table."""
    idx = np.clip(np.round(np.asarray(values01) * 255.0), 0, 255).astype(np.intp)
    return TABLE[idx]
