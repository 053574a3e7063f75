"""Gaze-modulated dropout: spatial dropout whose drop rate falls near gaze.

The drop probability at a cell is ``p_base * (1 - g)``, one Bernoulli draw per
spatial cell shared by all channels, with inverted-dropout scaling. This
linear modulation is a choice of this package, not a reproduction of the
original GMD modulation function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ContractError
from .gaze import GazeHeatmap
from .tensor import Tensor, make_op


@dataclass
class GmdConfig:
    p_base: float = 0.5
    layer_index: int = 1
    mode: str = "train"

    def __post_init__(self):
        if not 0 <= self.p_base < 1:
            raise ContractError(f"p_base must lie in [0, 1), got {self.p_base}")
        if self.mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def keep_probability(g, p_base: float) -> np.ndarray:
    grid = g.grid if isinstance(g, GazeHeatmap) else np.asarray(g, dtype=np.float64)
    return 1.0 - p_base * (1.0 - np.clip(grid, 0.0, 1.0))


def gmd_mask(g, config: GmdConfig, seed=None) -> Tuple[np.ndarray, np.ndarray]:
    """Sample a spatial mask for gaze map(s) ``g`` of shape ``[h, w]`` or ``[N, h, w]``.

    Returns ``(mask, keep)``. Kept cells hold ``1 / keep``, dropped cells 0.
    In eval mode the mask is all ones. ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    keep = keep_probability(g, config.p_base)
    if config.mode == "eval":
        return np.ones_like(keep), keep
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.random(keep.shape)
    mask = np.where(draws < keep, 1.0 / keep, 0.0)
    return mask, keep


def apply_gmd(f: Tensor, mask) -> Tensor:
    """Multiply every channel of ``f`` (``[c,h,w]`` or ``[N,c,h,w]``) by ``mask``."""
    m = np.asarray(mask, dtype=f.data.dtype)
    if f.ndim == 3 and m.shape != f.shape[1:]:
        raise ContractError(f"GMD mask {m.shape} does not match feature map spatial size {f.shape[1:]}")
    if f.ndim == 4:
        if m.shape == f.shape[2:]:
            m = np.broadcast_to(m, (f.shape[0],) + m.shape)
        if m.shape != (f.shape[0],) + f.shape[2:]:
            raise ContractError(f"GMD mask {m.shape} does not match feature map {f.shape}")
        m = m[:, None]
    elif f.ndim != 3:
        raise ContractError(f"apply_gmd expects a 3-d or 4-d feature map, got {f.shape}")
    else:
        m = m[None]
    return make_op(f.data * m, (f,), lambda g: (g * m,))
