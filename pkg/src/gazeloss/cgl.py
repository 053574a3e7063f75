"""Coverage-based gaze loss over a convolutional feature map.

The feature map is summed over channels and min-max normalized to a 2-D map
``f'`` in [0, 1]. Zeros in ``f'`` and in the gaze map are replaced by
``epsilon`` before the log-ratio. The loss is

    sum_ij  g_ij * g'_ij * log(g'_ij / f''_ij)

where ``g`` is the raw gaze map, ``g'`` and ``f''`` are the smoothed maps,
and cells with ``g_ij == 0`` contribute exactly zero. Activations outside the
gazed region are therefore free, while missing activations inside it are
penalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ContractError
from .gaze import GazeHeatmap
from .tensor import Tensor, make_op, note_kink

__all__ = [
    "CglConfig",
    "CollapsedMap",
    "collapse_normalize",
    "cgl_loss",
    "cgl_terms",
    "activation_heatmap",
]


@dataclass
class CglConfig:
    epsilon: float = 1e-10
    alpha: float = 0.01
    attach_layer: Optional[int] = None
    # "penalty": loss = base + alpha * CGL. "literal": the sign as printed in
    # the BC/BCO objectives, i.e. base - alpha * CGL.
    sign: str = "penalty"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.alpha >= 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.sign not in ("penalty", "literal"):
            raise ContractError(f"sign must be 'penalty' or 'literal', got {self.sign!r}")

    @property
    def signed_alpha(self) -> float:
        return self.alpha if self.sign == "penalty" else -self.alpha


@dataclass
class CollapsedMap:
    """Channel-collapsed, min-max normalized map ``f'`` (batched or not).

    ``grid`` is the pre-smoothing map and stays attached to the autodiff
    graph; ``smoothing_mask`` marks the cells that become ``epsilon``.
    """

    grid: Tensor
    smoothing_mask: np.ndarray

    def smoothed(self, epsilon: float = 1e-10) -> np.ndarray:
        values = self.grid.data
        return np.where(self.smoothing_mask, values.dtype.type(epsilon), values)

    @property
    def resolution(self):
        return self.grid.shape[-2:]


def collapse_normalize(f: Union[Tensor, np.ndarray]) -> CollapsedMap:
    """Sum ``[c, h, w]`` (or ``[N, c, h, w]``) over channels, min-max normalize.

    A constant map normalizes to all ones, or all zeros when the constant is
    zero. The backward pass applies the full chain rule through the selected
    min and max cells (first occurrence in row-major order).
    """
    if not isinstance(f, Tensor):
        f = Tensor(f)
    if f.ndim not in (3, 4):
        raise ContractError(f"collapse_normalize expects [c, h, w] or [N, c, h, w], got {f.shape}")
    batched = f.ndim == 4
    fd = f.data if batched else f.data[None]
    n, c, h, w = fd.shape
    if c < 1:
        raise ContractError("collapse_normalize needs at least one channel")

    s = fd.sum(axis=1).reshape(n, h * w)
    rows = np.arange(n)
    imin = s.argmin(axis=1)
    imax = s.argmax(axis=1)
    lo = s[rows, imin][:, None]
    hi = s[rows, imax][:, None]
    span = hi - lo
    degenerate = span[:, 0] == 0
    safe_span = np.where(degenerate[:, None], 1, span)
    out = (s - lo) / safe_span
    if degenerate.any():
        fill = np.where(hi[:, 0] == 0, 0, 1).astype(s.dtype)
        out[degenerate] = fill[degenerate][:, None]
    note_kink(imin, imax, degenerate)

    def _back(g):
        g = (g if batched else g[None]).reshape(n, h * w)
        ds = g / safe_span
        sum_g = g.sum(axis=1)
        sum_gf = (g * out).sum(axis=1)
        ds[rows, imin] += (sum_gf - sum_g) / safe_span[:, 0]
        ds[rows, imax] -= sum_gf / safe_span[:, 0]
        ds[degenerate] = 0
        df = np.broadcast_to(ds.reshape(n, 1, h, w), fd.shape).copy()
        return (df if batched else df[0],)

    grid = out.reshape(n, h, w)
    if not batched:
        grid = grid[0]
    grid_t = make_op(np.ascontiguousarray(grid), (f,), _back)
    return CollapsedMap(grid=grid_t, smoothing_mask=grid_t.data == 0)


def _gaze_array(g, like: np.ndarray) -> np.ndarray:
    if isinstance(g, GazeHeatmap):
        g = g.grid
    elif isinstance(g, Tensor):
        g = g.data
    arr = np.asarray(g, dtype=like.dtype)
    if arr.shape != like.shape:
        raise ContractError(
            f"gaze map resolution {arr.shape} does not match collapsed map {like.shape}; resample first"
        )
    return arr


def cgl_terms(g, cm: CollapsedMap, config: Optional[CglConfig] = None) -> np.ndarray:
    """Per-cell loss contributions (no gradient tracking)."""
    eps = (config or CglConfig()).epsilon
    f1 = cm.grid.data
    gd = _gaze_array(g, f1)
    dt = f1.dtype.type
    active = gd > 0
    g_s = np.where(active, gd, dt(eps))
    f_s = cm.smoothed(eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = gd * (g_s * np.log(g_s / f_s))
    return np.where(active, terms, dt(0))


def cgl_loss(g, cm: CollapsedMap, config: Optional[CglConfig] = None) -> Tensor:
    """Scalar gaze loss, summed over the batch when ``cm`` is batched.

    ``alpha`` is not applied here; the composite objectives own it.
    """
    config = config or CglConfig()
    f1 = cm.grid.data
    gd = _gaze_array(g, f1)
    dt = f1.dtype.type
    active = gd > 0
    terms = cgl_terms(gd, cm, config)
    note_kink(cm.smoothing_mask, active)
    live = active & ~cm.smoothing_mask

    def _back(grad_out):
        g_s = np.where(active, gd, dt(config.epsilon))
        safe_f = np.where(live, f1, dt(1))
        local = np.where(live, -gd * g_s / safe_f, dt(0))
        return (local * grad_out,)

    return make_op(np.asarray(terms.sum(), dtype=dt), (cm.grid,), _back)


def activation_heatmap(f: Union[Tensor, np.ndarray]) -> GazeHeatmap:
    """Collapsed, normalized activations of one ``[c, h, w]`` map for inspection."""
    data = f.data if isinstance(f, Tensor) else np.asarray(f)
    cm = collapse_normalize(Tensor(data))
    return GazeHeatmap(cm.grid.data)
