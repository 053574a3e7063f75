"""Central finite-difference gradient checks.

Coordinates whose +/-h perturbation changes a discrete branch (a relu mask
flip, a different min/max cell, a cell entering or leaving the epsilon
branch) are excluded: the function is not differentiable across them.

Relative error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over the checked coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .cgl import CglConfig, cgl_loss, collapse_normalize
from .errors import ConfigurationError
from .gaze import ATARI_HEAD_SCREEN, Fixation, render_heatmap
from .losses import LabeledState, gaze_at, RankedSnippetPair, TrajectorySnippet, bc_loss, bco_loss, trex_loss
from .models import ConvLayerSpec, build_bc_net, build_bco_net, build_trex_net
from .tensor import Tensor, backward, conv2d, default_dtype, record_kinks, softmax_cross_entropy, tsum

FLOAT32_STEP = 1e-3
FLOAT64_STEP = 1e-7
TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}


@dataclass
class GradCheckResult:
    rel_error: float
    max_abs_error: float
    checked: int
    excluded: int

    def ok(self, tol: float) -> bool:
        return self.checked > 0 and self.rel_error < tol


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: Optional[float] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Compare ``backward`` against central differences of ``fn``.

    ``fn`` rebuilds the graph from the current values of ``params``.
    ``max_coords`` randomly subsamples coordinates per parameter.
    """
    dtype = params[0].data.dtype.type
    if h is None:
        h = FLOAT32_STEP if dtype == np.float32 else FLOAT64_STEP
    for p in params:
        p.grad = None
    with record_kinks() as base_sig:
        loss = fn()
    backward(loss)
    base_sig = list(base_sig)

    analytic, numeric = [], []
    excluded = 0
    rng = rng or np.random.default_rng(0)
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for idx in coords:
            orig = flat[idx]
            hi = dtype(orig + h)
            lo = dtype(orig - h)
            flat[idx] = hi
            with record_kinks() as sig_hi:
                f_hi = float(fn().item())
            flat[idx] = lo
            with record_kinks() as sig_lo:
                f_lo = float(fn().item())
            flat[idx] = orig
            if sig_hi != base_sig or sig_lo != base_sig:
                excluded += 1
                continue
            numeric.append((f_hi - f_lo) / (float(hi) - float(lo)))
            analytic.append(float(grad.reshape(-1)[idx]))

    if not analytic:
        return GradCheckResult(float("inf"), float("inf"), 0, excluded)
    a = np.array(analytic)
    n = np.array(numeric)
    abs_err = float(np.max(np.abs(a - n)))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), 1e-30)
    return GradCheckResult(abs_err / scale, abs_err, len(a), excluded)


# --- canned problems used by the CLI and the acceptance suite -----------------------
#
# Random instances are redrawn until they sit away from the non-smooth set:
# every gazed, non-smoothed collapsed cell must have f' >= MIN_LIVE_VALUE.
# Close to f' = 0 the log-ratio blows up before jumping to the epsilon branch,
# so a fixed-step stencil there measures curvature, not the gradient.

MIN_LIVE_VALUE = 0.05
MAX_DRAWS = 200


def _well_conditioned(tap_data: np.ndarray, gaze: np.ndarray) -> bool:
    cm = collapse_normalize(Tensor(tap_data))
    f1 = cm.grid.data
    live = (np.asarray(gaze) > 0) & ~cm.smoothing_mask
    return bool(np.all(f1[live] >= MIN_LIVE_VALUE))


def _random_gaze(rng, shape, zero_fraction=0.3):
    g = rng.uniform(0.05, 1.0, size=shape)
    g[rng.random(shape) < zero_fraction] = 0.0
    return g / g.max() if g.max() > 0 else g


def _problem_cgl(rng, seed):
    for _ in range(MAX_DRAWS):
        f = Tensor(rng.uniform(-1, 1, size=(3, 6, 6)), requires_grad=True)
        g = _random_gaze(rng, (6, 6))
        if _well_conditioned(f.data, g):
            break
    config = CglConfig()
    return (lambda: cgl_loss(g, collapse_normalize(f), config)), [f]


def _problem_conv(rng, seed):
    x = Tensor(rng.uniform(-1, 1, size=(2, 7, 7)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, size=(3,)), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, size=(3, 3, 3)))
    return (lambda: tsum(conv2d(x, k, 2, b) * proj)), [x, k, b]


def _problem_softmax(rng, seed):
    z = Tensor(rng.uniform(-1, 1, size=(6,)), requires_grad=True)
    label = int(rng.integers(0, 6))
    return (lambda: softmax_cross_entropy(z, label)), [z]


def _tiny_gaze(rng, size, n):
    """Rendered fixation heatmaps on an ``size`` grid, one per sample."""
    maps = []
    for _ in range(n):
        fixes = [
            Fixation(0, rng.uniform(0, ATARI_HEAD_SCREEN.width_px), rng.uniform(0, ATARI_HEAD_SCREEN.height_px))
            for _ in range(2)
        ]
        maps.append(render_heatmap(fixes, ATARI_HEAD_SCREEN, (size, size)).grid)
    return np.stack(maps)


def _rescale(net, factor):
    # default fan-in init shrinks activations layer by layer; a larger scale
    # keeps float32 gradients well above finite-difference noise
    for p in net.parameters():
        p.data *= p.data.dtype.type(factor)


def _conditioned_instance(net, draw, gaze_shape):
    for _ in range(MAX_DRAWS):
        states, gaze = draw()
        tap = net.forward(states).tap(net.tap).data
        if _well_conditioned(tap, gaze_at(gaze, tap.shape[-2:])):
            break
    return states, gaze


def _policy_problem(rng, seed, builder, channels, conv, loss_fn):
    net = builder(3, seed=seed, conv=conv, input_shape=(channels, 8, 8), allow_tap_mismatch=True)
    _rescale(net, 2.0)

    def draw():
        return rng.uniform(-1, 1, (2, channels, 8, 8)), _tiny_gaze(rng, 8, 2)

    states, gaze = _conditioned_instance(net, draw, (8, 8))
    batch = [LabeledState(s, int(rng.integers(0, 3)), g) for s, g in zip(states, gaze)]
    config = CglConfig(alpha=0.01)
    return (lambda: loss_fn(net, batch, config)), net.parameters()


def _problem_bc(rng, seed):
    conv = [ConvLayerSpec(4, 3, 1), ConvLayerSpec(4, 3, 1), ConvLayerSpec(4, 2, 1)]
    return _policy_problem(rng, seed, build_bc_net, 1, conv, bc_loss)


def _problem_bco(rng, seed):
    conv = [ConvLayerSpec(4, 3, 1), ConvLayerSpec(6, 3, 1), ConvLayerSpec(4, 3, 1)]
    return _policy_problem(rng, seed, build_bco_net, 4, conv, bco_loss)


def _problem_trex(rng, seed):
    conv = [
        ConvLayerSpec(4, 3, 1, "leaky_relu"),
        ConvLayerSpec(4, 3, 1, "leaky_relu"),
        ConvLayerSpec(4, 2, 1, "leaky_relu"),
        ConvLayerSpec(4, 2, 1, "leaky_relu"),
    ]
    net = build_trex_net(seed=seed, conv=conv, input_shape=(4, 8, 8), hidden=(8,), allow_tap_mismatch=True)
    _rescale(net, 2.0)

    def draw():
        return rng.uniform(-1, 1, (4, 4, 8, 8)), _tiny_gaze(rng, 8, 4)

    states, gaze = _conditioned_instance(net, draw, (8, 8))
    pairs = [
        RankedSnippetPair(
            TrajectorySnippet(states[:2], gaze[:2], 1.0),
            TrajectorySnippet(states[2:], gaze[2:], 2.0),
        )
    ]
    config = CglConfig(alpha=0.01)
    return (lambda: trex_loss(net, pairs, config)), net.parameters()


_PROBLEMS = {
    "cgl": _problem_cgl,
    "conv": _problem_conv,
    "softmax-ce": _problem_softmax,
    "bc-loss": _problem_bc,
    "bco-loss": _problem_bco,
    "trex-loss": _problem_trex,
}
OPS = tuple(_PROBLEMS)


def run_gradcheck(op: str, seed: int = 0, dtype=np.float32) -> GradCheckResult:
    """Build the named random problem under ``dtype`` and check it."""
    if op not in OPS:
        raise ConfigurationError(f"unknown grad-check op {op!r}; choose from {', '.join(OPS)}")
    rng = np.random.default_rng(seed)
    with default_dtype(dtype):
        fn, params = _PROBLEMS[op](rng, seed)
        return check_gradients(fn, params, rng=np.random.default_rng(seed + 1))


def gradcheck_suite(seeds: Sequence[int], dtype=np.float32, ops: Sequence[str] = OPS) -> Dict[str, List[GradCheckResult]]:
    return {op: [run_gradcheck(op, s, dtype) for s in seeds] for op in ops}
