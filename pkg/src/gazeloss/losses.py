"""Composite training objectives: BC/BCO with the gaze loss, and T-REX ranking.

The gaze term is always added as a penalty scaled by ``alpha`` (unless the
config asks for the literal printed sign) and summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .cgl import CglConfig, cgl_loss, collapse_normalize
from .errors import ConfigurationError, ContractError
from .gaze import GazeHeatmap, max_normalize, resample_grid
from .models import PolicyNet, RewardNet
from .tensor import Tensor, make_op, softmax_cross_entropy


@dataclass
class LabeledState:
    state: np.ndarray
    action: int
    gaze: Optional[object] = None


@dataclass
class TrajectorySnippet:
    states: np.ndarray
    gaze_maps: np.ndarray
    source_return: float = 0.0

    def __post_init__(self):
        if len(self.states) != len(self.gaze_maps):
            raise ContractError(
                f"snippet has {len(self.states)} states but {len(self.gaze_maps)} gaze maps"
            )

    def __len__(self):
        return len(self.states)


@dataclass
class RankedSnippetPair:
    low: TrajectorySnippet
    high: TrajectorySnippet
    allow_ties: bool = False

    def __post_init__(self):
        if self.high.source_return < self.low.source_return or (
            self.high.source_return == self.low.source_return and not self.allow_ties
        ):
            raise ContractError(
                f"pair is not ranked: high return {self.high.source_return} vs low {self.low.source_return}"
            )


@dataclass
class Trajectory:
    """A preprocessed demonstration: frame stacks, per-stack gaze, total return."""

    states: np.ndarray
    gaze_maps: np.ndarray
    ret: float
    name: str = ""
    rewards: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.states)


class LossParts(NamedTuple):
    total: Tensor
    base: float
    cgl: float


# --- helpers ------------------------------------------------------------------------


def gaze_at(gaze, resolution) -> np.ndarray:
    """Stack gaze maps (heatmaps or arrays, ``None`` = no gaze) at ``resolution``."""
    if isinstance(gaze, np.ndarray) and gaze.ndim == 3:
        if gaze.shape[1:] == tuple(resolution):
            return gaze
        return np.stack([resample_grid(g, resolution) for g in gaze])
    out = []
    for g in gaze:
        if g is None:
            out.append(np.zeros(tuple(resolution)))
            continue
        grid = g.grid if isinstance(g, GazeHeatmap) else np.asarray(g, dtype=np.float64)
        out.append(grid if grid.shape == tuple(resolution) else resample_grid(grid, resolution))
    return np.stack(out)


def _combine(base: Tensor, cgl: Optional[Tensor], config: CglConfig) -> LossParts:
    if cgl is None:
        return LossParts(base, base.item(), 0.0)
    total = base + cgl * config.signed_alpha
    return LossParts(total, base.item(), cgl.item())


def policy_objective(
    net: PolicyNet,
    states: np.ndarray,
    actions: Sequence[int],
    gaze: Optional[np.ndarray],
    config: Optional[CglConfig] = None,
    dropout=None,
) -> LossParts:
    """Summed action NLL plus ``alpha`` times the summed gaze loss at the tap.

    ``gaze`` is ``[N, h, w]`` at the tap resolution, or ``None`` to skip the
    gaze term entirely.
    """
    config = config or CglConfig()
    if len(states) == 0:
        raise ContractError("batch must not be empty")
    result = net.forward(np.asarray(states), dropout=dropout)
    base = softmax_cross_entropy(result.output, np.asarray(actions))
    if gaze is None or config.alpha == 0:
        return _combine(base, None, config)
    layer = config.attach_layer or net.tap
    cm = collapse_normalize(result.tap(layer))
    return _combine(base, cgl_loss(gaze, cm, config), config)


def _labeled_objective(net: PolicyNet, batch: Sequence[LabeledState], config, return_parts):
    if not batch:
        raise ContractError("batch must not be empty")
    config = config or CglConfig()
    for item in batch:
        if not 0 <= item.action < net.num_actions:
            raise ContractError(f"action {item.action} outside [0, {net.num_actions})")
    states = np.stack([np.asarray(item.state) for item in batch])
    actions = [item.action for item in batch]
    layer = config.attach_layer or net.tap
    gaze = gaze_at([item.gaze for item in batch], net.shapes[layer - 1][1:])
    parts = policy_objective(net, states, actions, gaze, config)
    return parts if return_parts else parts.total


def bc_loss(net: PolicyNet, batch: Sequence[LabeledState], config: Optional[CglConfig] = None, return_parts=False):
    """Behaviour cloning on single frames with the gaze loss at conv layer 3."""
    return _labeled_objective(net, batch, config, return_parts)


def bco_loss(net: PolicyNet, batch: Sequence[LabeledState], config: Optional[CglConfig] = None, return_parts=False):
    """BC from observation: the actions are labels recovered upstream; tap is layer 2."""
    return _labeled_objective(net, batch, config, return_parts)


# --- T-REX --------------------------------------------------------------------------


def subsample_trajectory(frames, gaze_per_frame=None):
    """Frame-skip raw frames into stacks of four with matching gaze maps.

    Raw frames are split into consecutive groups of four (a trailing partial
    group is dropped). Each group keeps the elementwise max of its 3rd and 4th
    frames. Stack ``k`` holds the kept frames of groups ``k..k+3``; its gaze
    map is the max-normalized sum of the gaze maps of group ``k+3``.

    Returns ``(stacks [S, 4, H, W], gaze [S, h, w] or None)``.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or len(frames) < 16:
        raise ContractError(f"need at least 16 raw frames of shape [T, H, W], got {frames.shape}")
    groups = len(frames) // 4
    kept = np.maximum(frames[2 : 4 * groups : 4], frames[3 : 4 * groups : 4])
    n_stacks = groups - 3
    stacks = np.stack([kept[k : k + 4] for k in range(n_stacks)])
    if gaze_per_frame is None:
        return stacks, None
    if isinstance(gaze_per_frame, np.ndarray) and gaze_per_frame.ndim == 3:
        gaze = gaze_per_frame
    else:
        maps = [
            g.grid if isinstance(g, GazeHeatmap) else g
            for g in gaze_per_frame
        ]
        shape = next((np.shape(g) for g in maps if g is not None), frames.shape[1:])
        gaze = np.stack([np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64) for g in maps])
    if len(gaze) != len(frames):
        raise ContractError(f"{len(gaze)} gaze maps for {len(frames)} frames")
    group_gaze = gaze[: 4 * groups].reshape(groups, 4, *gaze.shape[1:]).sum(axis=1)
    stack_gaze = np.stack([max_normalize(group_gaze[k + 3]) for k in range(n_stacks)])
    return stacks, stack_gaze


def sample_pairs(
    demos: Sequence[Trajectory],
    count: int,
    snippet_len: int,
    seed=0,
    allow_ties: bool = False,
) -> List[RankedSnippetPair]:
    """Draw ``count`` ranked snippet pairs from distinct trajectories."""
    if len(demos) < 2:
        raise ConfigurationError("need at least two trajectories to build ranked pairs")
    for traj in demos:
        if snippet_len > len(traj):
            raise ConfigurationError(
                f"snippet length {snippet_len} exceeds trajectory {traj.name or '?'} of length {len(traj)}"
            )
    returns = [t.ret for t in demos]
    if len(set(returns)) < 2 and not allow_ties:
        raise ConfigurationError("all trajectories have equal returns; cannot rank pairs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pairs = []
    while len(pairs) < count:
        i, j = rng.choice(len(demos), size=2, replace=False)
        a, b = demos[i], demos[j]
        if a.ret == b.ret and not allow_ties:
            continue
        low, high = (a, b) if a.ret <= b.ret else (b, a)
        s_low = int(rng.integers(0, len(low) - snippet_len + 1))
        s_high = int(rng.integers(0, len(high) - snippet_len + 1))
        pairs.append(
            RankedSnippetPair(
                TrajectorySnippet(low.states[s_low : s_low + snippet_len], low.gaze_maps[s_low : s_low + snippet_len], low.ret),
                TrajectorySnippet(high.states[s_high : s_high + snippet_len], high.gaze_maps[s_high : s_high + snippet_len], high.ret),
                allow_ties=allow_ties,
            )
        )
    return pairs


def segment_sum(x: Tensor, lengths: Sequence[int]) -> Tensor:
    """Sum consecutive runs of a flat ``[M]`` tensor into ``[len(lengths)]``."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.sum() != x.size:
        raise ContractError(f"segment lengths sum to {lengths.sum()} but tensor has {x.size} entries")
    flat = x.data.reshape(-1)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    out = np.array([flat[bounds[k] : bounds[k + 1]].sum() for k in range(len(lengths))], dtype=flat.dtype)
    return make_op(out, (x,), lambda g: (np.repeat(g, lengths).reshape(x.shape),))


def trex_objective(net: RewardNet, pairs: Sequence[RankedSnippetPair], config: Optional[CglConfig] = None, use_gaze=True):
    """Pairwise ranking loss over snippet return sums plus the summed gaze loss."""
    config = config or CglConfig()
    if not pairs:
        raise ContractError("need at least one snippet pair")
    states, gazes, lengths = [], [], []
    for pair in pairs:
        for snippet in (pair.low, pair.high):
            states.append(np.asarray(snippet.states))
            gazes.append(np.asarray(snippet.gaze_maps))
            lengths.append(len(snippet))
    result = net.forward(np.concatenate(states))
    returns = segment_sum(result.output, lengths).reshape((len(pairs), 2))
    base = softmax_cross_entropy(returns, np.ones(len(pairs), dtype=np.int64))
    if not use_gaze or config.alpha == 0:
        return _combine(base, None, config)
    layer = config.attach_layer or net.tap
    gaze = gaze_at(np.concatenate(gazes), net.shapes[layer - 1][1:])
    cm = collapse_normalize(result.tap(layer))
    return _combine(base, cgl_loss(gaze, cm, config), config)


def trex_loss(net: RewardNet, pairs: Sequence[RankedSnippetPair], config: Optional[CglConfig] = None, return_parts=False):
    parts = trex_objective(net, pairs, config)
    return parts if return_parts else parts.total


def ranking_logits(net: RewardNet, pair: RankedSnippetPair) -> np.ndarray:
    """``[R_low, R_high]`` predicted snippet returns (no gradient)."""
    return np.array([net.snippet_return(pair.low.states).item(), net.snippet_return(pair.high.states).item()])
