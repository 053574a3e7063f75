"""Training loops for BC, BCO and T-REX with optional attention guidance.

Attention modes:
  none        plain objective
  cgl         gaze coverage loss on human gaze maps
  motion-cgl  gaze coverage loss on motion maps (|last - first| frame)
  gmd         gaze-modulated dropout on a conv layer (BC/BCO only)

A run writes ``metrics.csv`` (one row per step), checkpoints, probe-batch
activation heatmaps at the start and end, and ``run.json``.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .cgl import CglConfig, activation_heatmap, collapse_normalize
from .dataset import PolicyData, dataset_hash, load_manifest, load_policy_split, load_trajectories
from .errors import ConfigurationError, ValidationError
from .gaze import FrameStack, export_heatmap, motion_heatmap, resample_grid
from .gmd import GmdConfig, gmd_mask
from .losses import Trajectory, policy_objective, sample_pairs, trex_objective
from .models import ConvNet, PolicyNet, RewardNet, build_bc_net, build_bco_net, build_trex_net
from .optim import Adam
from .tensor import backward, default_dtype

RUN_FORMAT = "gazeloss-run/1"
ALGORITHMS = ("bc", "bco", "trex")
ATTENTION = ("none", "cgl", "gmd", "motion-cgl")
DEFAULT_BATCH = {"bc": 50, "bco": 32, "trex": 1}
EVAL_CHUNK = 100


@dataclass
class RunConfig:
    algorithm: str = "bc"
    attention: str = "none"
    alpha: float = 0.01
    batch_size: Optional[int] = None  # BC 50, BCO 32, T-REX 1 pair
    steps: int = 100
    learning_rate: float = 1e-4
    seed: int = 0
    data: str = ""
    out_dir: str = "run"
    eval_split: Optional[str] = "test"
    checkpoint_every: int = 0
    probe_size: int = 8
    epsilon: float = 1e-10
    cgl_sign: str = "penalty"
    p_base: float = 0.5
    gmd_layer: int = 1
    num_pairs: int = 200
    snippet_len: int = 20
    conv: Optional[List[dict]] = None
    allow_tap_mismatch: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def batch(self) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[self.algorithm]

    @property
    def uses_cgl(self) -> bool:
        return self.attention in ("cgl", "motion-cgl")

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {', '.join(ALGORITHMS)}, got {self.algorithm!r}")
        if self.attention not in ATTENTION:
            raise ConfigurationError(f"attention must be one of {', '.join(ATTENTION)}, got {self.attention!r}")
        if self.attention == "gmd" and self.algorithm == "trex":
            raise ConfigurationError("attention=gmd is only available for bc and bco")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.checkpoint_every < 0 or self.probe_size < 0:
            raise ConfigurationError("checkpoint_every and probe_size must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.algorithm == "trex" and (self.num_pairs < 1 or self.snippet_len < 1):
            raise ConfigurationError("num_pairs and snippet_len must be >= 1")
        CglConfig(epsilon=self.epsilon, sign=self.cgl_sign)
        GmdConfig(p_base=self.p_base, layer_index=self.gmd_layer)

    def cgl_config(self) -> CglConfig:
        return CglConfig(epsilon=self.epsilon, alpha=self.alpha if self.uses_cgl else 0.0, sign=self.cgl_sign)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {', '.join(unknown)}")
        return cls(**d)


# --- metrics ------------------------------------------------------------------------


def activation_mass(tap: np.ndarray, gaze: np.ndarray) -> float:
    """Mean over samples of the collapsed activation summed over cells with gaze > 0.

    ``tap`` is ``[N, c, h, w]``, ``gaze`` is ``[N, h, w]``.
    """
    f1 = collapse_normalize(tap).grid.data.astype(np.float64)
    masses = [float(fmap[g > 0].sum()) for fmap, g in zip(f1, gaze)]
    return float(np.mean(masses)) if masses else 0.0


def activation_share(tap: np.ndarray, gaze: np.ndarray) -> float:
    """Mean fraction of the collapsed activation that falls where gaze > 0.

    Samples without activation count as 0.
    """
    f1 = collapse_normalize(tap).grid.data.astype(np.float64)
    shares = []
    for fmap, g in zip(f1, gaze):
        total = fmap.sum()
        shares.append(float(fmap[g > 0].sum() / total) if total > 0 else 0.0)
    return float(np.mean(shares)) if shares else 0.0


def _forward_chunks(net: ConvNet, x: np.ndarray) -> np.ndarray:
    outs = [net.forward(x[i : i + EVAL_CHUNK]).output.data for i in range(0, len(x), EVAL_CHUNK)]
    return np.concatenate(outs)


def policy_metrics(net: PolicyNet, inputs: np.ndarray, actions: np.ndarray) -> dict:
    logits = _forward_chunks(net, inputs)
    pred = logits.argmax(axis=1)
    k = net.num_actions
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (actions, pred), 1)
    return {
        "accuracy": float(np.mean(pred == actions)) if len(actions) else 0.0,
        "confusion": confusion.tolist(),
        "count": int(len(actions)),
    }


def reward_metrics(predicted: Sequence[float], true: Sequence[float], seed=0) -> dict:
    """Pairwise ranking accuracy and Spearman correlation of predicted returns.

    Pairs with equal true returns are skipped. Ties in the prediction are
    broken by a seeded coin flip.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if len(predicted) != len(true) or len(true) < 2:
        raise ValidationError(f"need >= 2 matching predictions and returns, got {len(predicted)} and {len(true)}")
    rng = np.random.default_rng(seed)
    correct, total = 0.0, 0
    for i in range(len(true)):
        for j in range(i + 1, len(true)):
            if true[i] == true[j]:
                continue
            total += 1
            if predicted[i] == predicted[j]:
                correct += float(rng.random() < 0.5)
            elif (predicted[i] < predicted[j]) == (true[i] < true[j]):
                correct += 1
    with warnings.catch_warnings():
        # constant predictions have no rank correlation; reported as 0
        warnings.simplefilter("ignore")
        rho = spearmanr(predicted, true).statistic
    return {
        "pairwise_accuracy": correct / total if total else 0.0,
        "spearman": 0.0 if not np.isfinite(rho) else float(rho),
        "pairs": total,
    }


def predicted_returns(net: RewardNet, items) -> np.ndarray:
    return np.array([float(_forward_chunks(net, np.asarray(t.states)).sum()) for t in items])


def _true_return(item) -> float:
    return float(item.ret if hasattr(item, "ret") else item.source_return)


# --- evaluation entry points --------------------------------------------------------


def _load_net(checkpoint) -> ConvNet:
    return checkpoint if isinstance(checkpoint, ConvNet) else ConvNet.load(checkpoint)


def _policy_inputs(net: ConvNet, data: PolicyData) -> np.ndarray:
    x = data.stacks[:, 3:4] if net.spec.kind == "bc" else data.stacks
    if x.shape[1:] != tuple(net.spec.input_shape):
        raise ValidationError(f"checkpoint expects inputs {tuple(net.spec.input_shape)}, data provides {x.shape[1:]}")
    return x


def evaluate_policy(checkpoint, data, split: str = "test") -> dict:
    """Accuracy and confusion matrix (rows true, columns predicted) on a BC split."""
    net = _load_net(checkpoint)
    if not isinstance(net, PolicyNet):
        raise ValidationError("checkpoint is not a policy network")
    if not isinstance(data, PolicyData):
        data = load_policy_split(load_manifest(data), split)
    if data.num_actions != net.num_actions:
        raise ValidationError(f"checkpoint has {net.num_actions} actions, data has {data.num_actions}")
    return policy_metrics(net, _policy_inputs(net, data), data.actions)


def evaluate_reward(checkpoint, data, split: str = "test", seed: int = 0) -> dict:
    """Rank held-out trajectories or snippets by predicted return."""
    net = _load_net(checkpoint)
    if not isinstance(net, RewardNet):
        raise ValidationError("checkpoint is not a reward network")
    items = data if isinstance(data, (list, tuple)) else load_trajectories(load_manifest(data), split)
    if len(items) < 2:
        raise ValidationError(f"need at least 2 held-out snippets, got {len(items)}")
    for item in items:
        shape = np.asarray(item.states).shape[1:]
        if shape != tuple(net.spec.input_shape):
            raise ValidationError(f"checkpoint expects inputs {tuple(net.spec.input_shape)}, data provides {shape}")
    pred = predicted_returns(net, items)
    true = [_true_return(t) for t in items]
    out = reward_metrics(pred, true, seed)
    out["predicted_returns"] = pred.tolist()
    out["true_returns"] = list(true)
    return out


# --- training -----------------------------------------------------------------------


@dataclass
class _Run:
    config: RunConfig
    net: ConvNet
    probe_x: np.ndarray
    probe_gaze: np.ndarray  # at tap resolution
    evaluate: object
    step_fn: object
    rows: List[list] = field(default_factory=list)


def _at(maps: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if maps.shape[1:] == shape:
        return maps
    if len(maps) == 0:
        return np.zeros((0,) + shape)
    return np.stack([resample_grid(m, shape) for m in maps])


def _build_policy(config: RunConfig, manifest: dict) -> _Run:
    data = load_policy_split(manifest, "train")
    eval_data = None
    if config.eval_split and config.eval_split in manifest["splits"]:
        eval_data = load_policy_split(manifest, config.eval_split)
    channels = 1 if config.algorithm == "bc" else 4
    input_shape = (channels,) + data.stacks.shape[2:]
    builder = build_bc_net if config.algorithm == "bc" else build_bco_net
    net = builder(
        data.num_actions,
        seed=config.seed,
        conv=config.conv,
        input_shape=input_shape,
        allow_tap_mismatch=config.allow_tap_mismatch,
    )
    if config.batch > len(data):
        raise ValidationError(f"batch size {config.batch} exceeds the {len(data)} training samples")
    if not 1 <= config.gmd_layer <= len(net.spec.conv):
        raise ConfigurationError(f"gmd_layer {config.gmd_layer} outside 1..{len(net.spec.conv)}")
    x = _policy_inputs(net, data)
    tap_hw = net.tap_shape[1:]
    source = data.motion if config.attention == "motion-cgl" else data.gaze
    guide = _at(source, tap_hw) if config.uses_cgl else None
    gmd_maps = _at(data.gaze, net.shapes[config.gmd_layer - 1][1:]) if config.attention == "gmd" else None
    cgl_config = config.cgl_config()
    gmd_config = GmdConfig(p_base=config.p_base, layer_index=config.gmd_layer)
    rng = np.random.default_rng(config.seed)
    mask_rng = np.random.default_rng([config.seed, 1])

    def step():
        idx = rng.choice(len(data), size=config.batch, replace=False)
        dropout = None
        if gmd_maps is not None:
            mask, _ = gmd_mask(gmd_maps[idx], gmd_config, mask_rng)
            dropout = (config.gmd_layer, mask)
        return policy_objective(
            net, x[idx], data.actions[idx], None if guide is None else guide[idx], cgl_config, dropout
        )

    def evaluate():
        return policy_metrics(net, _policy_inputs(net, eval_data), eval_data.actions) if eval_data else {}

    n_probe = min(config.probe_size, len(data))
    return _Run(config, net, x[:n_probe], _at(data.gaze[:n_probe], tap_hw), evaluate, step)


def _with_motion(traj: Trajectory) -> Trajectory:
    motion = np.stack([motion_heatmap(FrameStack(s)).grid for s in traj.states])
    return Trajectory(traj.states, motion, traj.ret, traj.name, traj.rewards)


def _build_trex(config: RunConfig, manifest: dict) -> _Run:
    trajectories = load_trajectories(manifest, "train")
    heldout = None
    if config.eval_split and config.eval_split in manifest["splits"]:
        heldout = load_trajectories(manifest, config.eval_split)
    net = build_trex_net(
        seed=config.seed,
        conv=config.conv,
        input_shape=trajectories[0].states.shape[1:],
        allow_tap_mismatch=config.allow_tap_mismatch,
    )
    tap_hw = net.tap_shape[1:]
    human = [Trajectory(t.states, _at(t.gaze_maps, tap_hw), t.ret, t.name, t.rewards) for t in trajectories]
    guided = human
    if config.attention == "motion-cgl":
        guided = [_with_motion(t) for t in trajectories]
        guided = [Trajectory(t.states, _at(t.gaze_maps, tap_hw), t.ret, t.name, t.rewards) for t in guided]
    rng = np.random.default_rng(config.seed)
    pairs = sample_pairs(guided, config.num_pairs, config.snippet_len, seed=rng)
    cgl_config = config.cgl_config()
    order: List[int] = []

    def step():
        while len(order) < config.batch:
            order.extend(rng.permutation(len(pairs)).tolist())
        batch = [pairs[order.pop(0)] for _ in range(config.batch)]
        return trex_objective(net, batch, cgl_config, use_gaze=config.uses_cgl)

    def evaluate():
        return evaluate_reward(net, heldout, seed=config.seed) if heldout else {}

    states = np.concatenate([t.states for t in human])
    gaze = np.concatenate([t.gaze_maps for t in human])
    keep = np.flatnonzero(gaze.reshape(len(gaze), -1).max(axis=1) > 0)[: config.probe_size]
    return _Run(config, net, states[keep], gaze[keep], evaluate, step)


def _snapshot(run: _Run, tag: str, out_dir: str) -> dict:
    metrics = {"eval": run.evaluate()}
    if len(run.probe_x):
        tap = run.net.forward(run.probe_x).tap(run.net.tap).data
        metrics["probe_activation_mass"] = activation_mass(tap, run.probe_gaze)
        metrics["probe_activation_share"] = activation_share(tap, run.probe_gaze)
        probe_dir = os.path.join(out_dir, "probe")
        os.makedirs(probe_dir, exist_ok=True)
        files = []
        for i, f in enumerate(tap):
            name = f"{tag}_{i:02d}.pgm"
            export_heatmap(activation_heatmap(f), os.path.join(probe_dir, name))
            files.append(os.path.join("probe", name))
        metrics["probe_images"] = files
    return metrics


def _write_metrics(path: str, rows: List[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "base", "cgl", "total"])
        writer.writerows(rows)


def train(config: RunConfig) -> dict:
    """Run one seeded training job and return (and write) its run manifest."""
    config.validate()
    manifest = load_manifest(config.data)
    expected = "trex" if config.algorithm == "trex" else "bc"
    if manifest["task"] != expected:
        raise ValidationError(f"algorithm {config.algorithm} needs a {expected} dataset, got {manifest['task']}")
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with default_dtype(np.dtype(config.dtype).type):
        run = _build_trex(config, manifest) if config.algorithm == "trex" else _build_policy(config, manifest)
        opt = Adam(run.net.parameters(), lr=config.learning_rate)
        initial = _snapshot(run, "start", out_dir)
        checkpoints = []
        for s in range(1, config.steps + 1):
            parts = run.step_fn()
            opt.zero_grad()
            backward(parts.total)
            opt.step()
            run.rows.append([s, repr(parts.base), repr(parts.cgl), repr(parts.total.item())])
            if config.checkpoint_every and s % config.checkpoint_every == 0:
                rel = os.path.join("checkpoints", f"step_{s:06d}")
                run.net.save(os.path.join(out_dir, rel))
                checkpoints.append(rel)
        final = _snapshot(run, "end", out_dir) if config.steps else initial
    _write_metrics(os.path.join(out_dir, "metrics.csv"), run.rows)
    run.net.save(os.path.join(out_dir, "checkpoint"))
    result = {
        "format": RUN_FORMAT,
        "config": config.to_dict(),
        "dataset": {"manifest": manifest["_path"], "hash": dataset_hash(manifest)},
        "num_parameters": run.net.num_parameters(),
        "metrics_csv": "metrics.csv",
        "checkpoints": checkpoints,
        "final_checkpoint": "checkpoint",
        "initial_metrics": initial,
        "final_metrics": final,
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


def read_metrics(path) -> Dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) for r in rows]) for key in ("step", "base", "cgl", "total")}
