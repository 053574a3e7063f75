"""Dataset manifests: JSON index over GZT1 frame tensors and fixation CSVs.

A dataset directory holds ``manifest.json`` plus one frames file and one
fixation log per BC split or per T-REX trajectory. Paths inside the
manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import gzt
from .errors import ConfigurationError, FormatError, ValidationError
from .gaze import (
    FrameStack,
    ScreenGeometry,
    group_by_frame,
    motion_heatmap,
    parse_fixation_log,
    render_heatmap,
    write_fixation_log,
)
from .losses import Trajectory, subsample_trajectory
from .synth import BCDataset, RawTrajectory, SynthTaskSpec, gen_bc_dataset, gen_trex_dataset

MANIFEST = "manifest.json"
DATASET_FORMAT = "gazeloss-dataset/1"


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _git_blob_sha1(path) -> str:
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# --- writing ------------------------------------------------------------------------


def write_bc_dataset(out_dir, spec: SynthTaskSpec, splits: Dict[str, BCDataset]) -> str:
    """Write BC splits and return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    for name, ds in splits.items():
        frames_file = f"{name}_frames.gzt"
        fix_file = f"{name}_fixations.csv"
        gzt.save(os.path.join(out_dir, frames_file), ds.frames)
        write_fixation_log(os.path.join(out_dir, fix_file), ds.fixations)
        entries[name] = {
            "frames": frames_file,
            "fixations": fix_file,
            "count": len(ds),
            "actions": [int(a) for a in ds.actions],
            "patch_boxes": ds.patch_boxes.tolist(),
        }
    manifest = {
        "format": DATASET_FORMAT,
        "task": "bc",
        "num_actions": spec.num_classes,
        "screen": spec.screen.to_dict(),
        "spec": spec.to_dict(),
        "splits": entries,
    }
    path = os.path.join(out_dir, MANIFEST)
    _write_json(path, manifest)
    return path


def write_trex_dataset(out_dir, spec: SynthTaskSpec, splits: Dict[str, List[RawTrajectory]]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    for name, trajectories in splits.items():
        items = []
        for traj in trajectories:
            stem = f"{name}_{traj.name}"
            gzt.save(os.path.join(out_dir, stem + ".gzt"), traj.frames)
            write_fixation_log(os.path.join(out_dir, stem + "_fixations.csv"), traj.fixations)
            items.append(
                {
                    "name": traj.name,
                    "frames": stem + ".gzt",
                    "fixations": stem + "_fixations.csv",
                    "return": traj.ret,
                    "rewards": [float(r) for r in traj.rewards],
                }
            )
        entries[name] = {"trajectories": items}
    manifest = {
        "format": DATASET_FORMAT,
        "task": "trex",
        "screen": spec.screen.to_dict(),
        "spec": spec.to_dict(),
        "splits": entries,
    }
    path = os.path.join(out_dir, MANIFEST)
    _write_json(path, manifest)
    return path


def generate(task: str, config: dict, out_dir) -> str:
    """Build a dataset from a JSON-style config and write it to ``out_dir``.

    BC keys: ``n_train``, ``n_test``; T-REX keys: ``n_trajectories``,
    ``n_heldout``, ``length``. Remaining keys go to :class:`SynthTaskSpec`.
    """
    config = dict(config)
    if task == "bc":
        n_train = int(config.pop("n_train", 500))
        n_test = int(config.pop("n_test", 500))
        spec = _spec(config)
        splits = {"train": gen_bc_dataset(spec, n_train, seed=spec.seed)}
        if n_test:
            splits["test"] = gen_bc_dataset(spec, n_test, seed=spec.seed + 1)
        return write_bc_dataset(out_dir, spec, splits)
    if task == "trex":
        n_traj = int(config.pop("n_trajectories", 10))
        n_held = int(config.pop("n_heldout", 10))
        length = int(config.pop("length", 40))
        spec = _spec(config)
        splits = {"train": gen_trex_dataset(spec, n_traj, length, seed=spec.seed)}
        if n_held:
            splits["test"] = gen_trex_dataset(spec, n_held, length, seed=spec.seed + 1)
        return write_trex_dataset(out_dir, spec, splits)
    raise ConfigurationError(f"unknown dataset task {task!r}; choose bc or trex")


def _spec(config: dict) -> SynthTaskSpec:
    try:
        return SynthTaskSpec(**config)
    except TypeError as exc:
        raise ConfigurationError(f"bad synthetic task spec: {exc}") from None


# --- reading ------------------------------------------------------------------------


@dataclass
class PolicyData:
    """One BC split ready for training: frame stacks, labels, gaze and motion maps."""

    stacks: np.ndarray  # [N, 4, H, W]
    actions: np.ndarray
    gaze: np.ndarray  # [N, H, W] rendered at frame resolution
    num_actions: int
    _motion: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.actions)

    @property
    def motion(self) -> np.ndarray:
        if self._motion is None:
            self._motion = np.stack([motion_heatmap(FrameStack(s)).grid for s in self.stacks])
        return self._motion


def load_manifest(path) -> dict:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{path}: dataset manifest not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest JSON ({exc.msg} at line {exc.lineno})") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    if manifest.get("task") not in ("bc", "trex"):
        raise ValidationError(f"{path}: unknown task {manifest.get('task')!r}")
    manifest["_root"] = os.path.dirname(os.path.abspath(path))
    manifest["_path"] = os.path.abspath(path)
    return manifest


def _split(manifest: dict, split: str) -> dict:
    splits = manifest.get("splits", {})
    if split not in splits:
        raise ValidationError(f"dataset has no split {split!r} (have {', '.join(sorted(splits)) or 'none'})")
    return splits[split]


def _screen(manifest: dict) -> ScreenGeometry:
    return ScreenGeometry(**manifest["screen"])


def _resolve(manifest: dict, rel: str) -> str:
    path = os.path.join(manifest["_root"], rel)
    if not os.path.exists(path):
        raise ValidationError(f"manifest references missing file {rel}")
    return path


def load_policy_split(manifest: dict, split: str = "train") -> PolicyData:
    if manifest["task"] != "bc":
        raise ValidationError(f"expected a bc dataset, got task {manifest['task']!r}")
    entry = _split(manifest, split)
    stacks = gzt.load(_resolve(manifest, entry["frames"]))
    actions = np.asarray(entry["actions"], dtype=np.int64)
    if stacks.ndim != 4 or stacks.shape[1] != 4:
        raise ValidationError(f"split {split}: frames must be [N, 4, H, W], got {stacks.shape}")
    if len(stacks) != len(actions) or entry.get("count", len(actions)) != len(actions):
        raise ValidationError(f"split {split}: {len(stacks)} frame stacks but {len(actions)} actions")
    num_actions = int(manifest["num_actions"])
    if len(actions) and (actions.min() < 0 or actions.max() >= num_actions):
        raise ValidationError(f"split {split}: actions outside [0, {num_actions})")
    screen = _screen(manifest)
    fixations = parse_fixation_log(_resolve(manifest, entry["fixations"]), screen)
    groups = group_by_frame(fixations)
    stray = [f for f in groups if not 0 <= f < len(actions)]
    if stray:
        raise ValidationError(f"split {split}: fixations reference unknown samples {stray[:5]}")
    res = stacks.shape[2:]
    gaze = np.stack([render_heatmap(groups.get(i, []), screen, res).grid for i in range(len(actions))])
    return PolicyData(stacks, actions, gaze, num_actions)


def load_trajectories(manifest: dict, split: str = "train") -> List[Trajectory]:
    """Load raw trajectories and frame-skip them into stacks with gaze."""
    if manifest["task"] != "trex":
        raise ValidationError(f"expected a trex dataset, got task {manifest['task']!r}")
    entry = _split(manifest, split)
    screen = _screen(manifest)
    out = []
    for item in entry["trajectories"]:
        frames = gzt.load(_resolve(manifest, item["frames"]))
        if frames.ndim != 3:
            raise ValidationError(f"trajectory {item['name']}: frames must be [T, H, W], got {frames.shape}")
        groups = group_by_frame(parse_fixation_log(_resolve(manifest, item["fixations"]), screen))
        res = frames.shape[1:]
        per_frame = np.stack([render_heatmap(groups.get(i, []), screen, res).grid for i in range(len(frames))])
        stacks, gaze = subsample_trajectory(frames, per_frame)
        rewards = np.asarray(item.get("rewards", []), dtype=np.float64)
        if rewards.size and len(rewards) != len(stacks):
            raise ValidationError(
                f"trajectory {item['name']}: {len(rewards)} rewards for {len(stacks)} frame stacks"
            )
        out.append(Trajectory(stacks, gaze, float(item["return"]), item["name"], rewards if rewards.size else None))
    if len(out) < 2:
        raise ValidationError(f"split {split}: need at least 2 trajectories, got {len(out)}")
    return out


def dataset_hash(manifest: dict) -> str:
    """Git-style content hash over the manifest and every file it references."""
    files = {MANIFEST: manifest["_path"]}
    for entry in manifest["splits"].values():
        items = entry.get("trajectories", [entry])
        for item in items:
            for key in ("frames", "fixations"):
                files[item[key]] = _resolve(manifest, item[key])
    lines = "".join(f"{_git_blob_sha1(p)} {name}\n" for name, p in sorted(files.items()))
    return hashlib.sha1(lines.encode("utf-8")).hexdigest()
