"""Synthetic desk-scale datasets with known ground truth and scripted gaze.

BC/BCO task: each sample is a 4-frame stack. One *marked* patch (a faint
square outline) sits in a random slot; its interior shows a class pattern
(one bright quadrant per class). Unmarked distractor patches with random
class patterns and a brighter fill occupy other slots and drift between
frames, while the marked patch stays still. Fixations land on the marked
patch, so gaze is informative and frame motion is not.

T-REX task: trajectories of frames containing "coins" (small bright crosses)
and drifting distractor bars. The latent reward of a state is the number of
coins in it; trajectory quality sets how many coins appear. Fixations land on
the coins.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .gaze import ATARI_HEAD_SCREEN, Fixation, ScreenGeometry


@dataclass
class SynthTaskSpec:
    grid: int = 84
    patch: int = 20
    slot_grid: int = 2
    num_classes: int = 2
    noise: float = 0.3
    contrast: float = 1.0
    distractors: int = 3
    distractor_motion: float = 2.0
    distractor_fill: float = 0.5
    marker: float = 0.5
    fixations_per_state: int = 3
    fixation_jitter: float = 2.0
    screen: ScreenGeometry = field(default_factory=lambda: ATARI_HEAD_SCREEN)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.screen, dict):
            self.screen = ScreenGeometry(**self.screen)
        self.validate()

    @property
    def slot_size(self) -> int:
        return self.grid // self.slot_grid

    def validate(self) -> None:
        if self.patch < 6 or self.patch > self.grid:
            raise ConfigurationError(f"patch size {self.patch} must lie in [6, grid={self.grid}]")
        if self.slot_grid < 1 or self.slot_size < self.patch:
            raise ConfigurationError(
                f"a {self.slot_grid}x{self.slot_grid} slot layout gives {self.slot_size}px slots, "
                f"too small for {self.patch}px patches"
            )
        if self.distractors > self.slot_grid**2 - 1:
            raise ConfigurationError(f"{self.distractors} distractors do not fit in {self.slot_grid**2 - 1} free slots")
        if not 2 <= self.num_classes <= 4:
            raise ConfigurationError(f"num_classes must be 2..4 (one bright quadrant per class), got {self.num_classes}")
        if not 0 <= self.noise < self.contrast <= 1:
            raise ConfigurationError(f"need 0 <= noise < contrast <= 1, got noise={self.noise}, contrast={self.contrast}")
        if not 0 < self.marker <= 1:
            raise ConfigurationError(f"marker must lie in (0, 1], got {self.marker}")
        if not 0 <= self.distractor_fill < 1:
            raise ConfigurationError(f"distractor_fill must lie in [0, 1), got {self.distractor_fill}")
        if self.fixation_jitter < 0 or self.distractor_motion < 0 or self.fixations_per_state < 0:
            raise ConfigurationError("fixation_jitter, distractor_motion and fixations_per_state must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["screen"] = self.screen.to_dict()
        return d


# --- drawing primitives -------------------------------------------------------------


def class_pattern(label: int, size: int, contrast: float) -> np.ndarray:
    """Square interior with quadrant ``label`` (TL, TR, BL, BR) lit."""
    inner = np.zeros((size, size))
    half = size // 2
    r, c = divmod(label, 2)
    inner[r * half : (r + 1) * half if r == 0 else size, c * half : (c + 1) * half if c == 0 else size] = contrast
    return inner


def draw_patch(
    frame: np.ndarray, top: int, left: int, size: int, label: int, contrast: float, marked: float, fill: float = 0.0
) -> None:
    inner = size - 4
    block = np.full((size, size), fill)
    block[2 : 2 + inner, 2 : 2 + inner] = np.maximum(class_pattern(label, inner, contrast), fill)
    if marked:
        block[0, :] = block[-1, :] = block[:, 0] = block[:, -1] = marked
    region = frame[top : top + size, left : left + size]
    np.maximum(region, block, out=region)


def patch_label_from_pixels(patch_pixels: np.ndarray, num_classes: int) -> int:
    """Threshold classifier: which quadrant centre of the interior is bright."""
    size = patch_pixels.shape[0]
    inner = patch_pixels[2 : size - 2, 2 : size - 2]
    q = inner.shape[0] // 4
    centres = [(q, q), (q, 3 * q), (3 * q, q), (3 * q, 3 * q)][:num_classes]
    values = [inner[r, c] for r, c in centres]
    return int(np.argmax(values))


def grid_to_screen(u: float, v: float, grid: int, screen: ScreenGeometry):
    """Continuous grid coordinates to fixation pixel coordinates on ``screen``."""
    x = u * screen.width_px / grid - 0.5
    y = v * screen.height_px / grid - 0.5
    return float(np.clip(x, 0, screen.width_px - 1e-6)), float(np.clip(y, 0, screen.height_px - 1e-6))


def _fixations_on(rng, centre_rc, spec: SynthTaskSpec, frame_id: int, count: int) -> List[Fixation]:
    out = []
    for _ in range(count):
        v = centre_rc[0] + rng.normal(0, spec.fixation_jitter)
        u = centre_rc[1] + rng.normal(0, spec.fixation_jitter)
        x, y = grid_to_screen(u, v, spec.grid, spec.screen)
        out.append(Fixation(frame_id, x, y, 1.0))
    return out


# --- BC / BCO dataset ---------------------------------------------------------------


@dataclass
class BCDataset:
    frames: np.ndarray  # [N, 4, G, G] float32 in [0, 1]
    actions: np.ndarray  # [N] int
    fixations: List[Fixation]  # frame_id = sample index
    patch_boxes: np.ndarray  # [N, 4] top, left, bottom, right of the marked patch
    num_classes: int
    screen: ScreenGeometry

    def __len__(self):
        return len(self.actions)


def _slot_origin(rng, slot: int, spec: SynthTaskSpec, margin: int):
    r, c = divmod(slot, spec.slot_grid)
    s = spec.slot_size
    room = s - spec.patch - 2 * margin
    top = r * s + margin + int(rng.integers(0, room + 1))
    left = c * s + margin + int(rng.integers(0, room + 1))
    return top, left


def gen_bc_dataset(spec: SynthTaskSpec, n_samples: int, seed: Optional[int] = None) -> BCDataset:
    """Generate ``n_samples`` labelled frame stacks with fixations on the marked patch."""
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    g, p = spec.grid, spec.patch
    drift = int(np.ceil(3 * spec.distractor_motion))
    margin = min(drift, (spec.slot_size - p) // 2)
    frames = np.zeros((n_samples, 4, g, g), dtype=np.float32)
    actions = np.zeros(n_samples, dtype=np.int64)
    boxes = np.zeros((n_samples, 4), dtype=np.int64)
    fixations: List[Fixation] = []
    for i in range(n_samples):
        label = int(rng.integers(0, spec.num_classes))
        slots = rng.permutation(spec.slot_grid**2)
        top, left = _slot_origin(rng, int(slots[0]), spec, margin)
        background = spec.noise * rng.random((g, g))
        distractors = []
        for slot in slots[1 : 1 + spec.distractors]:
            d_top, d_left = _slot_origin(rng, int(slot), spec, margin)
            angle = rng.uniform(0, 2 * np.pi)
            step = spec.distractor_motion * np.array([np.sin(angle), np.cos(angle)])
            distractors.append((d_top, d_left, step, int(rng.integers(0, spec.num_classes))))
        for t in range(4):
            frame = background.copy()
            for d_top, d_left, step, d_label in distractors:
                dt, dl = np.rint(np.array([d_top, d_left]) + (t - 1.5) * step).astype(int)
                dt = int(np.clip(dt, 0, g - p))
                dl = int(np.clip(dl, 0, g - p))
                draw_patch(frame, dt, dl, p, d_label, spec.contrast, marked=0.0, fill=spec.distractor_fill * spec.contrast)
            draw_patch(frame, top, left, p, label, spec.contrast, marked=spec.marker * spec.contrast)
            frames[i, t] = frame
        actions[i] = label
        boxes[i] = (top, left, top + p, left + p)
        centre = (top + p / 2.0, left + p / 2.0)
        fixations.extend(_fixations_on(rng, centre, spec, i, spec.fixations_per_state))
    return BCDataset(frames, actions, fixations, boxes, spec.num_classes, spec.screen)


# --- T-REX dataset ------------------------------------------------------------------


@dataclass
class RawTrajectory:
    frames: np.ndarray  # [T_raw, G, G]
    fixations: List[Fixation]  # frame_id = raw frame index
    rewards: np.ndarray  # per frame-stack latent reward
    name: str = ""

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))


COIN = 6
MAX_SCHEDULE_DRAWS = 100


def draw_coin(frame: np.ndarray, top: int, left: int, contrast: float) -> None:
    coin = np.zeros((COIN, COIN))
    coin[COIN // 2 - 1 : COIN // 2 + 1, :] = contrast
    coin[:, COIN // 2 - 1 : COIN // 2 + 1] = contrast
    region = frame[top : top + COIN, left : left + COIN]
    np.maximum(region, coin, out=region)


def gen_trex_dataset(
    spec: SynthTaskSpec,
    n_trajectories: int,
    length: int,
    reward_schedules: Optional[Sequence[Sequence[int]]] = None,
    max_coins: int = 3,
    seed: Optional[int] = None,
) -> List[RawTrajectory]:
    """Generate trajectories of ``length`` frame stacks (``4 * (length + 3)`` raw frames).

    Trajectory ``i`` shows each of ``max_coins`` coins with probability
    ``(i + 0.5) / n_trajectories``, so quality and return rise with ``i``.
    ``reward_schedules`` fixes the per-stack coin counts instead. Returns
    must come out pairwise distinct.
    """
    if n_trajectories < 2:
        raise ConfigurationError(f"need at least 2 trajectories, got {n_trajectories}")
    if length < 1:
        raise ConfigurationError(f"length must be >= 1, got {length}")
    spec.validate()
    if not 1 <= max_coins <= spec.slot_grid**2:
        raise ConfigurationError(f"max_coins must lie in [1, {spec.slot_grid**2}] (one coin per slot), got {max_coins}")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    g = spec.grid
    n_groups = length + 3
    if reward_schedules is not None:
        if len(reward_schedules) != n_trajectories:
            raise ConfigurationError(f"{len(reward_schedules)} reward schedules for {n_trajectories} trajectories")
        schedules = [np.asarray(s, dtype=np.int64) for s in reward_schedules]
        for s in schedules:
            if s.shape != (length,) or s.min() < 0 or s.max() > max_coins:
                raise ConfigurationError(f"reward schedule must hold {length} counts in [0, {max_coins}]")
    else:
        # redraw until returns are distinct; short or crowded specs may never get there
        for _ in range(MAX_SCHEDULE_DRAWS):
            schedules = [
                rng.binomial(max_coins, (i + 0.5) / n_trajectories, size=length).astype(np.int64)
                for i in range(n_trajectories)
            ]
            if len({int(s.sum()) for s in schedules}) == n_trajectories:
                break
    returns = [int(s.sum()) for s in schedules]
    if len(set(returns)) != len(returns):
        raise ConfigurationError(f"trajectory returns are not distinct: {returns}")

    out = []
    for i, schedule in enumerate(schedules):
        # group k+3 is the newest group of stack k and carries its reward
        group_coins = np.concatenate([rng.integers(0, max_coins + 1, size=3), schedule])
        frames = np.zeros((4 * n_groups, g, g), dtype=np.float32)
        fixations = []
        for k in range(n_groups):
            # fresh noise per group: a fixed texture would identify the
            # trajectory, and with it the return, without looking at coins
            background = spec.noise * rng.random((g, g))
            cells = rng.permutation(spec.slot_grid**2)
            coins = []
            for cell in cells[: group_coins[k]]:
                r, c = divmod(int(cell), spec.slot_grid)
                s = spec.slot_size
                coins.append(
                    (r * s + int(rng.integers(0, s - COIN + 1)), c * s + int(rng.integers(0, s - COIN + 1)))
                )
            bars = []
            for _ in range(spec.distractors):
                bars.append(
                    (
                        int(rng.integers(0, g - spec.patch)),
                        int(rng.integers(0, g - 3)),
                        spec.distractor_motion * rng.choice([-1.0, 1.0]),
                    )
                )
            for t in range(4):
                frame = background.copy()
                for b_top, b_left, step in bars:
                    left = int(np.clip(np.rint(b_left + t * step), 0, g - 3))
                    bar = frame[b_top : b_top + spec.patch, left : left + 3]
                    np.maximum(bar, 0.6 * spec.contrast, out=bar)
                for c_top, c_left in coins:
                    draw_coin(frame, c_top, c_left, spec.contrast)
                idx = 4 * k + t
                frames[idx] = frame
                for c_top, c_left in coins:
                    fixations.extend(
                        _fixations_on(rng, (c_top + COIN / 2, c_left + COIN / 2), spec, idx, spec.fixations_per_state)
                    )
        out.append(RawTrajectory(frames, fixations, schedule.astype(np.float64), name=f"traj{i:03d}"))
    return out
