"""Fixation logs to gaze heatmaps, grid resampling, and the motion baseline."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from itertools import groupby
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, FormatError, ParseError, ValidationError

# Gaussians are cut off beyond this many standard deviations.
TRUNCATE_SIGMAS = 4.0


@dataclass(frozen=True)
class ScreenGeometry:
    width_px: float
    height_px: float
    width_deg: float
    height_deg: float

    def __post_init__(self):
        for name in ("width_px", "height_px", "width_deg", "height_deg"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValidationError(f"screen geometry field {name} must be positive, got {value!r}")

    @property
    def px_per_degree_x(self) -> float:
        return self.width_px / self.width_deg

    @property
    def px_per_degree_y(self) -> float:
        return self.height_px / self.height_deg

    @classmethod
    def parse(cls, text: str) -> "ScreenGeometry":
        """Parse ``WxH:WDEGxHDEG``, e.g. ``1280x840:44.6x28.5``."""
        try:
            px, deg = text.split(":")
            w, h = (float(v) for v in px.lower().split("x"))
            wd, hd = (float(v) for v in deg.lower().split("x"))
        except ValueError as exc:
            raise ParseError(f"bad screen geometry {text!r}; expected WxH:WDEGxHDEG") from exc
        return cls(w, h, wd, hd)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "width_deg": self.width_deg,
            "height_deg": self.height_deg,
        }


# Atari-HEAD recording setup: 1280x840 px spanning 44.6 x 28.5 visual degrees.
ATARI_HEAD_SCREEN = ScreenGeometry(1280, 840, 44.6, 28.5)


@dataclass(frozen=True)
class Fixation:
    frame_id: int
    x: float
    y: float
    weight: float = 1.0


@dataclass
class GazeHeatmap:
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ContractError(f"heatmap grid must be 2-d, got shape {self.grid.shape}")

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.grid.shape

    @classmethod
    def zeros(cls, resolution) -> "GazeHeatmap":
        return cls(np.zeros(tuple(resolution)))


@dataclass
class FrameStack:
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] != 4:
            raise ContractError(f"frame stack must be 4 x H x W, got shape {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0 or self.frames.max() > 1):
            raise ContractError("frame stack pixel values must lie in [0, 1]")


def _check_resolution(res) -> Tuple[int, int]:
    try:
        h, w = (int(v) for v in res)
    except (TypeError, ValueError) as exc:
        raise ContractError(f"resolution must be a pair (h, w), got {res!r}") from exc
    if h < 1 or w < 1:
        raise ContractError(f"resolution must be at least 1x1, got {h}x{w}")
    return h, w


def max_normalize(grid: np.ndarray) -> np.ndarray:
    peak = grid.max() if grid.size else 0.0
    return grid / peak if peak > 0 else np.zeros_like(grid)


# --- ingestion ----------------------------------------------------------------------


def parse_fixation_log(path, geometry: ScreenGeometry) -> List[Fixation]:
    """Read a ``frame_id,x,y[,weight]`` CSV into fixations sorted by frame.

    Coordinates are screen pixels with the origin at the top-left and must
    satisfy ``0 <= x < width_px`` and ``0 <= y < height_px``. Row numbers in
    errors are 1-based file lines (the header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{os.fspath(path)}: missing header 'frame_id,x,y[,weight]'")
        header = [h.strip() for h in header]
        if header not in (["frame_id", "x", "y"], ["frame_id", "x", "y", "weight"]):
            raise FormatError(f"{os.fspath(path)}: bad header {header}; expected frame_id,x,y[,weight]")
        has_weight = len(header) == 4

        fixations, bad_rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{os.fspath(path)}: row {line_no} has {len(row)} cells, expected {len(header)}",
                    row=line_no,
                )
            values = []
            for col, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{os.fspath(path)}: row {line_no}, column {header[col]}: non-numeric value {cell!r}",
                        row=line_no,
                        column=header[col],
                    ) from None
            frame_id, x, y = values[:3]
            weight = values[3] if has_weight else 1.0
            if (
                frame_id < 0
                or frame_id != int(frame_id)
                or not (0 <= x < geometry.width_px)
                or not (0 <= y < geometry.height_px)
                or not (weight >= 0)
            ):
                bad_rows.append(line_no)
                continue
            fixations.append(Fixation(int(frame_id), x, y, weight))

    if bad_rows:
        raise ValidationError(
            f"{os.fspath(path)}: fixations outside the {geometry.width_px:g}x{geometry.height_px:g} "
            f"screen or with invalid frame/weight on rows {bad_rows}",
            rows=bad_rows,
        )
    fixations.sort(key=lambda f: f.frame_id)
    return fixations


def group_by_frame(fixations: Iterable[Fixation]) -> Dict[int, List[Fixation]]:
    ordered = sorted(fixations, key=lambda f: f.frame_id)
    return {fid: list(group) for fid, group in groupby(ordered, key=lambda f: f.frame_id)}


def write_fixation_log(path, fixations: Sequence[Fixation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "x", "y", "weight"])
        for f in fixations:
            writer.writerow([f.frame_id, repr(float(f.x)), repr(float(f.y)), repr(float(f.weight))])


# --- rendering ----------------------------------------------------------------------


def render_heatmap(
    fixations: Sequence[Fixation],
    geometry: ScreenGeometry,
    out_resolution,
    normalization: str = "max",
) -> GazeHeatmap:
    """Blur fixations with a one-visual-degree Gaussian on an output grid.

    The Gaussian has sigma ``px_per_degree`` along each screen axis and is
    evaluated at output cell centres. A fixation at pixel ``(x, y)`` sits at
    the continuous screen point ``(x + 0.5, y + 0.5)``. The weighted sum is
    divided by its maximum (or by its sum with ``normalization="sum"``); no
    fixations gives an all-zero map.
    """
    h, w = _check_resolution(out_resolution)
    if normalization not in ("max", "sum"):
        raise ContractError(f"normalization must be 'max' or 'sum', got {normalization!r}")
    cell_w = geometry.width_px / w
    cell_h = geometry.height_px / h
    # sigma measured in output cells
    sx = geometry.px_per_degree_x / cell_w
    sy = geometry.px_per_degree_y / cell_h
    centers_x = np.arange(w) + 0.5
    centers_y = np.arange(h) + 0.5

    grid = np.zeros((h, w))
    for fix in fixations:
        if fix.weight == 0:
            continue
        fx = (fix.x + 0.5) / cell_w
        fy = (fix.y + 0.5) / cell_h
        c0 = max(int(np.floor(fx - TRUNCATE_SIGMAS * sx)), 0)
        c1 = min(int(np.ceil(fx + TRUNCATE_SIGMAS * sx)) + 1, w)
        r0 = max(int(np.floor(fy - TRUNCATE_SIGMAS * sy)), 0)
        r1 = min(int(np.ceil(fy + TRUNCATE_SIGMAS * sy)) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        dx = (centers_x[c0:c1] - fx) / sx
        dy = (centers_y[r0:r1] - fy) / sy
        q = dy[:, None] ** 2 + dx[None, :] ** 2
        blob = np.where(q <= TRUNCATE_SIGMAS**2, np.exp(-0.5 * q), 0.0)
        grid[r0:r1, c0:c1] += fix.weight * blob

    if normalization == "sum":
        total = grid.sum()
        return GazeHeatmap(grid / total if total > 0 else grid)
    return GazeHeatmap(max_normalize(grid))


# --- resampling ---------------------------------------------------------------------


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row i holds the fraction of destination cell i covered by each source cell."""
    edges = np.linspace(0.0, src, dst + 1)
    lo, hi = edges[:-1, None], edges[1:, None]
    k = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, k + 1) - np.maximum(lo, k), 0.0, None)
    return overlap / (src / dst)


def resample_heatmap(heatmap: GazeHeatmap, target) -> GazeHeatmap:
    """Area-weighted average pooling onto ``target`` then re-max-normalize."""
    th, tw = _check_resolution(target)
    sh, sw = heatmap.resolution
    if (th, tw) == (sh, sw):
        return GazeHeatmap(heatmap.grid.copy())
    out = _area_matrix(sh, th) @ heatmap.grid @ _area_matrix(sw, tw).T
    return GazeHeatmap(max_normalize(np.clip(out, 0.0, None)))


def resample_grid(grid: np.ndarray, target) -> np.ndarray:
    return resample_heatmap(GazeHeatmap(grid), target).grid


# --- motion baseline ----------------------------------------------------------------


def motion_heatmap(stack: FrameStack) -> GazeHeatmap:
    """``|last - first|`` frame difference, min-max normalized to [0, 1]."""
    diff = np.abs(stack.frames[3] - stack.frames[0])
    lo, hi = diff.min(), diff.max()
    if hi == 0:
        return GazeHeatmap(np.zeros_like(diff))
    if hi == lo:
        return GazeHeatmap(np.ones_like(diff))
    return GazeHeatmap((diff - lo) / (hi - lo))


# --- export / import ----------------------------------------------------------------


def pgm_bytes(grid: np.ndarray) -> bytes:
    h, w = grid.shape
    pixels = np.floor(255.0 * np.clip(grid, 0.0, 1.0) + 0.5).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM back to values in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise FormatError(f"{os.fspath(path)}: only 8-bit binary PGM (P5, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0


def export_heatmap(heatmap: GazeHeatmap, path, fmt: str = "pgm") -> None:
    fmt = fmt.lower()
    if fmt == "pgm":
        payload = pgm_bytes(heatmap.grid)
        with open(path, "wb") as fh:
            fh.write(payload)
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for row in heatmap.grid:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ContractError(f"unknown heatmap format {fmt!r}; use pgm or csv")


def load_heatmap_csv(path) -> GazeHeatmap:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError(f"{os.fspath(path)}: non-numeric value on row {line_no}", row=line_no) from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError(f"{os.fspath(path)}: heatmap CSV must be a non-empty rectangular grid")
    return GazeHeatmap(np.array(rows))
