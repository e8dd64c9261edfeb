"""Frame-level descriptors for the interaction and role classifiers.

Four ingredients: HSV color histograms compared between the hand, non-hand and
background regions; dense optical-flow magnitude/direction histograms compared
between the same regions; a HOG shape descriptor of the box crop; and, for
role classification only, the hand-size change over a ten-frame window.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from .corpus import Box, Corpus, HandInstance, Task
from .masks import HandMask, MaskProvider

log = logging.getLogger(__name__)

REGION_NAMES = ("hand", "non_hand", "background")
CHANNEL_NAMES = ("h", "s", "v")
# region pairs differenced in assemble(): hand-non_hand, hand-background, non_hand-background
REGION_PAIRS = ((0, 1), (0, 2), (1, 2))


class FeatureError(ValueError):
    """A descriptor could not be computed for the given geometry or inputs."""


@dataclass(frozen=True)
class FeatureConfig:
    """All tunable descriptor parameters, with the defaults used throughout.

    The Farneback parameters not covered by the pipeline description
    (poly_n, poly_sigma) follow common practice and are pinned here.
    """

    hsv_bins: int = 16
    mag_bins: int = 16          # plus one overflow bin for magnitudes >= mag_max
    mag_max: float = 16.0
    dir_bins: int = 18          # 20 degree bins, magnitude weighted
    hog_resize: int = 64
    hog_cell: int = 8
    hog_block: int = 2
    hog_bins: int = 9
    hog_clip: float = 0.2
    size_window: int = 10
    bbox_dilation: float = 0.5  # background excludes the bbox dilated by this per side
    flow_pyr_scale: float = 0.5
    flow_levels: int = 3
    flow_winsize: int = 15
    flow_iterations: int = 3
    flow_poly_n: int = 5
    flow_poly_sigma: float = 1.2

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RegionSet:
    """Disjoint pixel sets as boolean frame-sized masks.

    hand | non_hand covers exactly the bbox; background is everything outside
    the dilated bbox. The ring between bbox and its dilation belongs to none.
    """

    hand: np.ndarray
    non_hand: np.ndarray
    background: np.ndarray

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.hand, self.non_hand, self.background)


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-layout descriptor; ``layout`` maps segment name -> (start, stop)."""

    values: np.ndarray
    layout: tuple[tuple[str, int, int], ...]
    mode: str
    signature: str

    def segment(self, name: str) -> np.ndarray:
        for seg, start, stop in self.layout:
            if seg == name:
                return self.values[start:stop]
        raise KeyError(name)


def layout_for(mode: str, config: FeatureConfig) -> tuple[tuple[str, int, int], ...]:
    """Segment table for a mode; identical for training and prediction."""
    n_pairs = len(REGION_PAIRS)
    hog_cells = config.hog_resize // config.hog_cell
    hog_len = (hog_cells - config.hog_block + 1) ** 2 * config.hog_block ** 2 * config.hog_bins
    sizes = [
        ("hsv_diff", len(CHANNEL_NAMES) * n_pairs * config.hsv_bins),
        ("flow_mag_diff", n_pairs * (config.mag_bins + 1)),
        ("flow_dir_diff", n_pairs * config.dir_bins),
        ("hog", hog_len),
    ]
    if mode == "role":
        sizes.append(("size_change", config.size_window - 1))
    layout, offset = [], 0
    for name, size in sizes:
        layout.append((name, offset, offset + size))
        offset += size
    return tuple(layout)


def layout_signature(mode: str, config: FeatureConfig) -> str:
    payload = json.dumps({"mode": mode, "layout": layout_for(mode, config),
                          "config": config.config_hash()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def regions_for_bbox(frame_shape: tuple[int, int], bbox: Box, hand_bitmap: np.ndarray,
                     dilation: float = 0.5) -> RegionSet:
    """Partition a frame into hand / non-hand / background sets for one bbox."""
    height, width = frame_shape[:2]
    x, y, w, h = bbox
    hand = np.zeros((height, width), dtype=bool)
    hand[y:y + h, x:x + w] = hand_bitmap
    box = np.zeros((height, width), dtype=bool)
    box[y:y + h, x:x + w] = True
    non_hand = box & ~hand
    dx, dy = int(round(w * dilation)), int(round(h * dilation))
    x0, y0 = max(x - dx, 0), max(y - dy, 0)
    x1, y1 = min(x + w + dx, width), min(y + h + dy, height)
    background = np.ones((height, width), dtype=bool)
    background[y0:y1, x0:x1] = False
    return RegionSet(hand, non_hand, background)


def _region_histograms(values_per_channel: Sequence[np.ndarray], regions: RegionSet,
                       bins: int, ranges: Sequence[tuple[float, float]]) -> np.ndarray:
    out = np.zeros((len(values_per_channel), len(REGION_NAMES), bins))
    for ci, channel in enumerate(values_per_channel):
        for ri, region in enumerate(regions.as_tuple()):
            vals = channel[region]
            if vals.size == 0:
                log.warning("empty %s region; histogram set to uniform", REGION_NAMES[ri])
                out[ci, ri] = 1.0 / bins
                continue
            hist, _ = np.histogram(vals, bins=bins, range=ranges[ci])
            total = hist.sum()
            out[ci, ri] = hist / total if total > 0 else 1.0 / bins
    return out


def hsv_region_histograms(frame: np.ndarray, regions: RegionSet,
                          bins: int = 16) -> np.ndarray:
    """Per-channel, per-region HSV histograms, L1-normalized.

    Returns an array of shape (3 channels, 3 regions, bins); channel order is
    (h, s, v) and region order (hand, non_hand, background). Hue is binned
    over [0, 360) degrees, saturation and value over [0, 1]. An empty region
    yields a uniform histogram and a logged warning.
    """
    hsv = cv2.cvtColor(frame.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)
    channels = [hsv[..., 0], hsv[..., 1], hsv[..., 2]]
    return _region_histograms(channels, regions, bins, [(0, 360), (0, 1), (0, 1)])


def dense_flow(prev_frame: Optional[np.ndarray], frame: np.ndarray,
               config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Farneback dense optical flow between consecutive frames, (h, w, 2).

    The first frame of a task (``prev_frame is None``) and byte-identical
    frame pairs map to the exact zero field; the solver is otherwise free to
    return sub-1e-2 noise on static scenes, which would break the zero-motion
    convention downstream.
    """
    if prev_frame is None or np.array_equal(prev_frame, frame):
        return np.zeros(frame.shape[:2] + (2,), dtype=np.float32)
    if prev_frame.shape != frame.shape:
        raise FeatureError(f"frame shapes differ: {prev_frame.shape} vs {frame.shape}")
    prev_gray = cv2.cvtColor(prev_frame, cv2.COLOR_RGB2GRAY)
    gray = cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
    return cv2.calcOpticalFlowFarneback(
        prev_gray, gray, None,
        config.flow_pyr_scale, config.flow_levels, config.flow_winsize,
        config.flow_iterations, config.flow_poly_n, config.flow_poly_sigma, 0)


def flow_region_histograms(flow: np.ndarray, regions: RegionSet,
                           config: FeatureConfig = FeatureConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and direction histograms per region, L1-normalized.

    Magnitudes are binned over [0, mag_max) with one overflow bin appended.
    Directions use ``dir_bins`` equal bins over [0, 360), weighted by
    magnitude; a region with no moving pixel gets the uniform histogram
    (direction is undefined at zero magnitude).
    """
    dx, dy = flow[..., 0], flow[..., 1]
    mag = np.hypot(dx, dy)
    ang = np.degrees(np.arctan2(dy, dx)) % 360.0
    n_regions = len(REGION_NAMES)
    mag_hists = np.zeros((n_regions, config.mag_bins + 1))
    dir_hists = np.zeros((n_regions, config.dir_bins))
    for ri, region in enumerate(regions.as_tuple()):
        m = mag[region]
        if m.size == 0:
            log.warning("empty %s region; flow histograms set to uniform", REGION_NAMES[ri])
            mag_hists[ri] = 1.0 / (config.mag_bins + 1)
            dir_hists[ri] = 1.0 / config.dir_bins
            continue
        inside = m[m < config.mag_max]
        hist, _ = np.histogram(inside, bins=config.mag_bins, range=(0, config.mag_max))
        mag_hists[ri, :config.mag_bins] = hist
        mag_hists[ri, config.mag_bins] = m.size - inside.size
        mag_hists[ri] /= m.size
        moving = m > 0
        if not moving.any():
            dir_hists[ri] = 1.0 / config.dir_bins
        else:
            a = ang[region][moving]
            w = m[moving]
            hist, _ = np.histogram(a, bins=config.dir_bins, range=(0, 360), weights=w)
            dir_hists[ri] = hist / w.sum()
    return mag_hists, dir_hists


def _cell_histograms(mag: np.ndarray, ang: np.ndarray, cell: int, bins: int) -> np.ndarray:
    """Orientation histograms per cell with linear interpolation between bins."""
    size = mag.shape[0]
    n_cells = size // cell
    bin_width = 180.0 / bins
    pos = ang / bin_width - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo_wrapped = lo % bins
    hi_wrapped = (lo + 1) % bins
    rows, cols = np.mgrid[0:size, 0:size]
    cell_idx = (rows // cell) * n_cells + (cols // cell)
    flat = np.zeros(n_cells * n_cells * bins)
    np.add.at(flat, cell_idx.ravel() * bins + lo_wrapped.ravel(), (mag * (1 - frac)).ravel())
    np.add.at(flat, cell_idx.ravel() * bins + hi_wrapped.ravel(), (mag * frac).ravel())
    return flat.reshape(n_cells, n_cells, bins)


def hog_descriptor(frame: np.ndarray, bbox: Box,
                   config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """HOG of the box crop: unsigned orientations, L2-Hys block normalization.

    The crop is resized to ``hog_resize`` squared grayscale; orientations are
    edge orientations in [0, 180) (a vertical step edge votes at 90 degrees).
    With the defaults the descriptor has (64/8-1)^2 * 2*2*9 = 1764 entries.
    """
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise FeatureError(f"degenerate bbox {bbox}")
    crop = frame[y:y + h, x:x + w]
    if crop.ndim == 3:
        crop = cv2.cvtColor(crop, cv2.COLOR_RGB2GRAY)
    crop = cv2.resize(crop.astype(np.float64), (config.hog_resize, config.hog_resize),
                      interpolation=cv2.INTER_LINEAR)
    gy, gx = np.gradient(crop)
    mag = np.hypot(gx, gy)
    ang = (np.degrees(np.arctan2(gy, gx)) + 90.0) % 180.0
    cells = _cell_histograms(mag, ang, config.hog_cell, config.hog_bins)
    n_cells = config.hog_resize // config.hog_cell
    block = config.hog_block
    out = []
    for by in range(n_cells - block + 1):
        for bx in range(n_cells - block + 1):
            v = cells[by:by + block, bx:bx + block].ravel()
            norm = np.sqrt((v ** 2).sum() + 1e-12)
            v = v / norm
            v = np.minimum(v, config.hog_clip)
            norm = np.sqrt((v ** 2).sum() + 1e-12)
            out.append(v / norm)
    return np.concatenate(out)


def hand_size_change(mask_sequence: Sequence[HandMask | int], bbox: Box,
                     window: int = 10) -> np.ndarray:
    """Frame-to-frame hand-area change over a window, normalized by bbox area.

    ``mask_sequence`` holds up to ``window`` consecutive same-hand masks (or
    raw pixel areas); shorter sequences are padded by repeating the final
    element, so a hand that leaves the task tail shows zero trailing change.
    """
    if not mask_sequence:
        raise FeatureError("empty mask sequence")
    areas = [m.area if isinstance(m, HandMask) else int(m) for m in mask_sequence]
    areas = areas[:window]
    areas.extend([areas[-1]] * (window - len(areas)))
    x, y, w, h = bbox
    bbox_area = w * h
    if bbox_area == 0:
        return np.zeros(window - 1)
    diffs = np.diff(np.asarray(areas, dtype=np.float64))
    return diffs / bbox_area


def assemble(mode: str, hsv_hists: np.ndarray, mag_hists: np.ndarray,
             dir_hists: np.ndarray, hog: np.ndarray,
             size_change: Optional[np.ndarray] = None,
             config: FeatureConfig = FeatureConfig()) -> FeatureVector:
    """Concatenate region-difference histograms, HOG and (role) size change.

    Histogram differences are element-wise subtractions of the L1-normalized
    histograms for the region pairs (hand-non_hand, hand-background,
    non_hand-background), preserving sign.
    """
    parts = []
    for ci in range(hsv_hists.shape[0]):
        for a, b in REGION_PAIRS:
            parts.append(hsv_hists[ci, a] - hsv_hists[ci, b])
    for a, b in REGION_PAIRS:
        parts.append(mag_hists[a] - mag_hists[b])
    for a, b in REGION_PAIRS:
        parts.append(dir_hists[a] - dir_hists[b])
    parts.append(np.asarray(hog, dtype=np.float64))
    if mode == "role":
        if size_change is None:
            raise FeatureError("role mode requires the size_change component")
        parts.append(np.asarray(size_change, dtype=np.float64))
    elif mode != "interaction":
        raise FeatureError(f"unknown mode {mode!r}")
    values = np.concatenate(parts)
    layout = layout_for(mode, config)
    if layout[-1][2] != values.size:
        raise FeatureError(
            f"assembled length {values.size} does not match layout {layout[-1][2]}")
    if not np.all(np.isfinite(values)):
        raise FeatureError("non-finite value in assembled feature vector")
    return FeatureVector(values, layout, mode, layout_signature(mode, config))


def load_frame(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class TaskFeatureExtractor:
    """Streams a task's frames once and produces vectors for its instances.

    Flow fields are computed per consecutive frame pair and shared by both
    hands; role mode additionally tracks per-side mask areas so the forward
    ten-frame size window can be assembled after the pass.
    """

    def __init__(self, corpus: Corpus, task: Task, config: FeatureConfig = FeatureConfig(),
                 mask_provider: Optional[MaskProvider] = None):
        self.corpus = corpus
        self.task = task
        self.config = config
        self.mask_provider = mask_provider or MaskProvider(task)

    def extract(self, instances: Sequence[HandInstance], mode: str) -> list[Optional[FeatureVector]]:
        """Feature vectors aligned with ``instances`` (None where no detection)."""
        cfg = self.config
        with_box = [inst for inst in instances if inst.bbox is not None]
        by_frame: dict[int, list[HandInstance]] = {}
        for inst in with_box:
            by_frame.setdefault(inst.frame_index, []).append(inst)
        if not with_box:
            return [None] * len(instances)

        # role mode needs mask areas up to size_window-1 frames past each instance
        needed = set(by_frame)
        area_frames: set[int] = set()
        if mode == "role":
            for inst in with_box:
                for k in range(1, cfg.size_window):
                    area_frames.add(inst.frame_index + k)
            area_frames &= set(range(self.task.frame_count))
            needed |= area_frames

        partial: dict[tuple[int, str], dict] = {}
        areas: dict[tuple[int, str], int] = {}
        last_frame: Optional[np.ndarray] = None
        last_index: Optional[int] = None
        lookup_box = {(i.frame_index, i.hand_side): i.bbox for i in with_box}
        for frame_index in sorted(needed):
            frame = load_frame(self.task.frame_path(frame_index))
            if frame_index in by_frame:
                prev = last_frame if last_index == frame_index - 1 else (
                    load_frame(self.task.frame_path(frame_index - 1)) if frame_index > 0 else None)
                flow = dense_flow(prev, frame, cfg)
                for inst in by_frame[frame_index]:
                    mask = self.mask_provider.mask_for(frame, frame_index, inst.hand_side, inst.bbox)
                    regions = regions_for_bbox(frame.shape[:2], inst.bbox, mask.bitmap,
                                               cfg.bbox_dilation)
                    mag_h, dir_h = flow_region_histograms(flow, regions, cfg)
                    partial[(frame_index, inst.hand_side)] = {
                        "hsv": hsv_region_histograms(frame, regions, cfg.hsv_bins),
                        "mag": mag_h,
                        "dir": dir_h,
                        "hog": hog_descriptor(frame, inst.bbox, cfg),
                    }
                    areas[(frame_index, inst.hand_side)] = mask.area
            if mode == "role" and frame_index in area_frames:
                for side in ("left", "right"):
                    key = (frame_index, side)
                    if key in areas or key not in lookup_box:
                        continue
                    mask = self.mask_provider.mask_for(frame, frame_index, side, lookup_box[key])
                    areas[key] = mask.area
            last_frame, last_index = frame, frame_index

        vectors: list[Optional[FeatureVector]] = []
        for inst in instances:
            if inst.bbox is None:
                vectors.append(None)
                continue
            comp = partial[(inst.frame_index, inst.hand_side)]
            size_change = None
            if mode == "role":
                seq = [areas[(inst.frame_index, inst.hand_side)]]
                for k in range(1, cfg.size_window):
                    key = (inst.frame_index + k, inst.hand_side)
                    if key in areas:
                        seq.append(areas[key])
                    else:
                        break  # hand leaves or task ends: pad by repetition
                size_change = hand_size_change(seq, inst.bbox, cfg.size_window)
            vectors.append(assemble(mode, comp["hsv"], comp["mag"], comp["dir"],
                                    comp["hog"], size_change, cfg))
        return vectors


# Optional on-disk feature cache, one npz per (task, mode), keyed by config hash.

CACHE_VERSION = 1


def cache_path(cache_dir: Path, task_id: str, mode: str) -> Path:
    return Path(cache_dir) / f"{task_id}_{mode}.npz"


def save_cache(path: Path, task: Task, mode: str, config: FeatureConfig,
               instances: Sequence[HandInstance],
               vectors: Sequence[Optional[FeatureVector]]) -> None:
    rows = [(inst, vec) for inst, vec in zip(instances, vectors) if vec is not None]
    values = np.stack([vec.values for _, vec in rows]) if rows else np.zeros((0, 0))
    meta = {
        "version": CACHE_VERSION,
        "task": task.id,
        "mode": mode,
        "config_hash": config.config_hash(),
        "signature": layout_signature(mode, config),
        "layout": layout_for(mode, config),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path, values=values,
        frames=np.array([inst.frame_index for inst, _ in rows], dtype=np.int64),
        sides=np.array([inst.hand_side for inst, _ in rows]),
        meta=json.dumps(meta, sort_keys=True))


def load_cache(path: Path, mode: str,
               config: FeatureConfig) -> Optional[dict[tuple[int, str], np.ndarray]]:
    """Cached vectors keyed by (frame, side), or None when stale or absent."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if (meta.get("version") != CACHE_VERSION or meta.get("mode") != mode
                or meta.get("config_hash") != config.config_hash()):
            return None
        values, frames, sides = data["values"], data["frames"], data["sides"]
    return {(int(f), str(s)): values[i] for i, (f, s) in enumerate(zip(frames, sides))}


def vectors_from_cache(cache: dict[tuple[int, str], np.ndarray],
                       instances: Sequence[HandInstance], mode: str,
                       config: FeatureConfig) -> Optional[list[Optional[FeatureVector]]]:
    """Rehydrate FeatureVectors for instances, or None if any row is missing."""
    layout = layout_for(mode, config)
    signature = layout_signature(mode, config)
    out: list[Optional[FeatureVector]] = []
    for inst in instances:
        if inst.bbox is None:
            out.append(None)
            continue
        row = cache.get((inst.frame_index, inst.hand_side))
        if row is None:
            return None
        out.append(FeatureVector(row, layout, mode, signature))
    return out
