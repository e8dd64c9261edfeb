"""Hand/non-hand pixel partitions inside bounding boxes.

Two sources: precomputed mask files (one grayscale PNG per frame and side) or
an HSV skin-band heuristic with largest-connected-component filtering. The
feature code only ever sees the binary partition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage

from .corpus import Box, Task

log = logging.getLogger(__name__)

# 4-connectivity for the component filter
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class MaskError(ValueError):
    """A mask file could not be used for the requested frame."""


@dataclass(frozen=True)
class HandMask:
    """Boolean hand bitmap aligned to a bounding box (bitmap shape == (h, w))."""

    bbox: Box
    bitmap: np.ndarray

    def __post_init__(self) -> None:
        x, y, w, h = self.bbox
        if self.bitmap.shape != (h, w):
            raise MaskError(f"bitmap shape {self.bitmap.shape} does not match bbox {self.bbox}")

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass(frozen=True)
class SkinBand:
    """HSV band treated as skin. Hue in degrees, saturation/value in [0, 1]."""

    hue: tuple[float, float] = (0.0, 50.0)
    saturation: tuple[float, float] = (0.15, 0.9)
    value: tuple[float, float] = (0.2, 1.0)


def ingest_mask(mask_file: Path | str, bbox: Box,
                frame_size: tuple[int, int]) -> HandMask:
    """Read an 8-bit grayscale mask aligned to the frame and crop it to bbox.

    Any nonzero pixel counts as hand. ``frame_size`` is (width, height).
    """
    mask_file = Path(mask_file)
    try:
        with Image.open(mask_file) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, ValueError) as exc:
        raise MaskError(f"unreadable mask file {mask_file}: {exc}") from exc
    width, height = frame_size
    if arr.shape != (height, width):
        raise MaskError(
            f"mask {mask_file.name} is {arr.shape[1]}x{arr.shape[0]}, frame is {width}x{height}")
    x, y, w, h = bbox
    bitmap = arr[y:y + h, x:x + w] > 0
    mask = HandMask(bbox, bitmap)
    if mask.area == 0:
        log.warning("empty mask: %s within bbox %s", mask_file.name, bbox)
    return mask


def heuristic_mask(frame: np.ndarray, bbox: Box, band: SkinBand = SkinBand()) -> HandMask:
    """Skin-band fallback segmentation inside a bounding box.

    Pixels whose HSV values fall within ``band`` are hand candidates; only the
    largest 4-connected component is kept. Depends only on pixels inside bbox.
    """
    x, y, w, h = bbox
    crop = frame[y:y + h, x:x + w]
    hsv = cv2.cvtColor(crop.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)
    hue, sat, val = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    candidate = (
        (hue >= band.hue[0]) & (hue <= band.hue[1])
        & (sat >= band.saturation[0]) & (sat <= band.saturation[1])
        & (val >= band.value[0]) & (val <= band.value[1])
    )
    if not candidate.any():
        return HandMask(bbox, np.zeros((h, w), dtype=bool))
    labeled, n = ndimage.label(candidate, structure=_CROSS)
    if n > 1:
        sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1  # ties: lowest label = first-scanned component
        candidate = labeled == keep
    return HandMask(bbox, candidate)


class MaskProvider:
    """Resolves the hand mask for an instance, preferring mask files.

    ``source`` records provenance ("files" or "heuristic") for the run report.
    An optional ``transform`` post-processes every bitmap (used by the
    mask-robustness analysis); it must be a pure function of its arguments.
    """

    def __init__(self, task: Task, band: SkinBand = SkinBand(),
                 transform: Optional[Callable[[np.ndarray, int, str], np.ndarray]] = None):
        self._task = task
        self._band = band
        self._transform = transform
        self.source = "files" if task.masks_root is not None else "heuristic"

    def mask_for(self, frame: np.ndarray, frame_index: int, side: str, bbox: Box) -> HandMask:
        if self.source == "files":
            mask_file = self._task.masks_root / f"{frame_index:06d}_{side}.png"
            if mask_file.exists():
                mask = ingest_mask(mask_file, bbox, self._task.resolution)
            else:
                log.warning("mask file missing for %s frame %d %s; using heuristic",
                            self._task.id, frame_index, side)
                mask = heuristic_mask(frame, bbox, self._band)
        else:
            mask = heuristic_mask(frame, bbox, self._band)
        if self._transform is not None:
            mask = HandMask(bbox, self._transform(mask.bitmap, frame_index, side))
        return mask
