"""Per-pill crops from a vial scene with three background treatments."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import UserError
from .synthgen import VialScene, write_ppm

log = logging.getLogger(__name__)

MODES = ("blurred", "gray", "bbox")
DEFAULT_SIDE = 64
BOX_SIZE = 10
GRAY = 128


@dataclass(frozen=True)
class SinglePillImage:
    raster: np.ndarray  # (L, L, 3) uint8
    mask: np.ndarray  # (L, L) bool
    scene_id: str
    pill_index: int
    label: int | None
    mode: str

    @property
    def side(self) -> int:
        return int(self.raster.shape[0])


def _square_window(mask: np.ndarray) -> tuple[int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    side = max(r1 - r0, c1 - c0)
    top = r0 - (side - (r1 - r0)) // 2
    left = c0 - (side - (c1 - c0)) // 2
    return int(top), int(left), int(side)


def _crop(a: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Square crop that zero-fills wherever the window leaves the array."""
    out = np.zeros((side, side) + a.shape[2:], dtype=a.dtype)
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + side, a.shape[0]), min(left + side, a.shape[1])
    out[r0 - top : r1 - top, c0 - left : c1 - left] = a[r0:r1, c0:c1]
    return out


def blur_background(raster: np.ndarray, mask: np.ndarray, size: int = BOX_SIZE) -> np.ndarray:
    """Normalized box filter over background pixels only; foreground never leaks out."""
    bg = (~mask).astype(np.float64)
    weight = ndimage.uniform_filter(bg, size=size, mode="constant")
    out = raster.astype(np.float64).copy()
    for ch in range(raster.shape[2]):
        acc = ndimage.uniform_filter(raster[..., ch] * bg, size=size, mode="constant")
        out[..., ch] = np.where(mask, out[..., ch], acc / np.where(weight > 0, weight, 1.0))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def crop_pill(image: np.ndarray, mask: np.ndarray, mode: str, side: int) -> tuple[np.ndarray, np.ndarray]:
    if mode not in MODES:
        raise UserError(f"unknown background mode {mode!r}; expected one of {MODES}")
    top, left, sq = _square_window(mask)
    crop = _crop(image, top, left, sq)
    crop_mask = _crop(mask.astype(np.uint8) * 255, top, left, sq)
    raster = np.asarray(Image.fromarray(crop, "RGB").resize((side, side), Image.BILINEAR))
    small_mask = np.asarray(Image.fromarray(crop_mask, "L").resize((side, side), Image.NEAREST)) > 0
    if mode == "gray":
        raster = raster.copy()
        raster[~small_mask] = GRAY
    elif mode == "blurred":
        raster = blur_background(raster, small_mask)
    return raster, small_mask


def extract_single_pills(
    scene: VialScene, mode: str = "blurred", side: int = DEFAULT_SIDE, skipped: list | None = None
) -> list[SinglePillImage]:
    """One square crop per pill with a non-empty visible mask.

    Pills fully hidden by later pills are skipped; a record for each goes to
    ``skipped`` when a list is passed.
    """
    if not scene.pills:
        raise UserError(f"scene {scene.scene_id!r} has no pill instances")
    if side < 1:
        raise UserError("crop side must be >= 1")
    out = []
    for index, pill in enumerate(scene.pills):
        if not pill.mask.any():
            record = {"scene_id": scene.scene_id, "pill_index": index, "reason": "empty mask"}
            log.warning("skipping pill %d of %s: empty mask", index, scene.scene_id)
            if skipped is not None:
                skipped.append(record)
            continue
        raster, mask = crop_pill(scene.image, pill.mask, mode, side)
        out.append(SinglePillImage(raster, mask, scene.scene_id, index, pill.label, mode))
    return out


def write_single_pills(out_dir, scene_id: str, pills: list[SinglePillImage], light: int = 0) -> dict:
    """Save crops as PPM and a sidecar JSON mapping file names to labels."""
    folder = Path(out_dir) / scene_id
    folder.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pills:
        name = f"{scene_id}_l{light}_pill{p.pill_index:02d}_{p.mode}.ppm"
        write_ppm(folder / name, p.raster)
        entries.append({"file": name, "pill_index": p.pill_index, "label": p.label, "mode": p.mode})
    sidecar = {"scene_id": scene_id, "light": light, "pills": entries}
    (folder / f"{scene_id}_l{light}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return sidecar
