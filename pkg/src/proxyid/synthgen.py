"""Procedural vial scenes: pill sprites dropped into a vial bottom with shadows.

A scene is built by repeatedly picking a random side of the pill, rotating
it, casting a blurred-mask shadow, and placing it at a random free center
inside the central location circle. Placed footprints are removed from the
free region; generation stops after ``max_pills`` pills or once less than
``stop_fraction`` of the initial circle remains free.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from . import numerics
from .errors import SceneGenerationError, UserError

SHAPES = ("round", "oval", "capsule")
SIDES = ("front", "back")
LIGHT_COUNT = 7
LIGHT_STRENGTH = 0.3
SHADOW_SIGMA = 3.0
SHADOW_STRENGTH = 0.45
SHADOW_OFFSET = (2, 2)
MAX_PILLS = 10
STOP_FRACTION = 0.1
MAX_IMPRINT = 6
MIN_PILL_SIDE = 8


class PillTooLargeError(SceneGenerationError, ValueError):
    exit_code = 1


@dataclass(frozen=True)
class PillSpriteSpec:
    shape: str
    color: tuple[int, int, int]
    imprint: str
    side: str
    size: tuple[int, int]  # (rows, cols)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise UserError(f"unknown pill shape {self.shape!r}")
        if self.side not in SIDES:
            raise UserError(f"unknown pill side {self.side!r}")
        if len(self.color) != 3 or any(not 0 <= int(c) <= 255 for c in self.color):
            raise UserError(f"pill color must be an RGB triple in 0..255, got {self.color}")
        if len(self.imprint) > MAX_IMPRINT:
            raise UserError(f"imprint {self.imprint!r} exceeds {MAX_IMPRINT} characters")
        if min(self.size) < MIN_PILL_SIDE:
            raise UserError(f"pill sides must be >= {MIN_PILL_SIDE} pixels, got {self.size}")


@dataclass(frozen=True)
class PillClass:
    """One pill type: shared geometry and color, a different imprint per side."""

    label: int
    name: str
    shape: str
    color: tuple[int, int, int]
    size: tuple[int, int]
    front: str = ""
    back: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "PillClass":
        return cls(
            label=int(d["label"]),
            name=str(d["name"]),
            shape=d["shape"],
            color=tuple(int(c) for c in d["color"]),
            size=tuple(int(s) for s in d["size"]),
            front=d.get("front", ""),
            back=d.get("back", ""),
        )

    def to_dict(self) -> dict:
        return {**asdict(self), "color": list(self.color), "size": list(self.size)}

    def __post_init__(self):
        if self.front == self.back:
            raise UserError(f"class {self.label}: front and back imprints must differ")
        PillSpriteSpec(self.shape, self.color, self.front, "front", self.size)

    def sprite_spec(self, side: str) -> PillSpriteSpec:
        imprint = self.front if side == "front" else self.back
        return PillSpriteSpec(self.shape, self.color, imprint, side, self.size)


def central_location_radius(r_vrm: float, s_r: float, s_c: float) -> float:
    """Radius of the disk of admissible pill centers: ``r_vrm - sqrt(s_r**2 + s_c**2)``."""
    r = r_vrm - math.hypot(s_r, s_c)
    if r <= 0:
        raise PillTooLargeError(f"a {s_r}x{s_c} pill does not fit in a valid region of radius {r_vrm}")
    return r


def _silhouette(shape: str, rows: int, cols: int) -> Image.Image:
    mask = Image.new("L", (cols, rows), 0)
    draw = ImageDraw.Draw(mask)
    # one pixel of border keeps the silhouette clear of the sprite edge
    box = (1, 1, cols - 2, rows - 2)
    if shape == "round":
        d = min(rows, cols) - 2
        top, left = (rows - d) // 2, (cols - d) // 2
        draw.ellipse((left, top, left + d - 1, top + d - 1), fill=255)
    elif shape == "oval":
        draw.ellipse(box, fill=255)
    else:
        radius = (min(rows, cols) - 2) // 2
        draw.rounded_rectangle(box, radius=radius, fill=255)
    return mask


def _contrast(color) -> tuple[int, int, int]:
    luminance = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]
    return (35, 35, 35) if luminance > 110 else (225, 225, 225)


def make_pill_sprite(spec: PillSpriteSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sprite raster (rows, cols, 3) uint8 on black, plus its boolean silhouette."""
    rows, cols = spec.size
    mask_img = _silhouette(spec.shape, rows, cols)
    mask = np.asarray(mask_img) > 0

    sprite = Image.new("RGB", (cols, rows), tuple(int(c) for c in spec.color))
    if spec.imprint:
        font = ImageFont.load_default()
        left, top, right, bottom = font.getbbox(spec.imprint)
        ys, xs = np.nonzero(mask)
        width, height = xs.max() - xs.min() + 1, ys.max() - ys.min() + 1
        if right - left > 0.8 * width or bottom - top > 0.8 * height:
            raise SceneGenerationError(f"imprint {spec.imprint!r} does not fit on a {rows}x{cols} {spec.shape} pill")
        origin = ((cols - (right - left)) / 2 - left, (rows - (bottom - top)) / 2 - top)
        ImageDraw.Draw(sprite).text(origin, spec.imprint, fill=_contrast(spec.color), font=font)

    pixels = np.asarray(sprite, dtype=np.float64)
    # soft dome shading plus a little speckle so crops are not flat color fields
    yy, xx = np.mgrid[0:rows, 0:cols]
    rr = np.hypot((yy - (rows - 1) / 2) / (rows / 2), (xx - (cols - 1) / 2) / (cols / 2))
    pixels *= (1.0 - 0.12 * np.clip(rr, 0.0, 1.0) ** 2)[..., None]
    pixels += rng.normal(0.0, 3.0, size=pixels.shape)
    out = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    out[~mask] = 0
    return out, mask


@dataclass(frozen=True)
class VialTemplate:
    template_id: int
    size: int
    r_vrm: float
    image: np.ndarray = field(compare=False, repr=False)
    valid_region: np.ndarray = field(compare=False, repr=False)

    @property
    def center(self) -> tuple[float, float]:
        c = (self.size - 1) / 2
        return c, c


def make_vial_template(template_id: int, size: int = 256, seed: int = 0) -> VialTemplate:
    """Empty vial bottom: tinted disk with optional engraving arcs and ribbed rings."""
    rng = numerics.derive_rng(seed, 1_000_003, template_id)
    r_vrm = 0.44 * size
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    theta = np.arctan2(yy - c, xx - c)
    valid = r <= r_vrm

    tint = rng.uniform(150, 195, size=3) * np.array([1.0, rng.uniform(0.95, 1.02), rng.uniform(0.85, 1.0)])
    img = np.empty((size, size, 3))
    img[:] = tint * 0.35
    img[valid] = tint
    # radial falloff toward the wall
    img *= (1.0 - 0.15 * np.clip(r / r_vrm, 0.0, 1.0) ** 3)[..., None]

    if rng.random() < 0.75:
        rings = int(rng.integers(2, 5))
        for k in range(rings):
            ring_r = r_vrm * (0.9 - 0.04 * k)
            band = np.abs(r - ring_r) < 1.0
            img[band] *= 0.82
    for _ in range(int(rng.integers(0, 3))):
        arc_r = rng.uniform(0.35, 0.8) * r_vrm
        start = rng.uniform(-np.pi, np.pi)
        span = rng.uniform(0.4, 1.2)
        arc = (np.abs(r - arc_r) < 1.2) & (np.mod(theta - start, 2 * np.pi) < span)
        img[arc] *= 0.7
    img += rng.normal(0.0, 2.0, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    image.setflags(write=False)
    valid.setflags(write=False)
    return VialTemplate(template_id, size, r_vrm, image, valid)


@dataclass
class PillInstance:
    label: int
    mask: np.ndarray  # visible pixels, after occlusion by later pills
    footprint: np.ndarray  # full silhouette as placed
    center: tuple[int, int]
    angle: float
    side: str


@dataclass
class VialScene:
    image: np.ndarray
    pills: list[PillInstance]
    template_id: int
    scene_id: str = ""

    def with_image(self, image: np.ndarray) -> "VialScene":
        return VialScene(image, self.pills, self.template_id, self.scene_id)


def _rotate(sprite: np.ndarray, mask: np.ndarray, angle: float, pad: int) -> tuple[np.ndarray, np.ndarray]:
    sprite = np.pad(sprite, ((pad, pad), (pad, pad), (0, 0)))
    mask = np.pad(mask.astype(np.float64), pad)
    rot_mask = ndimage.rotate(mask, angle, reshape=False, order=1, mode="constant") >= 0.5
    rot_sprite = ndimage.rotate(sprite.astype(np.float64), angle, axes=(1, 0), reshape=False, order=1, mode="constant")
    rot_sprite[~rot_mask] = 0.0
    return rot_sprite, rot_mask


def _paste_window(shape, center, patch_shape):
    """Slices placing a patch centred on ``center``, clipped to an image of ``shape``."""
    h, w = patch_shape
    top, left = center[0] - h // 2, center[1] - w // 2
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + h, shape[0]), min(left + w, shape[1])
    return (slice(r0, r1), slice(c0, c1)), (slice(r0 - top, r1 - top), slice(c0 - left, c1 - left))


def compose_vial_scene(
    pill: PillClass,
    template: VialTemplate,
    rng: np.random.Generator,
    *,
    shadow_sigma: float = SHADOW_SIGMA,
    max_pills: int = MAX_PILLS,
    stop_fraction: float = STOP_FRACTION,
    scene_id: str = "",
) -> VialScene:
    if max_pills < 1:
        raise UserError("max_pills must be >= 1")
    rows, cols = pill.size
    r_clc = central_location_radius(template.r_vrm, rows, cols)
    size = template.size
    cy, cx = template.center
    yy, xx = np.mgrid[0:size, 0:size]
    free = np.hypot(yy - cy, xx - cx) <= r_clc
    initial_area = int(free.sum())

    canvas = template.image.astype(np.float64)
    pad = int(math.ceil(max(rows, cols) / 2 + 3 * shadow_sigma)) + 1
    pills: list[PillInstance] = []
    for _ in range(max_pills):
        side = SIDES[int(rng.integers(2))]
        sprite, mask = make_pill_sprite(pill.sprite_spec(side), rng)
        angle = float(rng.uniform(0.0, 360.0))
        rot_sprite, rot_mask = _rotate(sprite, mask, angle, pad)
        shadow = ndimage.gaussian_filter(rot_mask.astype(np.float64), shadow_sigma)

        candidates = np.flatnonzero(free)
        if candidates.size == 0:
            if not pills:
                raise SceneGenerationError("no free center for the first pill")
            break
        flat = int(candidates[rng.integers(candidates.size)])
        center = (flat // size, flat % size)

        dst, src = _paste_window((size, size), center, rot_mask.shape)
        shadow_center = (center[0] + SHADOW_OFFSET[0], center[1] + SHADOW_OFFSET[1])
        sdst, ssrc = _paste_window((size, size), shadow_center, shadow.shape)
        canvas[sdst] *= 1.0 - SHADOW_STRENGTH * shadow[ssrc][..., None]

        footprint = np.zeros((size, size), dtype=bool)
        footprint[dst] = rot_mask[src]
        region = canvas[dst]
        patch_mask = rot_mask[src]
        region[patch_mask] = rot_sprite[src][patch_mask]

        for earlier in pills:
            earlier.mask &= ~footprint
        pills.append(PillInstance(pill.label, footprint.copy(), footprint, center, angle, side))

        free &= ~footprint
        if free.sum() < stop_fraction * initial_area:
            break

    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return VialScene(image, pills, template.template_id, scene_id)


def light_gains(size: int, strength: float = LIGHT_STRENGTH) -> np.ndarray:
    """Per-pixel brightness multipliers for the six single-light renders, shape (6, size, size)."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = (xx - c) / (size / 2), (yy - c) / (size / 2)
    gains = []
    for k in range(LIGHT_COUNT - 1):
        theta = math.radians(60.0 * k)
        # rounding keeps cos(180) == -1 exactly so opposite lights mirror bit-for-bit
        u = (round(math.cos(theta), 12), round(math.sin(theta), 12))
        gains.append(np.clip(1.0 + strength * (dx * u[0] + dy * u[1]), 1.0 - strength, 1.0 + strength))
    return np.stack(gains)


def render_light_conditions(scene: VialScene, strength: float = LIGHT_STRENGTH) -> list[np.ndarray]:
    """The unmodified scene followed by six directional-light renders at 0, 60, ..., 300 degrees."""
    image = np.asarray(scene.image)
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise UserError("scene image must be a square RGB raster")
    out = [image.copy()]
    base = image.astype(np.float64)
    for gain in light_gains(image.shape[0], strength):
        out.append(np.clip(np.rint(base * gain[..., None]), 0, 255).astype(np.uint8))
    return out


# --- dataset on disk -------------------------------------------------------

@dataclass
class DatasetConfig:
    classes: list[PillClass]
    seed: int = 0
    scene_size: int = 256
    poses: int = 10
    templates: int = 4
    shadow_sigma: float = SHADOW_SIGMA
    max_pills: int = MAX_PILLS
    train_poses: int = 6

    def validate(self) -> None:
        if not self.classes:
            raise UserError("dataset needs at least one class")
        labels = [c.label for c in self.classes]
        if len(set(labels)) != len(labels):
            raise UserError("class labels must be unique")
        for name in ("scene_size", "poses", "templates", "max_pills"):
            if getattr(self, name) < 1:
                raise UserError(f"{name} must be >= 1")
        if not 0 < self.train_poses < self.poses:
            raise UserError("train_poses must leave at least one pose for testing")
        if self.shadow_sigma <= 0:
            raise UserError("shadow_sigma must be > 0")

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "seed": self.seed,
            "scene_size": self.scene_size,
            "poses": self.poses,
            "templates": self.templates,
            "shadow_sigma": self.shadow_sigma,
            "max_pills": self.max_pills,
            "train_poses": self.train_poses,
        }


def scene_rng(dataset_seed: int, scene_index: int) -> np.random.Generator:
    return numerics.derive_rng(dataset_seed, scene_index)


def generate_scene(config: DatasetConfig, class_index: int, pose: int, templates: list[VialTemplate]) -> VialScene:
    pill = config.classes[class_index]
    index = class_index * config.poses + pose
    rng = scene_rng(config.seed, index)
    template = templates[int(rng.integers(len(templates)))]
    return compose_vial_scene(
        pill,
        template,
        rng,
        shadow_sigma=config.shadow_sigma,
        max_pills=config.max_pills,
        scene_id=f"c{pill.label:03d}_p{pose:02d}",
    )


def write_ppm(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path, format="PPM")


def write_pgm(path, gray: np.ndarray) -> None:
    Image.fromarray(np.asarray(gray, dtype=np.uint8), "L").save(path, format="PPM")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def generate_dataset(config: DatasetConfig, out_dir, extra: dict | None = None) -> dict:
    """Write every scene's seven light renders and mask map; return the manifest."""
    config.validate()
    out = Path(out_dir)
    templates = [make_vial_template(t, config.scene_size, config.seed) for t in range(config.templates)]
    scenes = []
    for ci, pill in enumerate(config.classes):
        for pose in range(config.poses):
            scene = generate_scene(config, ci, pose, templates)
            rel = Path("scenes") / scene.scene_id
            (out / rel).mkdir(parents=True, exist_ok=True)
            light_files = []
            for k, raster in enumerate(render_light_conditions(scene)):
                name = rel / f"light{k}.ppm"
                write_ppm(out / name, raster)
                light_files.append(name.as_posix())
            label_map = np.zeros(scene.image.shape[:2], dtype=np.uint8)
            for i, p in enumerate(scene.pills):
                label_map[p.mask] = i + 1
            mask_file = (rel / "masks.pgm").as_posix()
            write_pgm(out / mask_file, label_map)
            scenes.append(
                {
                    "scene_id": scene.scene_id,
                    "label": pill.label,
                    "pose": pose,
                    "split": "train" if pose < config.train_poses else "test",
                    "seed": [config.seed, ci * config.poses + pose],
                    "template": scene.template_id,
                    "light_files": light_files,
                    "mask_file": mask_file,
                    "pills": [
                        {"center": list(p.center), "angle": p.angle, "side": p.side, "visible_pixels": int(p.mask.sum())}
                        for p in scene.pills
                    ],
                }
            )
    manifest = {"dataset": config.to_dict(), "scenes": scenes}
    if extra:
        manifest["config"] = extra
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_scene(root, entry: dict) -> list[VialScene]:
    """Rebuild the seven light-condition scenes of one manifest entry from disk."""
    root = Path(root)
    try:
        label_map = read_image(root / entry["mask_file"])
        rasters = [read_image(root / f) for f in entry["light_files"]]
    except (OSError, KeyError) as exc:
        raise UserError(f"cannot read scene {entry.get('scene_id')!r}: {exc}") from exc
    pills = []
    for i, meta in enumerate(entry["pills"]):
        mask = label_map == i + 1
        pills.append(PillInstance(int(entry["label"]), mask, mask, tuple(meta["center"]), meta["angle"], meta["side"]))
    return [VialScene(r, pills, entry["template"], entry["scene_id"]) for r in rasters]
