"""Glue between a generated dataset and the model: crops, training, collections."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics, proxy
from .classify import EmbeddingCollection
from .config import RunConfig
from .encoder import EncoderParams, SGDState, embed_with, init_encoder, train_epoch
from .errors import UserError
from .loss import ProxyAnchor, make_loss
from .preprocess import extract_single_pills
from .synthgen import load_scene

log = logging.getLogger(__name__)


@dataclass
class CropSet:
    """Single-pill crops with their provenance, one row per crop."""

    images: np.ndarray  # (N, L, L, 3) uint8
    labels: np.ndarray
    scene_ids: np.ndarray
    lights: np.ndarray
    poses: np.ndarray
    splits: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def where(self, keep: np.ndarray) -> "CropSet":
        return CropSet(*(a[keep] for a in (self.images, self.labels, self.scene_ids, self.lights, self.poses, self.splits)))

    def split(self, name: str) -> "CropSet":
        return self.where(self.splits == name)

    def for_labels(self, labels) -> "CropSet":
        return self.where(np.isin(self.labels, list(labels)))


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise UserError(f"missing dataset manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UserError(f"dataset manifest {path} is not valid JSON: {exc}") from exc


def load_crops(root, manifest: dict, mode: str, side: int, skipped: list | None = None) -> CropSet:
    images, labels, scene_ids, lights, poses, splits = [], [], [], [], [], []
    for entry in manifest["scenes"]:
        for light, scene in enumerate(load_scene(root, entry)):
            for pill in extract_single_pills(scene, mode, side, skipped if light == 0 else None):
                images.append(pill.raster)
                labels.append(pill.label)
                scene_ids.append(entry["scene_id"])
                lights.append(light)
                poses.append(entry["pose"])
                splits.append(entry["split"])
    if not images:
        raise UserError("dataset produced no single-pill crops")
    return CropSet(
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        np.asarray(scene_ids),
        np.asarray(lights, dtype=np.int64),
        np.asarray(poses, dtype=np.int64),
        np.asarray(splits),
    )


@dataclass
class Model:
    params: EncoderParams
    proxies: proxy.ProxySet
    loss: ProxyAnchor
    history: list

    def embed(self, images) -> np.ndarray:
        return embed_with(self.params, self.loss, images)


def new_proxies(cfg: RunConfig, labels, loss: ProxyAnchor, stream: int = 0) -> proxy.ProxySet:
    rng = numerics.derive_rng(cfg.seed, 0x9A0C, stream)
    return proxy.create_proxy_set(
        len(labels),
        loss.proxy_dim(cfg.dim),
        rng,
        cfg.decompose,
        labels=list(labels),
        steps=cfg.proxy_steps,
        lr=cfg.proxy_lr,
        restarts=cfg.proxy_restarts,
    )


def fit(cfg: RunConfig, crops: CropSet, params: EncoderParams, pset: proxy.ProxySet, loss: ProxyAnchor, stream: int = 0) -> Model:
    opt = SGDState(cfg.lr, cfg.batch_size, int(numerics.derive_rng(cfg.seed, 0x7A1, stream).integers(2**63)), cfg.proxy_lr_scale)
    for epoch in range(cfg.epochs):
        params, pset, mean = train_epoch(params, crops.images, crops.labels, loss, pset, opt, epoch)
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.epochs, mean)
    return Model(params, pset, loss, list(opt.history))


def train_model(cfg: RunConfig, crops: CropSet) -> Model:
    """Fresh encoder plus created (and optionally decomposed) proxies, trained on ``crops``."""
    loss = make_loss(cfg.pal_params())
    labels = sorted(set(crops.labels.tolist()))
    params = init_encoder(cfg.crop_side, cfg.hidden, cfg.dim, cfg.seed)
    pset = new_proxies(cfg, labels, loss)
    return fit(cfg, crops, params, pset, loss)


def build_collection(model: Model, crops: CropSet, names: dict[int, str] | None = None) -> EmbeddingCollection:
    return EmbeddingCollection(model.embed(crops.images), crops.labels, names)


def class_names(cfg: RunConfig) -> dict[int, str]:
    return {c.label: c.name for c in cfg.pill_classes()}
