"""A small fully connected embedding network trained by plain minibatch SGD.

Images are flattened, scaled to ``[-0.5, 0.5]`` and fed through
dense(H) -> ReLU -> dense(H) -> ReLU -> dense(D). The output is L2-normalized
to give the embedding. Gradients are derived by hand for this fixed stack.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import CorruptArtifactError, DegenerateInputError, TrainingError, UserError
from .loss import LossResult, ProxyAnchor
from .proxy import ProxySet

CHECKPOINT_MAGIC = b"PXENCODR"
DEFAULT_HIDDEN = 64
DEFAULT_DIM = 32
DEFAULT_LR = 1e-2
DEFAULT_BATCH = 32


@dataclass
class EncoderParams:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]
    input_side: int
    seed: int = 0
    epoch: int = 0

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[0]

    @property
    def dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.input_side, self.seed, self.epoch
        )

    def norms(self) -> dict[str, float]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = float(np.linalg.norm(w))
            out[f"b{i}"] = float(np.linalg.norm(b))
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases))


def init_encoder(input_side: int, hidden: int = DEFAULT_HIDDEN, dim: int = DEFAULT_DIM, seed: int = 0) -> EncoderParams:
    """Kaiming-normal weights (fan-in) and zero biases."""
    if min(input_side, hidden, dim) < 1:
        raise UserError("input side, hidden width and embedding dim must be >= 1")
    rng = numerics.derive_rng(seed, 0xE1C0DE)
    sizes = [input_side * input_side * 3, hidden, hidden, dim]
    weights = [numerics.kaiming_normal_init(n_out, n_in, rng) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(n) for n in sizes[1:]]
    return EncoderParams(weights, biases, input_side, seed)


def features(images) -> np.ndarray:
    """uint8 rasters (B, L, L, 3) or (L, L, 3) to float rows in [-0.5, 0.5]."""
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    return a.reshape(a.shape[0], -1).astype(np.float64) / 255.0 - 0.5


def forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Raw (unnormalized) outputs and the activations needed for backprop."""
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise UserError(f"encoder expects {params.input_size} input features, got shape {x.shape}")
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backward(params: EncoderParams, acts: list[np.ndarray], d_out: np.ndarray) -> tuple[list, list]:
    grads_w, grads_b = [None] * len(params.weights), [None] * len(params.weights)
    d = d_out
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = d.T @ acts[i]
        grads_b[i] = d.sum(axis=0)
        if i > 0:
            d = (d @ params.weights[i]) * (acts[i] > 0.0)
    return grads_w, grads_b


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = numerics.row_norms(z)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("encoder output is the zero vector; the embedding is undefined")
    return z / norms[:, None]


def _check_side(params: EncoderParams, images: np.ndarray) -> None:
    shape = images.shape[-3:]
    if shape != (params.input_side, params.input_side, 3):
        raise UserError(f"encoder expects {params.input_side}x{params.input_side} RGB images, got {shape}")


def encode(params: EncoderParams, image) -> np.ndarray:
    """Unit-norm embedding of one image (a raster or a SinglePillImage)."""
    raster = np.asarray(getattr(image, "raster", image))
    _check_side(params, raster)
    z, _ = forward(params, features(raster))
    return _unit_rows(z)[0]


def encode_batch(params: EncoderParams, images, chunk: int = 512) -> np.ndarray:
    images = np.asarray(images)
    if images.shape[0] == 0:
        return np.zeros((0, params.dim))
    _check_side(params, images)
    out = []
    for start in range(0, images.shape[0], chunk):
        z, _ = forward(params, features(images[start : start + chunk]))
        out.append(_unit_rows(z))
    return np.vstack(out)


def embed_with(params: EncoderParams, loss: ProxyAnchor, images, chunk: int = 512) -> np.ndarray:
    """Vectors in the loss's scoring space: the embedding itself, or its feature-summed reduction."""
    images = np.asarray(images)
    out = []
    for start in range(0, images.shape[0], chunk):
        z, _ = forward(params, features(images[start : start + chunk]))
        out.append(loss.embed(z))
    return np.vstack(out)


def loss_and_gradients(params: EncoderParams, x: np.ndarray, labels, loss: ProxyAnchor, pset: ProxySet):
    """Loss of one batch of float features with gradients for every parameter."""
    z, acts = forward(params, x)
    if not np.all(np.isfinite(z)):
        raise TrainingError("encoder output is non-finite")
    result: LossResult = loss(z, labels, pset)
    gw, gb = backward(params, acts, result.d_embeddings)
    return result, gw, gb


@dataclass
class SGDState:
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH
    seed: int = 0
    proxy_lr_scale: float = 1.0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise UserError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise UserError("batch size must be >= 1")


def train_epoch(
    params: EncoderParams,
    images,
    labels,
    loss: ProxyAnchor,
    pset: ProxySet,
    opt: SGDState,
    epoch: int | None = None,
) -> tuple[EncoderParams, ProxySet, float]:
    """One shuffled pass of minibatch SGD over encoder weights and trainable proxies.

    Returns new parameters, the updated proxy set and the mean batch loss
    (each batch's loss measured before its update).
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0 or images.shape[0] != labels.shape[0]:
        raise UserError("training needs a non-empty image set with one label per image")
    _check_side(params, images)
    missing = set(np.unique(labels).tolist()) - set(pset.labels)
    if missing:
        raise UserError(f"labels without proxies: {sorted(missing)}")
    epoch = params.epoch if epoch is None else epoch

    params = params.copy()
    proxies = pset.proxies.copy()
    mask = np.asarray(pset.trainable, dtype=bool)
    order = numerics.derive_rng(opt.seed, 0x5EED, epoch).permutation(images.shape[0])
    losses = []
    for start in range(0, order.size, opt.batch_size):
        idx = order[start : start + opt.batch_size]
        x = features(images[idx])
        current = pset.with_proxies(proxies)
        where = f"at epoch {epoch}, batch starting at {start}; labels {labels[idx].tolist()}; parameter norms {params.norms()}"
        try:
            result, gw, gb = loss_and_gradients(params, x, labels[idx], loss, current)
        except TrainingError as exc:
            raise TrainingError(f"{exc} {where}") from None
        if not np.isfinite(result.value):
            raise TrainingError(f"non-finite loss {where}")
        losses.append(result.value)
        for i in range(len(params.weights)):
            params.weights[i] -= opt.lr * gw[i]
            params.biases[i] -= opt.lr * gb[i]
        proxies[mask] -= opt.lr * opt.proxy_lr_scale * result.d_proxies[mask]
        loss.apply_update(result, opt.lr)
        if not params.all_finite():
            raise TrainingError(f"parameters became non-finite at epoch {epoch}; norms {params.norms()}")
    params.epoch = epoch + 1
    mean = float(np.mean(losses))
    opt.history.append(mean)
    return params, pset.with_proxies(proxies), mean


def evaluation_loss(params: EncoderParams, images, labels, loss: ProxyAnchor, pset: ProxySet, batch_size: int, seed: int, epoch: int) -> float:
    """Mean batch loss over the same batches :func:`train_epoch` would use, without updating."""
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    order = numerics.derive_rng(seed, 0x5EED, epoch).permutation(images.shape[0])
    values = []
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        z, _ = forward(params, features(images[idx]))
        values.append(loss(z, labels[idx], pset).value)
    return float(np.mean(values))


def save_checkpoint(path, params: EncoderParams, extra_header: dict | None = None) -> None:
    header = {
        "input_side": params.input_side,
        "input_size": params.input_size,
        "hidden": params.hidden,
        "dim": params.dim,
        "seed": params.seed,
        "epoch": params.epoch,
        "layers": len(params.weights),
    }
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for w, b in zip(params.weights, params.biases):
            numerics.write_matrix(fh, w)
            numerics.write_matrix(fh, b[None, :])


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise UserError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CorruptArtifactError(f"{path}: not an encoder checkpoint")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CorruptArtifactError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        try:
            header = json.loads(fh.read(n))
            layers = int(header["layers"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptArtifactError(f"{path}: bad header: {exc}") from exc
        weights, biases = [], []
        for _ in range(layers):
            weights.append(numerics.read_matrix(fh))
            biases.append(numerics.read_matrix(fh)[0])
        if fh.read(1):
            raise CorruptArtifactError(f"{path}: trailing bytes after the last layer")
    params = EncoderParams(weights, biases, int(header["input_side"]), int(header["seed"]), int(header["epoch"]))
    if params.input_size != params.input_side**2 * 3:
        raise CorruptArtifactError(f"{path}: layer shapes disagree with the header")
    return params, header
