"""Class proxies and the operations that keep them spread apart.

A proxy set is a ``C x D`` matrix of class representatives. Decomposition
pushes every pair of proxies toward orthogonality by minimizing
``max|s| + mean|s|`` over the pairwise cosine similarities ``s``. Creation,
addition and enhancement all reuse that one optimizer and differ only in
which rows are allowed to move.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics
from .errors import CorruptArtifactError, DegenerateInputError, TrainingError, UserError

GENERATIONS = ("created", "added", "enhanced")
PROXY_MAGIC = b"PXPROXY1"

DEFAULT_STEPS = 2000
DEFAULT_LR = 0.2
CHECK_EVERY = 50


@dataclass(frozen=True)
class ProxySet:
    proxies: np.ndarray
    labels: tuple[int, ...]
    trainable: np.ndarray
    generation: str = "created"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p = numerics.as_matrix(self.proxies, "proxies")
        t = np.asarray(self.trainable, dtype=bool).copy()
        labels = tuple(int(x) for x in self.labels)
        if p.shape[0] < 1:
            raise UserError("a proxy set needs at least one proxy")
        if len(labels) != p.shape[0] or t.shape != (p.shape[0],):
            raise UserError("labels and trainable flags must have one entry per proxy")
        if len(set(labels)) != len(labels):
            raise UserError("proxy labels must be unique")
        if np.any(numerics.row_norms(p) == 0.0):
            raise DegenerateInputError("zero-norm proxy")
        if self.generation not in GENERATIONS:
            raise UserError(f"unknown generation tag {self.generation!r}")
        p = p.copy()
        p.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "proxies", p)
        object.__setattr__(self, "trainable", t)
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other):
        if not isinstance(other, ProxySet):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.generation == other.generation
            and np.array_equal(self.proxies, other.proxies)
            and np.array_equal(self.trainable, other.trainable)
        )

    @property
    def count(self) -> int:
        return self.proxies.shape[0]

    @property
    def dim(self) -> int:
        return self.proxies.shape[1]

    def index_of(self, label: int) -> int:
        try:
            return self.labels.index(int(label))
        except ValueError:
            raise UserError(f"no proxy for label {label}") from None

    def with_trainable(self, trainable) -> "ProxySet":
        return replace(self, trainable=np.asarray(trainable, dtype=bool))

    def with_proxies(self, proxies: np.ndarray) -> "ProxySet":
        return replace(self, proxies=proxies)


def max_abs_similarity(proxies) -> float:
    """Largest ``|cos|`` over distinct pairs; 0.0 for a single proxy."""
    p = numerics.as_matrix(proxies)
    if p.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(numerics.cosine_similarity_matrix(p))))


def decomposition_loss(proxies) -> tuple[float, np.ndarray]:
    """``max|s| + mean|s|`` over off-diagonal cosine pairs, with its gradient.

    At the max the subgradient goes to a single pair, the lowest pair index
    among ties; ``sign(0)`` is taken as 0.
    """
    if isinstance(proxies, ProxySet):
        proxies = proxies.proxies
    p = numerics.as_matrix(proxies, "proxies")
    c = p.shape[0]
    if c < 2:
        raise UserError("decomposition needs at least two proxies")
    norms = numerics.row_norms(p)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm proxy")
    u = p / norms[:, None]
    gram = u @ u.T
    i, j = numerics.pair_indices(c)
    s = gram[i, j]
    a = np.abs(s)
    top = int(np.argmax(a))
    loss = float(a[top] + a.mean())

    w = np.sign(s) / s.size
    w[top] += np.sign(s[top])
    wm = np.zeros((c, c))
    wm[i, j] = w
    wm = wm + wm.T
    # d s_ij / d p_i = (u_j - s_ij u_i) / |p_i|
    grad = (wm @ u - np.sum(wm * gram, axis=1)[:, None] * u) / norms[:, None]
    return loss, grad


def optimize_proxies(
    pset: ProxySet,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
    *,
    check_every: int = CHECK_EVERY,
    max_retries: int = 20,
    trace: list | None = None,
) -> ProxySet:
    """Gradient descent on :func:`decomposition_loss`, moving trainable rows only.

    The step size decays linearly to zero over ``steps``. Steps run in blocks of
    ``check_every``; a block that ends with a higher loss than it started with
    is rolled back and retried at half the step size, so the loss sampled at
    block boundaries never increases. ``trace`` (if given) receives those
    boundary losses.
    """
    mask = np.asarray(pset.trainable, dtype=bool)
    if not mask.any():
        raise UserError("no trainable proxies to optimize")
    if pset.count < 2:
        raise UserError("need at least one pair involving a trainable proxy")

    p = np.array(pset.proxies)
    loss, grad = decomposition_loss(p)
    initial = loss
    limit = 10.0 * max(initial, 1e-6)
    if trace is not None:
        trace.append(loss)

    scale = 1.0
    t = 0
    while t < steps:
        block = min(check_every, steps - t)
        for _attempt in range(max_retries + 1):
            q = p.copy()
            g = grad
            diverged = False
            for k in range(block):
                q[mask] -= lr * scale * (1.0 - (t + k) / steps) * g[mask]
                lq, g = decomposition_loss(q)
                if not np.isfinite(lq) or lq > limit:
                    diverged = True
                    break
            if not diverged and lq <= loss:
                p, loss, grad = q, lq, g
                break
            scale *= 0.5
        else:
            if diverged:
                raise TrainingError(
                    f"proxy optimization diverged near step {t}: loss {lq!r} against initial {initial!r} "
                    f"after {max_retries} step-size halvings"
                )
            # step size exhausted; the current point is as good as this run gets
            if trace is not None:
                trace.append(loss)
            break
        t += block
        if trace is not None:
            trace.append(loss)

    # frozen rows are copied from the input untouched
    out = np.array(pset.proxies)
    out[mask] = p[mask]
    return pset.with_proxies(out)


def create_proxy_set(
    count: int,
    dim: int,
    rng: np.random.Generator,
    decompose: bool = True,
    *,
    labels: Iterable[int] | None = None,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
    restarts: int = 1,
) -> ProxySet:
    """Kaiming-normal proxies, optionally decomposed.

    With ``restarts > 1`` several independent initializations are decomposed
    and the one with the lowest final loss is kept. The loss has genuine
    local minima (nearly coincident proxies pinned orthogonal to a third), so
    low-dimensional sets benefit from this.
    """
    if count < 1 or dim < 1:
        raise UserError("count and dim must be >= 1")
    labels = tuple(range(count)) if labels is None else tuple(labels)
    inits = [numerics.kaiming_normal_init(count, dim, rng) for _ in range(max(1, restarts) if decompose else 1)]
    trainable = np.ones(count, dtype=bool)
    if not decompose or count < 2:
        return ProxySet(inits[0], labels, trainable, "created")

    best = None
    best_loss = np.inf
    for init in inits:
        candidate = optimize_proxies(ProxySet(init, labels, trainable, "created"), steps, lr)
        loss, _ = decomposition_loss(candidate.proxies)
        if loss < best_loss:
            best, best_loss = replace(candidate, meta={"before_max_similarity": max_abs_similarity(init)}), loss
    return best


def class_means(embeddings: np.ndarray, labels) -> dict[int, np.ndarray]:
    embeddings = numerics.as_matrix(embeddings, "embeddings")
    labels = np.asarray(labels)
    out = {}
    for label in sorted(set(int(x) for x in labels)):
        out[label] = embeddings[labels == label].mean(axis=0)
    return out


def add_proxies(
    old: ProxySet,
    new_embeddings,
    new_labels=None,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
) -> ProxySet:
    """Append one proxy per new class and decompose only the new rows.

    ``new_embeddings`` is an embedding collection (anything with
    ``embeddings`` and ``labels`` attributes) or an ``N x D`` array paired
    with ``new_labels``. Each candidate proxy starts at its class mean.
    """
    if new_labels is None:
        new_labels = new_embeddings.labels
        new_embeddings = new_embeddings.embeddings
    new_labels = [int(x) for x in np.asarray(new_labels).ravel()]
    if len(new_labels) == 0:
        raise UserError("no embeddings for the new classes")
    overlap = set(new_labels) & set(old.labels)
    if overlap:
        raise UserError(f"classes already have proxies: {sorted(overlap)}")
    emb = numerics.as_matrix(new_embeddings, "embeddings")
    if emb.shape != (len(new_labels), old.dim):
        raise UserError(f"embeddings must be {len(new_labels)} x {old.dim}, got {emb.shape}")
    means = class_means(emb, new_labels)
    for label, m in means.items():
        if not np.any(m):
            raise DegenerateInputError(f"class {label} has a zero mean embedding")

    labels = old.labels + tuple(means)
    proxies = np.vstack([old.proxies, np.array(list(means.values()))])
    trainable = np.concatenate([np.zeros(old.count, dtype=bool), np.ones(len(means), dtype=bool)])
    joined = ProxySet(proxies, labels, trainable, "added")
    before = max_abs_similarity(proxies)
    result = optimize_proxies(joined, steps, lr)
    return replace(result, meta={"before_max_similarity": before})


def enhance_proxies(pset: ProxySet, steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR) -> ProxySet:
    """Decompose the whole set with every proxy trainable."""
    if pset.count < 2:
        raise UserError("enhancement needs at least two proxies")
    everything = replace(pset, trainable=np.ones(pset.count, dtype=bool), generation="enhanced", meta={})
    result = optimize_proxies(everything, steps, lr)
    if max_abs_similarity(result.proxies) > max_abs_similarity(pset.proxies):
        # lower loss bought with a worse max pair; keep the input geometry
        return everything
    return result


def demo_2d(rng: np.random.Generator, *, restarts: int = 4, steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR) -> dict:
    """Four proxies in the plane, two more added, then all six enhanced.

    Returns the maximum pairwise ``|cos|`` before and after each operation.
    The two added classes get random single embeddings; ``restarts`` draws of
    them are tried and the lowest-loss addition is kept, since two new lines
    that start in the same angular gap cannot cross a frozen line to reach
    the optimum.
    """
    created = create_proxy_set(4, 2, rng, decompose=True, steps=steps, lr=lr, restarts=restarts)

    added = None
    for _ in range(restarts):
        fresh = numerics.kaiming_normal_init(2, 2, rng)
        cand = add_proxies(created, fresh, [4, 5], steps, lr)
        if added is None or decomposition_loss(cand)[0] < decomposition_loss(added)[0]:
            added = cand
    enhanced = enhance_proxies(added, steps, lr)

    return {
        "proxy_creation": {"before": created.meta["before_max_similarity"], "after": max_abs_similarity(created.proxies)},
        "proxy_addition": {"before": added.meta["before_max_similarity"], "after": max_abs_similarity(added.proxies)},
        "proxy_enhancement": {"before": max_abs_similarity(added.proxies), "after": max_abs_similarity(enhanced.proxies)},
    }


def save_proxy_set(path, pset: ProxySet, extra_header: dict | None = None) -> None:
    header = {
        "labels": list(pset.labels),
        "trainable": [bool(x) for x in pset.trainable],
        "generation": pset.generation,
    }
    if extra_header:
        header["config"] = extra_header
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PROXY_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        numerics.write_matrix(fh, pset.proxies)


def load_proxy_set(path) -> ProxySet:
    with open(Path(path), "rb") as fh:
        if fh.read(8) != PROXY_MAGIC:
            raise CorruptArtifactError(f"{path}: not a proxy set file")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CorruptArtifactError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        blob = fh.read(n)
        try:
            header = json.loads(blob)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptArtifactError(f"{path}: bad header: {exc}") from exc
        proxies = numerics.read_matrix(fh)
        if fh.read(1):
            raise CorruptArtifactError(f"{path}: trailing bytes")
    return ProxySet(proxies, header["labels"], np.array(header["trainable"], dtype=bool), header["generation"])
