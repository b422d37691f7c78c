"""Proxy Anchor Loss and its feature-summation variant.

Both losses take raw (unnormalized) encoder outputs and differentiate through
the L2 normalization, so the trainer can hand gradients straight back to the
last dense layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import DegenerateInputError, UserError
from .proxy import ProxySet

DEFAULT_ALPHA = 32.0
DEFAULT_DELTA = 0.1


@dataclass
class LossResult:
    value: float
    d_embeddings: np.ndarray
    d_proxies: np.ndarray
    d_weights: np.ndarray | None = None


def _normalize_with_norms(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = numerics.row_norms(x)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm vector cannot be normalized")
    return x / norms[:, None], norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    radial = np.einsum("ij,ij->i", d_unit, unit)
    return (d_unit - radial[:, None] * unit) / norms[:, None]


def _log1p_sum_exp(z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise ``log(1 + sum_i exp(z_i))`` over masked rows and its softmax weights."""
    zm = np.where(mask, z, -np.inf)
    top = np.maximum(np.max(zm, axis=0), 0.0)
    e = np.where(mask, np.exp(zm - top), 0.0)
    s = e.sum(axis=0)
    total = np.exp(-top) + s
    # log1p keeps precision when every exponent is negative (top == 0)
    value = np.where(top == 0.0, np.log1p(s), top + np.log(total))
    weights = e / total
    return value, weights


def proxy_anchor_terms(
    x: np.ndarray, targets: np.ndarray, proxies: np.ndarray, alpha: float, delta: float
) -> LossResult:
    """Proxy Anchor Loss for raw rows ``x`` whose positive proxy rows are ``targets``.

    L = 1/|P+| sum_{p in P+} log(1 + sum_{x in X+_p} exp(-alpha (cos - delta)))
      + 1/|P|  sum_{p}       log(1 + sum_{x in X-_p} exp( alpha (cos + delta)))
    """
    xu, xn = _normalize_with_norms(x)
    pu, pn = _normalize_with_norms(proxies)
    cos = xu @ pu.T
    b, c = cos.shape
    pos = np.zeros((b, c), dtype=bool)
    pos[np.arange(b), targets] = True
    neg = ~pos

    pos_val, pos_w = _log1p_sum_exp(-alpha * (cos - delta), pos)
    neg_val, neg_w = _log1p_sum_exp(alpha * (cos + delta), neg)
    with_pos = pos.any(axis=0)
    n_pos = int(with_pos.sum())

    value = float(pos_val[with_pos].sum() / n_pos + neg_val.sum() / c)
    d_cos = -alpha * pos_w * with_pos[None, :] / n_pos + alpha * neg_w / c

    d_xu = d_cos @ pu
    d_pu = d_cos.T @ xu
    return LossResult(value, _normalize_backward(xu, xn, d_xu), _normalize_backward(pu, pn, d_pu))


@dataclass
class PALParams:
    alpha: float = DEFAULT_ALPHA
    delta: float = DEFAULT_DELTA
    pieces: int = 1
    weighted: bool = False
    normalize_reduced: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise UserError("alpha must be > 0")
        if self.pieces < 1:
            raise UserError("piece count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "delta": self.delta,
            "pieces": self.pieces,
            "weighted": self.weighted,
            "normalize_reduced": self.normalize_reduced,
        }


def _targets(labels, pset: ProxySet) -> np.ndarray:
    lookup = {label: k for k, label in enumerate(pset.labels)}
    try:
        return np.array([lookup[int(y)] for y in np.asarray(labels).ravel()], dtype=np.intp)
    except KeyError as exc:
        raise UserError(f"label {exc.args[0]} has no proxy") from None


def proxy_anchor_loss(embeddings, labels, pset: ProxySet, params: PALParams | None = None) -> LossResult:
    params = params or PALParams()
    x = numerics.as_matrix(embeddings, "embeddings")
    if x.shape[0] < 1:
        raise UserError("empty batch")
    if x.shape[1] != pset.dim:
        raise UserError(f"embedding dim {x.shape[1]} does not match proxy dim {pset.dim}")
    return proxy_anchor_terms(x, _targets(labels, pset), pset.proxies, params.alpha, params.delta)


def palfs_reduce(e, pieces: int, weights=None, normalize: bool = True) -> np.ndarray:
    """Split each row into ``pieces`` contiguous chunks and (weighted-)sum them.

    Accepts a single vector or a batch of rows.
    """
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    reduced, _ = _reduce_forward(np.atleast_2d(e), pieces, weights, normalize)
    return reduced[0] if single else reduced


def _reduce_forward(e: np.ndarray, k: int, weights, normalize: bool):
    b, d = e.shape
    if d % k:
        raise UserError(f"embedding dim {d} is not divisible into {k} pieces")
    chunks = e.reshape(b, k, d // k)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or not np.all(np.isfinite(w)):
        raise UserError("piece weights must be k finite values")
    summed = np.einsum("bkd,k->bd", chunks, w)
    norms = numerics.row_norms(summed)
    if np.any(norms == 0.0):
        raise DegenerateInputError("feature summation produced a zero vector")
    out = summed / norms[:, None] if normalize else summed
    return out, (chunks, w, summed, norms)


class ProxyAnchor:
    """Trainer-facing PAL: raw encoder outputs in, loss and gradients out."""

    def __init__(self, params: PALParams | None = None):
        self.params = params or PALParams()

    def proxy_dim(self, embedding_dim: int) -> int:
        return embedding_dim

    def embed(self, z: np.ndarray) -> np.ndarray:
        unit, _ = _normalize_with_norms(np.atleast_2d(z))
        return unit

    def __call__(self, z, labels, pset: ProxySet) -> LossResult:
        return proxy_anchor_loss(z, labels, pset, self.params)

    def state(self) -> dict:
        return {}

    def apply_update(self, result: LossResult, lr: float) -> None:
        pass


class FeatureSummation(ProxyAnchor):
    """PAL scored on the (weighted) sum of equal-size embedding pieces.

    The encoder output is unit-normalized, split into ``pieces`` chunks,
    summed with per-piece weights and compared against proxies of dimension
    ``D / pieces``. Weights exist only in the weighted variant; they start at
    1 and are updated by the trainer alongside the encoder.
    """

    def __init__(self, params: PALParams, weights=None):
        super().__init__(params)
        k = params.pieces
        if params.weighted:
            self.weights = np.ones(k) if weights is None else np.array(weights, dtype=np.float64)
        else:
            self.weights = None

    def proxy_dim(self, embedding_dim: int) -> int:
        if embedding_dim % self.params.pieces:
            raise UserError(f"embedding dim {embedding_dim} is not divisible by {self.params.pieces}")
        return embedding_dim // self.params.pieces

    def embed(self, z: np.ndarray) -> np.ndarray:
        unit, _ = _normalize_with_norms(np.atleast_2d(z))
        return palfs_reduce(unit, self.params.pieces, self.weights, self.params.normalize_reduced)

    def __call__(self, z, labels, pset: ProxySet) -> LossResult:
        z = numerics.as_matrix(z, "embeddings")
        unit, norms = _normalize_with_norms(z)
        k = self.params.pieces
        reduced, (chunks, w, summed, snorms) = _reduce_forward(unit, k, self.weights, self.params.normalize_reduced)
        inner = proxy_anchor_loss(reduced, labels, pset, self.params)
        d_summed = inner.d_embeddings
        if self.params.normalize_reduced:
            d_summed = _normalize_backward(reduced, snorms, d_summed)
        d_chunks = np.einsum("bd,k->bkd", d_summed, w)
        d_weights = np.einsum("bkd,bd->k", chunks, d_summed) if self.weights is not None else None
        d_unit = d_chunks.reshape(unit.shape)
        return LossResult(inner.value, _normalize_backward(unit, norms, d_unit), inner.d_proxies, d_weights)

    def state(self) -> dict:
        return {"weights": None if self.weights is None else [float(v) for v in self.weights]}

    def apply_update(self, result: LossResult, lr: float) -> None:
        if self.weights is not None and result.d_weights is not None:
            self.weights = self.weights - lr * result.d_weights


def make_loss(params: PALParams, weights=None) -> ProxyAnchor:
    if params.pieces == 1 and not params.weighted:
        return ProxyAnchor(params)
    return FeatureSummation(params, weights)
