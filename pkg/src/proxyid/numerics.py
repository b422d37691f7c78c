"""Dense linear algebra and seeded randomness used by every other module.

Matrices are plain ``float64`` numpy arrays. The pseudoinverse goes through a
one-sided Jacobi SVD written here rather than LAPACK so that the rank cutoff
and convergence rule are under our control; ``numpy.linalg`` is only used by
the tests as an independent cross-check.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable

import numpy as np

from .errors import CorruptArtifactError, DegenerateInputError

MATRIX_MAGIC = b"PXMATRIX"
RANK_CUTOFF = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``, e.g. one per generated scene."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the strict upper triangle, row-major order."""
    return np.triu_indices(n, k=1)


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = row_norms(m)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm row")
    return m / norms[:, None]


def cosine_similarity_matrix(m) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``m``.

    Returns the ``n(n-1)/2`` strict-upper-triangle entries, ordered as
    :func:`pair_indices`. The diagonal is never included.
    """
    m = as_matrix(m)
    if m.shape[0] < 2:
        raise ValueError("need at least two rows")
    unit = normalize_rows(m)
    i, j = pair_indices(m.shape[0])
    s = np.einsum("ij,ij->i", unit[i], unit[j])
    return np.clip(s, -1.0, 1.0)


def jacobi_svd(a, tol: float = 1e-15, max_sweeps: int = 80) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``a = U @ diag(s) @ Vt`` by one-sided (Hestenes) Jacobi rotations.

    Singular values come back sorted in descending order.
    """
    a = as_matrix(a)
    if min(a.shape) < 1:
        raise ValueError("empty matrix")
    if a.shape[0] < a.shape[1]:
        u, s, vt = jacobi_svd(a.T, tol=tol, max_sweeps=max_sweeps)
        return vt.T, s, u.T

    u = a.copy()
    n = u.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui = u[:, i]
                uj = u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui_old = ui.copy()
                u[:, i] = c * ui_old - s * uj
                u[:, j] = s * ui_old + c * uj
                vi_old = v[:, i].copy()
                v[:, i] = c * vi_old - s * v[:, j]
                v[:, j] = s * vi_old + c * v[:, j]
                rotated = True
        if not rotated:
            break

    sigma = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    u = u[:, order]
    v = v[:, order]
    nonzero = sigma > 0.0
    u[:, nonzero] /= sigma[nonzero]
    return u, sigma, v.T


def pseudoinverse(a) -> np.ndarray:
    """Moore-Penrose inverse; singular values below ``sigma_max * 1e-12`` count as zero."""
    a = as_matrix(a)
    u, s, vt = jacobi_svd(a)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = s > s[0] * RANK_CUTOFF
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def moore_penrose_residuals(a: np.ndarray, a_pinv: np.ndarray) -> tuple[float, float, float, float]:
    """Frobenius residuals of the four Penrose conditions."""
    fro = np.linalg.norm
    return (
        float(fro(a @ a_pinv @ a - a)),
        float(fro(a_pinv @ a @ a_pinv - a_pinv)),
        float(fro((a @ a_pinv).T - a @ a_pinv)),
        float(fro((a_pinv @ a).T - a_pinv @ a)),
    )


def kaiming_normal_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """N(0, 2/cols) entries; the fan is the vector dimension ``cols``."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / cols)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-6
) -> float:
    return relative_error(analytic, numeric_gradient(f, x, h))


def write_matrix(fh: BinaryIO, a) -> None:
    m = as_matrix(a)
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<QQ", m.shape[0], m.shape[1]))
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(8)
    if magic != MATRIX_MAGIC:
        raise CorruptArtifactError(f"bad matrix magic {magic!r}")
    dims = fh.read(16)
    if len(dims) != 16:
        raise CorruptArtifactError("truncated matrix header")
    rows, cols = struct.unpack("<QQ", dims)
    nbytes = rows * cols * 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise CorruptArtifactError(f"truncated matrix payload: expected {nbytes} bytes, got {len(payload)}")
    m = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise CorruptArtifactError("matrix payload has non-finite entries")
    return m


def save_matrix(path, a) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, a)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_matrix(fh)
