#!/usr/bin/env python3
"""
Small numeric helpers shared by the basis, BGL and prediction services.
"""

import hashlib
from typing import Optional

import numpy as np
from scipy import linalg

from bgldown.utils.errors import NotPositiveDefinite


def soft_threshold(x: np.ndarray, threshold: float) -> np.ndarray:
    """Elementwise soft-thresholding operator sign(x) * max(|x| - t, 0)."""
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def tv_denoise_1d(y: np.ndarray, weight: float) -> np.ndarray:
    """Exact 1-D total-variation denoising.

    Solves min_x 0.5 * ||x - y||^2 + weight * sum_k |x[k+1] - x[k]| with the
    direct (taut-string style) algorithm of Condat, in O(N) typical time.

    Args:
        y: Input signal
        weight: Non-negative fusion weight

    Returns:
        The denoised signal (new array)
    """
    y = np.asarray(y, dtype=np.float64)
    width = y.shape[0]
    out = np.empty(width, dtype=np.float64)
    if width == 0:
        return out
    if width == 1 or weight <= 0.0:
        out[:] = y
        return out

    lam = float(weight)
    two_lam = 2.0 * lam
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam

    while True:
        while k == width - 1:
            if umin < 0.0:
                # vmin too high, negative jump
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = kminus = k0
                vmin = y[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                # vmax too low, positive jump
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = kplus = k0
                vmax = y[k0]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                out[k0:k + 1] = vmin
                return out

        umin += y[k + 1] - vmin
        if umin < -lam:
            while True:
                out[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = kplus = kminus = k0
            vmin = y[k0]
            vmax = vmin + two_lam
            umin, umax = lam, -lam
            continue

        umax += y[k + 1] - vmax
        if umax > lam:
            while True:
                out[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = kplus = kminus = k0
            vmax = y[k0]
            vmin = vmax - two_lam
            umin, umax = lam, -lam
            continue

        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def fused_lasso_prox(a: np.ndarray, sparsity: float, fusion: float) -> np.ndarray:
    """Proximal operator of sparsity*||z||_1 + fusion*TV(z) for a 1-D signal.

    TV denoising followed by soft thresholding gives the exact prox of the
    combined penalty.
    """
    z = tv_denoise_1d(a, fusion) if fusion > 0.0 else np.array(a, dtype=np.float64)
    if sparsity > 0.0:
        z = soft_threshold(z, sparsity)
    return z


def offdiag_mask(p: int) -> np.ndarray:
    """Boolean p x p mask selecting off-diagonal entries."""
    return ~np.eye(p, dtype=bool)


def is_spd(matrix: np.ndarray, floor: float = 0.0) -> bool:
    """True when a symmetric matrix has minimum eigenvalue above floor."""
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(matrix).max(initial=0.0))):
        return False
    return bool(np.linalg.eigvalsh(matrix).min() > floor)


def logdet_spd(matrix: np.ndarray, what: str = "matrix") -> float:
    """Log-determinant of an SPD matrix through its Cholesky factor.

    Raises:
        NotPositiveDefinite: if the factorization fails
    """
    try:
        chol = linalg.cholesky(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError as err:
        raise NotPositiveDefinite(f"{what} is not positive definite") from err
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def floor_eigenvalues(blocks: np.ndarray, floor: float) -> np.ndarray:
    """Project a stack of symmetric matrices onto {X : eig(X) >= floor}.

    Blocks already above the floor are returned untouched so exact zeros
    survive.
    """
    out = np.array(blocks, dtype=np.float64, copy=True)
    for idx in range(out.shape[0]):
        w, v = np.linalg.eigh(out[idx])
        if w.min() < floor:
            out[idx] = (v * np.maximum(w, floor)) @ v.T
    return out


def sign_normalize_columns(matrix: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's largest-magnitude entry is positive."""
    if matrix.size == 0:
        return matrix
    idx = np.argmax(np.abs(matrix), axis=0)
    signs = np.sign(matrix[idx, np.arange(matrix.shape[1])])
    signs[signs == 0] = 1.0
    return matrix * signs


def relative_change(old: float, new: float, scale: Optional[float] = None) -> float:
    """Relative decrease (old - new) / max(1, |scale|)."""
    ref = abs(old if scale is None else scale)
    return (old - new) / max(1.0, ref)


def file_digest(path: str) -> str:
    """SHA256 hash of a file, used in provenance sidecars."""
    sha256_hash = hashlib.sha256()
    with open(path, "rb") as f:
        # Read file in chunks to handle large files
        for chunk in iter(lambda: f.read(65536), b""):
            sha256_hash.update(chunk)
    return sha256_hash.hexdigest()

