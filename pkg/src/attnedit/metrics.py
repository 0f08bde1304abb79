"""Evaluation metrics: log-spectral distance, KL divergence over event
distributions, Frechet distance over classifier features, and masked region
preservation."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError

LOG_EPS = 1e-8
KL_EPS = 1e-8


def lsd(a: np.ndarray, b: np.ndarray) -> float:
    """Log-spectral distance: rms over frames of the per-frame rms log10 gap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.log10(a + LOG_EPS) - np.log10(b + LOG_EPS)
    return float(np.sqrt(np.mean(np.mean(diff * diff, axis=0))))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with epsilon smoothing of q; 0 log 0 = 0; natural log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    q = q + KL_EPS
    q = q / q.sum()
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Gaussian Frechet distance between two feature sets.

    The covariance cross term uses an eigendecomposition of the symmetrized
    product sqrt(Sa) Sb sqrt(Sa); eigenvalues below -1e-8 are an error,
    small negatives are clamped to zero.
    """
    fa = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    dim = fa.shape[1]
    if fb.shape[1] != dim:
        raise ConfigError("feature dimensions disagree")
    if fa.shape[0] < dim + 1 or fb.shape[0] < dim + 1:
        raise ConfigError(f"need at least dim+1 = {dim + 1} feature vectors per set")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.atleast_2d(np.cov(fa, rowvar=False))
    cb = np.atleast_2d(np.cov(fb, rowvar=False))

    evals_a, evecs_a = np.linalg.eigh(ca)
    evals_a = np.clip(evals_a, 0.0, None)
    sqrt_a = (evecs_a * np.sqrt(evals_a)) @ evecs_a.T
    inner = sqrt_a @ cb @ sqrt_a
    inner = (inner + inner.T) / 2.0
    evals = np.linalg.eigvalsh(inner)
    if np.any(evals < -1e-8):
        raise NumericError(f"covariance product not PSD: min eigenvalue {evals.min()}")
    tr_cross = float(np.sum(np.sqrt(np.clip(evals, 0.0, None))))
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross)


def region_preservation(source: np.ndarray, edited: np.ndarray,
                        mask: np.ndarray) -> float:
    """LSD restricted to the masked (unedited) cells."""
    source = np.asarray(source, dtype=np.float64)
    edited = np.asarray(edited, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if source.shape != edited.shape or source.shape != mask.shape:
        raise ConfigError("shape mismatch between grids and mask")
    if not mask.any():
        raise ConfigError("empty region mask")
    diff = np.log10(source[mask] + LOG_EPS) - np.log10(edited[mask] + LOG_EPS)
    return float(np.sqrt(np.mean(diff * diff)))
