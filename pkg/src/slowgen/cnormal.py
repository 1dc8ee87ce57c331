"""Circularly-symmetric complex normal distribution.

A p-variate ``CN(mu, Sigma)`` variable is handled through its real twin of
dimension 2p with mean ``[Re mu; Im mu]`` and covariance
``0.5 * [[Re S, -Im S], [Im S, Re S]]``.  Densities agree exactly because
Lebesgue measure on C^p and R^2p coincide under ``y -> [Re y; Im y]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "ComplexGaussian",
    "RealGaussian",
    "cn_to_real",
    "cn_logpdf",
    "real_logpdf",
    "cn_sample",
]

_SYM_TOL = 1e-12


def _check_pd(cov: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValidationError(f"{what}: covariance is not positive definite") from None


@dataclass(frozen=True)
class RealGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError(f"shape mismatch: mean {mean.shape}, cov {cov.shape}")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > _SYM_TOL * scale:
            raise ValidationError("RealGaussian: covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        _check_pd(cov, "RealGaussian")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class ComplexGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=complex))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=complex))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValidationError(f"shape mismatch: mean {mean.shape}, cov {cov.shape}")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.conj().T)) > _SYM_TOL * scale:
            raise ValidationError("ComplexGaussian: covariance is not Hermitian")
        cov = 0.5 * (cov + cov.conj().T)
        _check_pd(_real_block(cov), "ComplexGaussian")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _real_block(cov: np.ndarray) -> np.ndarray:
    re, im = cov.real, cov.imag
    return 0.5 * np.block([[re, -im], [im, re]])


def cn_to_real(g: ComplexGaussian) -> RealGaussian:
    """Return the real 2p-dimensional Gaussian isomorphic to ``g``."""
    return RealGaussian(np.concatenate([g.mean.real, g.mean.imag]), _real_block(g.cov))


def real_logpdf(g: RealGaussian, w) -> float:
    w = np.asarray(w, dtype=float)
    if w.shape != g.mean.shape:
        raise ValidationError(f"expected point of length {g.dim}, got shape {w.shape}")
    chol = np.linalg.cholesky(g.cov)
    r = np.linalg.solve(chol, w - g.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * g.dim * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * r @ r)


def cn_logpdf(g: ComplexGaussian, y) -> float:
    """Log density ``-p log(pi) - log det(S) - (y-mu)^* S^{-1} (y-mu)``."""
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    if y.shape != g.mean.shape:
        raise ValidationError(f"expected point of length {g.dim}, got shape {y.shape}")
    chol = np.linalg.cholesky(g.cov)
    r = np.linalg.solve(chol, y - g.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol).real))
    return float(-g.dim * np.log(np.pi) - logdet - np.vdot(r, r).real)


def cn_sample(g: ComplexGaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample by sampling the real twin and recombining Re + i Im."""
    real = cn_to_real(g)
    chol = np.linalg.cholesky(real.cov)
    w = real.mean + chol @ rng.standard_normal(real.dim)
    p = g.dim
    return w[:p] + 1j * w[p:]
