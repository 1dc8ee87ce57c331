"""Generative maps: latent state -> Gaussian over bin logits X -> multinomial counts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .autodiff import DenseNet, backward, forward
from .errors import NumericalError, ValidationError
from .latent_prior import sigmoid, softplus

__all__ = [
    "DecoderG",
    "BinDensity",
    "STD_FLOOR",
    "decode",
    "decoder_forward",
    "decoder_backward",
    "density_from_X",
    "log_multinomial_coef",
    "obs_logpdf",
    "obs_logpdf_grad",
    "gaussian_logpdf_grad",
]

STD_FLOOR = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class DecoderG:
    """Network emitting ``(mean, raw scale)`` of a diagonal Gaussian over X."""

    net: DenseNet

    def __post_init__(self):
        if self.net.out_dim % 2:
            raise ValidationError("decoder output must be 2 * d")

    @property
    def d(self) -> int:
        return self.net.out_dim // 2

    @property
    def in_dim(self) -> int:
        return self.net.in_dim

    @classmethod
    def build(cls, in_dim, d, hidden=(), dropout_rate=0.0, rng=None):
        sizes = [in_dim, *hidden, 2 * d]
        return cls(DenseNet.build(sizes, "relu", "identity", dropout_rate, rng))


@dataclass(frozen=True)
class BinDensity:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError("bin density must be a non-negative vector summing to 1")
        object.__setattr__(self, "probs", p)

    @property
    def d(self) -> int:
        return self.probs.size


def complex_to_input(z) -> np.ndarray:
    """Interleave ``[Re z_1, Im z_1, Re z_2, ...]`` along the last axis."""
    z = np.asarray(z, dtype=complex)
    return np.stack([z.real, z.imag], axis=-1).reshape(*z.shape[:-1], 2 * z.shape[-1])


def decoder_forward(g: DecoderG, inputs, mode="eval", rng=None):
    """Batched decode of real inputs (rows, in_dim) -> (mean, std, cache)."""
    out, tape = forward(g.net, inputs, mode, rng)
    if not np.all(np.isfinite(out)):
        raise NumericalError("decoder produced non-finite output")
    d = g.d
    mean, raw = out[..., :d], out[..., d:]
    std = np.maximum(softplus(raw), STD_FLOOR)
    return mean, std, (tape, raw)


def decoder_backward(cache, g_mean, g_std):
    tape, raw = cache
    g_raw = g_std * sigmoid(raw) * (softplus(raw) > STD_FLOOR)
    return backward(tape, np.concatenate([g_mean, g_raw], axis=-1))


def decode(g: DecoderG, z):
    """Gaussian over X for complex latent ``z`` (length h): ``(mean, std)``."""
    z = np.asarray(z)
    x = complex_to_input(z) if np.iscomplexobj(z) else np.asarray(z, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("latent state must be finite")
    mean, std, _ = decoder_forward(g, x, "eval")
    return mean, std


def density_from_X(X) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    X = np.asarray(X, dtype=float)
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_multinomial_coef(counts) -> np.ndarray:
    counts = np.asarray(counts)
    return gammaln(counts.sum(axis=-1) + 1.0) - gammaln(counts + 1.0).sum(axis=-1)


def _check_counts(counts):
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValidationError("counts must be non-negative")
    if np.any(counts.sum(axis=-1) <= 0):
        raise ValidationError("every frame needs a positive particle total")
    return counts


def obs_logpdf(counts, X) -> float:
    """Multinomial log-likelihood of bin counts given logits X (summed over frames)."""
    counts = _check_counts(counts)
    X = np.asarray(X, dtype=float)
    if counts.shape != X.shape:
        raise ValidationError(f"counts {counts.shape} and X {X.shape} differ in shape")
    logp = X - logsumexp(X, axis=-1, keepdims=True)
    return float(np.sum(log_multinomial_coef(counts)) + np.sum(counts * logp))


def obs_logpdf_grad(counts, X, logcoef=None):
    """Value and gradient ``counts - f softmax(X)``; ``logcoef`` may be cached."""
    X = np.asarray(X, dtype=float)
    lse = logsumexp(X, axis=-1, keepdims=True)
    if logcoef is None:
        logcoef = log_multinomial_coef(counts)
    value = float(np.sum(logcoef) + np.sum(counts * (X - lse)))
    f = counts.sum(axis=-1, keepdims=True)
    return value, counts - f * np.exp(X - lse)


def gaussian_logpdf_grad(x, mean, std):
    """Diagonal Gaussian log density summed over all entries and its gradients."""
    r = (x - mean) / std
    value = float(np.sum(-np.log(std) - 0.5 * r * r) - HALF_LOG_2PI * r.size)
    g_x = -r / std
    g_std = (r * r - 1.0) / std
    return value, g_x, -g_x, g_std
