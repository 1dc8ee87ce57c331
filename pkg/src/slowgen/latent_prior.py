"""Stable complex Ornstein-Uhlenbeck prior on the latent processes.

Each process evolves as ``z_t = exp(lam) z_{t-1} + sigma eps``, eps ~ CN(0, 1),
with ``Re(lam) < 0`` and ``sigma^2 = 1 - exp(2 Re lam)`` so that the marginal is
CN(0, 1) at every step.  On the real plane that is
``[Re z_t; Im z_t] ~ N(s R [Re z_{t-1}; Im z_{t-1}], sigma^2 / 2 I)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnormal import ComplexGaussian, cn_logpdf
from .errors import ValidationError

__all__ = [
    "LatentPrior",
    "rotation",
    "softplus",
    "inv_softplus",
    "sigmoid",
]

LOG_PI = np.log(np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


def rotation(angle) -> np.ndarray:
    """2x2 rotation matrix (or a stack of them for array ``angle``)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


@dataclass(frozen=True)
class LatentPrior:
    re_lambda: np.ndarray
    im_lambda: np.ndarray

    def __post_init__(self):
        re = np.atleast_1d(np.asarray(self.re_lambda, dtype=float))
        im = np.atleast_1d(np.asarray(self.im_lambda, dtype=float))
        if re.shape != im.shape or re.ndim != 1:
            raise ValidationError("re_lambda and im_lambda must be 1-d of equal length")
        if not np.all(np.isfinite(re)) or not np.all(np.isfinite(im)):
            raise ValidationError("lambda must be finite")
        if np.any(re >= 0):
            raise ValidationError("stability requires Re(lambda) < 0 for every process")
        object.__setattr__(self, "re_lambda", re)
        object.__setattr__(self, "im_lambda", im)

    @classmethod
    def from_unconstrained(cls, a, im) -> "LatentPrior":
        """Build from ``Re lam = -softplus(a)``; never violates stability."""
        return cls(-softplus(np.asarray(a, dtype=float)), im)

    @classmethod
    def initial(cls, h: int) -> "LatentPrior":
        """Re lam spread log-uniformly over [-2, -0.01] (a single process sits at
        the log-midpoint), Im lam = 0."""
        if h < 1:
            raise ValidationError("h must be >= 1")
        re = -np.geomspace(0.01, 2.0, h) if h > 1 else np.array([-np.sqrt(0.01 * 2.0)])
        return cls(re, np.zeros(h))

    @property
    def h(self) -> int:
        return self.re_lambda.size

    @property
    def lam(self) -> np.ndarray:
        return self.re_lambda + 1j * self.im_lambda

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.re_lambda)

    @property
    def sigma2(self) -> np.ndarray:
        return -np.expm1(2.0 * self.re_lambda)

    def _check_j(self, j):
        if not 0 <= j < self.h:
            raise ValidationError(f"process index {j} out of range for h={self.h}")

    def slow_to_fast(self) -> np.ndarray:
        """Process indices ordered from slowest (Re lam nearest 0) to fastest."""
        return np.argsort(-self.re_lambda, kind="stable")

    def transition_params(self, j: int):
        self._check_j(j)
        return float(self.s[j]), rotation(self.im_lambda[j])

    def transition_logpdf(self, j: int, z_prev: complex, z_next: complex) -> float:
        return self.multi_step_logpdf(j, z_prev, z_next, 1)

    def multi_step_moments(self, j: int, z_start: complex, tau: int):
        """Mean (2-vector) and per-component variance of z_{t+tau} given z_t."""
        self._check_j(j)
        if int(tau) != tau or tau < 1:
            raise ValidationError("tau must be a positive integer")
        re, im = self.re_lambda[j], self.im_lambda[j]
        a = np.exp(tau * re) * rotation(tau * im)
        mean = a @ np.array([np.real(z_start), np.imag(z_start)])
        # 0.5 sigma^2 (1 - e^{2 tau re}) / (1 - e^{2 re}) with sigma^2 = 1 - e^{2 re}
        var = -0.5 * np.expm1(2.0 * tau * re)
        return mean, float(var)

    def multi_step_logpdf(self, j, z_start, z_end, tau: int) -> float:
        mean, var = self.multi_step_moments(j, z_start, tau)
        r = np.array([np.real(z_end), np.imag(z_end)]) - mean
        return float(-np.log(2 * np.pi * var) - 0.5 * (r @ r) / var)

    def stationary_moments(self, j: int):
        self._check_j(j)
        return np.zeros(2), 0.5 * np.eye(2)

    def autocovariance(self, j: int, tau: int) -> np.ndarray:
        """``E[w_{t+tau} w_t^T]`` for the stationary real pair w = (Re z, Im z).

        Includes the stationary factor 1/2, i.e. ``0.5 e^{tau Re lam} Rot(tau Im lam)``.
        """
        self._check_j(j)
        if int(tau) != tau or tau < 0:
            raise ValidationError("tau must be a non-negative integer")
        return 0.5 * np.exp(tau * self.re_lambda[j]) * rotation(tau * self.im_lambda[j])

    def joint_logpdf(self, paths) -> float:
        """Log density of complex paths of shape (h, T+1) under the prior."""
        paths = np.atleast_2d(np.asarray(paths, dtype=complex))
        if paths.shape[0] != self.h:
            raise ValidationError(f"expected {self.h} paths, got {paths.shape[0]}")
        std = ComplexGaussian(np.zeros(1), np.eye(1))
        total = 0.0
        for j in range(self.h):
            total += cn_logpdf(std, paths[j, :1])
            for t in range(1, paths.shape[1]):
                total += self.transition_logpdf(j, paths[j, t - 1], paths[j, t])
        return total

    def sample_path(self, j: int, T: int, z0=None, rng=None) -> np.ndarray:
        self._check_j(j)
        if T < 0:
            raise ValidationError("T must be >= 0")
        rng = np.random.default_rng() if rng is None else rng
        out = np.empty(T + 1, dtype=complex)
        if z0 is None:
            z0 = np.sqrt(0.5) * (rng.standard_normal() + 1j * rng.standard_normal())
        out[0] = z0
        step = np.exp(self.lam[j])
        sd = np.sqrt(0.5 * self.sigma2[j])
        eps = rng.standard_normal((T, 2))
        for t in range(1, T + 1):
            out[t] = out[t - 1] * step + sd * (eps[t - 1, 0] + 1j * eps[t - 1, 1])
        return out

    def path_logpdf_grad(self, Z: np.ndarray):
        """Vectorized log density of real-isomorphic paths and its gradients.

        ``Z`` has shape (..., T+1, h, 2).  Returns ``(value, dZ, d_re, d_im)``
        where value is summed over all leading axes.
        """
        s, sig2, th = self.s, self.sigma2, self.im_lambda
        A = s[:, None, None] * rotation(th)                       # (h, 2, 2)
        z0 = Z[..., 0, :, :]
        prev, nxt = Z[..., :-1, :, :], Z[..., 1:, :, :]
        w = nxt - np.einsum("jab,...jb->...ja", A, prev)
        n_lead = int(np.prod(Z.shape[:-3], dtype=int))
        n_trans = Z.shape[-3] - 1
        sq = np.sum(w**2, axis=-1)                                # (..., T, h)
        value = (-n_lead * Z.shape[-2] * LOG_PI - np.sum(z0**2)
                 - n_lead * n_trans * np.sum(np.log(np.pi * sig2))
                 - np.sum(sq / sig2))
        dZ = np.zeros_like(Z)
        dZ[..., 0, :, :] -= 2.0 * z0
        gw = -2.0 * w / sig2[:, None]
        dZ[..., 1:, :, :] += gw
        dZ[..., :-1, :, :] -= np.einsum("jab,...ja->...jb", A, gw)
        # dA_j = sum_t (-gw) prev^T
        dA = -np.einsum("nja,njb->jab", gw.reshape(-1, self.h, 2), prev.reshape(-1, self.h, 2))
        rot = rotation(th)
        drot = np.stack([np.stack([-np.sin(th), -np.cos(th)], -1),
                         np.stack([np.cos(th), -np.sin(th)], -1)], -2)
        d_s = np.einsum("jab,jab->j", dA, rot)
        d_th = s * np.einsum("jab,jab->j", dA, drot)
        sq_sum = sq.reshape(-1, self.h).sum(0)
        d_sig2 = -n_lead * n_trans / sig2 + sq_sum / sig2**2
        # s = e^re, sigma^2 = 1 - e^{2 re}
        d_re = d_s * s + d_sig2 * (-2.0 * s**2)
        return float(value), dZ, d_re, d_th

    def real_path_logpdf_grad(self, Z: np.ndarray):
        """Same as :meth:`path_logpdf_grad` for real-valued processes (Im lam ignored).

        ``Z`` has shape (..., T+1, h).  Each process keeps the marginal
        variance 1/2 of the complex model's real part.
        """
        s, sig2 = self.s, self.sigma2
        z0 = Z[..., 0, :]
        prev, nxt = Z[..., :-1, :], Z[..., 1:, :]
        w = nxt - s * prev
        n_lead = int(np.prod(Z.shape[:-2], dtype=int))
        n_trans = Z.shape[-2] - 1
        value = (-0.5 * n_lead * Z.shape[-1] * LOG_PI - np.sum(z0**2)
                 - 0.5 * n_lead * n_trans * np.sum(np.log(np.pi * sig2))
                 - np.sum(w**2 / sig2))
        dZ = np.zeros_like(Z)
        dZ[..., 0, :] -= 2.0 * z0
        gw = -2.0 * w / sig2
        dZ[..., 1:, :] += gw
        dZ[..., :-1, :] -= s * gw
        axes = tuple(range(Z.ndim - 1))
        d_s = -np.sum(gw * prev, axis=axes)
        d_sig2 = -0.5 * n_lead * n_trans / sig2 + np.sum(w**2, axis=axes) / sig2**2
        d_re = d_s * s + d_sig2 * (-2.0 * s**2)
        return float(value), dZ, d_re
