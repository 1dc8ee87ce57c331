"""Comparison models sharing the data, observation model and decoder of the main model.

* ``real_latent``   real OU processes (Im lambda = 0), same engine otherwise
* ``nn_x``          no latent z; ``X_{t+1} = X_t + NN(X_t) + sigma eps``
* ``koopman_prob``  ``z_{t+1} = K z_t + W eps`` with dense K and diagonal W
* ``koopman_det``   ``z_{t+1} = K z_t``; only z_0 is uncertain

No stability constraint is placed on K: instability is measured
(:func:`spectral_radius`) and reported by :func:`predict_baseline`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DenseNet, backward, forward
from .errors import NumericalError, ValidationError
from .gen_maps import DecoderG
from .vi_engine import (
    ChainPosterior,
    Model,
    QXPosterior,
    QZPosterior,
    TrainConfig,
    build_model,
    fit,
)

__all__ = [
    "BASELINE_KINDS",
    "BaselineKind",
    "KoopmanProbDynamics",
    "KoopmanDetDynamics",
    "Z0Posterior",
    "NNXDynamics",
    "build_baseline_model",
    "train_baseline",
    "spectral_radius",
    "predict_baseline",
    "DIVERGENCE_THRESHOLD",
]

BASELINE_KINDS = ("real_latent", "nn_x", "koopman_prob", "koopman_det")
DIVERGENCE_THRESHOLD = 1e6
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class BaselineKind:
    tag: str
    koopman_dim: int = 10
    nnx_hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.tag not in BASELINE_KINDS:
            raise ValidationError(f"unknown baseline {self.tag!r}; expected one of {BASELINE_KINDS}")
        if self.koopman_dim < 1:
            raise ValidationError("Koopman dimension must be >= 1")


class KoopmanProbDynamics:
    kind = "koopman_prob"

    def __init__(self, K, logw):
        self.K = np.asarray(K, dtype=float)
        self.logw = np.asarray(logw, dtype=float)

    @classmethod
    def initial(cls, dim):
        return cls(0.95 * np.eye(dim), np.full(dim, np.log(0.3)))

    @property
    def h(self):
        return self.K.shape[0]

    n_channels = h

    @property
    def groups(self):
        return [self.h]

    def params(self):
        return {"koop/K": self.K, "koop/logw": self.logw}

    def logpdf_grad(self, Z):
        """Standard-normal z_0 and Gaussian transitions; Z is (..., T+1, C)."""
        K, w2 = self.K, np.exp(2.0 * self.logw)
        z0, prev, nxt = Z[..., 0, :], Z[..., :-1, :], Z[..., 1:, :]
        r = nxt - prev @ K.T
        n_trans = int(np.prod(r.shape[:-1], dtype=int))
        C = self.h
        value = (-0.5 * z0.size * LOG_2PI - 0.5 * np.sum(z0**2)
                 - n_trans * (0.5 * C * LOG_2PI + np.sum(self.logw))
                 - 0.5 * np.sum(r**2 / w2))
        dZ = np.zeros_like(Z)
        dZ[..., 0, :] -= z0
        gr = -r / w2
        dZ[..., 1:, :] += gr
        dZ[..., :-1, :] -= gr @ K
        axes = tuple(range(Z.ndim - 1))
        dK = -gr.reshape(-1, C).T @ prev.reshape(-1, C)
        dlogw = -n_trans + np.sum(r**2, axis=axes) / w2
        return float(value), dZ, {"koop/K": dK, "koop/logw": dlogw}

    def rollout(self, z, P, rng):
        out = np.empty((z.shape[0], P + 1, self.h))
        out[:, 0] = z
        w = np.exp(self.logw)
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, P + 1):
                out[:, t] = out[:, t - 1] @ self.K.T + w * rng.standard_normal(z.shape)
        return out


class KoopmanDetDynamics:
    kind = "koopman_det"

    def __init__(self, K):
        self.K = np.asarray(K, dtype=float)

    @classmethod
    def initial(cls, dim):
        return cls(0.95 * np.eye(dim))

    @property
    def h(self):
        return self.K.shape[0]

    n_channels = h

    def params(self):
        return {"koop/K": self.K}

    def logpdf_grad(self, Z):
        """Only z_0 is random: standard normal."""
        z0 = Z[..., 0, :]
        dZ = np.zeros_like(Z)
        dZ[..., 0, :] = -z0
        return float(-0.5 * z0.size * LOG_2PI - 0.5 * np.sum(z0**2)), dZ, {}

    def rollout(self, z, P, rng=None):
        out = np.empty((z.shape[0], P + 1, self.h))
        out[:, 0] = z
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, P + 1):
                out[:, t] = out[:, t - 1] @ self.K.T
        return out


class Z0Posterior:
    """Free per-sequence Gaussian over z_0; the path follows ``z_t = K^t z_0``."""

    def __init__(self, mean, logstd, dynamics: KoopmanDetDynamics):
        self.mean = np.asarray(mean, dtype=float)
        self.logstd = np.asarray(logstd, dtype=float)
        self.dynamics = dynamics

    @property
    def n_channels(self):
        return self.mean.shape[1]

    def noise_shape(self, batch, n):
        return (batch, self.n_channels)

    def params(self):
        return {"z0/mean": self.mean, "z0/logstd": self.logstd}

    def sample(self, X, eps, idx):
        n = X.shape[-2]
        std = np.exp(self.logstd[idx])
        z0 = self.mean[idx] + std * eps
        Z = self.dynamics.rollout(z0, n - 1)
        if not np.all(np.isfinite(Z)):
            raise NumericalError("deterministic Koopman rollout overflowed")
        logq = float(np.sum(-self.logstd[idx] - 0.5 * eps**2) - 0.5 * eps.size * LOG_2PI)
        return Z, logq, (Z, eps, std)

    def backward(self, g_Z, cache, idx):
        Z, eps, std = cache
        K = self.dynamics.K
        g = g_Z[:, -1].copy()
        dK = np.zeros_like(K)
        for t in range(Z.shape[1] - 1, 0, -1):
            dK += g.T @ Z[:, t - 1]
            g = g_Z[:, t - 1] + g @ K
        g_mean = np.zeros_like(self.mean)
        g_logstd = np.zeros_like(self.logstd)
        np.add.at(g_mean, idx, g)
        np.add.at(g_logstd, idx, g * eps * std + 1.0)
        return {"koop/K": dK, "z0/mean": g_mean, "z0/logstd": g_logstd}, 0.0


class NNXDynamics:
    """Residual neural dynamics directly on the bin logits."""

    kind = "nn_x"
    h = 0
    n_channels = 0

    def __init__(self, net: DenseNet, log_sigma):
        self.net = net
        self.log_sigma = np.atleast_1d(np.asarray(log_sigma, dtype=float))

    @classmethod
    def initial(cls, d, hidden=(64, 64, 64), rng=None, zero_output=True):
        net = DenseNet.build([d, *hidden, d], "relu", "identity", 0.0, rng)
        if zero_output:
            net.layers[-1].weights[...] = 0.0
        return cls(net, np.log(0.1))

    def params(self):
        out = self.net.params("nnx/")
        out["nnx/log_sigma"] = self.log_sigma
        return out

    def step_mean(self, X):
        return X + self.net(X)

    def x_logpdf_grad(self, X):
        """Standard-normal X_0 and Gaussian residual transitions; X is (b, T+1, d)."""
        b, n, d = X.shape
        sig2 = np.exp(2.0 * self.log_sigma[0])
        x0 = X[:, 0]
        grads = {}
        value = -0.5 * x0.size * LOG_2PI - 0.5 * np.sum(x0**2)
        gX = np.zeros_like(X)
        gX[:, 0] -= x0
        if n > 1:
            prev = X[:, :-1].reshape(-1, d)
            out, tape = forward(self.net, prev, "eval")
            r = X[:, 1:].reshape(-1, d) - prev - out
            value += (-r.shape[0] * d * (self.log_sigma[0] + 0.5 * LOG_2PI)
                      - 0.5 * np.sum(r**2) / sig2)
            gr = -r / sig2
            pg, gin = backward(tape, -gr)
            gX[:, 1:] += gr.reshape(b, n - 1, d)
            gX[:, :-1] += (-gr + gin).reshape(b, n - 1, d)
            for j, (gW, gb) in enumerate(pg):
                grads[f"nnx/{j}/W"] = gW
                grads[f"nnx/{j}/b"] = gb
            grads["nnx/log_sigma"] = np.array([-r.size + np.sum(r**2) / sig2])
        else:
            grads["nnx/log_sigma"] = np.zeros(1)
        return float(value), gX, grads

    def rollout(self, X, P, rng):
        out = np.empty((X.shape[0], P + 1, X.shape[1]))
        out[:, 0] = X
        sigma = np.exp(self.log_sigma[0])
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, P + 1):
                cur = out[:, t - 1]
                if not np.all(np.isfinite(cur)) or np.max(np.abs(cur)) > DIVERGENCE_THRESHOLD:
                    out[:, t:] = np.nan
                    break
                out[:, t] = self.step_mean(cur) + sigma * rng.standard_normal(cur.shape)
        return out


def build_baseline_model(kind: str, counts, config: TrainConfig, rng=None) -> Model:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    counts = np.asarray(counts)
    N, d = counts.shape[0], counts.shape[-1]
    qx = QXPosterior.from_counts(counts, config.qx_logstd_init)
    dim = config.koopman_dim or 2 * config.h
    if kind == "real_latent":
        return build_model(kind, counts, config, rng)
    if kind == "nn_x":
        dyn = NNXDynamics.initial(d, config.nnx_hidden, rng)
        return Model(kind, dyn, None, None, qx, config)
    decoder = DecoderG.build(dim, d, config.decoder_hidden, config.decoder_dropout, rng)
    if kind == "koopman_prob":
        dyn = KoopmanProbDynamics.initial(dim)
        post = ChainPosterior(QZPosterior.build(d, dyn.groups, config.qz_hidden, rng))
    elif kind == "koopman_det":
        dyn = KoopmanDetDynamics.initial(dim)
        post = Z0Posterior(rng.normal(0.0, 0.5, (N, dim)), np.full((N, dim), np.log(0.1)), dyn)
    else:
        raise ValidationError(f"unknown model kind {kind!r}")
    return Model(kind, dyn, decoder, post, qx, config)


def train_baseline(kind, dataset, config: TrainConfig, log=None) -> Model:
    """Train one of the comparison models with the shared ELBO machinery."""
    tag = kind.tag if isinstance(kind, BaselineKind) else kind
    if tag not in BASELINE_KINDS:
        raise ValidationError(f"unknown baseline {tag!r}")
    counts = dataset.counts if hasattr(dataset, "counts") else np.asarray(dataset)
    rng = np.random.default_rng(config.seed)
    model = build_baseline_model(tag, counts, config, rng)
    return fit(model, counts, config, rng, mask=getattr(dataset, "mask", None), log=log)


def spectral_radius(K, tol: float = 1e-8, max_iter: int = 10000, block: int = 4,
                    seed: int = 0) -> float:
    """Largest eigenvalue modulus by orthogonal (block power) iteration.

    A block of ``min(n, block)`` vectors is iterated and the Ritz values of
    ``Q^T K Q`` give the estimate, which also resolves complex-conjugate
    dominant pairs that defeat single-vector power iteration.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError("spectral_radius needs a square matrix")
    n = K.shape[0]
    if not np.all(np.isfinite(K)):
        raise ValidationError("matrix has non-finite entries")
    if n == 0:
        return 0.0
    m = min(n, block)
    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, m)))
    history = []
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(K @ Q)
        est = float(np.max(np.abs(np.linalg.eigvals(Q.T @ K @ Q))))
        history.append(est)
        if m == n:
            return est
        if len(history) >= 3:
            scale = max(est, np.finfo(float).tiny)
            if max(abs(history[-1] - history[-2]), abs(history[-2] - history[-3])) <= tol * scale:
                return est
    raise NumericalError(f"spectral radius did not converge in {max_iter} iterations")


def predict_baseline(model: Model, sequence: int, P: int, n_samples: int, rng):
    """Forecast with a baseline; same contract as :func:`slowgen.forecast.predict`."""
    from .forecast import predict

    return predict(model, sequence, P, n_samples, rng)
