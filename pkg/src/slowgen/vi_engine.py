"""Structured stochastic variational inference for the coarse-grained model.

Per training sequence the approximate posterior factorizes as
``q(X) q(z | X)``:

* ``q(X)`` is a free diagonal Gaussian over the bin logits of every frame.
* ``q(z | X)`` is Gaussian over the real-isomorphic latent path with precision
  ``B B^T``, where ``B`` is upper bidiagonal per latent channel.  Amortization
  nets read a single frame ``X_t`` and emit the mean at ``t`` together with the
  log of the diagonal entry of ``B`` at ``t`` and its coupling to ``t + 1``.

Shifting or rescaling a latent process changes only the prior and entropy
terms of the ELBO when the decoder and the amortization heads absorb the
change.  Stochastic gradients crawl along those directions, so training
periodically takes the exact step that maximizes those terms
(:func:`rescale_latents`).

Samples are drawn as ``z = mu + B^{-T} eps`` by forward substitution, so the
cost is linear in the path length.

The same engine trains the baseline dynamics in :mod:`slowgen.baselines`; a
model is the triple (decoder, latent dynamics, posterior) and the ELBO code
below only relies on the small duck-typed interface those objects share.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import AdamState, DenseNet, adam_step, backward, forward
from .errors import NumericalError, TrainingError, ValidationError
from .gen_maps import (
    STD_FLOOR,
    DecoderG,
    decoder_backward,
    decoder_forward,
    gaussian_logpdf_grad,
    log_multinomial_coef,
    obs_logpdf_grad,
)
from scipy.optimize import minimize

from .latent_prior import LatentPrior, inv_softplus, rotation, sigmoid

__all__ = [
    "TrainConfig",
    "QZPosterior",
    "QXPosterior",
    "ComplexOUDynamics",
    "RealOUDynamics",
    "ChainPosterior",
    "Model",
    "bidiagonal_solve",
    "bidiagonal_backward",
    "chain_precision",
    "sample_q_z",
    "sample_q_X",
    "sample_chain",
    "draw_noise",
    "elbo_terms",
    "elbo_estimate",
    "build_model",
    "rescale_latents",
    "fit",
    "train",
]

LOG_2PI = np.log(2 * np.pi)
TERMS = ("obs", "x_given_z", "z_prior", "entropy")


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 16
    mc_samples: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    h: int = 5
    d: int = 0                       # 0: taken from the dataset
    decoder_hidden: tuple = ()
    decoder_dropout: float = 0.0
    qz_hidden: tuple = (64,)
    qx_logstd_init: float = -2.0
    lr_final: float = 0.0            # >0: geometric decay of lr towards this value
    koopman_dim: int = 0             # 0: 2h
    nnx_hidden: tuple = (64, 64, 64)
    rescale_every: int = 50          # epochs between latent recentering/rescaling; 0: never
    rescale_samples: int = 8
    rescale_warmup: float = 0.25     # fraction of epochs before the first rescaling step
    rescale_scale: bool = True       # False: recenter only, keep the latent scale

    def __post_init__(self):
        self.decoder_hidden = tuple(int(v) for v in self.decoder_hidden)
        self.qz_hidden = tuple(int(v) for v in self.qz_hidden)
        self.nnx_hidden = tuple(int(v) for v in self.nnx_hidden)
        for name in ("epochs", "batch_size", "mc_samples", "h"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.d < 0:
            raise ValidationError("lr must be > 0; weight_decay and d must be >= 0")
        if self.rescale_every < 0 or self.rescale_samples < 1:
            raise ValidationError("rescale_every must be >= 0 and rescale_samples >= 1")
        if not 0.0 <= self.rescale_warmup <= 1.0:
            raise ValidationError("rescale_warmup must lie in [0, 1]")

    @classmethod
    def preset(cls, kind: str, **overrides) -> "TrainConfig":
        """Architecture defaults for the two particle systems."""
        if kind == "ad":
            base = dict(decoder_hidden=(), decoder_dropout=0.0, qz_hidden=(64,))
        elif kind == "burgers":
            base = dict(decoder_hidden=(128, 128, 128), decoder_dropout=0.1,
                        qz_hidden=(128, 128))
        else:
            raise ValidationError(f"unknown preset {kind!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# bidiagonal Gaussian chains

def bidiagonal_solve(D, O, eps):
    """Solve ``B^T u = eps`` for upper-bidiagonal B along axis -2.

    ``D`` holds the diagonal, ``O[..., t, :]`` the coupling between t and t+1
    (the last row of ``O`` is ignored).
    """
    u = np.empty_like(eps)
    u[..., 0, :] = eps[..., 0, :] / D[..., 0, :]
    for t in range(1, eps.shape[-2]):
        u[..., t, :] = (eps[..., t, :] - O[..., t - 1, :] * u[..., t - 1, :]) / D[..., t, :]
    return u


def bidiagonal_backward(D, O, u, g_u):
    """Gradients of a scalar through :func:`bidiagonal_solve` w.r.t. D and O."""
    g = g_u.copy()
    gD = np.zeros_like(D)
    gO = np.zeros_like(O)
    for t in range(u.shape[-2] - 1, 0, -1):
        r = g[..., t, :] / D[..., t, :]
        gD[..., t, :] = -r * u[..., t, :]
        gO[..., t - 1, :] = -r * u[..., t - 1, :]
        g[..., t - 1, :] -= r * O[..., t - 1, :]
    gD[..., 0, :] = -g[..., 0, :] * u[..., 0, :] / D[..., 0, :]
    return gD, gO


def chain_precision(D, O) -> np.ndarray:
    """Dense ``B B^T`` for one channel (D, O are 1-d of length n)."""
    n = len(D)
    B = np.diag(np.asarray(D, dtype=float))
    B[np.arange(n - 1), np.arange(1, n)] = np.asarray(O, dtype=float)[: n - 1]
    return B @ B.T


@dataclass
class QZPosterior:
    """Amortization nets; net ``k`` covers ``groups[k]`` consecutive channels."""

    nets: list
    groups: list

    def __post_init__(self):
        if len(self.nets) != len(self.groups):
            raise ValidationError("one group size per amortization net")
        for net, g in zip(self.nets, self.groups):
            if net.out_dim != 3 * g:
                raise ValidationError("amortization net must emit 3 values per channel")

    @classmethod
    def build(cls, d, groups, hidden=(64,), rng=None, d_init=3.0):
        """Output layers start small so q(z | X) begins near N(0, 1/d_init^2)
        per frame with weak temporal coupling.

        Each net emits ``(mu, log D, O)`` for its ``g`` channels.
        """
        nets = []
        for g in groups:
            net = DenseNet.build([d, *hidden, 3 * g], "relu", "identity", 0.0, rng)
            last = net.layers[-1]
            last.weights *= 0.1
            last.biases[g:2 * g] = np.log(d_init)
            nets.append(net)
        return cls(nets, list(groups))

    @property
    def n_channels(self) -> int:
        return int(sum(self.groups))

    def params(self) -> dict:
        out = {}
        for k, net in enumerate(self.nets):
            out.update(net.params(f"qz/{k}/"))
        return out

    def heads(self, X):
        """Run every net on frames X (..., n, d) -> mu, log D, O, tapes."""
        lead = X.shape[:-1]
        flat = X.reshape(-1, X.shape[-1])
        mus, raws, offs, tapes = [], [], [], []
        for net, g in zip(self.nets, self.groups):
            out, tape = forward(net, flat, "eval")
            out = out.reshape(*lead, 3 * g)
            mus.append(out[..., :g])
            raws.append(out[..., g:2 * g])
            offs.append(out[..., 2 * g:])
            tapes.append(tape)
        return (np.concatenate(mus, -1), np.concatenate(raws, -1),
                np.concatenate(offs, -1), tapes)

    def heads_backward(self, tapes, g_mu, g_raw, g_off):
        grads, g_in, c = {}, 0.0, 0
        lead = g_mu.shape[:-1]
        for k, (tape, g) in enumerate(zip(tapes, self.groups)):
            gout = np.concatenate([g_mu[..., c:c + g], g_raw[..., c:c + g],
                                   g_off[..., c:c + g]], -1).reshape(-1, 3 * g)
            pg, gi = backward(tape, gout)
            for j, (gW, gb) in enumerate(pg):
                grads[f"qz/{k}/{j}/W"] = gW
                grads[f"qz/{k}/{j}/b"] = gb
            g_in = g_in + gi
            c += g
        return grads, np.reshape(g_in, (*lead, -1))


def sample_q_z(qz: QZPosterior, X_path, eps):
    """Reparametrized sample of q(z | X) for one sequence.

    ``X_path`` is (T+1, d); ``eps`` is (T+1, C) standard normal.  Returns the
    path and its log density.  When every group has two channels the path is
    returned as complex (h, T+1); otherwise as real (T+1, C).
    """
    X_path = np.asarray(X_path, dtype=float)
    if X_path.ndim != 2:
        raise ValidationError("X_path must be (T+1, d)")
    mu, logd, off, _ = qz.heads(X_path)
    z, logq = sample_chain(mu, np.exp(logd), off, np.asarray(eps, dtype=float))
    if all(g == 2 for g in qz.groups):
        zc = z.reshape(z.shape[0], -1, 2)
        return (zc[..., 0] + 1j * zc[..., 1]).T, logq
    return z, logq


def sample_chain(mu, D, O, eps):
    """``mu + B^{-T} eps`` for given chain factors, with its log density."""
    if np.any(D <= 0):
        raise ValidationError("bidiagonal factor must have a positive diagonal")
    u = bidiagonal_solve(D, O, eps)
    logq = float(np.sum(np.log(D)) - 0.5 * np.sum(eps**2) - 0.5 * eps.size * LOG_2PI)
    return mu + u, logq


@dataclass
class QXPosterior:
    mean: np.ndarray       # (N, T+1, d)
    logstd: np.ndarray     # (N, T+1, d)

    @classmethod
    def from_counts(cls, counts, logstd=-2.0):
        counts = np.asarray(counts, dtype=float)
        f = counts.sum(-1, keepdims=True)
        d = counts.shape[-1]
        mean = np.log((counts + 1.0) / (f + d))
        return cls(mean, np.full_like(mean, float(logstd)))

    def params(self) -> dict:
        return {"qx/mean": self.mean, "qx/logstd": self.logstd}


def sample_q_X(qx: QXPosterior, eps, idx=None):
    """Reparametrized draw ``X = mean + std * eps`` and its exact log density."""
    mean = qx.mean if idx is None else qx.mean[idx]
    logstd = qx.logstd if idx is None else qx.logstd[idx]
    std = np.maximum(np.exp(logstd), STD_FLOOR)
    eps = np.asarray(eps, dtype=float)
    logq = float(np.sum(-np.log(std) - 0.5 * eps**2) - 0.5 * eps.size * LOG_2PI)
    return mean + std * eps, logq


# ---------------------------------------------------------------------------
# latent dynamics

class ComplexOUDynamics:
    """Complex OU prior; channels (2j, 2j+1) hold (Re, Im) of process j."""

    kind = "main"

    def __init__(self, a, im):
        self.a = np.asarray(a, dtype=float)
        self.im = np.asarray(im, dtype=float)

    @classmethod
    def initial(cls, h):
        p = LatentPrior.initial(h)
        return cls(inv_softplus(-p.re_lambda), p.im_lambda.copy())

    @property
    def prior(self) -> LatentPrior:
        return LatentPrior.from_unconstrained(self.a, self.im)

    @property
    def h(self):
        return self.a.size

    @property
    def groups(self):
        return [2] * self.h

    @property
    def n_channels(self):
        return 2 * self.h

    def params(self):
        return {"prior/a": self.a, "prior/im": self.im}

    def logpdf_grad(self, Z):
        prior = self.prior
        value, dZ, d_re, d_im = prior.path_logpdf_grad(Z.reshape(*Z.shape[:-1], self.h, 2))
        d_a = d_re * (-sigmoid(self.a))
        return value, dZ.reshape(Z.shape), {"prior/a": d_a, "prior/im": d_im}

    def rollout(self, z, P, rng):
        """Propagate states (S, C) forward P steps -> (S, P+1, C)."""
        prior = self.prior
        A = prior.s[:, None, None] * rotation(prior.im_lambda)
        sd = np.sqrt(0.5 * prior.sigma2)
        out = np.empty((z.shape[0], P + 1, self.n_channels))
        cur = z.reshape(-1, self.h, 2)
        out[:, 0] = z
        for t in range(1, P + 1):
            cur = np.einsum("jab,sjb->sja", A, cur) + sd[:, None] * rng.standard_normal(cur.shape)
            out[:, t] = cur.reshape(z.shape[0], -1)
        return out


class RealOUDynamics:
    """Real-valued OU processes (Im lambda fixed at zero), one channel each."""

    kind = "real_latent"

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    @classmethod
    def initial(cls, h):
        return cls(inv_softplus(-LatentPrior.initial(h).re_lambda))

    @property
    def prior(self) -> LatentPrior:
        return LatentPrior.from_unconstrained(self.a, np.zeros_like(self.a))

    @property
    def h(self):
        return self.a.size

    @property
    def groups(self):
        return [1] * self.h

    @property
    def n_channels(self):
        return self.h

    def params(self):
        return {"prior/a": self.a}

    def logpdf_grad(self, Z):
        value, dZ, d_re = self.prior.real_path_logpdf_grad(Z)
        return value, dZ, {"prior/a": d_re * (-sigmoid(self.a))}

    def rollout(self, z, P, rng):
        prior = self.prior
        sd = np.sqrt(0.5 * prior.sigma2)
        out = np.empty((z.shape[0], P + 1, self.h))
        out[:, 0] = z
        for t in range(1, P + 1):
            out[:, t] = prior.s * out[:, t - 1] + sd * rng.standard_normal(z.shape)
        return out


class ChainPosterior:
    """q(z | X) over bidiagonal-precision chains driven by amortization nets."""

    def __init__(self, qz: QZPosterior):
        self.qz = qz

    @property
    def n_channels(self):
        return self.qz.n_channels

    def params(self):
        return self.qz.params()

    def sample(self, X, eps, idx):
        mu, logd, off, tapes = self.qz.heads(X)
        D = np.exp(logd)
        u = bidiagonal_solve(D, off, eps)
        logq = float(np.sum(logd) - 0.5 * np.sum(eps**2) - 0.5 * eps.size * LOG_2PI)
        return mu + u, logq, (D, off, u, tapes)

    def backward(self, g_z, cache, idx):
        """Gradient of ``elbo`` given dELBO/dz; includes the entropy term."""
        D, off, u, tapes = cache
        gD, gO = bidiagonal_backward(D, off, u, g_z)
        grads, g_X = self.qz.heads_backward(tapes, g_z, gD * D - 1.0, gO)
        return grads, g_X


# ---------------------------------------------------------------------------
# model and ELBO

@dataclass
class Model:
    kind: str
    dynamics: object
    decoder: DecoderG | None
    posterior: object | None
    qx: QXPosterior
    config: TrainConfig
    curve: dict = field(default_factory=lambda: {k: [] for k in ("elbo",) + TERMS})

    @property
    def h(self) -> int:
        return getattr(self.dynamics, "h", 0)

    @property
    def d(self) -> int:
        return self.qx.mean.shape[-1]

    @property
    def n_sequences(self) -> int:
        return self.qx.mean.shape[0]

    @property
    def n_channels(self) -> int:
        return getattr(self.dynamics, "n_channels", 0)

    def params(self) -> dict:
        out = {}
        if self.decoder is not None:
            out.update(self.decoder.net.params("decoder/"))
        out.update(self.dynamics.params())
        if self.posterior is not None:
            out.update(self.posterior.params())
        out.update(self.qx.params())
        return out

    def decay_names(self):
        return [k for k in self.params() if k.endswith("/W")]


def draw_noise(model: Model, batch: int, rng, samples: int = 1) -> dict:
    n = model.qx.mean.shape[1]
    noise = {"X": rng.standard_normal((samples, batch, n, model.d))}
    if model.posterior is not None:
        zshape = getattr(model.posterior, "noise_shape", None)
        shape = zshape(batch, n) if zshape else (batch, n, model.n_channels)
        noise["z"] = rng.standard_normal((samples, *shape))
    return noise


def _acc(grads: dict, new: dict, scale=1.0):
    for k, g in new.items():
        if k in grads:
            grads[k] = grads[k] + scale * g
        else:
            grads[k] = scale * g


def elbo_terms(model: Model, counts, idx, noise: dict, sample: int = 0, mode="eval",
               rng=None, logcoef=None, mask=None, with_grad=True):
    """Single-sample ELBO of a batch of sequences, split into its four terms.

    ``counts`` is (b, T+1, d) and ``idx`` the sequence indices into the
    per-sequence variational parameters.  Returns ``(terms, grads)`` where
    ``grads`` are derivatives of the summed ELBO (no parameter prior).
    """
    eps_X = noise["X"][sample]
    X, logq_X = sample_q_X(model.qx, eps_X, idx)
    terms = {}
    c = np.asarray(counts, dtype=float)
    if logcoef is None:
        logcoef = log_multinomial_coef(c)
    if mask is None:
        v, g_X = obs_logpdf_grad(c, X, logcoef)
    else:
        # absent frames drop out of the likelihood; their X and z stay latent
        m = np.asarray(mask, dtype=float)
        _, g_X = obs_logpdf_grad(c, X, logcoef)
        v = float(np.sum(m * logcoef) + np.sum(m[..., None] * c * (X - _lse(X))))
        g_X = g_X * m[..., None]
    terms["obs"] = v
    grads = {}
    if model.decoder is None:
        v, gX2, gp = model.dynamics.x_logpdf_grad(X)
        terms["x_given_z"] = v
        terms["z_prior"] = 0.0
        terms["entropy"] = -logq_X
        g_X = g_X + gX2
        _acc(grads, gp)
    else:
        eps_z = noise["z"][sample]
        Z, logq_z, cache = model.posterior.sample(X, eps_z, idx)
        b, n = Z.shape[:2]
        mean, std, dcache = decoder_forward(model.decoder, Z.reshape(b * n, -1), mode, rng)
        mean = mean.reshape(b, n, -1)
        std = std.reshape(b, n, -1)
        v, gx, gmean, gstd = gaussian_logpdf_grad(X, mean, std)
        terms["x_given_z"] = v
        vz, g_Z, gdyn = model.dynamics.logpdf_grad(Z)
        terms["z_prior"] = vz
        terms["entropy"] = -logq_X - logq_z
        if with_grad:
            pg, g_in = decoder_backward(dcache, gmean.reshape(b * n, -1), gstd.reshape(b * n, -1))
            for j, (gW, gb) in enumerate(pg):
                grads[f"decoder/{j}/W"] = gW
                grads[f"decoder/{j}/b"] = gb
            g_Z = g_Z + g_in.reshape(Z.shape)
            _acc(grads, gdyn)
            gpost, gX3 = model.posterior.backward(g_Z, cache, idx)
            _acc(grads, gpost)
            g_X = g_X + gx + gX3
    for k, v in terms.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite ELBO term {k!r} for sequences {list(np.atleast_1d(idx))}")
    if not with_grad:
        return terms, {}
    # q(X) reparametrization; -log q(X) contributes +1 per log-std entry
    std = np.maximum(np.exp(model.qx.logstd[idx]), STD_FLOOR)
    g_mean = np.zeros_like(model.qx.mean)
    g_logstd = np.zeros_like(model.qx.logstd)
    # add.at so that a sequence listed twice in a batch accumulates
    np.add.at(g_mean, idx, g_X)
    np.add.at(g_logstd, idx, g_X * eps_X * std * (np.exp(model.qx.logstd[idx]) > STD_FLOOR) + 1.0)
    grads["qx/mean"] = g_mean
    grads["qx/logstd"] = g_logstd
    return terms, grads


def _lse(X):
    mx = X.max(-1, keepdims=True)
    return mx + np.log(np.exp(X - mx).sum(-1, keepdims=True))


def log_param_prior(model: Model):
    """Gaussian prior on network weights (weight decay); flat elsewhere."""
    wd = model.config.weight_decay
    params = model.params()
    value, grads = 0.0, {}
    for k in model.decay_names():
        value -= 0.5 * wd * float(np.sum(params[k] ** 2))
        grads[k] = -wd * params[k]
    return value, grads


def elbo_estimate(model: Model, counts, idx, rng, samples: int = 1, mode="eval",
                  noise=None, scale: float = 1.0, mask=None, logcoef=None):
    """MC estimate of ``scale * ELBO(batch) + log p(theta)`` and its gradient.

    Returns ``(objective, terms, grads)``; ``terms`` are the batch sums of
    the four ELBO components averaged over samples, plus ``log_prior_theta``.
    """
    idx = np.atleast_1d(np.asarray(idx))
    if idx.size == 0:
        raise ValidationError("batch must be nonempty")
    if noise is None:
        noise = draw_noise(model, idx.size, rng, samples)
    samples = noise["X"].shape[0]
    total = {k: 0.0 for k in TERMS}
    grads = {}
    for s in range(samples):
        terms, g = elbo_terms(model, counts, idx, noise, s, mode, rng, logcoef, mask)
        for k in TERMS:
            total[k] += terms[k] / samples
        _acc(grads, g, scale / samples)
    lp, gp = log_param_prior(model)
    _acc(grads, gp)
    total["log_prior_theta"] = lp
    objective = scale * sum(total[k] for k in TERMS) + lp
    return objective, total, grads


# ---------------------------------------------------------------------------
# training

def build_model(kind: str, counts, config: TrainConfig, rng=None) -> Model:
    """Fresh model for ``kind`` in {main, real_latent} (baselines add the rest)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    counts = np.asarray(counts)
    d = counts.shape[-1]
    if config.d and config.d != d:
        raise ValidationError(f"config d={config.d} but dataset has d={d}")
    if kind == "main":
        dyn = ComplexOUDynamics.initial(config.h)
    elif kind == "real_latent":
        dyn = RealOUDynamics.initial(config.h)
    else:
        from . import baselines
        return baselines.build_baseline_model(kind, counts, config, rng)
    decoder = DecoderG.build(dyn.n_channels, d, config.decoder_hidden, config.decoder_dropout, rng)
    post = ChainPosterior(QZPosterior.build(d, dyn.groups, config.qz_hidden, rng))
    qx = QXPosterior.from_counts(counts, config.qx_logstd_init)
    return Model(kind, dyn, decoder, post, qx, config)


def snapshot(model: Model) -> dict:
    return {k: v.copy() for k, v in model.params().items()}


def restore(model: Model, snap: dict):
    for k, v in model.params().items():
        v[...] = snap[k]


def rescale_latents(model: Model, rng, samples: int = 8, scale: bool = True):
    """Exact recentering and rescaling of each latent process.

    Replacing process ``j`` by ``k_j (z_j - c_j)`` while moving ``W c_j`` into
    the decoder input bias, dividing the matching decoder input columns by
    ``k_j`` and adjusting the amortization heads leaves every ELBO term except
    ``log p(z)`` and the entropy unchanged.  Those two are maximized over
    ``(k_j, c_j, Re lambda_j)`` on posterior samples and the parameters are
    moved accordingly; with ``scale=False`` only the shift is taken
    (``k_j = 1``).  Returns the factors ``k`` (None for models without OU
    processes).
    """
    dyn = model.dynamics
    post = model.posterior
    if not hasattr(dyn, "a") or not isinstance(post, ChainPosterior):
        return None
    groups = list(dyn.groups)
    if list(post.qz.groups) != groups:
        return None
    N, T1, d = model.qx.mean.shape
    std = np.maximum(np.exp(model.qx.logstd), STD_FLOOR)
    X = model.qx.mean[None] + std[None] * rng.standard_normal((samples, N, T1, d))
    eps = rng.standard_normal((samples * N, T1, post.n_channels))
    Z, _, _ = post.sample(X.reshape(samples * N, T1, d), eps, None)
    Z = Z.reshape(samples, N, T1, -1)
    im = getattr(dyn, "im", np.zeros_like(dyn.a))
    n_frames = N * T1
    first = model.decoder.net.layers[0]
    factors = np.ones(len(groups))
    lo = 0
    for j, g in enumerate(groups):
        Zj = Z[..., lo:lo + g]

        def objective(p, Zj=Zj, g=g, j=j):
            lk, a, shift = p[0], p[1], p[2:]
            k = np.exp(lk)
            prior = LatentPrior.from_unconstrained(np.array([a]), im[j:j + 1])
            W = k * (Zj - shift)
            if g == 2:
                v, dW, d_re, _ = prior.path_logpdf_grad(W.reshape(samples, N, T1, 1, 2))
                dW = dW.reshape(W.shape)
            else:
                v, dW, d_re = prior.real_path_logpdf_grad(W)
            val = v / samples + n_frames * g * lk
            grad = np.concatenate([
                [float(np.sum(dW * W)) / samples + n_frames * g,
                 float(d_re[0]) * (-sigmoid(a)) / samples],
                -k * dW.sum(axis=(0, 1, 2)) / samples,
            ])
            return -val, -grad

        x0 = np.concatenate([[0.0, float(dyn.a[j])], np.zeros(g)])
        with np.errstate(all="ignore"):
            res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                           bounds=[(-3.0, 3.0) if scale else (0.0, 0.0), (-30.0, 30.0)]
                           + [(None, None)] * g)
        if np.all(np.isfinite(res.x)) and -res.fun >= -objective(x0)[0]:
            lk, a, shift = res.x[0], res.x[1], res.x[2:]
            k = np.exp(lk)
            dyn.a[j] = a
            first.biases += first.weights[:, lo:lo + g] @ shift
            first.weights[:, lo:lo + g] /= k
            last = post.qz.nets[j].layers[-1]
            last.weights[:g] *= k
            last.biases[:g] = k * (last.biases[:g] - shift)
            last.biases[g:2 * g] -= lk
            last.weights[2 * g:] /= k
            last.biases[2 * g:] /= k
            factors[j] = k
        lo += g
    return factors


def _all_finite(params: dict) -> bool:
    return all(np.all(np.isfinite(p)) for p in params.values())


def fit(model: Model, counts, config: TrainConfig | None = None, rng=None, mask=None,
        callback=None, log=None) -> Model:
    """Maximize the ELBO of ``model`` on ``counts`` (N, T+1, d) with ADAM."""
    config = model.config if config is None else config
    rng = np.random.default_rng(config.seed + 1) if rng is None else rng
    counts = np.asarray(counts, dtype=float)
    N = counts.shape[0]
    logcoef = log_multinomial_coef(counts)
    params = model.params()
    adam = AdamState.zeros(params, lr=config.lr, beta1=config.beta1,
                           beta2=config.beta2, eps=config.adam_eps)
    bs = min(config.batch_size, N)
    decay = 1.0
    if config.lr_final > 0:
        decay = (config.lr_final / config.lr) ** (1.0 / max(config.epochs - 1, 1))
    # rescaling an untrained posterior only fits the prior to noise
    warmup = int(config.rescale_warmup * config.epochs)
    last_good = snapshot(model)
    start = time.perf_counter()
    mode = "train" if model.decoder is not None and model.decoder.net.dropout_rate > 0 else "eval"
    for epoch in range(config.epochs):
        perm = rng.permutation(N)
        sums = {k: 0.0 for k in TERMS}
        for lo in range(0, N, bs):
            idx = np.sort(perm[lo:lo + bs])
            bmask = None if mask is None else mask[idx]
            try:
                obj, terms, grads = elbo_estimate(
                    model, counts[idx], idx, rng, config.mc_samples, mode,
                    scale=N / idx.size, mask=bmask, logcoef=logcoef[idx])
                if not np.isfinite(obj):
                    raise NumericalError("non-finite objective")
                adam_step(adam, params, {k: -g for k, g in grads.items()})
            except (NumericalError, FloatingPointError, ValidationError) as exc:
                if isinstance(exc, ValidationError) and _all_finite(params):
                    raise
                restore(model, last_good)
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}",
                                    checkpoint=model) from exc
            for k in TERMS:
                sums[k] += terms[k]
        if (config.rescale_every and epoch >= warmup
                and (epoch + 1) % config.rescale_every == 0):
            rescale_latents(model, rng, config.rescale_samples, config.rescale_scale)
        if not _all_finite(params):
            restore(model, last_good)
            raise TrainingError(f"non-finite parameters after epoch {epoch}", checkpoint=model)
        last_good = snapshot(model)
        elbo = sum(sums.values())
        model.curve["elbo"].append(elbo)
        for k in TERMS:
            model.curve[k].append(sums[k])
        if log is not None:
            log(epoch, elbo, sums, time.perf_counter() - start)
        if callback is not None:
            callback(epoch, model)
        adam.lr *= decay
    return model


def train(dataset, config: TrainConfig, kind: str = "main", log=None) -> Model:
    """Build and fit a model on a :class:`~slowgen.particle_sim.CountTensor`."""
    counts = dataset.counts if hasattr(dataset, "counts") else np.asarray(dataset)
    mask = getattr(dataset, "mask", None)
    rng = np.random.default_rng(config.seed)
    model = build_model(kind, counts, config, rng)
    return fit(model, counts, config, rng, mask=mask, log=log)
