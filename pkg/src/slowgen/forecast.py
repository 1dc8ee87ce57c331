"""Monte Carlo forecasting from a trained model.

For a training sequence: draw (X_T, z_T) from the variational posterior,
propagate z with the learned latent dynamics, and push every state through
the decoder and the softmax.  For an unseen initial condition the posterior
over z_0 is fitted first (:func:`infer_z0`) and the same machinery runs from
t = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .autodiff import AdamState, adam_step
from .errors import NumericalError, ValidationError
from .gen_maps import (
    decoder_backward,
    decoder_forward,
    density_from_X,
    gaussian_logpdf_grad,
    log_multinomial_coef,
    obs_logpdf_grad,
)
from .vi_engine import Model

__all__ = [
    "ForecastEnsemble",
    "Z0Fit",
    "predict",
    "infer_z0",
    "predict_from_new_ic",
    "summarize",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e6
LOG_2PI = np.log(2 * np.pi)
QUANTILES = (0.05, 0.95)


def summarize(density: np.ndarray) -> dict:
    """Per-frame/per-bin mean and 5%/95% quantiles over samples (axis 0)."""
    return {
        "mean": density.mean(axis=0),
        "q05": np.quantile(density, QUANTILES[0], axis=0),
        "q95": np.quantile(density, QUANTILES[1], axis=0),
    }


@dataclass
class ForecastEnsemble:
    z: np.ndarray             # (n_samples, h, P+1) complex
    density: np.ndarray       # (n_samples, P+1, d)
    t0: int = 0               # time index of frame 0
    counts: np.ndarray | None = None
    diverged: bool = False
    divergence_step: int | None = None
    kind: str = "main"
    summary: dict = field(init=False)

    def __post_init__(self):
        if self.density.ndim != 3:
            raise ValidationError("density must be (n_samples, P+1, d)")
        self.summary = summarize(self.density)

    @property
    def n_samples(self) -> int:
        return self.density.shape[0]

    @property
    def P(self) -> int:
        return self.density.shape[1] - 1

    @property
    def d(self) -> int:
        return self.density.shape[2]

    @property
    def h(self) -> int:
        return self.z.shape[1]

    def frame(self, t: int) -> np.ndarray:
        """Sample densities at absolute time ``t``."""
        k = t - self.t0
        if not 0 <= k <= self.P:
            raise ValidationError(f"time {t} outside forecast window [{self.t0}, {self.t0 + self.P}]")
        return self.density[:, k]


def _channels_to_z(model: Model, path: np.ndarray) -> np.ndarray:
    """(S, P+1, C) channel paths -> (S, h, P+1) complex latent paths."""
    if model.kind == "main":
        pairs = path.reshape(path.shape[0], path.shape[1], -1, 2)
        return np.transpose(pairs[..., 0] + 1j * pairs[..., 1], (0, 2, 1))
    return np.transpose(path, (0, 2, 1)).astype(complex)


def _first_divergence(path: np.ndarray) -> int | None:
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(path) | (np.abs(path) > DIVERGENCE_THRESHOLD)
    bad_t = np.flatnonzero(bad.reshape(path.shape[0], path.shape[1], -1).any(axis=(0, 2)))
    return int(bad_t[0]) if bad_t.size else None


def _emit(model: Model, states: np.ndarray, rng) -> np.ndarray:
    """Decode latent states (S, P+1, C) into sampled bin densities."""
    S, n, C = states.shape
    mean, std, _ = decoder_forward(model.decoder, states.reshape(S * n, C), "eval")
    X = mean + std * rng.standard_normal(mean.shape)
    return density_from_X(X).reshape(S, n, -1)


def _finish(model, path, density_fn, t0, rng, draw_counts, f):
    """Truncate at divergence, emit densities and wrap as an ensemble."""
    step = _first_divergence(path)
    if step is not None:
        path = path[:, :step]
    density = density_fn(path)
    counts = None
    if draw_counts:
        if f is None:
            raise ValidationError("count sampling needs the particle number f")
        counts = np.stack([rng.multinomial(f, p) for p in density.reshape(-1, density.shape[-1])])
        counts = counts.reshape(density.shape)
    z = _channels_to_z(model, path) if model.n_channels else np.zeros((path.shape[0], 0, path.shape[1]), complex)
    return ForecastEnsemble(z, density, t0, counts, step is not None, step, model.kind)


def _posterior_draw(model: Model, seq: int, n: int, rng):
    """Draw X paths from q(X) and latent channel paths from q(z | X)."""
    T1, d = model.qx.mean.shape[1:]
    idx = np.full(n, seq)
    std = np.exp(model.qx.logstd[seq])
    X = model.qx.mean[seq] + std * rng.standard_normal((n, T1, d))
    if model.posterior is None:
        return X, None
    shape_fn = getattr(model.posterior, "noise_shape", None)
    shape = shape_fn(n, T1) if shape_fn else (n, T1, model.n_channels)
    Z, _, _ = model.posterior.sample(X, rng.standard_normal(shape), idx)
    return X, Z


def predict(model: Model, sequence: int, P: int, n_samples: int, rng,
            draw_counts: bool = False, f: int | None = None) -> ForecastEnsemble:
    """Forecast ``P`` steps beyond the last training frame of ``sequence``.

    Frame 0 of the ensemble is the posterior reconstruction at t = T
    (``softmax(X_T)`` with ``X_T ~ q``); frames 1..P are decoded from the
    propagated latent states.
    """
    if P < 0:
        raise ValidationError("P must be >= 0")
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if not 0 <= sequence < model.n_sequences:
        raise ValidationError(f"sequence {sequence} has no variational parameters")
    X, Z = _posterior_draw(model, sequence, n_samples, rng)
    T = X.shape[1] - 1
    X_T = X[:, -1]
    if model.decoder is None:
        path = model.dynamics.rollout(X_T, P, rng)
        density_fn = density_from_X
    else:
        path = model.dynamics.rollout(Z[:, -1], P, rng)

        def density_fn(p):
            out = np.empty((p.shape[0], p.shape[1], model.d))
            out[:, :1] = density_from_X(X_T)[:, None]
            if p.shape[1] > 1:
                out[:, 1:] = _emit(model, p[:, 1:], rng)
            return out
    return _finish(model, path, density_fn, T, rng, draw_counts, f)


@dataclass
class Z0Fit:
    mean: np.ndarray          # real-isomorphic channel means (C,)
    var: np.ndarray           # per-channel marginal posterior variances (C,)
    elbo: float
    reconstruction: np.ndarray  # posterior predictive mean density at t = 0
    x_mean: np.ndarray = None
    x_logstd: np.ndarray = None

    @property
    def z_complex(self) -> np.ndarray:
        pairs = self.mean.reshape(-1, 2)
        return pairs[:, 0] + 1j * pairs[:, 1]


def _initial_logpdf_grad(model: Model, z):
    """log p(z_0) per sample rows and its gradient."""
    if model.kind in ("main", "real_latent"):
        # each real channel of a standard complex normal is N(0, 1/2)
        return -0.5 * np.log(np.pi) * z.shape[-1] - np.sum(z**2, -1), -2.0 * z
    return -0.5 * LOG_2PI * z.shape[-1] - 0.5 * np.sum(z**2, -1), -z


def _single_frame_elbo(model, counts, logcoef, p, eps_z, eps_x, with_grad=True):
    zs = np.exp(p["zls"])
    xs = np.exp(p["xls"])
    z = p["zm"] + zs * eps_z
    X = p["xm"] + xs * eps_x
    S = z.shape[0]
    c = np.broadcast_to(counts, X.shape)
    v_obs, gX = obs_logpdf_grad(c, X, np.full(S, logcoef))
    mean, std, cache = decoder_forward(model.decoder, z, "eval")
    v_x, gx, gmean, gstd = gaussian_logpdf_grad(X, mean, std)
    v_z, gz = _initial_logpdf_grad(model, z)
    ent = S * (np.sum(p["zls"]) + np.sum(p["xls"]))
    elbo = (v_obs + v_x + np.sum(v_z) + ent) / S
    if not with_grad:
        return elbo, None
    _, g_in = decoder_backward(cache, gmean, gstd)
    gz = gz + g_in
    gX = gX + gx
    grads = {
        "zm": gz.sum(0) / S,
        "zls": (gz * eps_z * zs).sum(0) / S + 1.0,
        "xm": gX.sum(0) / S,
        "xls": (gX * eps_x * xs).sum(0) / S + 1.0,
    }
    return elbo, grads


def _laplace_start(model, counts, logcoef, z_init, x_init) -> dict:
    """Joint MAP of (z_0, X_0) plus diagonal curvature as the starting q."""
    C, d = z_init.size, x_init.size
    zero_z, zero_x = np.zeros((1, C)), np.zeros((1, d))

    def unpack(v):
        return {"zm": v[:C], "zls": np.zeros(C), "xm": v[C:], "xls": np.zeros(d)}

    def neg_joint(v):
        with np.errstate(all="ignore"):
            try:
                val, g = _single_frame_elbo(model, counts, logcoef, unpack(v), zero_z, zero_x)
            except NumericalError:
                return np.inf, np.zeros_like(v)
        return -val, -np.concatenate([g["zm"], g["xm"]])

    v0 = np.concatenate([z_init, x_init])
    res = minimize(neg_joint, v0, jac=True, method="L-BFGS-B")
    v = res.x if np.all(np.isfinite(res.x)) and res.fun <= neg_joint(v0)[0] else v0
    logstd = -0.5 * np.log(np.clip(np.diag(_joint_hessian(neg_joint, v)), 1e-2, 1e8))
    return {"zm": v[:C].copy(), "zls": logstd[:C], "xm": v[C:].copy(), "xls": logstd[C:]}


def _joint_hessian(neg_joint, v, h=1e-4) -> np.ndarray:
    """Central differences of the analytic gradient, symmetrized."""
    H = np.empty((v.size, v.size))
    for i in range(v.size):
        e = np.zeros(v.size)
        e[i] = h
        H[i] = (neg_joint(v + e)[1] - neg_joint(v - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def _marginal_z_var(model, counts, logcoef, zm, xm, fallback) -> np.ndarray:
    """Laplace marginal variances of z_0 at the fitted means."""
    C, d = zm.size, xm.size

    def neg_joint(v):
        p = {"zm": v[:C], "zls": np.zeros(C), "xm": v[C:], "xls": np.zeros(d)}
        val, g = _single_frame_elbo(model, counts, logcoef, p, np.zeros((1, C)), np.zeros((1, d)))
        return -val, -np.concatenate([g["zm"], g["xm"]])

    try:
        cov = np.linalg.inv(_joint_hessian(neg_joint, np.concatenate([zm, xm])))
    except (np.linalg.LinAlgError, NumericalError):
        return fallback
    var = np.diag(cov)[:C]
    if not np.all(np.isfinite(var)) or np.any(var <= 0):
        return fallback
    return var


def infer_z0(model: Model, counts0, rng=None, steps: int = 500, lr: float = 1e-2,
             restarts: int = 8, samples: int = 8, eval_samples: int = 512) -> Z0Fit:
    """Variational fit of q(z_0) q(X_0) to a single frame of counts.

    Maximizes the one-frame ELBO with the trained decoder frozen.  Each of the
    ``restarts`` random starts is first moved to the joint MAP of
    ``(z_0, X_0)`` with a Laplace-style diagonal width, then refined by ADAM
    with a learning rate decaying to 1% of ``lr``; the best start by a
    fixed-noise ELBO estimate wins.  The reported variances are the Laplace
    marginals of z_0 at the fitted means, which unlike the mean-field widths
    account for the correlations between latent channels.
    """
    if model.decoder is None:
        raise ValidationError(f"model kind {model.kind!r} has no latent state to infer")
    counts0 = np.asarray(counts0)
    if counts0.ndim != 1 or counts0.size != model.d:
        raise ValidationError(f"counts0 must be a vector of length {model.d}")
    if np.any(counts0 < 0) or counts0.sum() <= 0:
        raise ValidationError("counts0 must be non-negative with a positive total")
    rng = np.random.default_rng(0) if rng is None else rng
    counts = counts0.astype(float)
    logcoef = float(log_multinomial_coef(counts))
    C, d = model.decoder.in_dim, model.d
    f = counts.sum()
    eval_z = rng.standard_normal((eval_samples, C))
    eval_x = rng.standard_normal((eval_samples, d))
    best = None
    for _ in range(restarts):
        p = _laplace_start(model, counts, logcoef, rng.normal(0.0, np.sqrt(0.5), C),
                           np.log((counts + 1.0) / (f + d)))
        adam = AdamState.zeros(p, lr=lr)
        decay = 0.01 ** (1.0 / max(steps - 1, 1))
        for _ in range(steps):
            elbo, g = _single_frame_elbo(model, counts, logcoef, p,
                                         rng.standard_normal((samples, C)),
                                         rng.standard_normal((samples, d)))
            if not np.isfinite(elbo):
                break
            adam_step(adam, p, {k: -v for k, v in g.items()})
            adam.lr *= decay
        with np.errstate(all="ignore"):
            final, _ = _single_frame_elbo(model, counts, logcoef, p, eval_z, eval_x, False)
        if np.isfinite(final) and (best is None or final > best[0]):
            best = (final, {k: v.copy() for k, v in p.items()})
    if best is None:
        raise NumericalError("z_0 inference diverged in every restart")
    elbo, p = best
    zs = p["zm"] + np.exp(p["zls"]) * eval_z
    mean, std, _ = decoder_forward(model.decoder, zs, "eval")
    recon = density_from_X(mean + std * rng.standard_normal(mean.shape)).mean(0)
    var = _marginal_z_var(model, counts, logcoef, p["zm"], p["xm"], np.exp(2 * p["zls"]))
    return Z0Fit(p["zm"], var, float(elbo), recon, p["xm"], p["xls"])


def predict_from_new_ic(model: Model, counts0, P: int, n_samples: int, rng,
                        fit: Z0Fit | None = None, draw_counts: bool = False) -> ForecastEnsemble:
    """Forecast from an unseen initial frame of counts; frame 0 is t = 0."""
    if P < 0 or n_samples < 1:
        raise ValidationError("P must be >= 0 and n_samples >= 1")
    if fit is None:
        fit = infer_z0(model, counts0, rng)
    z0 = fit.mean + np.sqrt(fit.var) * rng.standard_normal((n_samples, fit.mean.size))
    path = model.dynamics.rollout(z0, P, rng)
    f = int(np.asarray(counts0).sum())
    return _finish(model, path, lambda p: _emit(model, p, rng), 0, rng, draw_counts, f)
