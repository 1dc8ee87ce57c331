"""Shared builders for small synthetic problems."""
from __future__ import annotations

import numpy as np

from slowgen.vi_engine import TrainConfig, build_model, draw_noise, elbo_estimate


def tiny_counts(N=3, T=3, d=5, f=50, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(d) * 3, size=(N, T + 1))
    return np.stack([[rng.multinomial(f, q) for q in seq] for seq in p])


def tiny_model(kind="main", counts=None, h=2, hidden=(4,), qz_hidden=(4,), seed=0, **cfg):
    counts = tiny_counts() if counts is None else counts
    config = TrainConfig(h=h, decoder_hidden=hidden, qz_hidden=qz_hidden, seed=seed,
                         koopman_dim=cfg.pop("koopman_dim", 3), nnx_hidden=cfg.pop("nnx_hidden", (4, 4, 4)),
                         **cfg)
    rng = np.random.default_rng(seed)
    model = build_model(kind, counts, config, rng)
    # move the q(X) parameters away from their symmetric initialization
    model.qx.mean += 0.1 * rng.standard_normal(model.qx.mean.shape)
    model.qx.logstd += 0.1 * rng.standard_normal(model.qx.logstd.shape)
    # generic weights so that no pathway has vanishing gradients
    nets = [model.decoder.net] if model.decoder is not None else []
    if hasattr(model.posterior, "qz"):
        nets += model.posterior.qz.nets
    if hasattr(model.dynamics, "net"):
        nets.append(model.dynamics.net)
    for net in nets:
        for k, layer in enumerate(net.layers):
            amp = 0.05 if k == len(net.layers) - 1 else 0.3
            layer.weights += amp * rng.standard_normal(layer.weights.shape)
            layer.biases += amp * rng.standard_normal(layer.biases.shape)
    return model, counts


def frozen_objective(model, counts, idx=None, samples=2, seed=1, scale=1.0, mask=None):
    """(value, grads) closure over the model parameters with fixed noise."""
    idx = np.arange(counts.shape[0]) if idx is None else np.asarray(idx)
    noise = draw_noise(model, idx.size, np.random.default_rng(seed), samples)
    c = counts[idx].astype(float)

    def fn(params):
        obj, _, grads = elbo_estimate(model, c, idx, None, samples, "eval", noise,
                                      scale=scale, mask=mask)
        return obj, {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}

    return fn


# ---------------------------------------------------------------------------
# conjugate toy: real OU latent observed through y_t = w z_t + N(0, s^2)

def toy_data(n=50, re_lambda=-0.1, w=1.0, s=0.3, seed=0):
    rng = np.random.default_rng(seed)
    a = np.exp(re_lambda)
    z = np.empty(n)
    z[0] = np.sqrt(0.5) * rng.standard_normal()
    for t in range(1, n):
        z[t] = a * z[t - 1] + np.sqrt(0.5 * (1 - a * a)) * rng.standard_normal()
    return w * z + s * rng.standard_normal(n)


def kalman_log_evidence(y, re_lambda, w, s):
    """Exact log p(y) by the scalar Kalman filter."""
    a = np.exp(re_lambda)
    q = 0.5 * (1 - a * a)
    m, P, total = 0.0, 0.5, 0.0
    for t, yt in enumerate(y):
        if t > 0:
            m, P = a * m, a * a * P + q
        S = w * w * P + s * s
        total += -0.5 * (np.log(2 * np.pi * S) + (yt - w * m) ** 2 / S)
        K = P * w / S
        m, P = m + K * (yt - w * m), (1 - K * w) * P
    return total


def ou_covariance(n, re_lambda):
    t = np.arange(n)
    return 0.5 * np.exp(re_lambda) ** np.abs(t[:, None] - t[None, :])


def toy_exact_elbo(y, re_lambda, w, s, mu, D, O):
    """Closed-form ELBO of q = N(mu, (B B^T)^-1) on the toy."""
    from slowgen.vi_engine import chain_precision

    n = len(y)
    Sigma = np.linalg.inv(chain_precision(D, O))
    C = ou_covariance(n, re_lambda)
    Q = np.linalg.inv(C)
    lik = np.sum(-0.5 * np.log(2 * np.pi * s * s)
                 - ((y - w * mu) ** 2 + w * w * np.diag(Sigma)) / (2 * s * s))
    _, logdetC = np.linalg.slogdet(C)
    prior = -0.5 * (n * np.log(2 * np.pi) + logdetC + mu @ Q @ mu + np.trace(Q @ Sigma))
    entropy = 0.5 * n * (1 + np.log(2 * np.pi)) - np.sum(np.log(D))
    return lik + prior + entropy


def fit_toy(y, re_lambda, w, s, epochs=3000, samples=4, lr=3e-2, lr_final=1e-3, seed=0):
    """Maximize the toy ELBO with reparametrized gradients through the chain sampler.

    Returns ``(mu, D, O, curve)`` where ``curve`` holds the exact ELBO per epoch.
    """
    from slowgen.autodiff import AdamState, adam_step
    from slowgen.latent_prior import LatentPrior, inv_softplus, sigmoid, softplus
    from slowgen.vi_engine import bidiagonal_backward, bidiagonal_solve

    n = len(y)
    prior = LatentPrior(np.array([re_lambda]), np.zeros(1))
    rng = np.random.default_rng(seed)
    params = {"mu": np.zeros(n), "raw": np.full(n, inv_softplus(3.0)), "off": np.zeros(n)}
    adam = AdamState.zeros(params, lr=lr)
    decay = (lr_final / lr) ** (1.0 / (epochs - 1))
    curve = []
    for _ in range(epochs):
        D = softplus(params["raw"]) + 1e-6
        eps = rng.standard_normal((samples, n, 1))
        u = bidiagonal_solve(D[:, None], params["off"][:, None], eps)
        z = params["mu"][:, None] + u
        g_z = (w * (y[:, None] - w * z) / (s * s))
        _, dZ, _ = prior.real_path_logpdf_grad(z)
        g_z = g_z + dZ
        shape = (samples, n, 1)
        gD, gO = bidiagonal_backward(np.broadcast_to(D[:, None], shape),
                                     np.broadcast_to(params["off"][:, None], shape), u, g_z)
        grads = {
            "mu": g_z.sum(axis=(0, 2)) / samples,
            "raw": ((gD.sum(axis=(0, 2)) / samples) - 1.0 / D) * sigmoid(params["raw"]),
            "off": gO.sum(axis=(0, 2)) / samples,
        }
        adam_step(adam, params, {k: -g for k, g in grads.items()})
        adam.lr *= decay
        D = softplus(params["raw"]) + 1e-6
        curve.append(toy_exact_elbo(y, re_lambda, w, s, params["mu"], D, params["off"]))
    return params["mu"], softplus(params["raw"]) + 1e-6, params["off"], np.array(curve)


def toy_mc_elbo(y, re_lambda, w, s, mu, D, O, samples, seed=0):
    """Plain MC estimate of the toy ELBO and its standard error."""
    from slowgen.latent_prior import LatentPrior
    from slowgen.vi_engine import sample_chain

    prior = LatentPrior(np.array([re_lambda]), np.zeros(1))
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(samples):
        z, logq = sample_chain(mu[:, None], D[:, None], O[:, None], rng.standard_normal((len(y), 1)))
        lik = np.sum(-0.5 * np.log(2 * np.pi * s * s) - (y - w * z[:, 0]) ** 2 / (2 * s * s))
        lp, _, _ = prior.real_path_logpdf_grad(z)
        vals.append(lik + lp - logq)
    vals = np.array(vals)
    return vals.mean(), vals.std(ddof=1) / np.sqrt(samples)
