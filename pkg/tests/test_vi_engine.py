from __future__ import annotations

import time

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from helpers import (
    fit_toy,
    frozen_objective,
    kalman_log_evidence,
    ou_covariance,
    tiny_counts,
    tiny_model,
    toy_data,
    toy_exact_elbo,
    toy_mc_elbo,
)
from slowgen.autodiff import DenseNet, Layer, grad_check
from slowgen.gen_maps import obs_logpdf
from slowgen.errors import TrainingError, ValidationError
from slowgen.vi_engine import (
    QXPosterior,
    QZPosterior,
    TrainConfig,
    bidiagonal_solve,
    build_model,
    chain_precision,
    draw_noise,
    elbo_estimate,
    elbo_terms,
    fit,
    rescale_latents,
    sample_chain,
    sample_q_X,
    sample_q_z,
    train,
)

LOG_2PI = np.log(2 * np.pi)


def constant_qz(d, h, mu=0.0, diag=1.0, off=0.0):
    """Amortization nets with zero weights: every frame gets the same heads."""
    nets = []
    for _ in range(h):
        b = np.concatenate([np.full(2, mu), np.full(2, np.log(diag)), np.full(2, off)])
        nets.append(DenseNet([Layer(np.zeros((6, d)), b)]))
    return QZPosterior(nets, [2] * h)


def chain_covariance(D, O):
    """Covariance of mu + B^{-T} eps by pushing the identity through the solver."""
    n = len(D)
    M = bidiagonal_solve(np.asarray(D, float)[:, None].repeat(n, 1),
                         np.asarray(O, float)[:, None].repeat(n, 1), np.eye(n))
    return M @ M.T


# ---------------------------------------------------------------------------
# samplers

def test_identity_chain_returns_noise():
    qz = constant_qz(d=3, h=2)
    eps = np.random.default_rng(0).standard_normal((5, 4))
    z, logq = sample_q_z(qz, np.zeros((5, 3)), eps)
    assert z.shape == (2, 5) and np.iscomplexobj(z)
    np.testing.assert_allclose(z[0].real, eps[:, 0], atol=1e-12)
    np.testing.assert_allclose(z[1].imag, eps[:, 3], atol=1e-12)
    ref = multivariate_normal(np.zeros(20), np.eye(20)).logpdf(eps.ravel())
    assert logq == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_chain_covariance_matches_dense_inverse(n):
    rng = np.random.default_rng(n)
    D = rng.uniform(0.5, 2.0, n)
    O = rng.normal(size=n)
    np.testing.assert_allclose(chain_covariance(D, O), np.linalg.inv(chain_precision(D, O)),
                               rtol=1e-10, atol=1e-12)
    if n == 1:
        assert chain_covariance(D, O)[0, 0] == pytest.approx(1 / D[0] ** 2)


def test_chain_mc_covariance():
    rng = np.random.default_rng(0)
    D = np.array([1.3, 0.8, 1.1, 0.9])
    O = np.array([0.5, -0.7, 0.4, 0.0])
    eps = rng.standard_normal((100_000, 4, 1))
    z, _ = sample_chain(np.zeros((4, 1)), D[:, None], O[:, None], eps)
    emp = np.cov(z[..., 0].T)
    ref = np.linalg.inv(chain_precision(D, O))
    assert np.abs(emp - ref).max() <= 0.03 * np.abs(ref).max()
    np.testing.assert_allclose(np.diag(emp), np.diag(ref), rtol=0.03)


def test_chain_logq_is_exact_density():
    rng = np.random.default_rng(1)
    D = rng.uniform(0.5, 2.0, 6)
    O = rng.normal(size=6)
    mu = rng.normal(size=6)
    eps = rng.standard_normal((6, 1))
    z, logq = sample_chain(mu[:, None], D[:, None], O[:, None], eps)
    dense = multivariate_normal(mu, np.linalg.inv(chain_precision(D, O))).logpdf(z[:, 0])
    # importance weight of the sample against its own density is one
    assert np.exp(logq - dense) == pytest.approx(1.0, abs=1e-10)


def test_chain_rejects_nonpositive_diagonal():
    with pytest.raises(ValidationError):
        sample_chain(np.zeros((2, 1)), np.array([[1.0], [0.0]]), np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValidationError):
        sample_q_z(constant_qz(2, 1), np.zeros(3), np.zeros((3, 2)))


def test_sampler_cost_is_linear():
    rng = np.random.default_rng(2)

    def best(n):
        D, O, eps = rng.uniform(1, 2, (n, 10)), rng.normal(size=(n, 10)), rng.normal(size=(n, 10))
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            bidiagonal_solve(D, O, eps)
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best(8000) < 2.5 * best(4000)


def test_sample_q_X():
    qx = QXPosterior(np.ones((1, 2, 3)), np.full((1, 2, 3), -100.0))
    eps = np.random.default_rng(0).standard_normal((1, 2, 3))
    X, _ = sample_q_X(qx, eps)
    np.testing.assert_allclose(X, 1.0, atol=1e-5)
    qx = QXPosterior(np.zeros((1, 4, 3)), np.zeros((1, 4, 3)))
    _, logq = sample_q_X(qx, np.zeros((1, 4, 3)))
    assert logq == pytest.approx(-0.5 * 4 * 3 * LOG_2PI, abs=1e-12)
    a = sample_q_X(qx, eps[:, :1].repeat(4, 1))
    b = sample_q_X(qx, eps[:, :1].repeat(4, 1))
    np.testing.assert_array_equal(a[0], b[0])


def test_qx_initialization():
    counts = np.array([[[3, 1, 0]]])
    qx = QXPosterior.from_counts(counts)
    np.testing.assert_allclose(qx.mean[0, 0], np.log(np.array([4, 2, 1]) / 7))
    assert np.all(qx.logstd == -2.0)


# ---------------------------------------------------------------------------
# ELBO

def test_degenerate_single_bin_observation_term_is_zero():
    counts = np.full((1, 1, 1), 7)
    model = build_model("main", counts, TrainConfig(h=1, qz_hidden=(3,)), np.random.default_rng(0))
    noise = draw_noise(model, 1, np.random.default_rng(1))
    terms, _ = elbo_terms(model, counts, np.array([0]), noise)
    assert terms["obs"] == 0.0
    obj, total, _ = elbo_estimate(model, counts, [0], None, noise=noise)
    assert obj == pytest.approx(sum(total[k] for k in ("obs", "x_given_z", "z_prior", "entropy"))
                                + total["log_prior_theta"])


def test_batch_must_be_nonempty():
    model, counts = tiny_model()
    with pytest.raises(ValidationError):
        elbo_estimate(model, counts[:0], [], np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["main", "real_latent"])
def test_elbo_gradients(kind):
    model, counts = tiny_model(kind)
    fn = frozen_objective(model, counts, idx=[0, 2], scale=1.5)
    assert grad_check(fn, model.params(), fd_step=1e-4, floor=1e-4) < 1e-5


def test_elbo_gradients_with_mask():
    model, counts = tiny_model("main")
    mask = np.ones(counts.shape[:2], dtype=bool)
    mask[:, 2] = False
    fn = frozen_objective(model, counts, mask=mask)
    assert grad_check(fn, model.params(), fd_step=1e-4, floor=1e-4) < 1e-5


def test_mask_drops_absent_frames_from_likelihood():
    model, counts = tiny_model("main")
    noise = draw_noise(model, counts.shape[0], np.random.default_rng(3))
    idx = np.arange(counts.shape[0])
    mask = np.ones(counts.shape[:2])
    mask[:, 1] = 0
    full, _ = elbo_terms(model, counts, idx, noise)
    part, _ = elbo_terms(model, counts, idx, noise, mask=mask)
    X, _ = sample_q_X(model.qx, noise["X"][0], idx)
    dropped = sum(obs_logpdf(counts[i, 1], X[i, 1]) for i in idx)
    assert part["obs"] == pytest.approx(full["obs"] - dropped, abs=1e-9)
    assert part["x_given_z"] == full["x_given_z"]


def test_crn_gradient_mean_matches_finite_difference():
    counts = tiny_counts(N=1, T=1, d=2, f=20)
    model, counts = tiny_model("main", counts, h=1, hidden=(), qz_hidden=(3,))
    params = model.params()
    # 10^4 draws as replicas of the one sequence; scale turns the sum into a mean
    reps = 10_000
    fn = frozen_objective(model, counts, idx=np.zeros(reps, int),
                          samples=1, seed=4, scale=1.0 / reps)
    _, grads = fn(params)
    for name, k in [("prior/a", 0), ("qx/mean", 1), ("decoder/0/W", 0)]:
        p = params[name].reshape(-1)
        g = grads[name].reshape(-1)[k]
        h = 1e-4
        p[k] += h
        up, _ = fn(params)
        p[k] -= 2 * h
        dn, _ = fn(params)
        p[k] += h
        fd = (up - dn) / (2 * h)
        assert abs(fd - g) <= 1e-3 * max(abs(g), 1e-2), name


# ---------------------------------------------------------------------------
# conjugate toy

@pytest.fixture(scope="module")
def toy():
    y = toy_data()
    logz = kalman_log_evidence(y, -0.1, 1.0, 0.3)
    mu, D, O, curve = fit_toy(y, -0.1, 1.0, 0.3)
    return y, logz, mu, D, O, curve


def test_kalman_oracle_matches_dense_gaussian():
    y = toy_data(n=20, seed=3)
    C = ou_covariance(20, -0.3) + 0.25 * np.eye(20)
    assert kalman_log_evidence(y, -0.3, 1.0, 0.5) == pytest.approx(
        multivariate_normal(np.zeros(20), C).logpdf(y), abs=1e-10)


def test_exact_posterior_closes_the_gap():
    y = toy_data()
    n = y.size
    L = np.linalg.inv(ou_covariance(n, -0.1)) + np.eye(n) / 0.09
    J = np.eye(n)[::-1]
    B = J @ np.linalg.cholesky(J @ L @ J) @ J      # upper bidiagonal, B B^T = L
    D, O = np.diag(B).copy(), np.append(np.diag(B, 1), 0.0)
    mu = np.linalg.solve(L, y / 0.09)
    assert toy_exact_elbo(y, -0.1, 1.0, 0.3, mu, D, O) == pytest.approx(
        kalman_log_evidence(y, -0.1, 1.0, 0.3), abs=1e-9)


def test_toy_elbo_reaches_evidence(toy):
    y, logz, mu, D, O, curve = toy
    assert curve[-1] <= logz + 1e-9
    assert abs(curve[-1] - logz) <= 0.01 * abs(logz)
    est, se = toy_mc_elbo(y, -0.1, 1.0, 0.3, mu, D, O, 4000)
    assert est <= logz + 4 * se
    assert est == pytest.approx(curve[-1], abs=5 * se)


def test_toy_curve_settles(toy):
    curve = toy[-1]
    assert curve[-1] > curve[0]
    # stochastic gradients jitter near the optimum; the trailing window is flat
    assert np.ptp(curve[-50:]) < 0.05


# ---------------------------------------------------------------------------
# training loop

def test_config_round_trip_and_validation():
    cfg = TrainConfig.preset("burgers", epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig(mc_samples=0)
    with pytest.raises(ValidationError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ValidationError):
        TrainConfig.preset("heat")


def test_training_improves_and_is_deterministic():
    counts = tiny_counts(N=4, T=5, d=6, f=200, seed=3)
    cfg = TrainConfig(h=2, epochs=150, batch_size=2, qz_hidden=(8,), lr=1e-2, seed=7)
    a = train(counts, cfg)
    b = train(counts, cfg)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v, b.params()[k])
    elbo = np.array(a.curve["elbo"])
    assert len(elbo) == 150
    assert elbo[-20:].mean() > elbo[:20].mean()
    assert set(a.curve) == {"elbo", "obs", "x_given_z", "z_prior", "entropy"}


def test_dropout_training_runs():
    counts = tiny_counts(N=2, T=2, d=4, f=40)
    cfg = TrainConfig(h=1, epochs=3, decoder_hidden=(5,), decoder_dropout=0.2, qz_hidden=(3,))
    model = train(counts, cfg)
    assert all(np.all(np.isfinite(v)) for v in model.params().values())


def test_divergence_restores_last_good_parameters():
    counts = tiny_counts(N=2, T=2, d=4, f=40)
    cfg = TrainConfig(h=1, epochs=5, qz_hidden=(3,))
    model = build_model("main", counts, cfg)
    seen = {}

    def corrupt(epoch, m):
        if epoch == 0:
            seen.update({k: v.copy() for k, v in m.params().items()})
            m.dynamics.im[0] = np.nan

    with pytest.raises(TrainingError) as info:
        fit(model, counts, cfg, callback=corrupt)
    good = info.value.checkpoint
    assert good is model
    for k, v in good.params().items():
        np.testing.assert_array_equal(v, seen[k])


@pytest.mark.parametrize("kind, hidden", [("main", ()), ("main", (4,)), ("real_latent", (4,))])
def test_recentering_and_rescaling_is_exact(kind, hidden):
    model, counts = tiny_model(kind, hidden=hidden)
    # give the latents an offset and a scale the prior dislikes
    for net in model.posterior.qz.nets:
        net.layers[-1].biases[:net.layers[-1].biases.size // 3] += 2.0
    idx = np.arange(counts.shape[0])
    noise = draw_noise(model, idx.size, np.random.default_rng(4))
    before, _ = elbo_terms(model, counts[idx], idx, noise, with_grad=False)
    k = rescale_latents(model, np.random.default_rng(5), samples=16)
    after, _ = elbo_terms(model, counts[idx], idx, noise, with_grad=False)
    assert np.all(k > 0) and not np.allclose(k, 1)
    assert after["obs"] == pytest.approx(before["obs"], rel=1e-12)
    assert after["x_given_z"] == pytest.approx(before["x_given_z"], rel=1e-9)
    groups = np.array(model.dynamics.groups)
    frames = counts.shape[0] * counts.shape[1]
    assert after["entropy"] - before["entropy"] == pytest.approx(frames * np.sum(groups * np.log(k)))
    # the move maximizes the prior plus entropy, which must beat the offset paths
    assert after["z_prior"] + after["entropy"] > before["z_prior"] + before["entropy"]


def test_rescaling_skips_models_without_ou_processes():
    model, _ = tiny_model("koopman_prob")
    assert rescale_latents(model, np.random.default_rng(0)) is None


def test_config_d_mismatch():
    with pytest.raises(ValidationError):
        build_model("main", tiny_counts(), TrainConfig(d=9))
