"""First- and second-order statistics of forecasts, and latent sweeps."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .forecast import ForecastEnsemble
from .gen_maps import decoder_forward, density_from_X

__all__ = [
    "l1",
    "density_stats",
    "two_point",
    "two_point_from_counts",
    "two_point_from_density",
    "latent_sweep",
    "sweep_deviation",
    "evaluate_forecast",
]


def l1(p, q) -> np.ndarray:
    """L1 distance between densities over the last (bin) axis."""
    return np.abs(np.asarray(p, float) - np.asarray(q, float)).sum(axis=-1)


def density_stats(ensemble) -> dict:
    """Mean, std and 5/50/95% quantiles over samples for every frame and bin."""
    dens = ensemble.density if isinstance(ensemble, ForecastEnsemble) else np.asarray(ensemble)
    if dens.ndim != 3 or dens.shape[0] == 0:
        raise ValidationError("need a non-empty (n_samples, frames, d) ensemble")
    return {
        "mean": dens.mean(0),
        "std": dens.std(0),
        "q05": np.quantile(dens, 0.05, axis=0),
        "median": np.quantile(dens, 0.5, axis=0),
        "q95": np.quantile(dens, 0.95, axis=0),
    }


def two_point_from_counts(counts) -> np.ndarray:
    """P(b1, b2) for a uniformly drawn pair of distinct particles."""
    m = np.asarray(counts, dtype=float)
    if m.ndim != 1:
        raise ValidationError("counts must be a single frame (d,)")
    f = m.sum()
    if f < 2:
        raise ValidationError("two-point statistics need at least 2 particles")
    P = np.outer(m, m)
    P[np.diag_indices_from(P)] -= m
    P /= f * (f - 1)
    return 0.5 * (P + P.T)


def two_point_from_density(density, f: int | None = None, rng=None) -> np.ndarray:
    """Posterior mean of the two-point matrix for counts ~ Multinomial(f, p).

    ``density`` is (n_samples, d).  Without ``rng`` the expectation over the
    multinomial is taken exactly (it equals ``p p^T`` for any ``f >= 2``);
    with ``rng`` one count vector per sample is drawn.
    """
    p = np.atleast_2d(np.asarray(density, dtype=float))
    if rng is None:
        if f is not None and f < 2:
            raise ValidationError("two-point statistics need at least 2 particles")
        P = np.einsum("si,sj->ij", p, p) / p.shape[0]
        P /= P.sum()
        return 0.5 * (P + P.T)
    if f is None:
        raise ValidationError("count sampling needs the particle number f")
    mats = [two_point_from_counts(rng.multinomial(f, q / q.sum())) for q in p]
    return np.mean(mats, axis=0)


def two_point(source, t: int | None = None, f: int | None = None, rng=None) -> np.ndarray:
    """Two-point matrix of a count frame (d,) or of ensemble frame ``t``."""
    if isinstance(source, ForecastEnsemble):
        if t is None:
            raise ValidationError("an ensemble frame index is required")
        frame = source.frame(t)  # validates the time index
        if source.counts is not None and rng is None:
            k = t - source.t0
            return np.mean([two_point_from_counts(c) for c in source.counts[:, k]], axis=0)
        return two_point_from_density(frame, f, rng)
    return two_point_from_counts(source)


def latent_sweep(model, j1: int, j2: int, grid) -> np.ndarray:
    """Decoded mean densities with processes ``j1``/``j2`` set to grid values.

    Every other process is held at zero.  Complex grid values set both real
    channels of a complex process; real models use the real part only.
    Returns ``(len(grid), len(grid), d)``.
    """
    if model.decoder is None:
        raise ValidationError(f"model kind {model.kind!r} has no latent state")
    groups = list(model.dynamics.groups)
    H = len(groups)
    for j in (j1, j2):
        if not 0 <= j < H:
            raise ValidationError(f"process index {j} outside [0, {H})")
    if j1 == j2:
        raise ValidationError("j1 and j2 must differ")
    grid = np.asarray(grid, dtype=complex).ravel()
    offsets = np.concatenate([[0], np.cumsum(groups)])
    G = grid.size
    inputs = np.zeros((G, G, offsets[-1]))

    def put(j, values, axis):
        lo = offsets[j]
        shape = (G, 1) if axis == 0 else (1, G)
        inputs[..., lo] = values.real.reshape(shape)
        if groups[j] == 2:
            inputs[..., lo + 1] = values.imag.reshape(shape)

    put(j1, grid, 0)
    put(j2, grid, 1)
    mean, _, _ = decoder_forward(model.decoder, inputs.reshape(G * G, -1), "eval")
    return density_from_X(mean).reshape(G, G, -1)


def sweep_deviation(model, j: int, grid) -> float:
    """Mean L1 change of the decoded density when process ``j`` alone varies."""
    other = 1 if j == 0 else 0
    dens = latent_sweep(model, j, other, np.concatenate([[0.0], np.asarray(grid, complex)]))
    base = dens[0, 0]
    return float(l1(dens[1:, 0], base).mean())


def evaluate_forecast(ensemble: ForecastEnsemble, truth_counts, f: int | None = None) -> list:
    """Per-frame comparison with ground-truth counts (T_truth + 1, d).

    Frames of the ensemble outside the ground-truth window are skipped.
    Returns rows ``(t, density_l1, sample_l1, two_point_l1)``.
    """
    truth = np.asarray(truth_counts, dtype=float)
    f = int(truth[0].sum()) if f is None else f
    stats = density_stats(ensemble)
    rows = []
    for k in range(ensemble.P + 1):
        t = ensemble.t0 + k
        if t >= truth.shape[0]:
            break
        ref = truth[t] / truth[t].sum()
        tp_truth = two_point_from_counts(truth[t])
        tp_model = two_point(ensemble, t, f)
        rows.append((t, float(l1(stats["mean"][k], ref)),
                     float(l1(ensemble.density[0, k], ref)),
                     float(np.abs(tp_model - tp_truth).sum())))
    return rows
