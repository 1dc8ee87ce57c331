"""End-to-end advection-diffusion run: simulate, train, forecast, evaluate.

Usage: python3 demos/ad_experiment.py [epochs]

Trains the main model on 16 simulated sequences and prints the learned
spectrum, the training-window reconstruction error, long-horizon distances
to the uniform steady state and a forecast from an unseen initial condition.
"""
from __future__ import annotations

import sys
import time

import numpy as np

from slowgen.evaluation import l1, two_point, two_point_from_counts
from slowgen.forecast import infer_z0, predict, predict_from_new_ic
from slowgen.gen_maps import density_from_X
from slowgen.particle_sim import SimConfig, ad_constants, bin_positions, draw_ic_family, simulate_ad
from slowgen.vi_engine import TrainConfig, train


def main(epochs: int = 8000):
    sim = SimConfig.preset("ad", f=20_000, N=16, T=40, d=25, seed=2024)
    data = simulate_ad(sim)
    cfg = TrainConfig.preset("ad", h=5, epochs=epochs, lr=1e-3, rescale_scale=False, seed=0)

    def log(epoch, elbo, terms, wall):
        if epoch % max(1, epochs // 10) == 0:
            print(f"epoch {epoch:6d}  elbo {elbo:12.1f}  {wall:6.1f} s", flush=True)

    start = time.perf_counter()
    model = train(data, cfg, log=log)
    print(f"trained in {time.perf_counter() - start:.0f} s")

    prior = model.dynamics.prior
    order = np.argsort(-prior.re_lambda)
    D, _ = ad_constants(sim)
    print("Re(lambda):", np.round(prior.re_lambda[order], 5))
    print("Im(lambda):", np.round(prior.im_lambda[order], 4))
    print(f"slowest diffusive mode -D pi^2 dt = {-D * np.pi**2 * sim.macro_dt:.5f}")

    recon = l1(density_from_X(model.qx.mean), data.density()).mean()
    print(f"training-window reconstruction L1: {recon:.4f}")

    uniform = np.full(data.d, 1 / data.d)
    ens = predict(model, 0, 1000 - data.T, 200, np.random.default_rng(1))
    for t in (60, 100, 200, 500, 1000):
        print(f"t = {t:4d}  L1 to uniform {l1(ens.frame(t).mean(0), uniform):.3f}")

    truth = simulate_ad(SimConfig.preset("ad", f=20_000, N=1, T=100, d=25, seed=2024))
    for t in (45, 60, 80):
        err = np.abs(two_point(ens, t, f=data.f) - two_point_from_counts(truth.counts[0, t])).sum()
        print(f"t = {t:4d}  two-point L1 to ground truth {err:.3f}")

    rng = np.random.default_rng(99)
    counts0 = bin_positions(draw_ic_family(rng).sample(data.f, rng), data.d)
    fit = infer_z0(model, counts0, np.random.default_rng(3))
    new = predict_from_new_ic(model, counts0, 500, 200, np.random.default_rng(4), fit=fit)
    print(f"new IC reconstruction L1 {l1(fit.reconstruction, counts0 / data.f):.3f}, "
          f"t = 500 L1 to uniform {l1(new.frame(500).mean(0), uniform):.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 8000)
