"""Command-line workbench: ``slowgen <subcommand> ...``.

Exit status: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import NumericalError, TrainingError, ValidationError

__all__ = ["main", "cli_dispatch", "build_parser"]

MODEL_KINDS = ("main", "real_latent", "nn_x", "koopman_prob", "koopman_det")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("config file must hold a flat JSON object")
    return data


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# ---------------------------------------------------------------------------
# subcommands

SIM_FLAGS = ("kind", "f", "N", "T", "d", "seed", "p_left", "p_right", "ds", "micro_dt",
             "macro_stride", "nu", "mass", "d_interaction")


def cmd_simulate(args):
    from .particle_sim import SimConfig, simulate

    values = _config_file(args.config)
    values.update(_overrides(args, SIM_FLAGS))
    kind = values.pop("kind", "ad")
    cfg = SimConfig.preset(kind, **values)
    data = simulate(cfg)
    data.save(args.out)
    print(f"wrote {data.N} x {data.T + 1} x {data.d} counts (f={data.f}) to {args.out}")


TRAIN_FLAGS = ("h", "epochs", "lr", "lr_final", "batch_size", "mc_samples", "seed",
               "weight_decay", "koopman_dim")


def cmd_train(args):
    from .baselines import train_baseline
    from .io import save_checkpoint
    from .particle_sim import CountTensor
    from .vi_engine import TrainConfig, train

    data = CountTensor.load(args.data)
    if args.sequences is not None:
        data = data.subset(args.sequences)
    values = _config_file(args.config)
    values.update(_overrides(args, TRAIN_FLAGS))
    preset = args.preset or (data.meta.get("kind") if data.meta.get("kind") in ("ad", "burgers")
                             else "ad")
    config = TrainConfig.preset(preset, **values)
    log_rows = []

    def log(epoch, elbo, terms, wall):
        log_rows.append([epoch, elbo] + [terms[k] for k in sorted(terms)] + [wall])
        if args.verbose and (epoch % 50 == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:5d}  elbo {elbo:.6e}  t={wall:.1f}s")

    meta = {"dataset": Path(args.data).name, "f": data.f, "sequences": data.N}
    try:
        if args.model == "main":
            model = train(data, config, "main", log)
        else:
            model = train_baseline(args.model, data, config, log)
    except TrainingError as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, args.out, dict(meta, failed=str(exc)))
            print(f"last good parameters saved to {args.out}", file=sys.stderr)
        raise
    save_checkpoint(model, args.out, meta)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "elbo", "entropy", "obs", "x_given_z", "z_prior", "wall_s"])
            w.writerows(log_rows)
    print(f"trained {args.model} for {config.epochs} epochs; "
          f"final elbo {model.curve['elbo'][-1]:.6e}; checkpoint {args.out}")


def cmd_predict(args):
    from .forecast import predict, predict_from_new_ic
    from .io import load_checkpoint, read_counts_vector, save_forecast

    model, meta = load_checkpoint(args.checkpoint, with_meta=True)
    rng = np.random.default_rng(args.seed)
    f = meta.get("f")
    if args.new_ic:
        counts0 = read_counts_vector(args.new_ic)
        ens = predict_from_new_ic(model, counts0, args.P, args.samples, rng,
                                  draw_counts=args.draw_counts)
    else:
        ens = predict(model, args.sequence, args.P, args.samples, rng,
                      draw_counts=args.draw_counts, f=f)
    save_forecast(ens, args.out, {"checkpoint": Path(args.checkpoint).name,
                                  "sequence": None if args.new_ic else args.sequence,
                                  "seed": args.seed, "f": f})
    msg = f"forecast frames {ens.t0}..{ens.t0 + ens.P} ({ens.n_samples} samples) -> {args.out}"
    if ens.diverged:
        msg += f"; rollout diverged at step {ens.divergence_step}"
    print(msg)


def cmd_evaluate(args):
    from .evaluation import evaluate_forecast
    from .io import load_forecast
    from .particle_sim import CountTensor

    ens = load_forecast(args.forecast)
    truth = CountTensor.load(args.truth)
    if not 0 <= args.sequence < truth.N:
        raise ValidationError(f"sequence {args.sequence} not in ground truth (N={truth.N})")
    rows = evaluate_forecast(ens, truth.counts[args.sequence], truth.f)
    if not rows:
        raise ValidationError("forecast and ground truth share no frames")
    lines = ["t,density_l1,sample_l1,two_point_l1"]
    lines += [f"{t},{a!r},{b!r},{c!r}" for t, a, b, c in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_sweep(args):
    from .evaluation import latent_sweep
    from .io import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    values = np.linspace(args.lo, args.hi, args.n)
    grid = values * (1j if args.imag else 1.0)
    dens = latent_sweep(model, args.j1, args.j2, grid)
    lines = ["i,j,z1,z2," + ",".join(f"bin{k}" for k in range(dens.shape[-1]))]
    for a in range(args.n):
        for b in range(args.n):
            vals = ",".join(repr(float(v)) for v in dens[a, b])
            lines.append(f"{a},{b},{grid[a]},{grid[b]},{vals}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_spectrum(args):
    from .baselines import spectral_radius
    from .io import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    prior = getattr(model.dynamics, "prior", None)
    if prior is not None:
        order = np.argsort(-prior.re_lambda)  # slowest (closest to zero) first
        print(f"{'j':>3} {'Re lambda':>14} {'Im lambda':>14} {'s':>10} {'timescale':>12}")
        for j in order:
            r, i = prior.re_lambda[j], prior.im_lambda[j]
            print(f"{j:>3d} {r:>14.6e} {i:>14.6e} {np.exp(r):>10.6f} {-1.0 / r:>12.3f}")
        mags = np.abs(prior.re_lambda)
        print(f"timescale ratio max|Re|/min|Re| = {mags.max() / mags.min():.3f}")
    elif hasattr(model.dynamics, "K"):
        K = model.dynamics.K
        moduli = np.sort(np.abs(np.linalg.eigvals(K)))[::-1]
        print("eigenvalue moduli of K:")
        for k, m in enumerate(moduli):
            print(f"{k:>3d} {m:.8f}")
        print(f"spectral radius = {spectral_radius(K):.8f}")
    else:
        print(f"model kind {model.kind!r} has no linear latent dynamics")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slowgen", description="probabilistic coarse-grained dynamics workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a particle dataset")
    s.add_argument("--kind", choices=("ad", "burgers"))
    s.add_argument("--f", type=int)
    s.add_argument("--N", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--p-left", dest="p_left", type=float)
    s.add_argument("--p-right", dest="p_right", type=float)
    s.add_argument("--ds", type=float)
    s.add_argument("--micro-dt", dest="micro_dt", type=float)
    s.add_argument("--macro-stride", dest="macro_stride", type=int)
    s.add_argument("--nu", type=float)
    s.add_argument("--mass", type=float)
    s.add_argument("--d-interaction", dest="d_interaction", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=MODEL_KINDS, default="main")
    t.add_argument("--preset", choices=("ad", "burgers"))
    t.add_argument("--h", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-final", dest="lr_final", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--mc-samples", dest="mc_samples", type=int)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--koopman-dim", dest="koopman_dim", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--sequences", type=int, help="train on the first N sequences only")
    t.add_argument("--config")
    t.add_argument("--log", help="CSV file for the per-epoch training curve")
    t.add_argument("--verbose", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="forecast from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--sequence", type=int, default=0)
    r.add_argument("--P", type=int, required=True)
    r.add_argument("--samples", type=int, default=100)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--new-ic", dest="new_ic", help="file with one frame of counts")
    r.add_argument("--draw-counts", dest="draw_counts", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="compare a forecast with ground truth")
    e.add_argument("--forecast", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--sequence", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="decode densities over a grid of two latent processes")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--j1", type=int, required=True)
    w.add_argument("--j2", type=int, required=True)
    w.add_argument("--lo", type=float, default=-2.0)
    w.add_argument("--hi", type=float, default=2.0)
    w.add_argument("--n", type=int, default=5)
    w.add_argument("--imag", action="store_true", help="sweep imaginary parts instead")
    w.add_argument("--out")
    w.set_defaults(func=cmd_sweep)

    k = sub.add_parser("spectrum", help="print the learned latent spectrum")
    k.add_argument("--checkpoint", required=True)
    k.set_defaults(func=cmd_spectrum)
    return p


def _thread_limit():
    raw = os.environ.get("SLOWGEN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"SLOWGEN_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValidationError("SLOWGEN_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with _thread_limit():
            args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
