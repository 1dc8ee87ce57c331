"""Particle simulators on the periodic interval [-1, 1), binning, and
finite-difference solvers for their continuum limits.

Two fine-grained systems are provided:

* advection-diffusion: independent walkers jumping ``-ds`` / ``+ds`` with
  probabilities ``p_left`` / ``p_right`` per micro-step.  The density obeys
  ``rho_t + v rho_s = D rho_ss`` with ``D = (p_left + p_right) ds^2 / (2 dt)``
  and ``v = (p_right - p_left) ds / dt``.
* Burgers-type: walkers on a lattice whose rightward drift probability is
  proportional to the locally estimated density, giving
  ``rho_t + (rho^2 / 2)_s = nu rho_ss`` in the limit.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

__all__ = [
    "SimConfig",
    "CountTensor",
    "BumpMixture",
    "wrap",
    "bin_positions",
    "draw_ic_family",
    "sample_initial_conditions",
    "simulate_ad",
    "simulate_ad_micro",
    "simulate_burgers",
    "simulate",
    "fd_oracle_ad",
    "fd_oracle_burgers",
    "aggregate",
    "ad_constants",
    "DATASET_VERSION",
]

DATASET_VERSION = 1
DOMAIN = (-1.0, 1.0)
LENGTH = DOMAIN[1] - DOMAIN[0]


@dataclass
class SimConfig:
    f: int = 20000
    micro_dt: float = 2.5e-3
    ds: float = 1.0 / 640
    p_left: float = 0.1875
    p_right: float = 0.2125
    macro_stride: int = 800
    T: int = 40
    N: int = 16
    kind: str = "ad"
    nu: float = 0.0005
    mass: float = 0.02          # Burgers: total mass of rho over the domain
    d: int = 25
    d_interaction: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ad", "burgers"):
            raise ValidationError(f"unknown simulator kind {self.kind!r}")
        if self.f < 1 or self.N < 1 or self.T < 0 or self.d < 1:
            raise ValidationError("f, N, d must be >= 1 and T >= 0")
        if self.macro_stride < 1:
            raise ValidationError("macro_stride must be >= 1")
        if min(self.p_left, self.p_right) < 0 or self.p_left + self.p_right > 1:
            raise ValidationError("jump probabilities must be >= 0 with p_left + p_right <= 1")
        if self.micro_dt <= 0 or self.ds <= 0 or self.nu < 0 or self.mass <= 0:
            raise ValidationError("micro_dt, ds, mass must be > 0 and nu >= 0")

    @classmethod
    def preset(cls, kind: str, **overrides) -> "SimConfig":
        if kind == "ad":
            base = dict(kind="ad", d=25)
        elif kind == "burgers":
            base = dict(kind="burgers", d=64, ds=1.0 / 512, f=100000)
        else:
            raise ValidationError(f"unknown simulator kind {kind!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def macro_dt(self) -> float:
        return self.micro_dt * self.macro_stride

    def to_dict(self) -> dict:
        return asdict(self)


def ad_constants(cfg: SimConfig):
    """(D, v) of the advection-diffusion limit."""
    D = (cfg.p_left + cfg.p_right) * cfg.ds**2 / (2 * cfg.micro_dt)
    v = (cfg.p_right - cfg.p_left) * cfg.ds / cfg.micro_dt
    return D, v


# ---------------------------------------------------------------------------
# data container and file format

@dataclass
class CountTensor:
    counts: np.ndarray                  # (N, T+1, d) integers
    f: int
    meta: dict = field(default_factory=dict)
    mask: np.ndarray | None = None      # (N, T+1) bool, True = frame present

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3:
            raise ValidationError("counts must be (N, T+1, d)")
        if not np.issubdtype(c.dtype, np.integer):
            if np.any(c != np.round(c)):
                raise ValidationError("counts must be integers")
        c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValidationError("counts must be non-negative")
        if np.any(c.sum(-1) != self.f):
            raise ValidationError(f"every frame must sum to f={self.f}")
        self.counts = c
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != c.shape[:2]:
                raise ValidationError("mask must be (N, T+1)")

    @property
    def N(self) -> int:
        return self.counts.shape[0]

    @property
    def T(self) -> int:
        return self.counts.shape[1] - 1

    @property
    def d(self) -> int:
        return self.counts.shape[2]

    def density(self) -> np.ndarray:
        return self.counts / float(self.f)

    def subset(self, n: int) -> "CountTensor":
        """First ``n`` sequences (deterministic subsampling)."""
        if not 1 <= n <= self.N:
            raise ValidationError(f"cannot take {n} of {self.N} sequences")
        mask = None if self.mask is None else self.mask[:n]
        return CountTensor(self.counts[:n], self.f, dict(self.meta, N=n), mask)

    def header(self) -> dict:
        h = dict(self.meta)
        h.update(version=DATASET_VERSION, N=self.N, T=self.T, d=self.d, f=self.f,
                 domain=list(DOMAIN))
        h.setdefault("kind", "unknown")
        h.setdefault("seed", None)
        h.setdefault("sim", {})
        if self.mask is not None:
            h["mask"] = self.mask.astype(int).tolist()
        return h

    def save(self, path):
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines.extend(",".join(map(str, row)) for row in self.counts.reshape(-1, self.d))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CountTensor":
        text = Path(path).read_text().splitlines()
        if not text:
            raise ValidationError(f"{path}: empty dataset file")
        try:
            header = json.loads(text[0])
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: bad JSON header ({exc})") from None
        for key in ("version", "N", "T", "d", "f"):
            if key not in header:
                raise ValidationError(f"{path}: header lacks {key!r}")
        if header["version"] != DATASET_VERSION:
            raise ValidationError(f"{path}: unsupported dataset version {header['version']}")
        N, T, d = int(header["N"]), int(header["T"]), int(header["d"])
        rows = [ln for ln in text[1:] if ln.strip()]
        if len(rows) != N * (T + 1):
            raise ValidationError(f"{path}: expected {N * (T + 1)} data lines, found {len(rows)}")
        try:
            data = np.array([[int(v) for v in ln.split(",")] for ln in rows], dtype=np.int64)
        except ValueError as exc:
            raise ValidationError(f"{path}: malformed data line ({exc})") from None
        if data.shape != (N * (T + 1), d):
            raise ValidationError(f"{path}: every data line must hold {d} integers")
        mask = header.pop("mask", None)
        meta = {k: v for k, v in header.items() if k not in ("version", "domain")}
        return cls(data.reshape(N, T + 1, d), int(header["f"]), meta,
                   None if mask is None else np.array(mask, dtype=bool))


# ---------------------------------------------------------------------------
# positions, bins, initial conditions

def wrap(s):
    """Map positions periodically into [-1, 1)."""
    return np.mod(np.asarray(s, dtype=float) + 1.0, LENGTH) - 1.0


def bin_positions(positions, d: int) -> np.ndarray:
    """Counts in ``d`` equal left-closed bins ``[-1 + k w, -1 + (k+1) w)``."""
    s = np.asarray(positions, dtype=float)
    if s.size and (s.min() < DOMAIN[0] or s.max() >= DOMAIN[1]):
        raise ValidationError("positions must lie in [-1, 1)")
    k = np.floor((s - DOMAIN[0]) * (d / LENGTH)).astype(np.int64)
    np.clip(k, 0, d - 1, out=k)
    return np.bincount(k, minlength=d)


@dataclass(frozen=True)
class BumpMixture:
    """Periodic Gaussian bumps on top of a uniform floor."""

    centers: tuple
    widths: tuple
    weights: tuple
    floor: float = 0.1

    def _images(self):
        # enough periodic images to cover six widths of the widest bump
        k = max(3, int(np.ceil(6 * max(self.widths) / LENGTH)) + 1)
        return np.arange(-k, k + 1) * LENGTH

    def density(self, s) -> np.ndarray:
        """Probability density on [-1, 1) (integrates to 1)."""
        s = np.asarray(s, dtype=float)[..., None, None]
        c = np.asarray(self.centers)[:, None]
        w = np.asarray(self.widths)[:, None]
        z = (s - c - self._images()) / w
        bumps = (np.exp(-0.5 * z**2) / (w * np.sqrt(2 * np.pi))).sum(-1)
        return self.floor / LENGTH + (1 - self.floor) * bumps @ np.asarray(self.weights)

    def cdf_mass(self, edges) -> np.ndarray:
        """Probability of each interval between consecutive ``edges``."""
        e = np.asarray(edges, dtype=float)
        c = np.asarray(self.centers)[:, None, None]
        w = np.asarray(self.widths)[:, None, None]
        cdf = ndtr((e[None, :, None] - c - self._images()) / w).sum(-1)  # (k, len(e))
        mass = np.diff(cdf, axis=1).T @ np.asarray(self.weights)
        return self.floor * np.diff(e) / LENGTH + (1 - self.floor) * mass

    def bin_probs(self, d: int) -> np.ndarray:
        return self.cdf_mass(np.linspace(DOMAIN[0], DOMAIN[1], d + 1))

    def sample(self, f: int, rng) -> np.ndarray:
        probs = np.concatenate([[self.floor], (1 - self.floor) * np.asarray(self.weights)])
        n = rng.multinomial(f, probs / probs.sum())
        parts = [rng.uniform(DOMAIN[0], DOMAIN[1], n[0])]
        for k in range(len(self.centers)):
            parts.append(rng.normal(self.centers[k], self.widths[k], n[k + 1]))
        return wrap(np.concatenate(parts))


def draw_ic_family(rng, n_bumps=None) -> BumpMixture:
    k = int(rng.integers(1, 4)) if n_bumps is None else int(n_bumps)
    centers = rng.uniform(DOMAIN[0], DOMAIN[1], k)
    widths = rng.uniform(0.05, 0.3, k)
    weights = rng.dirichlet(np.ones(k))
    return BumpMixture(tuple(centers), tuple(widths), tuple(weights))


def sample_initial_conditions(kind: str, f: int, rng) -> np.ndarray:
    """Positions of ``f`` particles from a random bump mixture."""
    if kind not in ("ad", "burgers"):
        raise ValidationError(f"unknown simulator kind {kind!r}")
    return draw_ic_family(rng).sample(f, rng)


def _sequence_rng(seed: int, i: int):
    # independent of generation order, so parallel runs match sequential ones
    return np.random.default_rng([int(seed), int(i)])


# ---------------------------------------------------------------------------
# simulators

def _check_ad(cfg: SimConfig):
    if cfg.kind != "ad":
        raise ValidationError("simulate_ad needs kind='ad'")


def simulate_ad(cfg: SimConfig, d: int | None = None, initial_positions=None) -> CountTensor:
    """Non-interacting walkers, one exact draw of the net jump per macro frame.

    Over ``macro_stride`` categorical micro-steps the number of jumps is
    Binomial(stride, p_left + p_right) and, given that, the number of right
    jumps is Binomial(jumps, p_right / (p_left + p_right)).
    """
    _check_ad(cfg)
    d = cfg.d if d is None else d
    out = np.empty((cfg.N, cfg.T + 1, d), dtype=np.int64)
    p_move = cfg.p_left + cfg.p_right
    p_r = cfg.p_right / p_move if p_move > 0 else 0.0
    for i in range(cfg.N):
        rng = _sequence_rng(cfg.seed, i)
        s = (sample_initial_conditions("ad", cfg.f, rng) if initial_positions is None
             else wrap(initial_positions[i]))
        out[i, 0] = bin_positions(s, d)
        for t in range(1, cfg.T + 1):
            moves = rng.binomial(cfg.macro_stride, p_move, s.size)
            right = rng.binomial(moves, p_r)
            s = wrap(s + (2 * right - moves) * cfg.ds)
            out[i, t] = bin_positions(s, d)
    return CountTensor(out, cfg.f, _meta(cfg, d))


def simulate_ad_micro(cfg: SimConfig, d: int | None = None, initial_positions=None) -> CountTensor:
    """Reference micro-stepped version of :func:`simulate_ad` (slow)."""
    _check_ad(cfg)
    d = cfg.d if d is None else d
    out = np.empty((cfg.N, cfg.T + 1, d), dtype=np.int64)
    for i in range(cfg.N):
        rng = _sequence_rng(cfg.seed, i)
        s = (sample_initial_conditions("ad", cfg.f, rng) if initial_positions is None
             else wrap(initial_positions[i]))
        out[i, 0] = bin_positions(s, d)
        for t in range(1, cfg.T + 1):
            k = np.zeros(s.size, dtype=np.int64)
            for _ in range(cfg.macro_stride):
                u = rng.random(s.size)
                k += (u < cfg.p_right).astype(np.int64)
                k -= (u >= cfg.p_right) & (u < cfg.p_right + cfg.p_left)
            s = wrap(s + k * cfg.ds)
            out[i, t] = bin_positions(s, d)
    return CountTensor(out, cfg.f, _meta(cfg, d))


def _lattice_sites(cfg: SimConfig) -> int:
    m = LENGTH / cfg.ds
    M = int(round(m))
    if abs(m - M) > 1e-9:
        raise ValidationError("Burgers lattice needs 2 / ds to be an integer")
    return M


def burgers_probabilities(cfg: SimConfig, rho_max: float):
    """(p_diff, p_drift_max) for a given peak density, with the CFL check."""
    p_diff = cfg.nu * cfg.micro_dt / cfg.ds**2
    p_drift = 0.5 * rho_max * cfg.micro_dt / cfg.ds
    return p_diff, p_drift


def simulate_burgers(cfg: SimConfig, d_interaction: int | None = None,
                     initial_positions=None) -> CountTensor:
    """Interacting walkers whose density follows viscous Burgers in the limit.

    Walkers live on the lattice ``-1 + i ds``.  Every micro-step each walker
    independently (a) jumps ``-ds`` or ``+ds`` with probability
    ``p_diff = nu dt / ds^2`` each and (b) jumps ``+ds`` with probability
    ``(rho_hat / 2) dt / ds`` where ``rho_hat`` is the density (total mass
    ``cfg.mass``) estimated on ``d_interaction`` bins.  Given the current
    configuration walkers move independently, so the update is sampled per
    lattice site with binomial splits.
    """
    if cfg.kind != "burgers":
        raise ValidationError("simulate_burgers needs kind='burgers'")
    d_int = cfg.d_interaction if d_interaction is None else d_interaction
    M = _lattice_sites(cfg)
    if M % d_int or M % cfg.d:
        raise ValidationError(f"lattice of {M} sites must divide into {d_int} and {cfg.d} bins")
    per_int, per_bin = M // d_int, M // cfg.d
    p_diff = cfg.nu * cfg.micro_dt / cfg.ds**2
    drift_coef = 0.5 * cfg.micro_dt / cfg.ds * cfg.mass * d_int / (LENGTH * cfg.f)
    out = np.empty((cfg.N, cfg.T + 1, cfg.d), dtype=np.int64)
    for i in range(cfg.N):
        rng = _sequence_rng(cfg.seed, i)
        s = (sample_initial_conditions("burgers", cfg.f, rng) if initial_positions is None
             else wrap(initial_positions[i]))
        site = np.floor((s - DOMAIN[0]) / cfg.ds + 0.5).astype(np.int64) % M
        n = np.bincount(site, minlength=M)
        out[i, 0] = n.reshape(cfg.d, per_bin).sum(1)
        for t in range(1, cfg.T + 1):
            for _ in range(cfg.macro_stride):
                n = _burgers_micro_step(n, rng, p_diff, drift_coef, per_int)
            out[i, t] = n.reshape(cfg.d, per_bin).sum(1)
    return CountTensor(out, cfg.f, _meta(cfg, cfg.d))


def _burgers_micro_step(n, rng, p_diff, drift_coef, per_int):
    q = np.repeat(n.reshape(-1, per_int).sum(1), per_int) * drift_coef
    total = q.max() + 2 * p_diff
    if total > 1.0 + 1e-3:
        raise ValidationError(f"CFL violation: p_drift + 2 p_diff = {total:.4f} > 1")
    if total > 1.0:
        q = np.minimum(q, 1.0 - 2 * p_diff)
    # displacement = a + b, a in {-1, 0, +1}, b in {0, +1}, independent
    p_m1 = p_diff * (1 - q)
    p_p2 = p_diff * q
    p_p1 = p_diff * (1 - q) + (1 - 2 * p_diff) * q
    k_m1 = rng.binomial(n, p_m1)
    rest = n - k_m1
    k_p2 = rng.binomial(rest, np.minimum(p_p2 / (1 - p_m1), 1.0))
    rest = rest - k_p2
    k_p1 = rng.binomial(rest, np.minimum(p_p1 / (1 - p_m1 - p_p2), 1.0))
    stay = rest - k_p1
    return stay + np.roll(k_m1, -1) + np.roll(k_p1, 1) + np.roll(k_p2, 2)


def simulate(cfg: SimConfig) -> CountTensor:
    return simulate_ad(cfg) if cfg.kind == "ad" else simulate_burgers(cfg)


def _meta(cfg: SimConfig, d: int) -> dict:
    sim = cfg.to_dict()
    sim["d"] = d
    return {"kind": cfg.kind, "seed": cfg.seed, "sim": sim}


# ---------------------------------------------------------------------------
# finite-difference oracles (periodic, explicit)

def aggregate(rho, d: int) -> np.ndarray:
    """Sum a fine periodic grid (last axis) into ``d`` coarse bins."""
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[-1]
    if n % d:
        raise ValidationError(f"grid of {n} cells does not split into {d} bins")
    return rho.reshape(*rho.shape[:-1], d, n // d).sum(-1)


def _times(t_end):
    times = np.atleast_1d(np.asarray(t_end, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValidationError("output times must be non-negative and increasing")
    return times


def _run_explicit(rho0, times, dt, step):
    rho = np.array(rho0, dtype=float)
    out = np.empty((times.size, rho.size))
    t = 0.0
    for k, target in enumerate(times):
        while t < target - 1e-12:
            h = min(dt, target - t)
            rho = step(rho, h)
            t += h
        out[k] = rho
    return out


def fd_oracle_ad(rho0, D: float, v: float, t_end, dt: float | None = None,
                 safety: float = 0.1) -> np.ndarray:
    """Solve ``rho_t + v rho_s = D rho_ss`` on the periodic grid of ``rho0``.

    Upwind advection, central diffusion, explicit Euler with
    ``dt = safety * dt_max``.  ``rho0`` holds cell masses (any total); mass
    is conserved.  ``t_end`` may be a scalar or an increasing sequence, in
    which case one row per time is returned.
    """
    rho0 = np.asarray(rho0, dtype=float)
    n = rho0.size
    dx = LENGTH / n
    rate = abs(v) / dx + 2 * D / dx**2
    dt_max = np.inf if rate == 0 else 1.0 / rate
    if dt is None:
        dt = safety * dt_max if np.isfinite(dt_max) else 1.0
    elif dt > dt_max * (1 + 1e-12):
        raise ValidationError(f"time step {dt} violates stability limit {dt_max}")

    def step(r, h):
        adv = r - np.roll(r, 1) if v >= 0 else np.roll(r, -1) - r
        return r - v * h / dx * adv + D * h / dx**2 * (np.roll(r, -1) - 2 * r + np.roll(r, 1))

    times = _times(t_end)
    out = _run_explicit(rho0, times, dt, step)
    return out[0] if np.ndim(t_end) == 0 else out


def fd_oracle_burgers(rho0, nu: float, t_end, dt: float | None = None,
                      safety: float = 0.1) -> np.ndarray:
    """Solve ``rho_t + (rho^2/2)_s = nu rho_ss`` (periodic) with a Godunov flux.

    ``rho0`` is the density itself (not cell masses) on a uniform grid.
    """
    rho0 = np.asarray(rho0, dtype=float)
    n = rho0.size
    dx = LENGTH / n
    speed = max(float(np.max(np.abs(rho0))), 1e-300)
    dt_max = 1.0 / (speed / dx + 2 * nu / dx**2)
    if dt is None:
        dt = safety * dt_max
    elif dt > dt_max * (1 + 1e-12):
        raise ValidationError(f"time step {dt} violates CFL limit {dt_max}")

    def flux(left, right):
        # Godunov flux for the convex flux u^2 / 2
        fl, fr = 0.5 * left**2, 0.5 * right**2
        f = np.where(left <= right, np.minimum(fl, fr), np.maximum(fl, fr))
        return np.where((left < 0) & (right > 0), 0.0, f)

    def step(r, h):
        F = flux(r, np.roll(r, -1))          # interface i + 1/2
        lap = np.roll(r, -1) - 2 * r + np.roll(r, 1)
        return r - h / dx * (F - np.roll(F, 1)) + nu * h / dx**2 * lap

    times = _times(t_end)
    out = _run_explicit(rho0, times, dt, step)
    return out[0] if np.ndim(t_end) == 0 else out
