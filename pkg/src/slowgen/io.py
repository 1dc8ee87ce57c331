"""Checkpoint and forecast files.

Both formats are a single JSON header line followed by a payload.  Binary
payloads are little-endian float64 arrays laid out back to back at the
offsets (in bytes, relative to the payload start) listed in the header.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .forecast import ForecastEnsemble
from .vi_engine import TERMS, Model, TrainConfig, build_model

__all__ = [
    "CHECKPOINT_VERSION",
    "FORECAST_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "save_forecast",
    "load_forecast",
    "read_counts_vector",
]

CHECKPOINT_VERSION = 1
FORECAST_VERSION = 1
_LE = "<f8"


def _pack(arrays: dict):
    layout, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=_LE)
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    return layout, b"".join(chunks)


def _unpack(layout, payload: bytes, source) -> dict:
    out = {}
    for entry in layout:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = int(entry["offset"])
        if lo + 8 * n > len(payload):
            raise ValidationError(f"{source}: payload truncated at array {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(payload, _LE, n, lo).reshape(shape).astype(float)
    return out


def _split(blob: bytes, source):
    cut = blob.find(b"\n")
    if cut < 0:
        raise ValidationError(f"{source}: missing header line")
    try:
        header = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{source}: bad header ({exc})") from None
    return header, blob[cut + 1:]


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(model: Model, meta: dict | None = None) -> bytes:
    arrays = dict(model.params())
    for k, v in model.curve.items():
        arrays[f"curve/{k}"] = np.asarray(v, dtype=float)
    layout, payload = _pack(arrays)
    N, T1, d = model.qx.mean.shape
    header = {
        "format": "slowgen-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "h": model.h,
        "d": d,
        "N": N,
        "T": T1 - 1,
        "config": model.config.to_dict(),
        "arrays": layout,
        "meta": meta or {},
        "theta2": [],
    }
    prior = getattr(model.dynamics, "prior", None)
    if prior is not None:
        header["re_lambda"] = [float(v) for v in prior.re_lambda]
        header["im_lambda"] = [float(v) for v in prior.im_lambda]
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload


def save_checkpoint(model: Model, path, meta: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_checkpoint(path, with_meta: bool = False):
    """Rebuild a model from a checkpoint file (``(model, meta)`` if requested)."""
    header, payload = _split(Path(path).read_bytes(), path)
    if header.get("format") != "slowgen-checkpoint":
        raise ValidationError(f"{path}: not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    try:
        config = TrainConfig.from_dict(header["config"])
        N, T, d, kind = int(header["N"]), int(header["T"]), int(header["d"]), header["kind"]
        layout = header["arrays"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: incomplete header ({exc})") from None
    arrays = _unpack(layout, payload, path)
    model = build_model(kind, np.zeros((N, T + 1, d)), config, np.random.default_rng(0))
    if int(header.get("h", model.h)) != model.h:
        raise ValidationError(f"{path}: header h={header['h']} disagrees with the model (h={model.h})")
    params = model.params()
    missing = set(params) - set(arrays)
    if missing:
        raise ValidationError(f"{path}: missing arrays {sorted(missing)}")
    for name, ref in params.items():
        if arrays[name].shape != ref.shape:
            raise ValidationError(f"{path}: array {name!r} has shape {arrays[name].shape}, "
                                  f"expected {ref.shape}")
        ref[...] = arrays[name]
    for k in ("elbo",) + TERMS:
        model.curve[k] = list(arrays.get(f"curve/{k}", np.zeros(0)))
    getattr(model.dynamics, "prior", None)  # validates Re(lambda) < 0
    return (model, header.get("meta", {})) if with_meta else model


# ---------------------------------------------------------------------------
# forecasts

def save_forecast(ens: ForecastEnsemble, path, meta: dict | None = None):
    """Text summary (mean / q05 / q95 per frame) plus a binary sample sidecar.

    The sidecar ``<path>.bin`` holds the density samples and the real and
    imaginary parts of the latent paths.
    """
    path = Path(path)
    arrays = {"density": ens.density, "z_re": ens.z.real, "z_im": ens.z.imag}
    if ens.counts is not None:
        arrays["counts"] = ens.counts
    layout, payload = _pack(arrays)
    header = {
        "format": "slowgen-forecast",
        "version": FORECAST_VERSION,
        "kind": ens.kind,
        "t0": ens.t0,
        "P": ens.P,
        "d": ens.d,
        "n_samples": ens.n_samples,
        "diverged": ens.diverged,
        "divergence_step": ens.divergence_step,
        "columns": ["t", "stat"] + [f"bin{k}" for k in range(ens.d)],
        "sidecar": path.name + ".bin",
        "arrays": layout,
        "meta": meta or {},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for k in range(ens.P + 1):
        for stat in ("mean", "q05", "q95"):
            vals = ",".join(repr(float(v)) for v in ens.summary[stat][k])
            lines.append(f"{ens.t0 + k},{stat},{vals}")
        vals = ",".join(repr(float(v)) for v in ens.density[0, k])
        lines.append(f"{ens.t0 + k},sample0,{vals}")
    path.write_text("\n".join(lines) + "\n")
    Path(str(path) + ".bin").write_bytes(payload)


def load_forecast(path):
    """Reload a :class:`ForecastEnsemble` written by :func:`save_forecast`."""
    path = Path(path)
    first = path.read_text().split("\n", 1)[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: bad header ({exc})") from None
    if header.get("format") != "slowgen-forecast":
        raise ValidationError(f"{path}: not a forecast file")
    side = path.with_name(header["sidecar"])
    if not side.exists():
        raise ValidationError(f"{path}: sample sidecar {side.name} missing")
    arrays = _unpack(header["arrays"], side.read_bytes(), side)
    counts = arrays.get("counts")
    return ForecastEnsemble(arrays["z_re"] + 1j * arrays["z_im"], arrays["density"],
                            int(header["t0"]),
                            None if counts is None else counts.astype(np.int64),
                            bool(header["diverged"]), header["divergence_step"], header["kind"])


def read_counts_vector(path) -> np.ndarray:
    """A single frame of counts: comma/whitespace separated integers."""
    text = Path(path).read_text().replace(",", " ").split()
    try:
        vals = np.array([int(v) for v in text], dtype=np.int64)
    except ValueError as exc:
        raise ValidationError(f"{path}: counts must be integers ({exc})") from None
    if vals.size == 0 or np.any(vals < 0):
        raise ValidationError(f"{path}: counts must be a non-empty non-negative vector")
    return vals
