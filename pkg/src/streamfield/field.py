"""Radiance field: multiresolution hash encoding + small MLP, with a hand-written
reverse pass.

The MLP trunk sees [hash features | conditioning]. Conditioning is the
projected color [mean | variance] for the streaming model, or a frequency
encoding of normalized time for the space-time baseline. Density is
exp(raw) clamped to [0, 1e4]; color is logistic(raw) of [trunk | enc(d)].
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FieldConfig

PRIMES = (73856093, 19349663, 83492791)
SIGMA_MAX = 1e4
_LOG_SIGMA_MAX = float(np.log(SIGMA_MAX))

CHECKPOINT_MAGIC = b"SFLD"
CHECKPOINT_VERSION = 1


class FieldError(ValueError):
    pass


def level_resolutions(cfg: FieldConfig) -> list[int]:
    return [int(np.floor(cfg.base_resolution * cfg.per_level_scale**l)) for l in range(cfg.levels)]


def condition_dim(cfg: FieldConfig) -> int:
    return 6 if cfg.conditioning == "projected-color" else 2 * cfg.time_octaves


@dataclass
class FieldParams:
    config: FieldConfig
    arrays: dict  # name -> ndarray; "tables" is (L, T, F)

    @property
    def tables(self) -> np.ndarray:
        return self.arrays["tables"]

    @property
    def dtype(self):
        return self.arrays["tables"].dtype

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "FieldParams":
        return FieldParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for v in self.arrays.values():
            v[...] = flat[i : i + v.size].reshape(v.shape)
            i += v.size
        if i != flat.size:
            raise FieldError(f"flat parameter vector has {flat.size} entries, expected {i}")


def init_params(cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32) -> FieldParams:
    arrays = {"tables": rng.uniform(-1e-4, 1e-4, (cfg.levels, cfg.table_size, cfg.features))}
    width = cfg.hidden_width
    fan_in = cfg.levels * cfg.features + condition_dim(cfg)
    for i in range(cfg.hidden_depth):
        arrays[f"W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width))
        arrays[f"b{i}"] = np.zeros(width)
        fan_in = width
    arrays["Wd"] = rng.normal(0.0, np.sqrt(1.0 / width), (width, 1))
    arrays["bd"] = np.zeros(1)
    color_in = width + 6 * cfg.direction_octaves
    arrays["Wc"] = rng.normal(0.0, np.sqrt(1.0 / color_in), (color_in, 3))
    arrays["bc"] = np.zeros(3)
    return FieldParams(cfg, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in arrays.items()})


def zero_params(cfg: FieldConfig, dtype=np.float64) -> FieldParams:
    p = init_params(cfg, np.random.default_rng(0), dtype)
    for v in p.arrays.values():
        v[...] = 0
    return p


def frequency_encoding(v: np.ndarray, octaves: int) -> np.ndarray:
    """[sin(2^k pi v), cos(2^k pi v)] for k < octaves, per input component."""
    v = np.asarray(v)
    scales = (2.0 ** np.arange(octaves)) * np.pi
    arg = v[..., :, None] * scales.astype(v.dtype)
    enc = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
    return enc.reshape(*v.shape[:-1], -1)


# -- hash encoding -------------------------------------------------------------


def _check_points(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FieldError("non-finite input to the field")
    if np.any(x < 0) or np.any(x > 1):
        raise FieldError("positions must lie in the unit cube")


def _level_lookup(x: np.ndarray, res: int, table_size: int):
    """Corner indices (8, N) and trilinear weights (8, N) for one level.

    Corner c uses offset bit (c >> axis) & 1 along each axis.
    """
    pos = x * res
    base = np.clip(np.floor(pos), 0, res - 1)
    frac = pos - base
    base = base.astype(np.int64)
    # per-axis (2, N) corner coordinates and 1-D weights
    lo_hi = [np.stack([base[:, a], base[:, a] + 1]) for a in range(3)]
    wts = [np.stack([1 - frac[:, a], frac[:, a]]) for a in range(3)]
    w = (wts[2][:, None, None] * wts[1][None, :, None] * wts[0][None, None, :]).reshape(8, -1)
    side = res + 1
    if side**3 <= table_size:
        cx, cy, cz = lo_hi
        idx = cz[:, None, None] * (side * side) + cy[None, :, None] * side + cx[None, None, :]
    else:
        cx, cy, cz = (c.astype(np.uint32) * np.uint32(p) for c, p in zip(lo_hi, PRIMES))
        idx = (cz[:, None, None] ^ cy[None, :, None] ^ cx[None, None, :]) & np.uint32(table_size - 1)
    return idx.reshape(8, -1).astype(np.intp), w


def hash_encode(x, params: FieldParams, _record: list | None = None) -> np.ndarray:
    """Encode points (N, 3) in the unit cube into (N, L*F) features."""
    x = np.asarray(x, dtype=params.dtype)
    squeeze = x.ndim == 1
    x = x.reshape(-1, 3)
    _check_points(x)
    cfg = params.config
    out = np.empty((len(x), cfg.levels * cfg.features), dtype=params.dtype)
    for l, res in enumerate(level_resolutions(cfg)):
        idx, w = _level_lookup(x, res, cfg.table_size)
        table = params.tables[l]
        for f in range(cfg.features):
            out[:, l * cfg.features + f] = (table[:, f][idx] * w).sum(axis=0)
        if _record is not None:
            _record.append((idx, w))
    return out[0] if squeeze else out


# -- forward / backward --------------------------------------------------------


@dataclass
class FieldOutput:
    sigma: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)


@dataclass
class GradientTape:
    """Activations of one recorded forward batch and the gradients accumulated from it."""

    config: FieldConfig
    shapes: dict
    lookups: list = dataclasses.field(default_factory=list)
    activations: list = dataclasses.field(default_factory=list)  # trunk inputs per layer, post-ReLU
    pre_activations: list = dataclasses.field(default_factory=list)
    color_input: np.ndarray | None = None
    sigma: np.ndarray | None = None
    sigma_clamped: np.ndarray | None = None
    color: np.ndarray | None = None
    grads: dict | None = None


def _forward(x, d, cond, params: FieldParams, tape: GradientTape | None) -> FieldOutput:
    cfg = params.config
    dt = params.dtype
    x = np.asarray(x, dtype=dt).reshape(-1, 3)
    d = np.asarray(d, dtype=dt).reshape(-1, 3)
    cond = np.asarray(cond, dtype=dt).reshape(len(x), -1)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(cond))):
        raise FieldError("non-finite input to the field")
    record = [] if tape is not None else None
    feats = hash_encode(x, params, record)
    a = np.concatenate([feats, cond], axis=1)
    acts, pres = [a], []
    P = params.arrays
    for i in range(cfg.hidden_depth):
        z = a @ P[f"W{i}"] + P[f"b{i}"]
        a = np.maximum(z, 0)
        pres.append(z)
        acts.append(a)
    raw_sigma = (a @ P["Wd"])[:, 0] + P["bd"][0]
    clamped = raw_sigma > _LOG_SIGMA_MAX
    sigma = np.minimum(np.exp(np.minimum(raw_sigma, _LOG_SIGMA_MAX)), SIGMA_MAX)
    c_in = np.concatenate([a, frequency_encoding(d, cfg.direction_octaves)], axis=1)
    raw_c = c_in @ P["Wc"] + P["bc"]
    color = 1.0 / (1.0 + np.exp(-raw_c))
    if tape is not None:
        if tape.config != cfg:
            raise FieldError("tape was created for a different field configuration")
        tape.lookups = record
        tape.activations = acts
        tape.pre_activations = pres
        tape.color_input = c_in
        tape.sigma = sigma
        tape.sigma_clamped = clamped
        tape.color = color
        tape.grads = None
    return FieldOutput(sigma=sigma, color=color)


def new_tape(params: FieldParams) -> GradientTape:
    return GradientTape(config=params.config, shapes={k: v.shape for k, v in params.arrays.items()})


def field_forward(x, d, stats, params: FieldParams, tape: GradientTape | None = None) -> FieldOutput:
    """Projected-color conditioned field. `stats` is ProjectedColorStats or an (N, 6) array."""
    if params.config.conditioning != "projected-color":
        raise FieldError("field_forward needs a projected-color field")
    cond = stats.features() if hasattr(stats, "features") else stats
    return _forward(x, d, cond, params, tape)


def spacetime_forward(x, d, t, params: FieldParams, tape: GradientTape | None = None) -> FieldOutput:
    """Space-time baseline: conditioning is a frequency encoding of normalized time."""
    cfg = params.config
    if cfg.conditioning != "space-time":
        raise FieldError("spacetime_forward needs a space-time field")
    n = len(np.asarray(x).reshape(-1, 3))
    t = np.broadcast_to(np.asarray(t, dtype=params.dtype).reshape(-1, 1), (n, 1))
    if not np.all(np.isfinite(t)):
        raise FieldError("non-finite time input")
    return _forward(x, d, frequency_encoding(t, cfg.time_octaves), params, tape)


def field_backward(tape: GradientTape, grad_sigma, grad_color, params: FieldParams) -> dict:
    """Parameter gradients of sum(grad_sigma*sigma + grad_color*color) for the taped batch."""
    cfg = params.config
    if tape.config != cfg or tape.shapes != {k: v.shape for k, v in params.arrays.items()}:
        raise FieldError("tape does not match these parameters")
    if tape.sigma is None:
        raise FieldError("tape holds no recorded forward pass")
    P = params.arrays
    dt = params.dtype
    g_sigma = np.asarray(grad_sigma, dtype=dt).reshape(-1)
    g_color = np.asarray(grad_color, dtype=dt).reshape(-1, 3)
    grads = {}

    d_raw_sigma = np.where(tape.sigma_clamped, 0, g_sigma * tape.sigma)[:, None]
    d_raw_c = g_color * tape.color * (1 - tape.color)
    grads["Wc"] = tape.color_input.T @ d_raw_c
    grads["bc"] = d_raw_c.sum(axis=0)
    a = tape.activations[-1]
    grads["Wd"] = a.T @ d_raw_sigma
    grads["bd"] = d_raw_sigma.sum(axis=0)
    width = cfg.hidden_width
    da = d_raw_sigma @ P["Wd"].T + d_raw_c @ P["Wc"][:width].T
    for i in reversed(range(cfg.hidden_depth)):
        dz = da * (tape.pre_activations[i] > 0)
        grads[f"W{i}"] = tape.activations[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        da = dz @ P[f"W{i}"].T
    # da is now the gradient w.r.t. [hash features | conditioning]
    F = cfg.features
    tables = np.zeros_like(P["tables"])
    for l, (idx, w) in enumerate(tape.lookups):
        flat_idx = idx.ravel()
        for f in range(F):
            g = (w * da[None, :, l * F + f]).ravel()
            tables[l, :, f] = np.bincount(flat_idx, weights=g, minlength=cfg.table_size)
    grads["tables"] = tables
    grads = {k: np.asarray(grads[k], dtype=dt).reshape(P[k].shape) for k in P}
    tape.grads = grads
    return grads


# -- checkpoints -----------------------------------------------------------------
# Layout (little-endian):
#   4 bytes  magic "SFLD"
#   u32      format version
#   u32      length of the UTF-8 JSON header
#   bytes    JSON {"field": FieldConfig fields, "names": [...], "shapes": [...], "extra": {...}}
#   u64      number of parameters
#   f32[n]   parameters, concatenated in header name order


def save_checkpoint(params: FieldParams, path, extra: dict | None = None) -> None:
    header = json.dumps(
        {
            "field": dataclasses.asdict(params.config),
            "names": params.names(),
            "shapes": [list(v.shape) for v in params.arrays.values()],
            "extra": extra or {},
        }
    ).encode()
    flat = params.flat().astype("<f4")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[FieldParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FieldError(f"{path}: not a field checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FieldError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen].decode())
    (n,) = struct.unpack_from("<Q", data, 12 + hlen)
    flat = np.frombuffer(data, dtype="<f4", count=n, offset=20 + hlen)
    cfg = FieldConfig(**header["field"])
    arrays = {name: np.zeros(shape, dtype=dtype) for name, shape in zip(header["names"], header["shapes"])}
    params = FieldParams(cfg, arrays)
    params.set_flat(flat.astype(dtype))
    return params, header.get("extra", {})
