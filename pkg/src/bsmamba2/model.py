"""Band-split encoder, dual-path bidirectional SSM stack and complex mask head.

Spectrogram tensors have shape ``(batch, channels, T, F, 2)`` with real and
imaginary planes in the last axis. Band ``k`` covers bins
``band_edges[k]:band_edges[k+1]``; its features interleave ``(re, im)`` per
bin (and per channel for stereo), giving ``2 * channels * F_k`` reals per frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import dsp
from . import tensor_core as tc
from .ssm import BidirectionalParams, bidirectional_block, init_bidirectional
from .tensor_core import Tensor

RMS_EPS = 1e-8
CHECKPOINT_MAGIC = b"BSM2"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def default_band_edges(num_bins: int, num_bands: int, first_width: int = 2) -> list[int]:
    """Contiguous bands whose widths grow geometrically from ``first_width`` bins.

    The growth ratio is solved so the widths tile ``[0, num_bins)`` exactly.
    """
    if num_bands < 1 or num_bands > num_bins:
        raise ConfigError(f"cannot split {num_bins} bins into {num_bands} bands")
    if num_bands == 1:
        return [0, num_bins]
    w0 = min(first_width, num_bins / num_bands)

    def total(r):
        return w0 * num_bands if abs(r - 1.0) < 1e-12 else w0 * (r ** num_bands - 1) / (r - 1)

    lo, hi = 1.0, 2.0
    while total(hi) < num_bins:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if total(mid) < num_bins else (lo, mid)
    r = 0.5 * (lo + hi)
    cum = np.cumsum(w0 * r ** np.arange(num_bands))
    edges = [0]
    for k, c in enumerate(cum[:-1]):
        # leave at least one bin for each remaining band
        e = int(round(c))
        e = max(e, edges[-1] + 1)
        e = min(e, num_bins - (num_bands - 1 - k))
        edges.append(e)
    edges.append(num_bins)
    return edges


@dataclass
class ModelConfig:
    d: int = 16
    layers: int = 2
    num_bands: int = 6
    band_edges: list[int] = field(default_factory=list)
    window_size: int = 512
    hop: int = 110
    sample_rate: int = 8000
    channels: int = 1
    heads: int = 2
    state_dim: int = 8
    inner_dim: int = 0  # 0 -> 2 * d
    mask_hidden_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.band_edges:
            self.band_edges = default_band_edges(self.num_bins, self.num_bands)
        self.band_edges = [int(e) for e in self.band_edges]
        if self.inner_dim == 0:
            self.inner_dim = 2 * self.d
        self.validate()

    @property
    def num_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def band_widths(self) -> list[int]:
        return [b - a for a, b in zip(self.band_edges[:-1], self.band_edges[1:])]

    def validate(self) -> None:
        e = self.band_edges
        if e[0] != 0 or e[-1] != self.num_bins:
            raise ConfigError(
                f"model.band_edges must start at 0 and end at F={self.num_bins}, got {e[0]}..{e[-1]}")
        if any(b <= a for a, b in zip(e[:-1], e[1:])):
            raise ConfigError(f"model.band_edges must be strictly increasing: {e}")
        if len(e) - 1 != self.num_bands:
            raise ConfigError(
                f"model.num_bands={self.num_bands} but band_edges define {len(e) - 1} bands")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"model.d must be even and >= 2, got {self.d}")
        if self.layers < 1:
            raise ConfigError(f"model.layers must be >= 1, got {self.layers}")
        if self.channels not in (1, 2):
            raise ConfigError(f"model.channels must be 1 or 2, got {self.channels}")
        if self.inner_dim % self.heads:
            raise ConfigError(
                f"model.inner_dim={self.inner_dim} not divisible by model.heads={self.heads}")
        if self.window_size % 2 or not 0 < self.hop <= self.window_size // 2:
            raise ConfigError(
                f"need even model.window_size and 0 < model.hop <= window/2, "
                f"got {self.window_size}/{self.hop}")
        if self.mask_hidden_mult < 1:
            raise ConfigError(f"model.mask_hidden_mult must be >= 1, got {self.mask_hidden_mult}")
        if self.sample_rate <= 0 or self.state_dim < 1:
            raise ConfigError("model.sample_rate and model.state_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ params
@dataclass
class ModelParams:
    split_gain: list[Tensor]
    split_w: list[Tensor]
    split_b: list[Tensor]
    blocks: list[tuple[BidirectionalParams, BidirectionalParams]]
    mask_gain: list[Tensor]
    mask_w1: list[Tensor]
    mask_b1: list[Tensor]
    mask_w2: list[Tensor]
    mask_b2: list[Tensor]

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k in range(len(self.split_w)):
            out[f"split.{k}.gain"] = self.split_gain[k]
            out[f"split.{k}.w"] = self.split_w[k]
            out[f"split.{k}.b"] = self.split_b[k]
        for i, (time_blk, band_blk) in enumerate(self.blocks):
            out.update(time_blk.named(f"dual.{i}.time"))
            out.update(band_blk.named(f"dual.{i}.band"))
        for k in range(len(self.mask_w1)):
            out[f"mask.{k}.gain"] = self.mask_gain[k]
            out[f"mask.{k}.w1"] = self.mask_w1[k]
            out[f"mask.{k}.b1"] = self.mask_b1[k]
            out[f"mask.{k}.w2"] = self.mask_w2[k]
            out[f"mask.{k}.b2"] = self.mask_b2[k]
        for name, t in out.items():
            t.name = name
        return out

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.named().values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self)


def _uniform(rng, fan_in, shape):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    D, C = cfg.d, cfg.channels
    split_gain, split_w, split_b = [], [], []
    for fk in cfg.band_widths:
        n_in = 2 * C * fk
        split_gain.append(tc.parameter(np.ones(n_in)))
        split_w.append(tc.parameter(_uniform(rng, n_in, (n_in, D))))
        split_b.append(tc.parameter(np.zeros(D)))
    blocks = []
    for _ in range(cfg.layers):
        t_blk = init_bidirectional(rng, D, cfg.heads, cfg.state_dim, cfg.inner_dim)
        b_blk = init_bidirectional(rng, D, cfg.heads, cfg.state_dim, cfg.inner_dim)
        blocks.append((t_blk, b_blk))
    mask_gain, w1, b1, w2, b2 = [], [], [], [], []
    for fk in cfg.band_widths:
        n_out = 2 * C * fk
        hidden = cfg.mask_hidden_mult * D
        mask_gain.append(tc.parameter(np.ones(D)))
        w1.append(tc.parameter(_uniform(rng, D, (D, hidden))))
        b1.append(tc.parameter(np.zeros(hidden)))
        w2.append(tc.parameter(_uniform(rng, hidden, (hidden, 2 * n_out))))
        b2.append(tc.parameter(np.zeros(2 * n_out)))
    params = ModelParams(split_gain, split_w, split_b, blocks, mask_gain, w1, b1, w2, b2)
    params.named()
    return params


def force_identity_mask(params: ModelParams) -> None:
    """Set every mask head so its GLU emits exactly 1 + 0i (value 2, gate sigmoid(0))."""
    for w2, b2 in zip(params.mask_w2, params.mask_b2):
        w2.data[...] = 0.0
        half = b2.size // 2
        b2.data[...] = 0.0
        b2.data[:half:2] = 2.0


# ------------------------------------------------------------------ layers
def rmsnorm(x, gain, eps: float = RMS_EPS) -> Tensor:
    x = tc.as_tensor(x)
    ms = tc.mean(x * x, axis=-1, keepdims=True)
    return x * tc.power(ms + eps, -0.5) * gain


def glu(x) -> Tensor:
    half = x.shape[-1] // 2
    return x[..., :half] * tc.sigmoid(x[..., half:])


def _check_spec(X: Tensor, cfg: ModelConfig) -> None:
    if X.ndim != 5 or X.shape[-1] != 2 or X.shape[1] != cfg.channels:
        raise ConfigError(
            f"spectrogram must be (batch, {cfg.channels}, T, F, 2), got {X.shape}")
    if X.shape[-2] != cfg.band_edges[-1]:
        raise ConfigError(
            f"spectrogram has F={X.shape[-2]} bins but band_edges end at {cfg.band_edges[-1]}")


def band_split(X, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(batch, C, T, F, 2) -> Z of shape (batch, T, K, D)."""
    X = tc.as_tensor(X)
    _check_spec(X, cfg)
    batch, C, T = X.shape[:3]
    e = cfg.band_edges
    feats = []
    for k in range(cfg.num_bands):
        band = X[:, :, :, e[k]:e[k + 1], :]
        band = tc.transpose(band, (0, 2, 3, 1, 4)).reshape(batch, T, -1)
        z = tc.matmul(rmsnorm(band, params.split_gain[k]), params.split_w[k]) + params.split_b[k]
        feats.append(z)
    return tc.stack(feats, axis=2)


def dual_path(Z, params: ModelParams, cfg: ModelConfig | None = None) -> Tensor:
    """Alternate time-axis and band-axis bidirectional blocks, once per repeat."""
    Z = tc.as_tensor(Z)
    for time_blk, band_blk in params.blocks:
        # (batch, T, K, D) -> (batch, K, T, D): sequences along time, one per band
        Zt = tc.transpose(Z, (0, 2, 1, 3))
        Z = tc.transpose(bidirectional_block(Zt, time_blk), (0, 2, 1, 3))
        # sequences along the band axis, one per frame
        Z = bidirectional_block(Z, band_blk)
    return Z


def estimate_mask(Q, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(batch, T, K, D) -> complex mask (batch, C, T, F, 2)."""
    Q = tc.as_tensor(Q)
    batch, T = Q.shape[:2]
    C = cfg.channels
    masks = []
    for k, fk in enumerate(cfg.band_widths):
        q = rmsnorm(Q[:, :, k, :], params.mask_gain[k])
        hidden = tc.tanh(tc.matmul(q, params.mask_w1[k]) + params.mask_b1[k])
        m = glu(tc.matmul(hidden, params.mask_w2[k]) + params.mask_b2[k])
        m = m.reshape(batch, T, fk, C, 2)
        masks.append(tc.transpose(m, (0, 3, 1, 2, 4)))
    return tc.concat(masks, axis=3)


def apply_mask(X, M) -> Tensor:
    """Complex elementwise product on (re, im) planes."""
    X, M = tc.as_tensor(X), tc.as_tensor(M)
    if X.shape != M.shape:
        raise tc.ShapeError(f"apply_mask: spectrogram {X.shape} vs mask {M.shape}")
    xr, xi = X[..., 0], X[..., 1]
    mr, mi = M[..., 0], M[..., 1]
    return tc.stack([xr * mr - xi * mi, xr * mi + xi * mr], axis=-1)


def separate_tensor(x, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Waveform tensor (batch, C, N) -> vocal estimate (batch, C, N)."""
    x = tc.as_tensor(x)
    n = x.shape[-1]
    if n < 2:
        raise ValueError(f"input of {n} samples is too short to analyse")
    X = dsp.stft_t(x, cfg.window_size, cfg.hop)
    Z = band_split(X, params, cfg)
    Q = dual_path(Z, params, cfg)
    M = estimate_mask(Q, params, cfg)
    S_hat = apply_mask(X, M)
    return dsp.istft_t(S_hat, cfg.window_size, cfg.hop, n)


def forward(mixture: dsp.Waveform, params: ModelParams, cfg: ModelConfig) -> dsp.Waveform:
    """Separate the vocal from a waveform (inference, no graph recorded)."""
    _check_rate(mixture, cfg)
    with tc.no_grad():
        y = separate_tensor(mixture.samples[None], params, cfg)
    return dsp.Waveform(y.data[0], mixture.sample_rate)


def separate_long(mixture: dsp.Waveform, params: ModelParams, cfg: ModelConfig,
                  segment_seconds: float = 8.0) -> dsp.Waveform:
    """Run :func:`forward` on consecutive non-overlapping segments and concatenate."""
    if not segment_seconds > 0:
        raise ValueError(f"segment_seconds must be positive, got {segment_seconds}")
    _check_rate(mixture, cfg)
    seg = max(1, int(round(segment_seconds * mixture.sample_rate)))
    n = mixture.num_samples
    starts = list(range(0, n, seg))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()  # a 1-sample tail cannot be framed; fold it into the last segment
    stops = starts[1:] + [n]
    pieces = [forward(dsp.Waveform(mixture.samples[:, a:b], mixture.sample_rate),
                      params, cfg).samples
              for a, b in zip(starts, stops)]
    return dsp.Waveform(np.concatenate(pieces, axis=1), mixture.sample_rate)


def _check_rate(w: dsp.Waveform, cfg: ModelConfig) -> None:
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"input sample rate {w.sample_rate} Hz != model sample rate {cfg.sample_rate} Hz")
    if w.channels != cfg.channels:
        raise ConfigError(f"input has {w.channels} channels, model expects {cfg.channels}")


# -------------------------------------------------------------- checkpoints
def _kv_block(d: dict) -> bytes:
    lines = [f"{k}={_encode_value(v)}" for k, v in sorted(d.items())]
    return "\n".join(lines).encode("utf-8")


def _encode_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(str(int(x)) for x in v) + "]"
    return repr(v) if isinstance(v, float) else str(v)


def _decode_block(raw: bytes, types: dict | None = None) -> dict:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, val = line.partition("=")
        if val.startswith("["):
            out[key] = [int(x) for x in val[1:-1].split(",") if x]
        else:
            out[key] = val
    if types:
        for key, typ in types.items():
            if key in out and not isinstance(out[key], list):
                out[key] = typ(out[key])
    return out


def save_checkpoint(params: ModelParams | dict, cfg: ModelConfig, path,
                    extra: dict[str, np.ndarray] | None = None,
                    meta: dict[str, str] | None = None) -> None:
    """Write magic, version, config block, meta block, then named float64 tensors."""
    named = params.named() if isinstance(params, ModelParams) else params
    tensors = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in named.items()}
    for k, v in (extra or {}).items():
        tensors[k] = np.asarray(v, dtype=np.float64)
    for k, v in tensors.items():
        if not np.all(np.isfinite(v)):
            raise CheckpointError(f"refusing to save non-finite tensor {k}")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", CHECKPOINT_VERSION)
    for block in (_kv_block(cfg.to_dict()), _kv_block(meta or {})):
        out += struct.pack("<I", len(block)) + block
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", 1, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos} (needed {n} more bytes)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a BSM2 checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (n,) = struct.unpack("<I", take(4))
    types = {f.name: f.type for f in fields(ModelConfig)}
    casts = {k: (float if "float" in str(t) else int) for k, t in types.items()}
    cfg_dict = _decode_block(take(n), casts)
    (n,) = struct.unpack("<I", take(4))
    meta = _decode_block(take(n))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != 1:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = arr
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after tensor table")
    try:
        cfg = ModelConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from None
    return cfg, meta, tensors


def load_into(params: ModelParams, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint tensors into ``params``, checking names and shapes."""
    named = params.named()
    missing = [k for k in named if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]}")
    for name, t in named.items():
        arr = tensors[name]
        if arr.shape != t.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data[...] = arr


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Load params; if ``cfg`` is given the tensors must fit that config."""
    file_cfg, _, tensors = read_checkpoint(path)
    target = cfg or file_cfg
    params = init_params(target)
    load_into(params, tensors)
    return params, target
