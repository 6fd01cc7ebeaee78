"""STFT / ISTFT analysis-synthesis and RIFF WAV I/O.

Conventions
-----------
* Periodic Hann window, ``w[n] = 0.5 - 0.5 cos(2 pi n / W)``.
* Center padding by ``W // 2`` samples on each side with reflection, so frame
  ``t`` is centred on sample ``t * hop``.
* ``T = ceil(num_samples / hop)`` frames and ``F = W // 2 + 1`` one-sided bins.
* Synthesis is windowed overlap-add divided by the summed squared window
  (guarded at ``1e-10``), then trimmed to the requested length.

Spectrograms travel through the autodiff graph as real tensors whose last axis
holds ``(re, im)``: shape ``(..., T, F, 2)``. Both transforms are linear; their
backward passes are the exact adjoints of the forward operators, computed with
the same framing / overlap-add machinery.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor_core import Tensor, as_tensor, record

NORM_EPS = 1e-10


class WavError(ValueError):
    """Malformed or unsupported WAV data."""


@dataclass
class ComplexSpectrogram:
    re: np.ndarray
    im: np.ndarray
    window_size: int
    hop: int
    sample_rate: int = 0

    @property
    def frames(self) -> int:
        return self.re.shape[-2]

    @property
    def bins(self) -> int:
        return self.re.shape[-1]

    def stacked(self) -> np.ndarray:
        return np.stack([self.re, self.im], axis=-1)


@dataclass
class Waveform:
    """``samples`` has shape (channels, num_samples)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


# ------------------------------------------------------------------- framing
def hann(window_size: int) -> np.ndarray:
    n = np.arange(window_size)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_size)


def num_frames(num_samples: int, hop: int) -> int:
    return -(-num_samples // hop)


def _check_params(window_size: int, hop: int) -> None:
    if window_size <= 0 or window_size % 2:
        raise ValueError(f"window_size must be a positive even integer, got {window_size}")
    if not 0 < hop <= window_size:
        raise ValueError(f"hop must be in (0, window_size={window_size}], got {hop}")


@lru_cache(maxsize=64)
def _plan(num_samples: int, window_size: int, hop: int):
    """Index bookkeeping shared by analysis, synthesis and their adjoints."""
    pad = window_size // 2
    # reflect-padding expressed as a gather into the unpadded signal
    pad_index = np.pad(np.arange(num_samples), pad, mode="reflect")
    n_frames = num_frames(num_samples, hop)
    starts = np.arange(n_frames) * hop
    window = hann(window_size)
    padded_len = num_samples + 2 * pad
    denom = np.zeros(padded_len)
    for s in starts:
        denom[s:s + window_size] += window * window
    return pad_index, n_frames, starts, window, denom


def _overlap_add(frames: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    """Sum ``frames[..., t, :]`` into an output of ``length`` at ``starts[t]``."""
    W = frames.shape[-1]
    out = np.zeros(frames.shape[:-2] + (length,))
    for t, s in enumerate(starts):
        out[..., s:s + W] += frames[..., t, :]
    return out


def _frame(x: np.ndarray, starts: np.ndarray, W: int) -> np.ndarray:
    """Strided (read-only) view of frames ``x[..., s:s+W]`` for each start."""
    hop = int(starts[1] - starts[0]) if starts.size > 1 else 1
    view = np.lib.stride_tricks.sliding_window_view(x, W, axis=-1)
    return view[..., ::hop, :][..., :starts.size, :]


def _fold_reflect(padded_grad: np.ndarray, pad_index: np.ndarray, num_samples: int) -> np.ndarray:
    """Adjoint of the reflect-padding gather."""
    lead = padded_grad.shape[:-1]
    flat = padded_grad.reshape(-1, padded_grad.shape[-1])
    out = np.empty((flat.shape[0], num_samples))
    for i, row in enumerate(flat):
        out[i] = np.bincount(pad_index, weights=row, minlength=num_samples)
    return out.reshape(lead + (num_samples,))


def _rfft_adjoint(G: np.ndarray, W: int) -> np.ndarray:
    """Adjoint of ``frames -> stack(re, im)(rfft(frames))`` along the last axes."""
    Y = G[..., 0] + 1j * G[..., 1]
    Y[..., 1:W // 2] *= 0.5
    return np.fft.irfft(Y, n=W, axis=-1) * W


def _irfft_adjoint(g: np.ndarray, W: int) -> np.ndarray:
    """Adjoint of ``stack(re, im) -> irfft(re + i im)`` along the last axes."""
    Y = np.fft.rfft(g, axis=-1) / W
    Y[..., 1:W // 2] *= 2.0
    out = Y.view(np.float64).reshape(Y.shape + (2,))
    # irfft ignores the imaginary part of the DC and Nyquist bins
    out[..., 0, 1] = 0.0
    out[..., W // 2, 1] = 0.0
    return out


# ------------------------------------------------------------ numpy forward
def stft_array(x: np.ndarray, window_size: int, hop: int) -> np.ndarray:
    """(..., N) real -> (..., T, F, 2) real/imag planes."""
    _check_params(window_size, hop)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("stft of an empty signal")
    pad_index, _, starts, window, _ = _plan(n, window_size, hop)
    frames = _frame(x[..., pad_index], starts, window_size) * window
    spec = np.fft.rfft(frames, axis=-1)
    # complex128 memory is already interleaved (re, im)
    spec = np.ascontiguousarray(spec)
    return spec.view(np.float64).reshape(spec.shape + (2,))


def istft_array(S: np.ndarray, window_size: int, hop: int, target_length: int) -> np.ndarray:
    """(..., T, F, 2) -> (..., target_length) by normalized overlap-add."""
    _check_params(window_size, hop)
    S = np.asarray(S, dtype=np.float64)
    T = S.shape[-3]
    if S.shape[-2] != window_size // 2 + 1:
        raise ValueError(f"spectrogram has {S.shape[-2]} bins, expected {window_size // 2 + 1}")
    n, starts, window, denom = _synthesis_plan(T, window_size, hop, target_length)
    frames = np.fft.irfft(S[..., 0] + 1j * S[..., 1], n=window_size, axis=-1) * window
    y = _overlap_add(frames, starts, denom.size)
    pad = window_size // 2
    y = y[..., pad:pad + n] / np.maximum(denom[pad:pad + n], NORM_EPS)
    return _fit_length(y, target_length)


@lru_cache(maxsize=64)
def _synthesis_plan(T: int, window_size: int, hop: int, target_length: int):
    # signal length whose analysis produces exactly T frames
    n = max(min(target_length, T * hop), (T - 1) * hop + 1)
    pad = window_size // 2
    starts = np.arange(T) * hop
    window = hann(window_size)
    denom = np.zeros(n + 2 * pad)
    for s in starts:
        denom[s:s + window_size] += window * window
    # with hop > window/2 the last few samples may lie under no frame at all;
    # the guard in istft_array then leaves them at 0
    return n, starts, window, denom


def _fit_length(y: np.ndarray, target_length: int) -> np.ndarray:
    n = y.shape[-1]
    if n >= target_length:
        return y[..., :target_length]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, target_length - n)]
    return np.pad(y, pad)


def stft(x, window_size: int, hop: int, sample_rate: int = 0) -> ComplexSpectrogram:
    S = stft_array(x, window_size, hop)
    return ComplexSpectrogram(S[..., 0], S[..., 1], window_size, hop, sample_rate)


def istft(S: ComplexSpectrogram, target_length: int) -> np.ndarray:
    return istft_array(S.stacked(), S.window_size, S.hop, target_length)


# ------------------------------------------------------------ autodiff ops
def stft_t(x, window_size: int, hop: int) -> Tensor:
    """Differentiable STFT: (..., N) -> (..., T, F, 2)."""
    x = as_tensor(x)
    out = stft_array(x.data, window_size, hop)
    n = x.shape[-1]

    def back(G):
        pad_index, _, starts, window, denom = _plan(n, window_size, hop)
        g_frames = _rfft_adjoint(G, window_size) * window
        g_pad = _overlap_add(g_frames, starts, denom.size)
        return (_fold_reflect(g_pad, pad_index, n),)

    return record(out, (x,), back, "stft")


def istft_t(S, window_size: int, hop: int, target_length: int) -> Tensor:
    """Differentiable ISTFT: (..., T, F, 2) -> (..., target_length)."""
    S = as_tensor(S)
    out = istft_array(S.data, window_size, hop, target_length)
    T = S.shape[-3]

    def back(g):
        n, starts, window, denom = _synthesis_plan(T, window_size, hop, target_length)
        pad = window_size // 2
        g = g[..., :min(n, target_length)]
        g_pad = np.zeros(g.shape[:-1] + (denom.size,))
        g_pad[..., pad:pad + g.shape[-1]] = g / np.maximum(denom[pad:pad + g.shape[-1]], NORM_EPS)
        g_frames = _frame(g_pad, starts, window_size) * window
        return (_irfft_adjoint(g_frames, window_size),)

    return record(out, (S,), back, "istft")


# ---------------------------------------------------------------------- WAV
_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a RIFF/WAVE file holding PCM16 or IEEE float32 samples."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_wav(blob, source=str(path))


def parse_wav(blob: bytes, source: str = "<bytes>") -> Waveform:
    if len(blob) < 12:
        raise WavError(f"{source}: file too short for a RIFF header at byte 0")
    riff, _, wave = struct.unpack_from("<4sI4s", blob, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavError(f"{source}: missing RIFF/WAVE signature at byte 0")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id, size = struct.unpack_from("<4sI", blob, pos)
        body = pos + 8
        if body + size > len(blob):
            raise WavError(
                f"{source}: chunk {chunk_id!r} at byte {pos} claims {size} bytes, "
                f"only {len(blob) - body} available")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavError(f"{source}: fmt chunk at byte {pos} is {size} bytes, need 16")
            fmt = struct.unpack_from("<HHIIHH", blob, body)
            if fmt[0] == _FMT_EXTENSIBLE:
                if size < 40:
                    raise WavError(f"{source}: truncated WAVE_FORMAT_EXTENSIBLE at byte {body}")
                sub = struct.unpack_from("<H", blob, body + 24)[0]
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if pos < len(blob) and data is None:
        raise WavError(f"{source}: truncated chunk header at byte {pos}")
    if fmt is None:
        raise WavError(f"{source}: no fmt chunk found")
    if data is None:
        raise WavError(f"{source}: no data chunk found")

    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise WavError(f"{source}: {channels} channels unsupported (mono or stereo only)")
    if tag == _FMT_PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise WavError(f"{source}: unsupported codec (format tag {tag}, {bits} bits)")
    if block_align != channels * bits // 8:
        raise WavError(f"{source}: inconsistent block align {block_align}")
    start, size = data
    if size % block_align:
        raise WavError(f"{source}: data chunk at byte {start} is not a whole number of frames")
    raw = np.frombuffer(blob, dtype=dtype, count=size // (bits // 8), offset=start)
    samples = raw.astype(np.float64).reshape(-1, channels).T * scale
    return Waveform(samples, rate)


def write_wav(path: str | os.PathLike, w: Waveform) -> None:
    """Write ``w`` as IEEE float32 WAV."""
    samples = np.asarray(w.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("write_wav: samples must be finite")
    channels = samples.shape[0]
    payload = samples.T.astype("<f4").tobytes()
    block_align = channels * 4
    header = b"RIFF" + struct.pack("<I", 4 + 8 + 16 + 8 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _FMT_FLOAT, channels, w.sample_rate,
                                    w.sample_rate * block_align, block_align, 32)
    header += b"data" + struct.pack("<I", len(payload))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\0")
