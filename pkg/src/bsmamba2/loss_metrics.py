"""Training loss (time L1 + multi-resolution complex STFT L1) and SDR metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dsp
from . import tensor_core as tc

SDR_EPS = 1e-12


@dataclass
class LossConfig:
    lambda_time: float = 10.0
    stft_windows: list[int] = field(default_factory=lambda: [4096, 2048, 1024, 512, 256])
    stft_hop: int = 147

    def __post_init__(self):
        self.stft_windows = [int(w) for w in self.stft_windows]
        if any(b >= a for a, b in zip(self.stft_windows[:-1], self.stft_windows[1:])):
            raise ValueError(f"loss.stft_windows must be strictly descending: {self.stft_windows}")
        if any(w <= self.stft_hop for w in self.stft_windows):
            raise ValueError(f"every loss window must exceed loss.stft_hop={self.stft_hop}")
        if self.lambda_time < 0:
            raise ValueError("loss.lambda_time must be non-negative")


def separation_loss(est, ref, cfg: LossConfig | None = None) -> tc.Tensor:
    """lambda * ||est - ref||_1 + sum over resolutions of the complex-plane L1.

    Inputs are (..., N) tensors; when there are leading batch axes the per-item
    losses are averaged over them.
    """
    cfg = cfg or LossConfig()
    est, ref = tc.as_tensor(est), tc.as_tensor(ref)
    if est.shape != ref.shape:
        raise tc.ShapeError(f"separation_loss: est {est.shape} vs ref {ref.shape}")
    diff = est - ref
    total = cfg.lambda_time * tc.l1(diff)
    for w in cfg.stft_windows:
        # STFT is linear, so STFT(est) - STFT(ref) == STFT(est - ref)
        total = total + tc.l1(dsp.stft_t(diff, w, cfg.stft_hop))
    n_items = int(np.prod(est.shape[:-2])) if est.ndim > 2 else 1
    return total * (1.0 / n_items) if n_items > 1 else total


# ------------------------------------------------------------------ metrics
def _as_array(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, dsp.Waveform) else w, dtype=np.float64)


def sdr(ref, est) -> float:
    """10 log10((sum s^2 + eps) / (sum (s - s_hat)^2 + eps)); channels pooled."""
    s, s_hat = _as_array(ref), _as_array(est)
    if s.shape != s_hat.shape:
        raise ValueError(f"sdr: reference {s.shape} and estimate {s_hat.shape} differ")
    num = float(np.sum(s * s)) + SDR_EPS
    den = float(np.sum((s - s_hat) ** 2)) + SDR_EPS
    return 10.0 * math.log10(num / den)


def median(values: Sequence[float]) -> float:
    """Median with the mean-of-central-pair rule for even counts."""
    v = sorted(values)
    if not v:
        raise ValueError("median of an empty sequence")
    m = len(v) // 2
    return v[m] if len(v) % 2 else 0.5 * (v[m - 1] + v[m])


def chunk_sdrs(ref, est, sample_rate: int) -> list[float]:
    """SDR of each whole 1 s chunk; a trailing partial chunk is dropped."""
    s, s_hat = _as_array(ref), _as_array(est)
    if s.shape != s_hat.shape:
        raise ValueError(f"chunk_sdrs: reference {s.shape} and estimate {s_hat.shape} differ")
    n_chunks = s.shape[-1] // sample_rate
    return [sdr(s[..., i * sample_rate:(i + 1) * sample_rate],
                s_hat[..., i * sample_rate:(i + 1) * sample_rate]) for i in range(n_chunks)]


@dataclass
class EvalReport:
    track_names: list[str] = field(default_factory=list)
    track_sdr: list[float] = field(default_factory=list)
    chunk_sdr: list[list[float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    onset_table: list[dict] = field(default_factory=list)
    segment_seconds: float = 8.0

    @property
    def usdr(self) -> float:
        return math.fsum(self.track_sdr) / len(self.track_sdr) if self.track_sdr else float("nan")

    @property
    def csdr(self) -> float:
        medians = [median(c) for c in self.chunk_sdr if c]
        return median(medians) if medians else float("nan")

    def lines(self) -> list[str]:
        """Machine-readable ``name value_db count`` records, one per line."""
        out = [f"segment_seconds {self.segment_seconds:.6g} 1",
               f"usdr {self.usdr:.17g} {len(self.track_sdr)}",
               f"csdr {self.csdr:.17g} {sum(1 for c in self.chunk_sdr if c)}"]
        for name, s, chunks in zip(self.track_names, self.track_sdr, self.chunk_sdr):
            out.append(f"track.{name}.sdr {s:.17g} 1")
            for i, c in enumerate(chunks):
                out.append(f"track.{name}.chunk.{i} {c:.17g} 1")
        for row in self.onset_table:
            out.append(f"onset.{row['bin']}.sdr {row['sdr']:.17g} {row['count']}")
        for w in self.warnings:
            out.append(f"# warning: {w}")
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rep = cls()
        names: dict[str, int] = {}
        for line in text.splitlines():
            if line.startswith("# warning: "):
                rep.warnings.append(line[len("# warning: "):])
                continue
            if not line or line.startswith("#"):
                continue
            key, value, count = line.split()
            val = float(value)
            if key == "segment_seconds":
                rep.segment_seconds = val
            elif key.startswith("track."):
                # track names may contain dots: split from the right
                if ".chunk." in key:
                    name = key[len("track."):key.rindex(".chunk.")]
                    rep.chunk_sdr[names[name]].append(val)
                else:
                    name = key[len("track."):-len(".sdr")]
                    names[name] = len(rep.track_names)
                    rep.track_names.append(name)
                    rep.track_sdr.append(val)
                    rep.chunk_sdr.append([])
            elif key.startswith("onset."):
                rep.onset_table.append(
                    {"bin": key[len("onset."):-len(".sdr")], "sdr": val, "count": int(count)})
        return rep

    def summary(self) -> str:
        s = f"segment {self.segment_seconds:g} s: uSDR {self.usdr:.3f} dB, cSDR {self.csdr:.3f} dB"
        for row in self.onset_table:
            s += f"\n  onset {row['bin']}: {row['sdr']:.3f} dB over {row['count']} segment(s)"
        return s


def csdr(track_refs, track_ests, sample_rate: int, report: EvalReport | None = None) -> float:
    """Median over tracks of the per-track median 1 s chunk SDR."""
    medians = []
    for i, (r, e) in enumerate(zip(track_refs, track_ests)):
        chunks = chunk_sdrs(r, e, sample_rate)
        if not chunks:
            if report is not None:
                report.warnings.append(f"track {i} shorter than 1 s excluded from cSDR")
            continue
        medians.append(median(chunks))
    return median(medians) if medians else float("nan")


def usdr(track_refs, track_ests) -> float:
    """Mean over tracks of the whole-track SDR."""
    vals = [sdr(r, e) for r, e in zip(track_refs, track_ests)]
    if not vals:
        raise ValueError("usdr needs at least one track")
    return math.fsum(vals) / len(vals)


# ------------------------------------------------------- onset-duration table
DEFAULT_ONSET_BINS = ((1.0, 2.0), (2.0, 4.0), (4.0, 8.0))
ACTIVITY_FRAME_S = 0.05
ACTIVITY_THRESHOLD_DB = -40.0


def vocal_activity(vocal, sample_rate: int, frame_seconds: float = ACTIVITY_FRAME_S,
                   threshold_db: float = ACTIVITY_THRESHOLD_DB) -> list[tuple[int, int]]:
    """Contiguous active segments as (start, stop) sample indices.

    A frame is active when its RMS is within ``threshold_db`` of the stem's peak
    absolute sample value. Channels are pooled.
    """
    v = _as_array(vocal)
    v = v.reshape(-1, v.shape[-1])
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return []
    frame = max(1, int(round(frame_seconds * sample_rate)))
    n_frames = v.shape[-1] // frame
    if n_frames == 0:
        return []
    frames = v[:, :n_frames * frame].reshape(v.shape[0], n_frames, frame)
    rms = np.sqrt(np.mean(frames ** 2, axis=(0, 2)))
    active = rms >= peak * 10.0 ** (threshold_db / 20.0)
    segments = []
    start = None
    for i, a in enumerate(active):
        if a and start is None:
            start = i
        elif not a and start is not None:
            segments.append((start * frame, i * frame))
            start = None
    if start is not None:
        segments.append((start * frame, n_frames * frame))
    return segments


def _bin_label(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}s"


def onset_duration_report(vocal_ref, est, mixture=None, sample_rate: int = 8000,
                          bins=DEFAULT_ONSET_BINS) -> list[dict]:
    """Per duration bin: SDR over the concatenated samples of its vocal segments.

    Segments are detected on the reference vocal stem. A segment falls in bin
    ``[lo, hi)`` by its duration in seconds. Each row carries the raw
    per-segment energies so the bin SDR can be re-aggregated exactly.
    ``mixture`` is accepted for signature symmetry; the metric uses only the
    reference and the estimate.
    """
    s, s_hat = _as_array(vocal_ref), _as_array(est)
    if s.shape != s_hat.shape:
        raise ValueError(f"onset_duration_report: shapes {s.shape} vs {s_hat.shape}")
    segments = vocal_activity(s, sample_rate)
    table = []
    for lo, hi in bins:
        chosen = [(a, b) for a, b in segments if lo <= (b - a) / sample_rate < hi]
        if not chosen:
            continue
        sig = [float(np.sum(s[..., a:b] ** 2)) for a, b in chosen]
        res = [float(np.sum((s[..., a:b] - s_hat[..., a:b]) ** 2)) for a, b in chosen]
        value = 10.0 * math.log10((sum(sig) + SDR_EPS) / (sum(res) + SDR_EPS))
        table.append({"bin": _bin_label(lo, hi), "sdr": value, "count": len(chosen),
                      "segments": chosen, "signal_energy": sig, "residual_energy": res})
    return table


def reaggregate_onset(row: dict) -> float:
    return 10.0 * math.log10((sum(row["signal_energy"]) + SDR_EPS)
                             / (sum(row["residual_energy"]) + SDR_EPS))
