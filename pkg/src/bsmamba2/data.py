"""Synthetic stems, stem-directory loading, and random-mix training clips."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp

log = logging.getLogger(__name__)

SOURCES = ("vocals", "drums", "bass", "other")
HEADROOM_PEAK = 0.9
RAMP_SECONDS = 0.010
MIXTURE_TOLERANCE = 1e-3


class SpecError(ValueError):
    pass


class StemLoadError(ValueError):
    pass


@dataclass
class TrackStems:
    name: str
    vocals: np.ndarray
    drums: np.ndarray
    bass: np.ndarray
    other: np.ndarray
    sample_rate: int
    mixture: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for s in SOURCES:
            setattr(self, s, np.atleast_2d(np.asarray(getattr(self, s), dtype=np.float64)))
        shapes = {s: getattr(self, s).shape for s in SOURCES}
        if len(set(shapes.values())) != 1:
            raise StemLoadError(f"track {self.name}: stem length mismatch {shapes}")
        if self.mixture is None:
            self.mixture = self.vocals + self.drums + self.bass + self.other

    @property
    def num_samples(self) -> int:
        return self.vocals.shape[-1]

    def stem(self, source: str) -> np.ndarray:
        return getattr(self, source)

    def waveform(self, source: str = "mixture") -> dsp.Waveform:
        return dsp.Waveform(self.mixture if source == "mixture" else self.stem(source),
                            self.sample_rate)


# ----------------------------------------------------------------- synthesis
@dataclass
class VocalNote:
    onset: float
    length: float
    f0: float = 330.0
    vibrato_depth: float = 0.02
    vibrato_rate: float = 5.5


@dataclass
class SynthSpec:
    sample_rate: int = 8000
    duration: float = 16.0
    vocal_pattern: list[VocalNote] = field(default_factory=list)
    drum_rate: float = 2.0
    bass_f0: float = 55.0
    seed: int = 0

    def __post_init__(self):
        self.vocal_pattern = [n if isinstance(n, VocalNote) else VocalNote(*n)
                              for n in self.vocal_pattern]
        self.validate()

    def validate(self) -> None:
        if self.sample_rate <= 0 or self.duration <= 0:
            raise SpecError("synth sample_rate and duration must be positive")
        notes = sorted(self.vocal_pattern, key=lambda n: n.onset)
        for n in notes:
            if n.onset < 0 or n.length <= 0 or n.onset + n.length > self.duration:
                raise SpecError(
                    f"vocal note at {n.onset} s (length {n.length} s) lies outside "
                    f"[0, {self.duration}] s")
        for a, b in zip(notes[:-1], notes[1:]):
            if b.onset < a.onset + a.length:
                raise SpecError(f"vocal notes at {a.onset} s and {b.onset} s overlap")


def _gate(n: int, start: int, stop: int, ramp: int) -> np.ndarray:
    g = np.zeros(n)
    g[start:stop] = 1.0
    r = min(ramp, (stop - start) // 2)
    if r > 0:
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        g[start:start + r] = up
        g[stop - r:stop] = up[::-1]
    return g


def _vocals(spec: SynthSpec, n: int) -> np.ndarray:
    sr = spec.sample_rate
    t = np.arange(n) / sr
    out = np.zeros(n)
    ramp = int(round(RAMP_SECONDS * sr))
    for note in spec.vocal_pattern:
        start = int(round(note.onset * sr))
        stop = min(n, int(round((note.onset + note.length) * sr)))
        inst = note.f0 * (1.0 + note.vibrato_depth * np.sin(2 * np.pi * note.vibrato_rate * t))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        tone = sum(np.sin(k * phase) / k for k in range(1, 5) if k * note.f0 < sr / 2)
        out += tone * _gate(n, start, stop, ramp)
    return out


def _drums(spec: SynthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    out = np.zeros(n)
    if spec.drum_rate <= 0:
        return out
    period = int(round(sr / spec.drum_rate))
    burst = min(period, int(0.25 * sr))
    env = np.exp(-np.arange(burst) / (0.03 * sr))
    for start in range(0, n, period):
        m = min(burst, n - start)
        out[start:start + m] += rng.standard_normal(m) * env[:m]
    return 0.6 * out


def _bass(spec: SynthSpec, n: int) -> np.ndarray:
    t = np.arange(n) / spec.sample_rate
    return 0.5 * np.sin(2 * np.pi * spec.bass_f0 * t)


def _other(spec: SynthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    # noise bed shaped to a band above the vocal partials
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / spec.sample_rate)
    lo, hi = 0.3 * spec.sample_rate, 0.45 * spec.sample_rate
    shape = np.exp(-0.5 * ((freqs - 0.5 * (lo + hi)) / (0.25 * (hi - lo))) ** 2)
    bed = np.fft.irfft(spectrum * shape, n=n)
    return 0.15 * bed / max(np.std(bed), 1e-12)


def synth_stems(spec: SynthSpec, name: str = "synth") -> TrackStems:
    """Deterministic four-stem track; every stem and the mixture peak at most 0.9."""
    spec.validate()
    n = int(round(spec.duration * spec.sample_rate))
    rng = np.random.default_rng(spec.seed)
    stems = {"vocals": _vocals(spec, n), "drums": _drums(spec, n, rng),
             "bass": _bass(spec, n), "other": _other(spec, n, rng)}
    mix = sum(stems.values())
    peak = max([np.max(np.abs(mix))] + [np.max(np.abs(s)) for s in stems.values()])
    scale = HEADROOM_PEAK / peak if peak > 0 else 1.0
    stems = {k: v * scale for k, v in stems.items()}
    return TrackStems(name=name, sample_rate=spec.sample_rate, **stems)


def intermittent_pattern(duration: float, seed: int = 0) -> list[VocalNote]:
    """Vocal notes covering the 1-2 s, 2-4 s and 4-8 s duration bins, separated by rests."""
    rng = np.random.default_rng(seed)
    lengths = [1.5, 3.0, 5.0, 1.2, 2.5]
    notes, t = [], 0.5
    for length in lengths:
        if t + length > duration - 0.25:
            break
        f0 = float(rng.uniform(220.0, 440.0))
        notes.append(VocalNote(round(t, 3), length, f0))
        t += length + float(rng.uniform(0.6, 1.2))
    return notes


# ---------------------------------------------------------------- stem dirs
def load_stem_dir(path: str | os.PathLike,
                  errors: dict[str, str] | None = None) -> list[TrackStems]:
    """Load ``<root>/<track>/{vocals,drums,bass,other}.wav``.

    A track that fails validation is skipped; its message lands in ``errors``
    (keyed by track name) and in the log. Other tracks still load.
    """
    root = Path(path)
    if not root.is_dir():
        raise StemLoadError(f"{root}: not a directory")
    tracks = []
    for track_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            tracks.append(_load_track(track_dir))
        except (StemLoadError, dsp.WavError, OSError) as exc:
            msg = str(exc)
            log.warning("skipping track %s: %s", track_dir.name, msg)
            if errors is not None:
                errors[track_dir.name] = msg
    return tracks


def _load_track(track_dir: Path) -> TrackStems:
    name = track_dir.name
    waves = {}
    for s in SOURCES:
        f = track_dir / f"{s}.wav"
        if not f.exists():
            raise StemLoadError(f"track {name}: missing {s}.wav")
        waves[s] = dsp.read_wav(f)
    rates = {s: w.sample_rate for s, w in waves.items()}
    if len(set(rates.values())) != 1:
        raise StemLoadError(f"track {name}: sample rate mismatch {rates}")
    lengths = {s: w.samples.shape for s, w in waves.items()}
    if len(set(lengths.values())) != 1:
        raise StemLoadError(f"track {name}: stem length mismatch {lengths}")
    track = TrackStems(name=name, sample_rate=next(iter(rates.values())),
                       **{s: w.samples for s, w in waves.items()})
    mix_file = track_dir / "mixture.wav"
    if mix_file.exists():
        stored = dsp.read_wav(mix_file).samples
        if stored.shape != track.mixture.shape:
            track.warnings.append("mixture.wav shape differs from the stems")
        elif np.max(np.abs(stored - track.mixture)) > MIXTURE_TOLERANCE:
            track.warnings.append(
                f"mixture.wav deviates from the stem sum by more than {MIXTURE_TOLERANCE}")
    return track


def write_stem_dir(root: str | os.PathLike, tracks: list[TrackStems]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for tr in tracks:
        d = root / tr.name
        d.mkdir(exist_ok=True)
        for s in SOURCES:
            dsp.write_wav(d / f"{s}.wav", dsp.Waveform(tr.stem(s), tr.sample_rate))


# -------------------------------------------------------------- random mix
def random_mix(pool: list[TrackStems], clip_seconds: float, rng: np.random.Generator,
               gain_db: float = 3.0, polarity: bool = True,
               independent: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Draw one clip per source from random tracks/offsets, augment, and sum.

    With ``independent=False`` all four sources share one track and offset, so
    zero gain range and no polarity flips reproduce an original mixture clip.
    Returns ``(mixture, vocal_target)``, both (channels, samples).
    """
    if not pool:
        raise ValueError("random_mix: empty stem pool")
    sr = pool[0].sample_rate
    n = int(round(clip_seconds * sr))
    if any(t.num_samples < n for t in pool):
        short = min(pool, key=lambda t: t.num_samples)
        raise ValueError(
            f"random_mix: clip of {n} samples longer than track {short.name} "
            f"({short.num_samples} samples)")
    parts = {}
    track = offset = None
    for s in SOURCES:
        if independent or track is None:
            track = pool[int(rng.integers(len(pool)))]
            offset = int(rng.integers(track.num_samples - n + 1))
        gain = 10.0 ** (rng.uniform(-gain_db, gain_db) / 20.0) if gain_db > 0 else 1.0
        sign = (-1.0 if rng.random() < 0.5 else 1.0) if polarity else 1.0
        parts[s] = track.stem(s)[:, offset:offset + n] * (gain * sign)
    mixture = parts["vocals"] + parts["drums"] + parts["bass"] + parts["other"]
    return mixture, parts["vocals"]


def make_batch(pool: list[TrackStems], batch_size: int, clip_seconds: float,
               rng: np.random.Generator, **aug) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``batch_size`` random mixes into (batch, channels, samples) arrays."""
    pairs = [random_mix(pool, clip_seconds, rng, **aug) for _ in range(batch_size)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
