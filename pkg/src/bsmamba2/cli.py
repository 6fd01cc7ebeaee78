"""Command-line driver: train, separate, evaluate, synth-data, selfcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import dsp
from . import loss_metrics as lm
from . import model as M
from . import ssm
from . import tensor_core as tc
from . import trainer as T

log = logging.getLogger("bsmamba2")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_SWEEP = (1.0, 2.0, 4.0, 8.0, 12.0, 16.0)


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config
@dataclass
class DataConfig:
    train_dir: str = ""
    eval_dir: str = ""
    synth_tracks: int = 2  # used when train_dir is empty


@dataclass
class SynthConfig:
    sample_rate: int = 8000
    duration: float = 16.0
    pattern: str = "intermittent"  # or "onset:length:f0;onset:length:f0;..."
    drum_rate: float = 2.0
    bass_f0: float = 55.0
    seed: int = 1

    def spec(self, index: int = 0) -> data_mod.SynthSpec:
        seed = self.seed + index
        if self.pattern == "intermittent":
            notes = data_mod.intermittent_pattern(self.duration, seed)
        elif self.pattern in ("", "none"):
            notes = []
        else:
            notes = []
            for item in self.pattern.split(";"):
                parts = [float(x) for x in item.split(":")]
                if len(parts) not in (2, 3):
                    raise M.ConfigError(f"synth.pattern entry {item!r} must be onset:length[:f0]")
                notes.append(data_mod.VocalNote(*parts))
        try:
            return data_mod.SynthSpec(self.sample_rate, self.duration, notes, self.drum_rate,
                                      self.bass_f0, seed)
        except data_mod.SpecError as exc:
            raise M.ConfigError(f"synth.pattern: {exc}") from None


SECTIONS = {"model": M.ModelConfig, "train": T.TrainConfig, "loss": lm.LossConfig,
            "data": DataConfig, "synth": SynthConfig}


@dataclass
class RunConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    loss: lm.LossConfig = field(default_factory=lm.LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


def _field_types(cls) -> dict[str, object]:
    defaults = cls()
    return {f.name: getattr(defaults, f.name) for f in fields(cls)}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        raise M.ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def flatten_ini(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise M.ConfigError(f"{source}: {exc}") from None
    return {f"{sec}.{k}": v for sec in parser.sections() for k, v in parser[sec].items()}


def build_config(flat: dict[str, str]) -> RunConfig:
    """Validate dotted keys and build every section; unknown keys are errors."""
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in flat.items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS:
            raise M.ConfigError(f"{key}: unknown section {sec!r}")
        types = _field_types(SECTIONS[sec])
        if name not in types:
            raise M.ConfigError(f"{key}: unknown key")
        per_section[sec][name] = _parse_value(key, raw, types[name])
    built = {}
    for sec, cls in SECTIONS.items():
        try:
            built[sec] = cls(**per_section[sec])
        except M.ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise M.ConfigError(f"[{sec}] {exc}") from None
    return RunConfig(**built)


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    flat: dict[str, str] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise M.ConfigError(f"config file {path} not found")
        flat.update(flatten_ini(p.read_text(), source=str(p)))
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise M.ConfigError(f"--set expects section.key=value, got {item!r}")
        flat[key.strip()] = value
    return build_config(flat)


# ---------------------------------------------------------------- commands
def _training_tracks(cfg: RunConfig) -> list[data_mod.TrackStems]:
    if cfg.data.train_dir:
        errors: dict[str, str] = {}
        tracks = data_mod.load_stem_dir(cfg.data.train_dir, errors)
        for name, msg in errors.items():
            print(f"warning: skipped track {name}: {msg}", file=sys.stderr)
    else:
        tracks = [data_mod.synth_stems(cfg.synth.spec(i), f"synth{i:03d}")
                  for i in range(cfg.data.synth_tracks)]
    if not tracks:
        raise M.ConfigError("no training tracks available")
    rate = tracks[0].sample_rate
    if rate != cfg.model.sample_rate:
        raise M.ConfigError(
            f"training data rate {rate} Hz != model.sample_rate {cfg.model.sample_rate} Hz")
    return tracks


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    if args.checkpoint:
        overrides.append(f"train.checkpoint_path={args.checkpoint}")
    cfg = load_run_config(args.config, overrides)
    if not cfg.train.checkpoint_path:
        raise M.ConfigError("train.checkpoint_path is empty (set it or pass --checkpoint)")
    tracks = _training_tracks(cfg)
    params = opt = None
    start = 0
    model_cfg = cfg.model
    if args.resume:
        params, model_cfg, opt, start = T.resume(args.resume, cfg.train)
        if model_cfg.to_dict() != cfg.model.to_dict():
            raise M.ConfigError("resume checkpoint model config differs from the run config")
    if cfg.train.log_path and start == 0:
        Path(cfg.train.log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.train.log_path).write_text("")
    eval_fn = None
    if cfg.train.eval_every:
        def eval_fn(p):
            return T.evaluate(p, model_cfg, tracks, onset=False)
    _, _, tlog = T.train(model_cfg, cfg.train, T.pool_batches(tracks, cfg.train),
                         cfg.loss, params=params, opt=opt, start_step=start, eval_fn=eval_fn)
    if tlog.records:
        print(f"trained steps {tlog.records[0]['step']}..{tlog.records[-1]['step']}: "
              f"loss {tlog.losses[0]:.6g} -> {tlog.losses[-1]:.6g}")
    print(f"checkpoint written to {cfg.train.checkpoint_path}")
    return EXIT_OK


def cmd_separate(args) -> int:
    params, cfg = M.load_checkpoint(args.checkpoint)
    wave = dsp.read_wav(args.input)
    if wave.sample_rate != cfg.sample_rate:
        raise M.ConfigError(
            f"input rate {wave.sample_rate} Hz does not match model rate {cfg.sample_rate} Hz")
    out = M.separate_long(wave, params, cfg, args.segment_seconds)
    dsp.write_wav(args.output, out)
    print(f"wrote {args.output} ({out.num_samples} samples at {out.sample_rate} Hz)")
    return EXIT_OK


def _parse_sweep(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--sweep expects comma-separated seconds, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError(f"--sweep lengths must be positive, got {text!r}")
    return vals


def cmd_evaluate(args) -> int:
    params, cfg = M.load_checkpoint(args.checkpoint)
    errors: dict[str, str] = {}
    try:
        tracks = data_mod.load_stem_dir(args.stems, errors)
    except data_mod.StemLoadError as exc:
        raise M.ConfigError(str(exc)) from None
    for name, msg in errors.items():
        print(f"warning: skipped track {name}: {msg}", file=sys.stderr)
    if not tracks:
        raise M.ConfigError(f"{args.stems}: no loadable tracks")
    bad = [t.name for t in tracks if t.sample_rate != cfg.sample_rate]
    if bad:
        raise M.ConfigError(f"tracks {bad} are not at the model rate {cfg.sample_rate} Hz")
    lengths = _parse_sweep(args.sweep) if args.sweep is not None else [args.segment_seconds]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seconds in lengths:
        rep = T.evaluate(params, cfg, tracks, seconds, onset=not args.no_onset)
        rep.warnings.extend(f"skipped track {n}: {m}" for n, m in errors.items())
        path = out_dir / f"report_{seconds:g}s.txt"
        path.write_text(rep.to_text())
        print(rep.summary())
        print(f"  -> {path}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = load_run_config(args.config, args.set)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    tracks = [data_mod.synth_stems(cfg.synth.spec(i), f"synth{i:03d}") for i in range(args.count)]
    try:
        data_mod.write_stem_dir(args.out, tracks)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(tracks)} track folder(s) under {args.out}")
    return EXIT_OK


# --------------------------------------------------------------- selfcheck
def _check_scan(rng) -> str:
    worst = 0.0
    for _ in range(20):
        T_, H, P, N = (int(v) for v in rng.integers(1, [24, 3, 4, 6], endpoint=True))
        x = rng.standard_normal((T_, H, P))
        delta = rng.uniform(0.01, 1.0, (T_, H))
        B, C = rng.standard_normal((T_, N)), rng.standard_normal((T_, N))
        a = -rng.uniform(0.05, 2.0, H)
        y = ssm.selective_scan(x, delta, B, C, a).data
        worst = max(worst, float(np.max(np.abs(y - ssm.dense_recurrence_oracle(x, delta, B, C, a)))))
    if worst >= 1e-10:
        raise AssertionError(f"max deviation {worst:.3e}")
    return f"max deviation {worst:.2e}"


def _check_stft(rng) -> str:
    x = rng.standard_normal(8000)
    worst = 0.0
    for w, hop in ((512, 110), (256, 64)):
        y = dsp.istft_array(dsp.stft_array(x, w, hop), w, hop, x.size)
        inner = slice(w, -w)
        worst = max(worst, float(np.linalg.norm(y[inner] - x[inner]) / np.linalg.norm(x[inner])))
    if worst >= 1e-10:
        raise AssertionError(f"relative error {worst:.3e}")
    return f"relative error {worst:.2e}"


def _faulty_identity(x: tc.Tensor, scale: float) -> tc.Tensor:
    return tc.record(x.data.copy(), (x,), lambda g: (g * scale,), "fault")


def _check_grad(rng, fault: bool) -> str:
    cfg = M.ModelConfig(d=4, layers=1, num_bands=2, window_size=32, hop=16, heads=1,
                        state_dim=2, mask_hidden_mult=1)
    params = M.init_params(cfg, seed=3)
    x = 0.3 * rng.standard_normal((1, 1, 160))
    ref = 0.5 * x + 0.05 * rng.standard_normal(x.shape)
    loss_cfg = lm.LossConfig(stft_windows=[64, 32], stft_hop=16)

    def f():
        est = M.separate_tensor(x, params, cfg)
        if fault:
            est = _faulty_identity(est, 1.01)
        return lm.separation_loss(est, ref, loss_cfg)

    rep = tc.grad_check(f, params.named(), h=1e-6, tol=1e-4)
    if not rep.passed:
        worst = max(rep.errors, key=rep.errors.get)
        raise AssertionError(f"{worst} relative error {rep.errors[worst]:.3e}")
    return f"max relative error {rep.max_error:.2e}"


def _check_metrics(rng) -> str:
    s = rng.standard_normal((1, 8000))
    half = lm.sdr(s, s / 2)
    if abs(half - 20 * np.log10(2)) > 1e-6:
        raise AssertionError(f"sdr(s, s/2) = {half}")
    if abs(lm.sdr(s, np.zeros_like(s))) > 1e-9:
        raise AssertionError("sdr(s, 0) != 0")
    if lm.median([3.0, 1.0, 2.0, 10.0]) != 2.5:
        raise AssertionError("even-count median")
    zero = lm.separation_loss(s, s, lm.LossConfig(stft_windows=[512, 256], stft_hop=147)).item()
    if zero != 0.0:
        raise AssertionError(f"loss of identical signals = {zero}")
    return "closed forms hold"


def _check_discretize(rng) -> str:
    a_bar, b_bar = ssm.discretize(np.array(-1.0), np.array(np.log(2.0)), np.array(1.0))
    if abs(a_bar - 0.5) > 1e-15 or abs(b_bar - 0.5) > 1e-15:
        raise AssertionError(f"a_bar={a_bar}, b_bar={b_bar}")
    return "closed form holds"


SELFCHECKS = (("scan-oracle", _check_scan), ("discretization", _check_discretize),
              ("stft-roundtrip", _check_stft), ("grad-check", None),
              ("metrics", _check_metrics))


def cmd_selfcheck(args) -> int:
    failed = []
    for name, fn in SELFCHECKS:
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        try:
            detail = (_check_grad(rng, args.inject_fault == "grad-check") if fn is None
                      else fn(rng))
            status = "PASS"
        except Exception as exc:  # report every failing check, then exit 1
            detail, status = str(exc), "FAIL"
            failed.append(name)
        print(f"{status} {name}: {detail} ({time.perf_counter() - t0:.1f} s)")
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}")
        return EXIT_RUNTIME
    print("selfcheck passed")
    return EXIT_OK


# -------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsmamba2", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="overrides train.checkpoint_path")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="extract the vocal from a WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--segment-seconds", type=float, default=8.0)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a stem directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stems", required=True)
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--segment-seconds", type=float, default=8.0)
    p.add_argument("--sweep", nargs="?", const=",".join(f"{s:g}" for s in DEFAULT_SWEEP),
                   help="comma-separated segment lengths (default 1,2,4,8,12,16)")
    p.add_argument("--no-onset", action="store_true", help="skip the onset-duration table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth-data", help="write synthetic stem folders")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("selfcheck", help="run the fast invariant suite")
    p.add_argument("--inject-fault", choices=["grad-check"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (M.ConfigError, UsageError, data_mod.SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (M.CheckpointError, dsp.WavError, data_mod.StemLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except T.TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
