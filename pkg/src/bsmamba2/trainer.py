"""Adam training loop, checkpoint/resume, and evaluation over stem sets."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as data_mod
from . import loss_metrics as lm
from . import model as M
from . import tensor_core as tc

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    steps: int = 500
    batch_size: int = 1
    grad_accum_steps: int = 1
    clip_seconds: float = 8.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0  # global-norm clip; 0 disables
    gain_db: float = 3.0
    polarity: bool = True
    seed: int = 0
    checkpoint_path: str = ""
    log_path: str = ""
    checkpoint_every: int = 0
    eval_every: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_size", "grad_accum_steps"):
            if int(getattr(self, name)) < 1:
                raise M.ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise M.ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.clip_seconds <= 0:
            raise M.ConfigError("train.clip_seconds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise M.ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: dict[str, tc.Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"adam.m.{k}"].copy()
            self.v[k] = tensors[f"adam.v.{k}"].copy()
        self.t = t


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def append(self, rec: dict, path: str = "") -> None:
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("train log steps must increase")
        self.records.append(rec)
        if path:
            with open(path, "a") as fh:
                fh.write(f"step={rec['step']} loss={rec['loss']!r} lr={rec['lr']!r} "
                         f"wall_ms={rec['wall_ms']:.1f}\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    @classmethod
    def read(cls, path: str) -> "TrainLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            fields_ = dict(item.split("=", 1) for item in line.split())
            if "usdr" in fields_:
                out.evals.append({k: float(v) for k, v in fields_.items()})
                continue
            out.records.append({"step": int(fields_["step"]), "loss": float(fields_["loss"]),
                                "lr": float(fields_["lr"]), "wall_ms": float(fields_["wall_ms"])})
        return out


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Data draws for optimizer step ``step`` (1-based); resume-safe by construction."""
    return np.random.default_rng([seed, step])


BatchFn = Callable[[int], Sequence[tuple[np.ndarray, np.ndarray]]]


def pool_batches(pool: list[data_mod.TrackStems], cfg: TrainConfig) -> BatchFn:
    """Micro-batches for each step drawn from ``pool`` with the random-mix augmentation."""
    def batches(step: int):
        rng = step_rng(cfg.seed, step)
        mix, tgt = data_mod.make_batch(pool, cfg.batch_size * cfg.grad_accum_steps,
                                       cfg.clip_seconds, rng, gain_db=cfg.gain_db,
                                       polarity=cfg.polarity)
        b = cfg.batch_size
        return [(mix[i * b:(i + 1) * b], tgt[i * b:(i + 1) * b])
                for i in range(cfg.grad_accum_steps)]
    return batches


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train_step(params: M.ModelParams, model_cfg: M.ModelConfig, opt: Adam,
               micro_batches, loss_cfg: lm.LossConfig, grad_clip: float) -> float:
    """Average gradients over micro-batches, clip, and apply one Adam update."""
    named = params.named()
    for p in named.values():
        p.zero_grad()
    total = 0.0
    n = len(micro_batches)
    for mix, tgt in micro_batches:
        est = M.separate_tensor(mix, params, model_cfg)
        loss = lm.separation_loss(est, tgt, loss_cfg)
        (loss * (1.0 / n)).backward()
        total += loss.item() / n
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
             for k, p in named.items()}
    if not math.isfinite(total):
        return total
    _clip(grads, grad_clip)
    opt.step(grads)
    return total


def train(model_cfg: M.ModelConfig, train_cfg: TrainConfig, batches: BatchFn,
          loss_cfg: lm.LossConfig | None = None, params: M.ModelParams | None = None,
          opt: Adam | None = None, start_step: int = 0,
          on_step: Callable[[int, float], None] | None = None,
          eval_fn: Callable[[M.ModelParams], lm.EvalReport] | None = None,
          ) -> tuple[M.ModelParams, Adam, TrainLog]:
    """Run optimizer steps ``start_step + 1 .. train_cfg.steps``."""
    loss_cfg = loss_cfg or lm.LossConfig()
    params = params or M.init_params(model_cfg)
    opt = opt or Adam(params.named(), train_cfg.learning_rate, train_cfg.beta1,
                      train_cfg.beta2, train_cfg.adam_eps)
    for path in (train_cfg.checkpoint_path, train_cfg.log_path):
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    for step in range(start_step + 1, train_cfg.steps + 1):
        t0 = time.perf_counter()
        where = f"step {step} (batch seed [{train_cfg.seed}, {step}])"
        try:
            loss = train_step(params, model_cfg, opt, batches(step), loss_cfg,
                              train_cfg.grad_clip)
        except FloatingPointError as exc:
            raise TrainingAborted(f"non-finite values at {where}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at {where}")
        wall = (time.perf_counter() - t0) * 1e3
        tlog.append({"step": step, "loss": loss, "lr": opt.lr, "wall_ms": wall},
                    train_cfg.log_path)
        if on_step:
            on_step(step, loss)
        if train_cfg.checkpoint_path and train_cfg.checkpoint_every and \
                step % train_cfg.checkpoint_every == 0:
            save_training_checkpoint(train_cfg.checkpoint_path, params, model_cfg, opt, step,
                                     train_cfg)
        if eval_fn and train_cfg.eval_every and step % train_cfg.eval_every == 0:
            rep = eval_fn(params)
            snap = {"step": step, "usdr": rep.usdr, "csdr": rep.csdr}
            tlog.evals.append(snap)
            if train_cfg.log_path:
                with open(train_cfg.log_path, "a") as fh:
                    fh.write(f"step={step} usdr={rep.usdr!r} csdr={rep.csdr!r}\n")
    if train_cfg.checkpoint_path:
        save_training_checkpoint(train_cfg.checkpoint_path, params, model_cfg, opt,
                                 train_cfg.steps, train_cfg)
    return params, opt, tlog


def save_training_checkpoint(path, params, model_cfg, opt: Adam, step: int,
                             train_cfg: TrainConfig) -> None:
    meta = {"step": str(step), "adam_t": str(opt.t), "seed": str(train_cfg.seed)}
    M.save_checkpoint(params, model_cfg, path, extra=opt.state_arrays(), meta=meta)


def resume(path, train_cfg: TrainConfig) -> tuple[M.ModelParams, M.ModelConfig, Adam, int]:
    """Restore params, optimizer moments and the step counter from a checkpoint."""
    cfg, meta, tensors = M.read_checkpoint(path)
    params = M.init_params(cfg)
    M.load_into(params, tensors)
    opt = Adam(params.named(), train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2,
               train_cfg.adam_eps)
    if "adam_t" in meta:
        opt.load_state(tensors, int(meta["adam_t"]))
    return params, cfg, opt, int(meta.get("step", 0))


# ------------------------------------------------------------------ evaluation
def evaluate(params: M.ModelParams, cfg: M.ModelConfig, tracks: list[data_mod.TrackStems],
             segment_seconds: float = 8.0, onset: bool = True) -> lm.EvalReport:
    """Separate each track segment-wise and score it against its vocal stem."""
    rep = lm.EvalReport(segment_seconds=segment_seconds)
    all_refs, all_ests = [], []
    for tr in tracks:
        est = M.separate_long(tr.waveform(), params, cfg, segment_seconds).samples
        rep.track_names.append(tr.name)
        rep.track_sdr.append(lm.sdr(tr.vocals, est))
        chunks = lm.chunk_sdrs(tr.vocals, est, tr.sample_rate)
        if not chunks:
            rep.warnings.append(f"track {tr.name} shorter than 1 s excluded from cSDR")
        rep.chunk_sdr.append(chunks)
        all_refs.append(tr.vocals)
        all_ests.append(est)
    if onset and tracks:
        # pool segments across tracks: concatenate with silent gaps kept separate
        gap = np.zeros((tracks[0].vocals.shape[0], cfg.sample_rate))
        ref = np.concatenate([x for r in all_refs for x in (r, gap)], axis=-1)
        est = np.concatenate([x for e in all_ests for x in (e, gap)], axis=-1)
        rep.onset_table = [
            {k: row[k] for k in ("bin", "sdr", "count", "signal_energy", "residual_energy")}
            for row in lm.onset_duration_report(ref, est, None, cfg.sample_rate)]
        if not rep.onset_table:
            rep.warnings.append("no vocal segment fell in any onset-duration bin")
    return rep


def evaluate_sweep(params, cfg, tracks, lengths=(1, 2, 4, 8, 12, 16), onset: bool = True):
    return [evaluate(params, cfg, tracks, float(s), onset) for s in lengths]


def baseline_report(tracks: list[data_mod.TrackStems]) -> lm.EvalReport:
    """Scores for the trivial estimate ``vocals_hat = mixture``."""
    rep = lm.EvalReport(segment_seconds=0.0)
    for tr in tracks:
        rep.track_names.append(tr.name)
        rep.track_sdr.append(lm.sdr(tr.vocals, tr.mixture))
        rep.chunk_sdr.append(lm.chunk_sdrs(tr.vocals, tr.mixture, tr.sample_rate))
    return rep


def config_dict(cfg) -> dict:
    return asdict(cfg)
