import math

import numpy as np
import pytest

from bsmamba2 import data, dsp, loss_metrics as lm, model as M, trainer as T

LOSS = lm.LossConfig(stft_windows=[32, 16], stft_hop=8)


def tiny_model():
    return M.ModelConfig(d=4, layers=1, num_bands=3, window_size=32, hop=8, sample_rate=1000,
                         heads=1, state_dim=2, mask_hidden_mult=1)


@pytest.fixture(scope="module")
def pool():
    notes = [data.VocalNote(0.3, 1.2, 200.0), data.VocalNote(2.0, 2.2, 150.0)]
    return [data.synth_stems(data.SynthSpec(sample_rate=1000, duration=5.0, vocal_pattern=notes,
                                            seed=s), f"p{s}") for s in (1, 2)]


def cfg(**kw):
    base = dict(steps=3, clip_seconds=0.3, learning_rate=1e-3, seed=5)
    base.update(kw)
    return T.TrainConfig(**base)


def snapshot(params):
    return {k: v.data.copy() for k, v in params.named().items()}


def test_config_validation():
    with pytest.raises(M.ConfigError):
        T.TrainConfig(steps=0)
    with pytest.raises(M.ConfigError):
        T.TrainConfig(learning_rate=-1.0)
    with pytest.raises(M.ConfigError, match="bogus"):
        T.TrainConfig.from_dict({"bogus": 1})


def test_zero_learning_rate_keeps_parameters(pool):
    tc_ = cfg(learning_rate=0.0)
    start = snapshot(M.init_params(tiny_model()))
    params, _, tlog = T.train(tiny_model(), tc_, T.pool_batches(pool, tc_), LOSS)
    assert all(np.array_equal(start[k], v.data) for k, v in params.named().items())
    assert len(tlog.records) == 3 and all(math.isfinite(l) for l in tlog.losses)


def test_zero_gradient_keeps_parameters():
    p = M.init_params(tiny_model())
    opt = T.Adam(p.named(), 1e-3)
    before = snapshot(p)
    opt.step({k: np.zeros_like(v.data) for k, v in p.named().items()})
    assert all(np.array_equal(before[k], v.data) for k, v in p.named().items())


def test_adam_first_step_moves_by_lr():
    p = M.init_params(tiny_model())
    opt = T.Adam(p.named(), 0.01)
    before = snapshot(p)
    g = {k: np.full(v.shape, -3.0) for k, v in p.named().items()}
    opt.step(g)
    for k, v in p.named().items():
        assert np.allclose(v.data - before[k], 0.01, rtol=1e-6)


def test_gradient_clip():
    g = {"a": np.array([3.0, 4.0])}
    assert T._clip(g, 1.0) == 5.0
    assert np.allclose(g["a"], [0.6, 0.8])
    g = {"a": np.array([3.0, 4.0])}
    T._clip(g, 0.0)
    assert np.array_equal(g["a"], [3.0, 4.0])


def test_accumulation_matches_large_batch(pool):
    accum = cfg(batch_size=1, grad_accum_steps=4, steps=2)
    big = cfg(batch_size=4, grad_accum_steps=1, steps=2)
    micro = T.pool_batches(pool, accum)
    whole = T.pool_batches(pool, big)
    # same clips in the same order, only the split differs
    assert np.array_equal(np.concatenate([m for m, _ in micro(1)]), whole(1)[0][0])
    pa, _, la = T.train(tiny_model(), accum, micro, LOSS)
    pb, _, lb = T.train(tiny_model(), big, whole, LOSS)
    for a, b in zip(la.losses, lb.losses):
        assert abs(a - b) <= 1e-12 * abs(b)
    for k, v in pa.named().items():
        assert np.max(np.abs(v.data - pb.named()[k].data)) < 1e-12


def test_resume_is_bit_identical(pool, tmp_path):
    full = cfg(steps=4, checkpoint_path=str(tmp_path / "full.ckpt"))
    T.train(tiny_model(), full, T.pool_batches(pool, full), LOSS)

    first = cfg(steps=2, checkpoint_path=str(tmp_path / "part.ckpt"))
    T.train(tiny_model(), first, T.pool_batches(pool, first), LOSS)
    rest = cfg(steps=4, checkpoint_path=str(tmp_path / "part.ckpt"))
    params, mcfg, opt, step = T.resume(rest.checkpoint_path, rest)
    assert step == 2 and opt.t == 2
    T.train(mcfg, rest, T.pool_batches(pool, rest), LOSS, params=params, opt=opt, start_step=step)
    assert (tmp_path / "part.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()


def test_non_finite_loss_aborts(pool):
    tc_ = cfg()

    def poisoned(step):
        mix, tgt = T.pool_batches(pool, tc_)(step)[0]
        if step == 2:
            mix = mix.copy()
            mix[..., 10] = np.inf
        return [(mix, tgt)]

    with pytest.raises(T.TrainingAborted, match=r"step 2.*\[5, 2\]"):
        with np.errstate(all="ignore"):
            T.train(tiny_model(), tc_, poisoned, LOSS)


def test_log_file_replays(pool, tmp_path):
    log_path = tmp_path / "logs" / "train.log"
    tc_ = cfg(steps=4, log_path=str(log_path), eval_every=2)
    evals = lambda p: T.evaluate(p, tiny_model(), pool[:1], 2.0, onset=False)
    _, _, tlog = T.train(tiny_model(), tc_, T.pool_batches(pool, tc_), LOSS, eval_fn=evals)
    back = T.TrainLog.read(log_path)
    assert back.losses == tlog.losses and [r["step"] for r in back.records] == [1, 2, 3, 4]
    assert [e["step"] for e in back.evals] == [2, 4]
    assert back.evals[0]["usdr"] == tlog.evals[0]["usdr"]
    with pytest.raises(ValueError):
        tlog.append({"step": 4, "loss": 0.0, "lr": 0.0, "wall_ms": 0.0})


def test_identity_mask_scores_the_mixture(pool):
    p = M.init_params(tiny_model())
    M.force_identity_mask(p)
    rep = T.evaluate(p, tiny_model(), pool, 2.0)
    base = T.baseline_report(pool)
    for a, b in zip(rep.track_sdr, base.track_sdr):
        assert abs(a - b) < 1e-6
    assert abs(rep.csdr - base.csdr) < 1e-6
    assert abs(rep.usdr - np.mean([lm.sdr(t.vocals, t.mixture) for t in pool])) < 1e-6


def test_sweep_and_determinism(pool):
    p = M.init_params(tiny_model())
    reps = T.evaluate_sweep(p, tiny_model(), pool, lengths=(1, 2, 5))
    assert [r.segment_seconds for r in reps] == [1.0, 2.0, 5.0]
    again = T.evaluate(p, tiny_model(), pool, 2.0)
    assert again.to_text() == reps[1].to_text()
    assert reps[1].onset_table and all(r["count"] >= 1 for r in reps[1].onset_table)


def test_short_track_and_empty_onset_warnings():
    short = data.synth_stems(data.SynthSpec(sample_rate=1000, duration=0.5), "short")
    rep = T.evaluate(M.init_params(tiny_model()), tiny_model(), [short], 1.0)
    assert any("shorter than 1 s" in w for w in rep.warnings)
    assert any("onset" in w for w in rep.warnings)
