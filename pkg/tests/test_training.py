import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramid_asr.ctc import ctc_loss
from pyramid_asr.errors import CheckpointError
from pyramid_asr.frontend import subsampled_length
from pyramid_asr.model import ModelConfig, build
from pyramid_asr.tensor import Tensor
from pyramid_asr.training import (Adam, Schedule, Trainer, Utterance, checkpoint_bytes, clip_grad_norm,
                                  load_checkpoint, lr_at, model_from_checkpoint, parse_checkpoint,
                                  save_checkpoint, synth_corpus, token_frequencies, train)

SMALL = dict(d_model=16, n_layers=2, n_branches=2, dilation_schedule=[[1, 2]], heads=2, conv_blocks=2,
             expansion_factors=[2, 2], vocab_size=6, se_reduction=4)


def small_model(seed=0):
    return build(ModelConfig(**SMALL), seed=seed, dtype=np.float32)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(0, 6, 6, 3)


def trainer(corpus, seed=0, total=50):
    return Trainer(small_model(seed), corpus, Schedule(16, total), batch_size=2, seed=seed)


# -- Adam --------------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([("p", p)])
    for _ in range(5):
        p.grad = np.zeros(3)
        opt.step(1e-2)
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])
    assert opt.step_count == 5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=6),
       st.floats(1e-5, 1e-1))
def test_adam_first_step_is_signed_lr(grads, lr):
    g = np.array(grads)
    p = Tensor(np.zeros_like(g), requires_grad=True)
    p.grad = g
    Adam([("p", p)]).step(lr)
    # m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    assert np.allclose(p.data, -lr * g / (np.abs(g) + 1e-6), rtol=1e-12, atol=0)
    assert np.allclose(p.data, -lr * np.sign(g), rtol=1e-3)


def test_adam_skips_non_finite():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.array([np.nan, 1.0])
    assert opt.step(0.1) is False
    assert opt.skipped == 1 and opt.step_count == 0
    assert np.array_equal(p.data, [1.0, 1.0])


def test_clip_grad_norm():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert np.allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    a.grad = np.array([0.1, 0.0])
    clip_grad_norm([a], 1.0)
    assert np.array_equal(a.grad, [0.1, 0.0])


# -- schedule ----------------------------------------------------------------------

def test_schedule_defaults_and_errors():
    s = Schedule(256, 1000)
    assert s.warmup_steps == 100
    with pytest.raises(ValueError):
        lr_at(0, s)
    with pytest.raises(ValueError):
        Schedule(256, 1000, formula="cosine")


@pytest.mark.parametrize("warmup", [1, 10, 25000])
def test_crossover_and_decay_ratio(warmup):
    s = Schedule(256, 10 * warmup, warmup_steps=warmup)
    assert warmup ** -0.5 == pytest.approx(warmup * warmup ** -1.5, rel=1e-15)
    ratio = lr_at(2 * warmup, s) / lr_at(warmup, s)
    assert abs(ratio - 2 ** -0.5) <= 1e-12


def test_unique_maximum_at_warmup():
    s = Schedule(256, 4000)
    lrs = [lr_at(k, s) for k in range(1, 4001)]
    assert int(np.argmax(lrs)) + 1 == s.warmup_steps
    assert lrs.count(max(lrs)) == 1
    assert all(a < b for a, b in zip(lrs[:399], lrs[1:400]))
    assert all(a > b for a, b in zip(lrs[399:], lrs[400:]))


def test_literal_formula_verbatim():
    s = Schedule(256, 1000, warmup_steps=100, formula="literal")
    for step in (1, 7, 100, 5000):
        assert lr_at(step, s) == math.sqrt(256) * min(math.sqrt(step), 100 ** -1.5)


def test_standard_formula_value():
    s = Schedule(256, 1000, warmup_steps=100, scale=1.0)
    assert lr_at(50, s) == 256 ** -0.5 * min(50 ** -0.5, 50 * 100 ** -1.5)


# -- synthetic corpus ------------------------------------------------------------

def test_synth_deterministic():
    a, b = synth_corpus(3, 4, 7, 5), synth_corpus(3, 4, 7, 5)
    assert all(x.labels == y.labels and x.waveform.samples.tobytes() == y.waveform.samples.tobytes()
               for x, y in zip(a, b))
    c = synth_corpus(4, 4, 7, 5)
    assert any(x.waveform.samples.tobytes() != y.waveform.samples.tobytes() for x, y in zip(a, c))


def test_synth_durations_and_frames():
    for u in synth_corpus(1, 8, 7, 6):
        L = len(u.labels)
        assert len(u.waveform.samples) == 3200 * L
        T = (3200 * L - 400) // 160 + 1
        assert u.feats().shape == (T, 80) and T == 20 * L - 2
        assert subsampled_length(T) == 5 * L


@pytest.mark.parametrize("V", [3, 12, 100, 1305])
def test_token_frequencies_injective(V):
    freqs = token_frequencies(V)
    assert sorted(freqs) == list(range(1, V))
    assert len(set(freqs.values())) == V - 1


def test_synth_snr():
    u = synth_corpus(0, 1, 5, 1)[0]
    assert np.abs(u.waveform.samples).max() <= 1.0
    with pytest.raises(ValueError):
        synth_corpus(0, 1, 2, 1)


# -- training --------------------------------------------------------------------

def test_initial_loss_near_uniform_bound(corpus):
    tr = trainer(corpus)
    row = tr.train_step()
    batch = tr.batch_for(0)
    # oracle: CTC loss of the same labels under uniform frame posteriors
    bound = np.mean([ctc_loss(np.full((int(subsampled_length(u.feats().shape[0])), 6), -math.log(6)),
                              u.labels).item() for u in batch])
    assert 0.5 * bound < row["loss"] < 2.0 * bound


def test_identical_seeds_identical_curves(corpus):
    a, b = trainer(corpus), trainer(corpus)
    a.run(steps=6)
    b.run(steps=6)
    assert a.history.losses == b.history.losses
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_resume_equals_uninterrupted(corpus, tmp_path):
    full = trainer(corpus)
    full.run(steps=8)
    part = trainer(corpus)
    part.run(steps=3)
    save_checkpoint(tmp_path / "ck.pyrc", part.checkpoint())
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "ck.pyrc"), corpus)
    resumed.run(steps=5)
    assert full.history.losses[3:] == resumed.history.losses
    sa, sb = full.model.state_dict(), resumed.model.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_infeasible_utterances_are_skipped():
    good = synth_corpus(0, 3, 6, 2)
    bad = Utterance([1, 2, 3, 4, 5, 1, 2], features=np.zeros((12, 80)), name="short")
    tr = Trainer(small_model(), good + [bad], Schedule(16, 10), batch_size=2)
    assert tr.skipped_utts == 1 and len(tr.corpus) == 3
    with pytest.raises(ValueError):
        Trainer(small_model(), [bad], Schedule(16, 10))


def test_train_writes_metrics(corpus, tmp_path):
    history = train(small_model(), corpus, Schedule(16, 6), batch_size=3, epochs=2, log_csv=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss,cer"
    assert len(lines) == 1 + 4 == 1 + len(history.rows)
    assert history.rows[1]["cer"] is not None and history.rows[0]["cer"] is None


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_byte_identical(corpus, tmp_path):
    tr = trainer(corpus)
    tr.run(steps=2)
    raw = checkpoint_bytes(tr.checkpoint())
    assert raw[:4] == b"PYRC" and struct.unpack("<I", raw[4:8]) == (1,)
    assert checkpoint_bytes(parse_checkpoint(raw)) == raw
    save_checkpoint(tmp_path / "a.pyrc", parse_checkpoint(raw))
    assert (tmp_path / "a.pyrc").read_bytes() == raw


def test_checkpoint_restores_model(corpus):
    tr = trainer(corpus)
    tr.run(steps=2)
    model = model_from_checkpoint(parse_checkpoint(checkpoint_bytes(tr.checkpoint())))
    x = corpus[0].feats()[None]
    assert np.array_equal(model(x)[0].numpy(), tr.model(x)[0].numpy())


@pytest.fixture(scope="module")
def ckpt_raw(corpus):
    return checkpoint_bytes(trainer(corpus).checkpoint())


@pytest.mark.parametrize("cut", [0, 5, 11, 100, -1])
def test_truncated_checkpoint_rejected(ckpt_raw, cut):
    with pytest.raises(CheckpointError):
        parse_checkpoint(ckpt_raw[:cut])


def test_corrupt_checkpoint_rejected(ckpt_raw):
    bad = bytearray(ckpt_raw)
    bad[len(bad) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        parse_checkpoint(bytes(bad))


def test_version_mismatch_names_versions(ckpt_raw):
    body = ckpt_raw[:4] + struct.pack("<I", 7) + ckpt_raw[8:-4]
    with pytest.raises(CheckpointError, match="version 7.*version 1"):
        parse_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
