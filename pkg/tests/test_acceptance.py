"""Acceptance suite: one PASS/FAIL line per headline criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
under capture) or directly with ``python tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from pyramid_asr import functional as F
from pyramid_asr.blocks import MultiHeadSelfAttention, SENet
from pyramid_asr.cli import analyze_lines
from pyramid_asr.ctc import ctc_loss, ctc_loss_bruteforce, min_frames
from pyramid_asr.frontend import positional_encoding
from pyramid_asr.model import (ModelConfig, build, measure_receptive_field, preset, receptive_field,
                               stacked_conv_receptive_field)
from pyramid_asr.tensor import Tensor
from pyramid_asr.training import Schedule, Trainer, checkpoint_bytes, lr_at, parse_checkpoint, synth_corpus
from pyramid_asr.verify import GRAD_TOL, run_suite

_sink = None


@pytest.fixture(autouse=True)
def _printer(capsys):
    global _sink
    _sink = capsys
    yield
    _sink = None


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    if _sink is not None:
        with _sink.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


# -- gradient fidelity -------------------------------------------------------------

def test_gradient_fidelity():
    results = run_suite(seed=0)
    worst = max(err for err, _ in results.values())
    slowest = max(secs for _, secs in results.values())
    detail = ", ".join(f"{k} {e:.1e}/{s:.1f}s" for k, (e, s) in results.items())
    report("gradient fidelity", worst < GRAD_TOL and slowest < 60.0,
           f"max rel err {worst:.2e} (< {GRAD_TOL:g}), slowest {slowest:.1f}s (< 60s) [{detail}]")


# -- CTC oracle --------------------------------------------------------------------

def test_ctc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 100:
        T, V, L = int(rng.integers(1, 7)), int(rng.integers(2, 5)), int(rng.integers(0, 4))
        labels = [int(x) for x in rng.integers(1, V, size=L)]
        if T < min_frames(labels):
            continue
        logits = rng.normal(size=(T, V)) * 2
        lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        worst = max(worst, abs(ctc_loss(lp, labels).item() - ctc_loss_bruteforce(lp, labels)))
        n += 1
    secs = time.perf_counter() - t0
    report("CTC oracle equivalence", worst < 1e-8 and secs < 30.0,
           f"{n} instances (T<=6, L<=3, V<=4), max |DP - brute force| {worst:.1e} (< 1e-8), {secs:.1f}s (< 30s)")


# -- pyramid structure -------------------------------------------------------------

TABLE = {  # layers, branches, heads, first-layer dilation field as tabulated
    "S": (3, 4, 4, "1-2-4-8"),
    "M": (4, 8, 4, "1-2-4-...-14"),
    "L": (5, 16, 8, "1-2-3-...-16"),
}


def test_pyramid_structure_law():
    problems = []
    for name, (modules, fusions) in {"S": (7, 3), "M": (15, 7), "L": (31, 15)}.items():
        c = preset(name)
        model = build(c, dtype=np.float32)
        built = (sum(map(len, model.branches)), sum(map(len, model.fusions)))
        if (c.module_count, c.fusion_count) != (modules, fusions) or built != (modules, fusions):
            problems.append(f"{name}: modules/fusions {built}")
        layers, branches, heads, rates = TABLE[name]
        out = analyze_lines(c)
        for row in (f"Num Layers         {layers}", f"Num Branches       {branches}",
                    f"Attention Heads    {heads}", f"Dilated Rate       {rates}"):
            if row not in out:
                problems.append(f"{name}: missing {row!r}")
    report("pyramid structure law", not problems,
           "S/M/L modules 7/15/31, fusions 3/7/15, analyze rows match the table"
           if not problems else "; ".join(problems))


# -- receptive field ---------------------------------------------------------------

def _single_conv_span(k, dilation):
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(k, 2, 2)))
    x = rng.normal(size=(41, 2))
    base = F.conv1d(Tensor(x), w, dilation=dilation).numpy()
    x[20] += rng.normal(size=2)
    changed = np.flatnonzero((F.conv1d(Tensor(x), w, dilation=dilation).numpy() != base).any(-1))
    return int(changed[-1] - changed[0] + 1)


def test_receptive_field_law():
    rows = []
    ok = True
    for name in ("S", "M"):
        c = preset(name)
        model = build(c, seed=0)
        pairs = [(receptive_field(c, 0, j), measure_receptive_field(model, branch=j))
                 for j in range(c.n_branches)]
        ok &= all(a == m for a, m in pairs)
        rows.append(f"{name} analytic/measured " + " ".join(f"{a}/{m}" for a, m in pairs))
    single = (stacked_conv_receptive_field([(3, 2)]), _single_conv_span(3, 2))
    ok &= single == (5, 5)
    rows.append(f"k=3,l=2 analytic/measured {single[0]}/{single[1]}")
    report("receptive-field law", ok, "; ".join(rows))


# -- positional encoding -----------------------------------------------------------

def test_positional_encoding_linearity():
    rng = np.random.default_rng(7)
    d = 256
    omega = 10000.0 ** (-np.arange(0, d, 2) / d)
    worst = 0.0
    for _ in range(200):
        pos, k = int(rng.integers(0, 5000)), int(rng.integers(0, 1000))
        pe = positional_encoding(pos + k + 1, d)
        c, s = np.cos(k * omega), np.sin(k * omega)
        rebuilt = np.empty(d)
        rebuilt[0::2] = c * pe[pos, 0::2] + s * pe[pos, 1::2]
        rebuilt[1::2] = -s * pe[pos, 0::2] + c * pe[pos, 1::2]
        worst = max(worst, float(np.abs(rebuilt - pe[pos + k]).max()))
    report("positional-encoding linearity", worst < 1e-9,
           f"200 random (pos, k), max rotation reconstruction error {worst:.1e} (< 1e-9)")


# -- normalization invariants ------------------------------------------------------

def test_normalization_invariants():
    rng = np.random.default_rng(5)
    c = ModelConfig(d_model=16, n_layers=3, n_branches=4, dilation_schedule=[[1, 2, 3, 4]], heads=4,
                    conv_blocks=2, expansion_factors=[2, 2], vocab_size=11, se_reduction=4)
    model = build(c, seed=5)
    feats = rng.normal(0, 3, size=(3, 37, 80))
    logp, _ = model(feats, np.array([37, 29, 11]))
    attn_dev = max(float(np.abs(b.mhsa.attention.sum(-1) - 1).max()) for layer in model.branches for b in layer)
    norm_dev = float(np.abs(np.exp(logp.numpy()).sum(-1) - 1).max())
    gates = model.senet.gates
    # extreme inputs straight into the blocks
    mhsa = MultiHeadSelfAttention(rng, 16, 4)
    mhsa(Tensor(rng.normal(0, 1e3, size=(9, 16))))
    attn_dev = max(attn_dev, float(np.abs(mhsa.attention.sum(-1) - 1).max()))
    se = SENet(rng, 16, 4)
    se(Tensor(rng.normal(0, 1e3, size=(9, 16))))
    gates = np.concatenate([gates.ravel(), se.gates.ravel()])
    ok = attn_dev < 1e-6 and norm_dev < 1e-6 and gates.min() > 0 and gates.max() < 1
    report("normalization invariants", ok,
           f"attention row dev {attn_dev:.1e}, log-softmax row dev {norm_dev:.1e} (< 1e-6); "
           f"SENet gates inside (0, 1): min {gates.min():.3g}, 1 - max {1 - gates.max():.3g}")


# -- overfit smoke test ------------------------------------------------------------

OVERFIT = ModelConfig(d_model=32, n_layers=2, n_branches=2, dilation_schedule=[[1, 2]], heads=4, conv_blocks=4,
                      expansion_factors=[2] * 4, vocab_size=30, se_reduction=8)


def test_overfit_smoke():
    corpus = synth_corpus(0, 10, OVERFIT.vocab_size, 8)
    model = build(OVERFIT, seed=0, dtype=np.float32)
    trainer = Trainer(model, corpus, Schedule(OVERFIT.d_model, 2000), batch_size=10, seed=0)
    wall, cpu = time.perf_counter(), time.process_time()
    history = trainer.run(steps=2000, eval_every=100, eval_every_epoch=False, stop_at_cer=0.0)
    wall, cpu = time.perf_counter() - wall, time.process_time() - cpu
    cers = [r["cer"] for r in history.rows if r["cer"] is not None]
    losses = np.array(history.losses)
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
    rises = int((np.diff(ma) > 0).sum())
    ok = cers[-1] == 0.0 and trainer.step <= 2000 and max(wall, cpu) < 300 and rises == 0
    report("overfit smoke test", ok,
           f"train CER {100 * cers[-1]:.2f} at step {trainer.step} (<= 2000), {wall:.1f}s wall / {cpu:.1f}s cpu "
           f"(< 300s), 100-step moving-average rises {rises} of {len(ma) - 1}, "
           f"loss {losses[:100].mean():.2f} -> {losses[-100:].mean():.4f}")


# -- schedule shape ----------------------------------------------------------------

def test_schedule_shape():
    s = Schedule(256, 250_000)
    w = s.warmup_steps
    lrs = np.array([lr_at(k, s) for k in range(1, 3 * w + 1)])
    peak = int(np.argmax(lrs)) + 1
    unique = int((lrs == lrs.max()).sum()) == 1
    ratio = lr_at(2 * w, s) / lr_at(w, s)
    literal = Schedule(256, 250_000, formula="literal")
    verbatim = all(lr_at(k, literal) == math.sqrt(256) * min(math.sqrt(k), literal.warmup_steps ** -1.5)
                   for k in (1, 2, 100, w, 2 * w, 10**6))
    ok = peak == w and unique and abs(ratio - 2 ** -0.5) <= 1e-12 and verbatim
    report("schedule shape", ok,
           f"unique max at step {peak} (warmup {w}), lr(2w)/lr(w) - 2^-1/2 = {ratio - 2 ** -0.5:.1e}, "
           f"literal formula verbatim {verbatim}")


# -- determinism and persistence ---------------------------------------------------

def test_determinism_and_persistence():
    cfg = ModelConfig(d_model=16, n_layers=2, n_branches=2, dilation_schedule=[[1, 2]], heads=2, conv_blocks=2,
                      expansion_factors=[2, 2], vocab_size=8, se_reduction=4)
    corpus = synth_corpus(11, 8, 8, 4)

    def fresh():
        return Trainer(build(cfg, seed=3, dtype=np.float32), corpus, Schedule(16, 40), batch_size=3, seed=3)

    a, b = fresh(), fresh()
    a.run(steps=12)
    b.run(steps=12)
    same = a.history.losses == b.history.losses and all(
        x.tobytes() == y.tobytes() for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))

    part = fresh()
    part.run(steps=5)
    raw = checkpoint_bytes(part.checkpoint())
    resumed = Trainer.from_checkpoint(parse_checkpoint(raw), corpus)
    resumed.run(steps=7)
    step_for_step = resumed.history.losses == a.history.losses[5:]
    params = all(x.tobytes() == y.tobytes()
                 for x, y in zip(a.model.state_dict().values(), resumed.model.state_dict().values()))
    roundtrip = checkpoint_bytes(parse_checkpoint(raw)) == raw
    report("determinism & persistence", same and step_for_step and params and roundtrip,
           f"same-seed runs bitwise equal {same}; resume at step 5 matches steps 6-12 {step_for_step}, "
           f"final parameters bitwise equal {params}; checkpoint byte round trip {roundtrip}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
