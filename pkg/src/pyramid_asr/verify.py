"""Block-by-block finite-difference suite shared by the CLI and the tests."""

import time

import numpy as np

from .blocks import ConvBlock, DcnnAttention, DualFusion, FeedForward, MultiHeadSelfAttention, SENet
from .ctc import ctc_loss_batch
from .gradcheck import grad_check
from .model import ModelConfig, build
from .module import Context
from .tensor import Tensor

GRAD_TOL = 1e-4

TOY_CONFIG = dict(d_model=8, n_layers=2, n_branches=2, dilation_schedule=[[1, 2]], heads=2, conv_blocks=2,
                  expansion_factors=[2, 1], vocab_size=5, se_reduction=4)


def _randomize_norms(module, rng):
    # non-trivial affine and running stats so the norm paths are exercised
    for _, bn in module.batch_norms():
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta.data[:] = rng.normal(0, 0.1, bn.beta.shape)
        bn.running_mean = rng.normal(0, 0.1, bn.running_mean.shape)
        bn.running_var = rng.uniform(0.5, 1.5, bn.running_var.shape)
        bn.tracked = 1


def _probe(module, rng, shape, *extra, mask=None):
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    extras = [Tensor(rng.normal(size=shape), requires_grad=True) for _ in range(extra[0] if extra else 0)]
    out_probe = None
    ctx = Context(train=False)

    def f():
        nonlocal out_probe
        y = module(x, *extras, mask=mask, ctx=ctx)
        if out_probe is None:
            out_probe = np.random.default_rng(1).normal(size=y.shape)
        return (y * out_probe).sum()

    return f, [x, *extras] + module.parameters()


def block_cases(seed=0):
    """Name -> (scalar function, parameter list) for every block and the toy model."""
    rng = np.random.default_rng(seed)
    T, d = 7, 8
    mask = np.array([[1] * 7, [1] * 5 + [0] * 2], dtype=float)
    cases = {}

    cb = ConvBlock(rng, d, 2, kernel_size=5)
    _randomize_norms(cb, rng)
    cases["ConvBlock"] = _probe(cb, rng, (2, T, d), mask=mask)

    cases["MHSA"] = _probe(MultiHeadSelfAttention(rng, d, 2), rng, (2, T, d), mask=mask)
    cases["DCNN-Attention"] = _probe(DcnnAttention(rng, d, 2 * d, 2, 2), rng, (2, T, d), mask=mask)

    fusion = DualFusion(rng, d)
    _randomize_norms(fusion, rng)
    cases["DualFusionNet"] = _probe(fusion, rng, (2, T, d), 1, mask=mask)

    cases["SENet"] = _probe(SENet(rng, d, 4), rng, (2, T, d), mask=mask)
    cases["FFM"] = _probe(FeedForward(rng, d), rng, (2, T, d), mask=mask)

    model = build(ModelConfig(**TOY_CONFIG), seed=seed)
    _randomize_norms(model, rng)
    feats = rng.normal(size=(2, 12, model.config.n_mels))
    lengths = np.array([12, 10])
    labels = [[1, 2], [3]]

    def e2e():
        logp, out_len = model(feats, lengths, Context(train=False))
        return ctc_loss_batch(logp, out_len, labels)

    cases["end-to-end"] = (e2e, model.parameters())
    return cases


def run_suite(seed=0, step=1e-5, max_coords=200):
    """Return ``{name: (max relative error, seconds)}``."""
    results = {}
    for name, (f, params) in block_cases(seed).items():
        t0 = time.perf_counter()
        err = grad_check(f, params, step=step, max_coords=max_coords, seed=seed)
        results[name] = (err, time.perf_counter() - t0)
    return results
