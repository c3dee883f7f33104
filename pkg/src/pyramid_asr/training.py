"""Adam, warm-up schedule, synthetic corpora, the training loop and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ctc import corpus_cer, ctc_loss_batch, greedy_decode, min_frames
from .errors import CheckpointError
from .frontend import SAMPLE_RATE, Waveform, log_mel_filterbank, subsampled_length
from .model import ModelConfig, PyramidModel
from .module import Context
from .tensor import no_grad

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.98
ADAM_EPS = 1e-6
CLIP_NORM = 5.0


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed, ordered list of named parameters."""

    def __init__(self, named_params, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0
        self.skipped = 0

    def step(self, lr):
        """Apply one update from ``p.grad``; skips (and counts) steps with non-finite gradients."""
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.isfinite(g).all() for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient; skipped update (%d skipped so far)", self.skipped)
            return False
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            dt = p.data.dtype.type
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data -= dt(lr) * update
        return True

    def state(self):
        tensors = {}
        for name, m, v in zip(self.names, self.m, self.v):
            tensors["adam.m." + name] = m
            tensors["adam.v." + name] = v
        return tensors

    def load_state(self, tensors, step_count, skipped=0):
        for i, name in enumerate(self.names):
            self.m[i] = np.array(tensors["adam.m." + name], dtype=self.params[i].dtype)
            self.v[i] = np.array(tensors["adam.v." + name], dtype=self.params[i].dtype)
        self.step_count = step_count
        self.skipped = skipped


def adam_step(params, grads, state, lr):
    """Functional form: write ``grads`` onto ``params`` and advance ``state`` (an :class:`Adam`)."""
    for p, g in zip(params, grads):
        p.grad = g
    return state.step(lr)


def clip_grad_norm(params, max_norm=CLIP_NORM):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


# -- schedule ----------------------------------------------------------------

@dataclass
class Schedule:
    """Warm-up schedule; ``warmup_steps`` defaults to a tenth of ``total_steps``.

    ``formula="standard"``: ``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``.
    ``formula="literal"``: ``sqrt(d) * min(sqrt(step), warmup^-1.5)`` exactly as printed,
    which never decays; kept for comparison only.
    """

    d_model: int
    total_steps: int
    warmup_steps: int | None = None
    scale: float = 0.1
    formula: str = "standard"

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.1 * self.total_steps))
        if self.formula not in ("standard", "literal"):
            raise ValueError(f"unknown lr formula {self.formula!r}")


def lr_at(step, s):
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    if s.formula == "literal":
        return math.sqrt(s.d_model) * min(math.sqrt(step), s.warmup_steps ** -1.5)
    return s.scale * s.d_model ** -0.5 * min(step ** -0.5, step * s.warmup_steps ** -1.5)


# -- data --------------------------------------------------------------------

@dataclass
class Utterance:
    labels: list
    waveform: Waveform | None = None
    features: np.ndarray | None = None
    name: str = ""

    def feats(self):
        if self.features is None:
            self.features = log_mel_filterbank(self.waveform)
        return self.features


PHONE_SECONDS = 0.2
SNR_DB = 20.0


def token_frequencies(vocab_size, f_lo=150.0, f_hi=2500.0):
    """Fundamental (Hz) of each token id 1..V-1, mel-spaced so neighbours stay separable."""
    mel = np.linspace(2595 * np.log10(1 + f_lo / 700), 2595 * np.log10(1 + f_hi / 700), vocab_size - 1)
    freqs = 700 * (10 ** (mel / 2595) - 1)
    return {k + 1: float(f) for k, f in enumerate(freqs)}


def phone(freq, sample_rate=SAMPLE_RATE, seconds=PHONE_SECONDS):
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    wave = sum(np.sin(2 * np.pi * h * freq * t) / h for h in (1, 2, 3))
    fade = int(0.01 * sample_rate)
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    env[:fade] = ramp
    env[-fade:] = ramp[::-1]
    return 0.5 * wave * env / np.abs(wave).max()


def synth_corpus(seed, n_utts, vocab_size, max_label_len):
    """Toy corpus: each token is a fixed 0.2 s harmonic tone; 20 dB white noise on top."""
    if vocab_size < 3:
        raise ValueError(f"vocab_size must be at least 3, got {vocab_size}")
    rng = np.random.default_rng(seed)
    freqs = token_frequencies(vocab_size)
    phones = {k: phone(f) for k, f in freqs.items()}
    corpus = []
    for i in range(n_utts):
        L = int(rng.integers(1, max_label_len + 1))
        labels = [int(x) for x in rng.integers(1, vocab_size, size=L)]
        clean = np.concatenate([phones[k] for k in labels])
        noise_rms = np.sqrt(np.mean(clean ** 2)) * 10 ** (-SNR_DB / 20)
        wave = np.clip(clean + rng.normal(0.0, noise_rms, size=clean.shape), -1.0, 1.0)
        corpus.append(Utterance(labels, Waveform(wave, SAMPLE_RATE), name=f"utt{i:05d}"))
    return corpus


def split_corpus(corpus, held_out=0.01):
    """Deterministic 99:1 style split; at least one held-out utterance when the corpus has two or more."""
    n_dev = math.ceil(held_out * len(corpus)) if len(corpus) > 1 else 0
    return corpus[:len(corpus) - n_dev], corpus[len(corpus) - n_dev:]


def pad_batch(utts, dtype):
    feats = [u.feats() for u in utts]
    T = max(f.shape[0] for f in feats)
    out = np.zeros((len(feats), T, feats[0].shape[1]), dtype=dtype)
    for i, f in enumerate(feats):
        out[i, :f.shape[0]] = f
    return out, np.array([f.shape[0] for f in feats])


def decode_corpus(model, corpus, batch_size=16):
    hyps = []
    ctx = Context(train=False)
    with no_grad():
        for i in range(0, len(corpus), batch_size):
            batch = corpus[i:i + batch_size]
            x, lengths = pad_batch(batch, model.dtype)
            logp, out_len = model(x, lengths, ctx)
            hyps += [greedy_decode(logp.data[b, :out_len[b]]) for b in range(len(batch))]
    return hyps


def evaluate(model, corpus, batch_size=16):
    hyps = decode_corpus(model, corpus, batch_size)
    return corpus_cer(hyps, [u.labels for u in corpus])


# -- trainer -----------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss", "cer"])
            for r in self.rows:
                w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), "" if r["cer"] is None else f"{r['cer']:.4f}"])


class Trainer:
    """Owns the model, optimizer, dropout RNG and step counter.

    Batch order for epoch ``e`` is a permutation drawn from a generator seeded
    with ``(seed, e)``, so training can resume from any step.
    """

    def __init__(self, model, corpus, schedule, batch_size=32, seed=0, eval_corpus=None, clip=CLIP_NORM):
        if not corpus:
            raise ValueError("training corpus is empty")
        self.model = model
        self.corpus = list(corpus)
        self.eval_corpus = eval_corpus
        self.schedule = schedule
        self.batch_size = batch_size
        self.seed = seed
        self.clip = clip
        self.rng = np.random.default_rng(seed)
        self.optimizer = Adam(list(model.named_parameters()))
        self.step = 0
        self.skipped_utts = 0
        self.history = History()
        self._drop_infeasible()

    def _drop_infeasible(self):
        keep = []
        for u in self.corpus:
            frames = int(subsampled_length(u.feats().shape[0]))
            if frames < min_frames(u.labels):
                self.skipped_utts += 1
                log.warning("%s: %d frames cannot emit %d labels; skipped", u.name, frames, len(u.labels))
            else:
                keep.append(u)
        if not keep:
            raise ValueError("no utterance in the corpus is long enough for its label")
        self.corpus = keep

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.corpus) / self.batch_size)

    def batch_for(self, step):
        epoch, k = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.corpus))
        idx = order[k * self.batch_size:(k + 1) * self.batch_size]
        return [self.corpus[i] for i in idx]

    def train_step(self):
        batch = self.batch_for(self.step)
        x, lengths = pad_batch(batch, self.model.dtype)
        self.model.zero_grad()
        logp, out_len = self.model(x, lengths, Context(train=True, rng=self.rng))
        loss = ctc_loss_batch(logp, out_len, [u.labels for u in batch])
        loss.backward()
        params = self.model.parameters()
        if self.clip:
            clip_grad_norm(params, self.clip)
        self.step += 1
        lr = lr_at(self.step, self.schedule)
        self.optimizer.step(lr)
        row = {"step": self.step, "lr": lr, "loss": float(loss.data), "cer": None}
        self.history.rows.append(row)
        return row

    def run(self, steps=None, epochs=None, eval_every_epoch=True, stop_at_cer=None, eval_every=None,
            progress=None):
        """Train for ``steps`` optimizer steps or ``epochs`` passes (whichever is given)."""
        if steps is None:
            steps = (epochs or 1) * self.steps_per_epoch
        target = self.step + steps
        while self.step < target:
            row = self.train_step()
            end_of_epoch = self.step % self.steps_per_epoch == 0
            due = (eval_every and self.step % eval_every == 0) or (eval_every_epoch and end_of_epoch
                                                                   and not eval_every)
            if due:
                row["cer"] = evaluate(self.model, self.eval_corpus or self.corpus)
                log.info("step %d  lr %.3e  loss %.4f  cer %.4f", self.step, row["lr"], row["loss"], row["cer"])
                if progress:
                    progress(row)
                if stop_at_cer is not None and row["cer"] <= stop_at_cer:
                    break
        return self.history

    # -- persistence ------------------------------------------------------
    def checkpoint(self):
        tensors = dict(self.model.state_dict())
        tensors.update(self.optimizer.state())
        state = {
            "step": str(self.step),
            "adam_step": str(self.optimizer.step_count),
            "adam_skipped": str(self.optimizer.skipped),
            "seed": str(self.seed),
            "batch_size": str(self.batch_size),
            "total_steps": str(self.schedule.total_steps),
            "warmup_steps": str(self.schedule.warmup_steps),
            "lr_scale": repr(self.schedule.scale),
            "lr_formula": self.schedule.formula,
            "rng": json.dumps(self.rng.bit_generator.state, sort_keys=True),
        }
        return Checkpoint(self.model.config, tensors, state)

    @classmethod
    def from_checkpoint(cls, ckpt, corpus, eval_corpus=None):
        model = PyramidModel(ckpt.config, np.random.default_rng(0), np.float32)
        model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
        s = ckpt.state
        schedule = Schedule(ckpt.config.d_model, int(s["total_steps"]), int(s["warmup_steps"]),
                            float(s["lr_scale"]), s["lr_formula"])
        tr = cls(model, corpus, schedule, int(s["batch_size"]), int(s["seed"]), eval_corpus)
        tr.optimizer.load_state(ckpt.tensors, int(s["adam_step"]), int(s["adam_skipped"]))
        tr.rng.bit_generator.state = json.loads(s["rng"])
        tr.step = int(s["step"])
        return tr


def train(model, corpus, schedule, batch_size, epochs, seed=0, eval_corpus=None, log_csv=None):
    """Run ``epochs`` passes over ``corpus``; returns the metrics :class:`History`."""
    trainer = Trainer(model, corpus, schedule, batch_size, seed, eval_corpus)
    history = trainer.run(epochs=epochs)
    if log_csv:
        history.write_csv(log_csv)
    return history


# -- checkpoint files --------------------------------------------------------

CKPT_MAGIC = b"PYRC"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    state: dict = field(default_factory=dict)


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ckpt):
    text = ckpt.config.to_text() + "".join(f"train.{k} = {v}\n" for k, v in ckpt.state.items())
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_str(text), struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def parse_checkpoint(raw):
    if len(raw) < 12:
        raise CheckpointError("checkpoint truncated: shorter than its header")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    if body[:4] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {body[:4]!r})")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}; this build reads version {CKPT_VERSION}")
    pos = 8

    def take_str():
        nonlocal pos
        (n,) = struct.unpack_from("<I", body, pos)
        s = body[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        return s

    text = take_str()
    model_lines, state = [], {}
    for line in text.splitlines():
        if line.startswith("train."):
            key, val = line[len("train."):].split(" = ", 1)
            state[key] = val
        else:
            model_lines.append(line)
    config = ModelConfig.from_text("\n".join(model_lines))
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name = take_str()
        (rank,) = struct.unpack_from("<B", body, pos)
        dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
        pos += 1 + 4 * rank
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return Checkpoint(config, tensors, state)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def model_from_checkpoint(ckpt, dtype=np.float32):
    model = PyramidModel(ckpt.config, np.random.default_rng(0), dtype)
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    return model
