"""Audio frontend: 16-bit PCM WAV I/O, log-mel filterbanks, subsampling and positional encoding."""

import struct
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import Conv1d
from .errors import DimensionError, WavParseError
from .module import Context, Module
from .tensor import Tensor

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
NORM_GUARD = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise ValueError("waveform samples must lie in [-1, 1]")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


# -- WAV ---------------------------------------------------------------------

def read_wav(data):
    """Parse a mono 16-bit PCM RIFF/WAVE byte string into a :class:`Waveform`."""
    if len(data) < 12:
        raise WavParseError("file shorter than RIFF header", len(data))
    if data[0:4] != b"RIFF":
        raise WavParseError(f"bad RIFF magic {data[0:4]!r}", 0)
    if data[8:12] != b"WAVE":
        raise WavParseError(f"bad WAVE magic {data[8:12]!r}", 8)

    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise WavParseError("fmt chunk too short", pos)
            code, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body)
            if code != 1:
                raise WavParseError(f"format code {code} is not PCM (1)", body)
            if channels != 1:
                raise WavParseError(f"{channels} channels; only mono is supported", body + 2)
            if bits != 16:
                raise WavParseError(f"{bits}-bit samples; only 16-bit is supported", body + 14)
            fmt = rate
        elif cid == b"data":
            if fmt is None:
                raise WavParseError("data chunk before fmt chunk", pos)
            if body + size > len(data):
                raise WavParseError(f"data chunk declares {size} bytes but only "
                                    f"{len(data) - body} remain", body)
            if size % 2:
                raise WavParseError("data chunk has an odd byte count", body)
            samples = np.frombuffer(data, dtype="<i2", count=size // 2, offset=body)
            return Waveform(samples.astype(np.float64) / 32768.0, fmt)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("no fmt chunk", pos)
    raise WavParseError("no data chunk", pos)


def write_wav(w):
    """Serialize a :class:`Waveform` as mono 16-bit PCM (values clipped to int16)."""
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    return header + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm


def load_wav(path):
    with open(path, "rb") as fh:
        return read_wav(fh.read())


def save_wav(path, w):
    with open(path, "wb") as fh:
        fh.write(write_wav(w))


# -- filterbank --------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filters(n_mels=80, n_fft=512, sample_rate=SAMPLE_RATE, f_min=0.0, f_max=None):
    """Triangular HTK-mel filters as an ``[n_fft//2 + 1, n_mels]`` weight matrix."""
    f_max = sample_rate / 2 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)).T


def frame_count(n_samples, win, hop):
    return (n_samples - win) // hop + 1


def log_mel_filterbank(w, n_mels=80, win_ms=25, hop_ms=10, n_fft=512, normalize=True):
    """Log-mel energies ``[T, n_mels]`` with optional per-utterance mean/variance normalization."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz (resampling not supported)")
    win = w.sample_rate * win_ms // 1000
    hop = w.sample_rate * hop_ms // 1000
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < win:
        raise ValueError(f"audio has {len(x)} samples, shorter than one {win}-sample window")
    T = frame_count(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.abs(np.fft.rfft(x[idx] * window, n=n_fft, axis=-1)) ** 2
    feats = np.log(spec @ mel_filters(n_mels, n_fft, w.sample_rate) + LOG_FLOOR)
    if normalize:
        centered = feats - feats.mean(axis=0)
        # a constant band (e.g. silence) centers to exactly zero, not rounding noise
        centered[:, np.ptp(feats, axis=0) == 0] = 0.0
        feats = centered / np.sqrt(feats.var(axis=0) + NORM_GUARD)
    return feats


# -- feature cache -----------------------------------------------------------

FEATURE_MAGIC = b"PYRF"
FEATURE_VERSION = 1


def write_features(path, feats):
    feats = np.asarray(feats, dtype="<f4")
    T, n_mels = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, n_mels))
        fh.write(np.ascontiguousarray(feats).tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature cache (magic {raw[:4]!r})")
    version, T, n_mels = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: feature cache version {version}, expected {FEATURE_VERSION}")
    body = raw[16:]
    if len(body) != 4 * T * n_mels:
        raise ValueError(f"{path}: expected {4 * T * n_mels} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(T, n_mels).astype(np.float64)


# -- model-side frontend -----------------------------------------------------

def positional_encoding(T, d_model):
    """Sinusoidal table: even columns ``sin(pos / 10000^(2i/d))``, odd columns the matching cos."""
    if d_model % 2:
        raise ValueError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(T)[:, None]
    rates = 10000.0 ** (-np.arange(0, d_model, 2) / d_model)
    pe = np.empty((T, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)
    return pe


def subsampled_length(T):
    """Frames left after two stride-2 stages: ``ceil(ceil(T/2)/2)``."""
    half = -(-np.asarray(T) // 2)
    return -(-half // 2)


class ConvSubsample(Module):
    """Two kernel-3, stride-2 convolutions with relu: ``n_mels -> d_model -> d_model``."""

    def __init__(self, rng, n_mels, d_model, dtype=np.float64):
        self.conv1 = Conv1d(rng, n_mels, d_model, 3, dtype=dtype)
        self.conv2 = Conv1d(rng, d_model, d_model, 3, dtype=dtype)

    def __call__(self, x, lengths=None):
        if x.shape[-2] < 4:
            raise DimensionError(f"conv subsampling needs at least 4 frames, got {x.shape[-2]}")
        if lengths is not None:
            x = F.apply_mask(x, F.time_mask(lengths, x.shape[-2], x.dtype))
        h = F.activation(self.conv1(x)[..., 0::2, :], "relu")
        if lengths is not None:
            h = F.apply_mask(h, F.time_mask(-(-np.asarray(lengths) // 2), h.shape[-2], h.dtype))
        return F.activation(self.conv2(h)[..., 0::2, :], "relu")


class Embedding(Module):
    """``ConvSubsample(x) + positional_encoding``, then dropout."""

    def __init__(self, rng, n_mels, d_model, dropout=0.1, dtype=np.float64):
        self.d_model = d_model
        self.p = dropout
        self.subsample = ConvSubsample(rng, n_mels, d_model, dtype)

    def __call__(self, x, lengths=None, ctx=Context()):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.subsample.conv1.weight.dtype))
        h = self.subsample(x, lengths)
        pe = positional_encoding(h.shape[-2], self.d_model).astype(h.dtype)
        h = F.dropout(h + pe, self.p, ctx.train, ctx.rng)
        if lengths is not None:
            h = F.apply_mask(h, F.time_mask(subsampled_length(lengths), h.shape[-2], h.dtype))
        return h
