"""Pyramid multi-branch model: configuration, assembly, forward pass and structural analysis."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .blocks import DEPTHWISE_KERNEL, ConvBlock, DcnnAttention, DualFusion, FeedForward, Linear, SENet
from .errors import StructureError
from .frontend import Embedding, subsampled_length
from .module import Context, Module
from .tensor import Tensor, no_grad

DCNN_KERNEL = 3


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``dilation_schedule`` lists dilation rates per pyramid layer. Only the
    first layer is required; missing deeper layers take the smallest half of
    the previous layer's rates (so 1..8 becomes 1..4, then 1-2, then 1).
    """

    d_model: int = 256
    n_layers: int = 4
    n_branches: int = 8
    dilation_schedule: list = field(default_factory=lambda: [[1, 2, 4, 6, 8, 10, 12, 14]])
    heads: int = 4
    conv_blocks: int = 8
    expansion_factors: list = field(default_factory=lambda: [2] * 8)
    vocab_size: int = 1305
    se_reduction: int = 8
    dropout: float = 0.1
    last_layer_width: int | None = None
    n_mels: int = 80
    depthwise_kernel: int = DEPTHWISE_KERNEL
    use_senet: bool = True
    use_ffm: bool = True

    def __post_init__(self):
        if self.last_layer_width is None:
            self.last_layer_width = 2 * self.d_model
        if self.dilation_schedule and not isinstance(self.dilation_schedule[0], (list, tuple)):
            self.dilation_schedule = [list(self.dilation_schedule)]
        self.dilation_schedule = [list(layer) for layer in self.dilation_schedule]
        self.expansion_factors = list(self.expansion_factors)

    def layer_dilations(self):
        """The full per-layer dilation schedule, deriving layers not given explicitly."""
        layers = [list(layer) for layer in self.dilation_schedule]
        while len(layers) < self.n_layers:
            prev = sorted(layers[-1])
            layers.append(prev[:max(1, len(prev) // 2)])
        return layers[:self.n_layers]

    def validate(self):
        n, m = self.n_layers, self.n_branches
        if n < 1:
            raise StructureError(f"n_layers must be >= 1, got {n}")
        if m != 2 ** (n - 1):
            raise StructureError(
                f"pyramid law violated: {n} layers need m = 2^(n-1) = {2 ** (n - 1)} branches, got {m}")
        if len(self.dilation_schedule) > n:
            raise StructureError(f"dilation_schedule has {len(self.dilation_schedule)} layers, model has {n}")
        for j, layer in enumerate(self.layer_dilations()):
            want = m // 2 ** j
            if len(layer) != want:
                raise StructureError(f"layer {j + 1} needs {want} dilation rates, got {len(layer)}")
            if any(int(r) != r or r < 1 for r in layer):
                raise StructureError(f"layer {j + 1} has non-positive dilation rates {layer}")
        if self.d_model % self.heads or self.last_layer_width % self.heads:
            raise StructureError(f"heads={self.heads} must divide d_model={self.d_model} "
                                 f"and last_layer_width={self.last_layer_width}")
        if self.d_model % 2:
            raise StructureError(f"d_model must be even for positional encoding, got {self.d_model}")
        if len(self.expansion_factors) != self.conv_blocks:
            raise StructureError(f"{self.conv_blocks} ConvBlocks but {len(self.expansion_factors)} expansion factors")
        if self.use_senet and self.last_layer_width % self.se_reduction:
            raise StructureError(f"se_reduction={self.se_reduction} must divide {self.last_layer_width}")
        if self.vocab_size < 2:
            raise StructureError("vocab_size must include the blank and at least one token")
        if self.depthwise_kernel % 2 == 0:
            raise StructureError("depthwise_kernel must be odd")
        return self

    @property
    def module_count(self):
        return sum(len(layer) for layer in self.layer_dilations())

    @property
    def fusion_count(self):
        return self.module_count - self.n_branches

    # -- key = value text -------------------------------------------------
    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name == "dilation_schedule":
                text = "; ".join(", ".join(str(r) for r in layer) for layer in val)
            elif isinstance(val, list):
                text = ", ".join(str(v) for v in val)
            elif isinstance(val, bool):
                text = "true" if val else "false"
            else:
                text = repr(val) if isinstance(val, float) else str(val)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        """Parse ``key = value`` lines; ``base`` supplies values for absent keys."""
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val)
        if base is not None:
            merged = dataclasses.asdict(base)
            if "d_model" in values and "last_layer_width" not in values:
                merged["last_layer_width"] = None
            merged.update(values)
            values = merged
        return cls(**values)


def _parse_value(key, val):
    if key == "dilation_schedule":
        return [[int(x) for x in layer.split(",") if x.strip()] for layer in val.split(";") if layer.strip()]
    if key == "expansion_factors":
        return [int(x) for x in val.split(",") if x.strip()]
    if key == "dropout":
        return float(val)
    if key in ("use_senet", "use_ffm"):
        if val.lower() not in ("true", "false"):
            raise ValueError(f"{key} must be true or false, got {val!r}")
        return val.lower() == "true"
    if key == "last_layer_width" and val.lower() in ("none", "auto"):
        return None
    return int(val)


def preset(name):
    """Table-style S / M / L configurations."""
    name = name.upper()
    if name == "S":
        return ModelConfig(n_layers=3, n_branches=4, dilation_schedule=[[1, 2, 4, 8]], heads=4,
                           conv_blocks=8, expansion_factors=[2] * 8)
    if name == "M":
        return ModelConfig(n_layers=4, n_branches=8, dilation_schedule=[[1, 2, 4, 6, 8, 10, 12, 14]],
                           heads=4, conv_blocks=8, expansion_factors=[2] * 8)
    if name == "L":
        return ModelConfig(n_layers=5, n_branches=16, dilation_schedule=[list(range(1, 17))], heads=8,
                           conv_blocks=8, expansion_factors=[1, 2, 2, 4, 4, 2, 2, 1])
    raise ValueError(f"unknown preset {name!r}; choose S, M or L")


PRESETS = ("S", "M", "L")


class PyramidModel(Module):
    def __init__(self, config, rng, dtype=np.float64):
        config.validate()
        c = self.config = config
        d = c.d_model
        self.embed = Embedding(rng, c.n_mels, d, c.dropout, dtype)
        self.conv_blocks = [ConvBlock(rng, d, e, c.depthwise_kernel, c.dropout, dtype)
                            for e in c.expansion_factors]
        schedule = c.layer_dilations()
        self.branches = []
        self.fusions = []
        for i, rates in enumerate(schedule):
            if i > 0:
                self.fusions.append([DualFusion(rng, d, c.dropout, dtype) for _ in rates])
            last = i == len(schedule) - 1
            d_out = c.last_layer_width if last else d
            self.branches.append([DcnnAttention(rng, d, d_out, r, c.heads, DCNN_KERNEL, c.dropout, dtype)
                                  for r in rates])
        width = c.last_layer_width
        if c.use_senet:
            self.senet = SENet(rng, width, c.se_reduction, dtype)
        if c.use_ffm:
            self.ffm = FeedForward(rng, width, 4, c.dropout, dtype)
        self.out_bn = F.BatchNormState(width, dtype)
        self.classifier = Linear(rng, width, c.vocab_size, dtype=dtype)

    @property
    def dtype(self):
        return self.classifier.weight.dtype

    def encode_branches(self, x, mask=None, ctx=Context(), stop=None):
        """Run ConvBlocks and the pyramid; returns the per-layer list of branch outputs.

        ``stop=(layer, branch)`` returns that module's output as soon as it is computed.
        """
        for block in self.conv_blocks:
            x = block(x, mask, ctx)
        outputs = []
        inputs = [x] * len(self.branches[0])
        for i, layer in enumerate(self.branches):
            if i > 0:
                prev = outputs[-1]
                inputs = [fuse(prev[2 * j], prev[2 * j + 1], mask, ctx)
                          for j, fuse in enumerate(self.fusions[i - 1])]
            outs = []
            for j, module in enumerate(layer):
                outs.append(module(inputs[j], mask, ctx))
                if stop == (i, j):
                    return outs[-1]
            outputs.append(outs)
        return outputs

    def __call__(self, features, lengths=None, ctx=Context()):
        """Log-probabilities ``[..., T', vocab]`` and the subsampled lengths."""
        if not isinstance(features, Tensor):
            features = Tensor(np.asarray(features, dtype=self.dtype))
        x = self.embed(features, lengths, ctx)
        T = x.shape[-2]
        out_lengths = None if lengths is None else subsampled_length(lengths)
        mask = None if lengths is None else F.time_mask(out_lengths, T, x.dtype)
        h = self.encode_branches(x, mask, ctx)[-1][0]
        if self.config.use_senet:
            h = self.senet(h, mask, ctx)
        if self.config.use_ffm:
            h = self.ffm(h, mask, ctx)
        h = F.batch_norm(F.activation(h, "relu"), self.out_bn, ctx.train, mask)
        h = F.dropout(h, self.config.dropout, ctx.train, ctx.rng)
        logp = F.log_softmax(self.classifier(h), axis=-1)
        if out_lengths is None:
            out_lengths = np.full(features.shape[:-2], T)
        return logp, out_lengths


def build(config, seed=0, dtype=np.float64):
    """Initialize a :class:`PyramidModel` deterministically from ``seed``."""
    return PyramidModel(config, np.random.default_rng(seed), dtype)


def forward(model, features, ctx=Context(), lengths=None):
    return model(features, lengths, ctx)


# -- parameter accounting ----------------------------------------------------

def _component(name, n_layers):
    head = name.split(".")[0]
    if head == "branches":
        return f"layer_{int(name.split('.')[1]) + 1}"
    return {"embed": "frontend", "conv_blocks": "conv_blocks", "fusions": "fusion", "senet": "senet",
            "ffm": "ffm", "out_bn": "classifier", "classifier": "classifier"}[head]


def count_params(model):
    """Per-component parameter counts from walking every parameter tensor, plus ``total``."""
    counts = {}
    for name, p in model.named_parameters():
        key = _component(name, model.config.n_layers)
        counts[key] = counts.get(key, 0) + p.data.size
    counts["total"] = sum(counts.values())
    return counts


def conv_params(d_in, d_out, k=1, bias=True):
    return k * d_in * d_out + (d_out if bias else 0)


def conv_block_params(d, e, k_dw=DEPTHWISE_KERNEL):
    h = e * d // 2
    n = 2 * d + conv_params(d, e * d) + k_dw * h + h + 2 * h
    if h != d:
        n += conv_params(h, d)
    return n


def mhsa_params(d):
    return 2 * d + 4 * d * d


def dcnn_attention_params(d_in, d_out, k=DCNN_KERNEL):
    return conv_params(d_in, d_out, k) + mhsa_params(d_out)


def fusion_params(d):
    return 4 * d + conv_params(2 * d, d) + 2 * d


def senet_params(C, R):
    return conv_params(C, C // R) + conv_params(C // R, C)


def ffm_params(C, expansion=4):
    return conv_params(C, expansion * C) + conv_params(expansion * C, C) + 2 * C


def analytic_param_counts(config):
    """Closed-form counterpart of :func:`count_params` computed from the config alone."""
    c = config.validate()
    d, W = c.d_model, c.last_layer_width
    counts = {"frontend": conv_params(c.n_mels, d, 3) + conv_params(d, d, 3),
              "conv_blocks": sum(conv_block_params(d, e, c.depthwise_kernel) for e in c.expansion_factors)}
    schedule = c.layer_dilations()
    for i, rates in enumerate(schedule):
        d_out = W if i == len(schedule) - 1 else d
        counts[f"layer_{i + 1}"] = len(rates) * dcnn_attention_params(d, d_out)
    if c.fusion_count:
        counts["fusion"] = c.fusion_count * fusion_params(d)
    if c.use_senet:
        counts["senet"] = senet_params(W, c.se_reduction)
    if c.use_ffm:
        counts["ffm"] = ffm_params(W)
    counts["classifier"] = 2 * W + conv_params(W, c.vocab_size)
    counts["total"] = sum(counts.values())
    return counts


# -- receptive fields --------------------------------------------------------

def stacked_conv_receptive_field(layers):
    """Receptive field of stride-1 convs given as ``(kernel, dilation)`` pairs: ``1 + sum (k-1) l``."""
    return 1 + sum((k - 1) * l for k, l in layers)


SUBSAMPLE_FIELD = 7
SUBSAMPLE_STRIDE = 4


def receptive_field(config, layer, branch, input_frames=False):
    """Analytic convolutional receptive field of module ``(layer, branch)`` (0-based).

    Counted in subsampled frames at the ConvBlock input; attention is excluded.
    ``input_frames=True`` converts to filterbank frames through the two
    stride-2, kernel-3 subsampling convs.
    """
    schedule = config.layer_dilations()
    if not 0 <= layer < len(schedule) or not 0 <= branch < len(schedule[layer]):
        raise IndexError(f"no module at layer {layer}, branch {branch}")
    base = stacked_conv_receptive_field([(config.depthwise_kernel, 1)] * config.conv_blocks)

    def rf(i, j):
        own = (DCNN_KERNEL - 1) * schedule[i][j]
        if i == 0:
            return base + own
        return max(rf(i - 1, 2 * j), rf(i - 1, 2 * j + 1)) + own

    frames = rf(layer, branch)
    if input_frames:
        return SUBSAMPLE_FIELD + SUBSAMPLE_STRIDE * (frames - 1)
    return frames


def measure_receptive_field(model, probe_position=None, layer=0, branch=0, length=None, seed=0):
    """Empirical receptive field: perturb one ConvBlock-input frame and count changed conv outputs.

    Runs in infer mode with attention bypassed, so only the convolutional
    path is measured. Returns the span (last - first + 1) of positions whose
    pre-attention activation changed; near a sequence edge the span is clipped.
    """
    c = model.config
    if length is None:
        widest = max(max(r) for r in c.layer_dilations())
        length = 2 * (1 + (c.depthwise_kernel - 1) * c.conv_blocks + 2 * widest * c.n_layers) + 1
    if probe_position is None:
        probe_position = length // 2
    if not 0 <= probe_position < length:
        raise IndexError(f"probe position {probe_position} outside sequence of length {length}")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(length, c.d_model)).astype(model.dtype)
    ctx = Context(train=False, bypass_attention=True)
    with no_grad():
        base = model.encode_branches(Tensor(x.copy()), None, ctx, stop=(layer, branch)).data
    # a constant shift across channels would vanish under LayerNorm
    x[probe_position] += rng.normal(size=c.d_model)
    with no_grad():
        moved = model.encode_branches(Tensor(x), None, ctx, stop=(layer, branch)).data
    changed = np.flatnonzero((moved != base).any(axis=-1))
    if changed.size == 0:
        return 0
    return int(changed[-1] - changed[0] + 1)
