"""Pyramid multi-branch fusion DCNN with multi-head self-attention for CTC speech recognition."""

from .ctc import cer, ctc_loss, ctc_loss_bruteforce, greedy_decode
from .frontend import Waveform, log_mel_filterbank, positional_encoding, read_wav, write_wav
from .model import ModelConfig, PyramidModel, build, count_params, measure_receptive_field, preset, receptive_field
from .tensor import Tensor, no_grad
from .training import Schedule, Trainer, load_checkpoint, lr_at, save_checkpoint, synth_corpus, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "PyramidModel", "Schedule", "Tensor", "Trainer", "Waveform", "build", "cer", "count_params",
    "ctc_loss", "ctc_loss_bruteforce", "greedy_decode", "load_checkpoint", "log_mel_filterbank", "lr_at",
    "measure_receptive_field", "no_grad", "positional_encoding", "preset", "read_wav", "receptive_field",
    "save_checkpoint", "synth_corpus", "train", "write_wav",
]
