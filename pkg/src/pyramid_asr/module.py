"""Parameter containers: a tiny ``Module`` base with named parameter walking."""

from dataclasses import dataclass

import numpy as np

from .functional import BatchNormState
from .tensor import Tensor


@dataclass
class Context:
    """Per-forward switches shared by every block."""

    train: bool = False
    rng: np.random.Generator | None = None
    bypass_attention: bool = False


def glorot(rng, shape, fan_in, fan_out, dtype=np.float64):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float64):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Anything holding Tensors, BatchNormStates or other Modules as attributes.

    Attribute insertion order fixes parameter order, so two modules built
    the same way enumerate parameters identically.
    """

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            yield f"{key}.{i}.{j}", sub
                    else:
                        yield f"{key}.{i}", item
            else:
                yield key, val

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            name = prefix + key
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, BatchNormState):
                yield name + ".gamma", val.gamma
                yield name + ".beta", val.beta
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batch_norms(self, prefix=""):
        for key, val in self._children():
            if isinstance(val, BatchNormState):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.batch_norms(prefix + key + ".")

    def state_dict(self):
        """Parameters and batch-norm running statistics as name -> ndarray."""
        state = {name: p.data for name, p in self.named_parameters()}
        for name, bn in self.batch_norms():
            state[name + ".running_mean"] = bn.running_mean
            state[name + ".running_var"] = bn.running_var
            state[name + ".tracked"] = np.array([bn.tracked], dtype=bn.running_mean.dtype)
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, bn in self.batch_norms():
            bn.running_mean = np.array(state[name + ".running_mean"], dtype=bn.running_mean.dtype)
            bn.running_var = np.array(state[name + ".running_var"], dtype=bn.running_var.dtype)
            bn.tracked = int(np.asarray(state[name + ".tracked"]).reshape(-1)[0])

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, bn in self.batch_norms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_params(self):
        return sum(p.data.size for p in self.parameters())
