"""Parameter containers and the few layers the backbones are built from."""

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


class Module:
    """Owns named parameters and child modules, in registration order."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, data):
        t = ad.Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"parameter names differ: missing={missing} unexpected={unexpected}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(
                    f"shape mismatch for parameter {name!r}: checkpoint {arr.shape} vs model {t.shape}"
                )
            t.data = arr.copy()


def uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, rng, fan_in, fan_out, bias=True):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        self.weight = self.param("weight", uniform(rng, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        self.bias = self.param("bias", np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.fan_in:
            raise ConfigError(f"linear layer expects width {self.fan_in}, got input shape {x.shape}")
        lead = x.shape[:-1]
        out = ad.matmul(x.reshape(-1, self.fan_in), self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out.reshape(lead + (self.fan_out,))


class MLP(Module):
    """SiLU hidden layers followed by a linear output layer."""

    def __init__(self, rng, fan_in, hidden, fan_out):
        super().__init__()
        sizes = [fan_in, *hidden, fan_out]
        self.layers = [
            self.child(f"layer{i}", Linear(rng, a, b)) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.silu(layer(x))
        return self.layers[-1](x)


class Embedding(Module):
    def __init__(self, rng, vocab, dim, std=0.1, padding_idx=0):
        super().__init__()
        table = rng.normal(0.0, std, size=(vocab, dim))
        if padding_idx is not None:
            table[padding_idx] = 0.0
        self.weight = self.param("weight", table)

    def __call__(self, ids):
        return ad.gather_rows(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)
