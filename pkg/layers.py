import math

import numpy as np

import tensor_core as tc
from utils import VersionError


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Contêiner de parâmetros nomeados (árvore), na ordem de registro."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, array):
        t = tc.Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, t
        for name, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def state_dict(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise VersionError(f"checkpoint incompatível: faltando={missing[:5]} sobrando={unexpected[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise VersionError(f"checkpoint incompatível em {name}: {arr.shape} != {t.shape}")
            t.data = np.array(arr)
        return self


class Linear(Module):
    def __init__(self, c_in, c_out, rng, bias=True):
        super().__init__()
        self.weight = self.param("weight", uniform_init(rng, (c_in, c_out), c_in))
        self.bias = self.param("bias", np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.param("gain", np.ones(c))
        self.bias = self.param("bias", np.zeros(c))

    def __call__(self, x):
        return tc.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """C -> hidden -> C com ReLU."""

    def __init__(self, c, hidden, rng):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(c, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, c, rng))

    def __call__(self, x):
        return self.fc2(tc.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, c, heads, rng):
        super().__init__()
        self.heads = heads
        for p in ("q", "k", "v", "o"):
            self.param(f"w{p}", uniform_init(rng, (c, c), c))
            self.param(f"b{p}", np.zeros(c))

    def __call__(self, q, k, v, key_bias=None, return_weights=False):
        return tc.multi_head_attention(q, k, v, self._params, self.heads,
                                       key_bias=key_bias, return_weights=return_weights)


class Conv(Module):
    """Convolução N-d canais primeiro (ver tensor_core.convolve)."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0):
        super().__init__()
        kernel = tuple(kernel)
        fan_in = c_in * int(np.prod(kernel))
        self.stride = stride
        self.padding = padding
        self.weight = self.param("weight", uniform_init(rng, (c_out, c_in) + kernel, fan_in))
        self.bias = self.param("bias", np.zeros(c_out))

    def __call__(self, x):
        return tc.convolve(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvGrid(Module):
    """Conv s×k sobre [S x T x C] (padding same)."""

    def __init__(self, c_in, c_out, s, k, rng):
        super().__init__()
        self.weight = self.param("weight", uniform_init(rng, (c_out, c_in, s, k), c_in * s * k))
        self.bias = self.param("bias", np.zeros(c_out))

    def __call__(self, x):
        return tc.conv2d_grid(x, self.weight, self.bias)
