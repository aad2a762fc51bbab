import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils import CheckpointError, ConfigError, DataError, ShapeError, UsageError, VersionError, shape_error

# ==========================================
# 1. TENSOR E GRAFO (FITA)
# ==========================================

_local = threading.local()


def _graph_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """
    Array denso f64 (ordem C) com participação opcional no gradiente.
    Fora de um Graph ativo nenhuma operação é registrada (modo inferência).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operadores
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: object


class Graph:
    """
    Fita de operações em ordem de inserção (acíclica por construção).
    Um único escritor por grafo; o backward percorre a fita ao contrário.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        output.requires_grad = True
        output._graph = self
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def backward(self, loss):
        if loss.size != 1:
            raise UsageError(f"backward exige escalar, recebeu forma {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            tensors.pop(id(node.output), None)
            node.output.grad = g
            for parent, pg in zip(node.inputs, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    tensors[key] = parent
        # folhas: acumulação aditiva (zerar é responsabilidade do chamador)
        for key, g in grads.items():
            leaf = tensors[key]
            g = np.array(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss):
    """Preenche .grad de todo tensor com requires_grad alcançável a partir de loss."""
    if loss.size != 1:
        raise UsageError(f"backward exige escalar, recebeu forma {loss.shape}")
    if loss._graph is None:
        if not loss.requires_grad:
            raise UsageError("loss não participa de nenhum grafo gravado")
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    loss._graph.backward(loss)


def zero_grad(params):
    for p in params:
        p.grad = None


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op, data, parents, backward_fn):
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        graph.record(op, tuple(parents), out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Soma g de volta para a forma original após broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)

# ==========================================
# 2. OPERAÇÕES ELEMENTARES
# ==========================================

def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise shape_error(op, a.shape, b.shape) from None


def add(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _t(a), _t(b)
    _broadcast_check("div", a, b)
    return _result("div", a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = _t(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = _t(a)
    return _result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _t(a)
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def relu(a):
    a = _t(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

# ==========================================
# 3. FORMA E REDUÇÕES
# ==========================================

def tsum(a, axis=None, keepdims=False):
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _t(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", a.shape, shape) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis=0):
    tensors = [_t(x) for x in tensors]
    sizes = [x.shape[axis] for x in tensors]
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: formas incompatíveis {[x.shape for x in tensors]}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _result("concat", out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a, idx):
    """Indexação básica (fatias/inteiros); sem índices repetidos."""
    a = _t(a)

    def bw(g):
        full = np.zeros(a.shape)
        full[idx] += g
        return (full,)

    return _result("getitem", a.data[idx], (a,), bw)


def pad(a, pad_width, value=0.0):
    a = _t(a)
    pad_width = [tuple(p) for p in pad_width]
    out = np.pad(a.data, pad_width, mode="constant", constant_values=value)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _result("pad", out, (a,), lambda g: (g[crop],))


def repeat_stack(a, n):
    """n cópias de a empilhadas num novo eixo 0 (gradiente soma as cópias)."""
    a = _t(a)
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result("repeat_stack", out, (a,), lambda g: (g.sum(axis=0),))

# ==========================================
# 4. ÁLGEBRA LINEAR E NORMALIZAÇÃO
# ==========================================

def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise shape_error("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise shape_error("matmul", a.shape, b.shape) from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ W (+ b), com W na forma [C_in x C_out]."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(x, axis=-1):
    x = _t(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: eixo {axis} inválido para forma {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _result("log_softmax", y, (x,),
                   lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normaliza o último eixo (canais C); ganho/viés opcionais."""
    x = _t(x)
    parents = [x]
    if gain is not None:
        gain = _t(gain)
        parents.append(gain)
    if bias is not None:
        bias = _t(bias)
        parents.append(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        grads = []
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads.append(gx)
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead).reshape(gain.shape))
        if bias is not None:
            grads.append(g.sum(axis=lead).reshape(bias.shape))
        return tuple(grads)

    return _result("layer_norm", out, tuple(parents), bw)

# ==========================================
# 5. CONVOLUÇÕES E POOLING
# ==========================================

def convolve(x, weight, bias=None, stride=1, padding=0):
    """
    Correlação cruzada N-d, canais primeiro.
    x: [B, C_in, *L]; weight: [C_out, C_in, *K]; padding: int ou lista de (lo, hi) por eixo espacial.
    """
    x, weight = _t(x), _t(weight)
    nsp = x.ndim - 2
    if weight.ndim != nsp + 2 or weight.shape[1] != x.shape[1]:
        raise shape_error("convolve", x.shape, weight.shape)
    stride = (stride,) * nsp if isinstance(stride, int) else tuple(stride)
    if isinstance(padding, int):
        padding = [(padding, padding)] * nsp
    padding = [tuple(p) for p in padding]
    kernel = weight.shape[2:]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + padding)
    out_sp = tuple((xp.shape[2 + d] - kernel[d]) // stride[d] + 1 for d in range(nsp))
    if min(out_sp) < 1:
        raise shape_error("convolve", x.shape, weight.shape)

    def window(offs):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + stride[d] * (out_sp[d] - 1) + 1, stride[d]) for d, o in enumerate(offs))

    # im2col: [B, C_in, *out, *K] como visão, um único tensordot
    sp_axes = tuple(range(2, 2 + nsp))
    k_axes = tuple(range(2 + nsp, 2 + 2 * nsp))
    cols = sliding_window_view(xp, kernel, axis=sp_axes)
    cols = cols[(slice(None), slice(None)) + tuple(slice(0, stride[d] * (out_sp[d] - 1) + 1, stride[d])
                                                   for d in range(nsp))]
    acc = np.tensordot(cols, weight.data, axes=((1,) + k_axes, (1,) + sp_axes))
    out = np.moveaxis(acc, -1, 1)
    parents = (x, weight)
    if bias is not None:
        bias = _t(bias)
        out = out + bias.data.reshape((1, -1) + (1,) * nsp)
        parents = (x, weight, bias)

    def bw(g):
        gm = np.moveaxis(g, 1, -1)
        gw = np.tensordot(gm, cols, axes=(tuple(range(nsp + 1)), (0,) + sp_axes))
        gcols = np.tensordot(gm, weight.data, axes=([-1], [0]))
        gxp = np.zeros_like(xp)
        for offs in np.ndindex(*kernel):
            gxp[window(offs)] += np.moveaxis(gcols[(Ellipsis,) + offs], -1, 1)
        crop = (slice(None), slice(None)) + tuple(
            slice(lo, lo + n) for (lo, _), n in zip(padding, x.shape[2:]))
        grads = [gxp[crop], gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(i for i in range(g.ndim) if i != 1)))
        return tuple(grads)

    return _result("convolve", out, parents, bw)


def conv2d_grid(x, weight, bias=None):
    """
    Convolução s×k sobre a grade falante×tempo com padding 'same' (zeros).
    x: [S, T, C_in]; weight: [C_out, C_in, s, k] -> [S, T, C_out].
    """
    x, weight = _t(x), _t(weight)
    s, k = weight.shape[2], weight.shape[3]
    if k % 2 == 0:
        raise ConfigError(f"kernel temporal k={k} precisa ser ímpar (centro indefinido)")
    if x.ndim != 3:
        raise ShapeError(f"conv2d_grid espera [S x T x C], recebeu {x.shape}")
    if s > x.shape[0]:
        raise ConfigError(f"kernel de falantes s={s} maior que S={x.shape[0]}")
    grid = transpose(x, (2, 0, 1)).reshape((1, x.shape[2], x.shape[0], x.shape[1]))
    pads = [((s - 1) // 2, s // 2), ((k - 1) // 2, (k - 1) // 2)]
    out = convolve(grid, weight, bias, stride=1, padding=pads)
    return transpose(out.reshape(out.shape[1:]), (1, 2, 0))


def transposed_conv1d(x, weight, bias=None, stride=2):
    """
    Deconvolução temporal. x: [B, T', C_in] (ou [T', C_in]); weight: [C_in, C_out, K].
    Saída com comprimento exatamente T'·stride (excesso cortado, falta completada com zeros).
    """
    if stride < 1:
        raise ConfigError(f"stride precisa ser >= 1, recebeu {stride}")
    x, weight = _t(x), _t(weight)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[0] != x.shape[2]:
        raise shape_error("transposed_conv1d", x.shape, weight.shape)
    B, Tp, _ = x.shape
    K = weight.shape[2]
    full = max((Tp - 1) * stride + K, Tp * stride)
    out_len = Tp * stride
    acc = np.zeros((B, full, weight.shape[1]))
    for j in range(K):
        acc[:, j:j + stride * (Tp - 1) + 1:stride, :] += x.data @ weight.data[:, :, j]
    out = acc[:, :out_len, :]
    parents = (x, weight)
    if bias is not None:
        bias = _t(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        gfull = np.zeros((B, full, weight.shape[1]))
        gfull[:, :out_len, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for j in range(K):
            gs = gfull[:, j:j + stride * (Tp - 1) + 1:stride, :]
            gx += gs @ weight.data[:, :, j].T
            gw[:, :, j] = np.tensordot(x.data, gs, axes=([0, 1], [0, 1]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)).reshape(bias.shape))
        return tuple(grads)

    out = _result("transposed_conv1d", out, parents, bw)
    return out.reshape(out.shape[1:]) if squeeze else out


def max_pool(x, axes, size=2):
    """Max-pool janela=passo=size nos eixos dados, modo ceil (borda replicada)."""
    x = _t(x)
    nd = x.ndim
    axes = sorted(a % nd for a in axes)
    pads = [(0, 0)] * nd
    for a in axes:
        pads[a] = (0, (-x.shape[a]) % size)
    xp = np.pad(x.data, pads, mode="edge")
    split_shape, win_pos, keep_pos = [], [], []
    for d, n in enumerate(xp.shape):
        if d in axes:
            keep_pos.append(len(split_shape))
            win_pos.append(len(split_shape) + 1)
            split_shape += [n // size, size]
        else:
            keep_pos.append(len(split_shape))
            split_shape.append(n)
    perm = keep_pos + win_pos
    vt = xp.reshape(split_shape).transpose(perm)
    flat = vt.reshape(vt.shape[:nd] + (-1,))
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx, g[..., None], axis=-1)
        gxp = gflat.reshape(vt.shape).transpose(np.argsort(perm)).reshape(xp.shape)
        for a in axes:
            n = x.shape[a]
            if gxp.shape[a] > n:
                extra = np.take(gxp, range(n, gxp.shape[a]), axis=a).sum(axis=a)
                gxp = np.take(gxp, range(n), axis=a).copy()
                last = [slice(None)] * nd
                last[a] = n - 1
                gxp[tuple(last)] += extra
        return (gxp,)

    return _result("max_pool", out, (x,), bw)

# ==========================================
# 6. ATENÇÃO E PERDA
# ==========================================

def multi_head_attention(q, k, v, params, heads, key_bias=None, return_weights=False):
    """
    MHA com projeções aprendidas. q: [B, Tq, C]; k, v: [B, Tk, C].
    params: dict com wq, bq, wk, bk, wv, bv, wo, bo ([C x C] e [C]).
    key_bias: constante aditiva nos scores, broadcast para [B, h, Tq, Tk] (-inf mascara).
    """
    q, k, v = _t(q), _t(k), _t(v)
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"multi_head_attention: formas q={q.shape} k={k.shape} v={v.shape}")
    B, Tq, C = q.shape
    Tk = k.shape[1]
    if C % heads != 0:
        raise ConfigError(f"C={C} não é divisível por heads={heads}")
    d = C // heads

    def split(x, T):
        return transpose(reshape(x, (B, T, heads, d)), (0, 2, 1, 3))

    Q = split(linear(q, params["wq"], params["bq"]), Tq)
    K = split(linear(k, params["wk"], params["bk"]), Tk)
    V = split(linear(v, params["wv"], params["bv"]), Tk)
    scores = matmul(Q, transpose(K, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    if key_bias is not None:
        scores = scores + Tensor(key_bias)
    weights = softmax(scores, axis=-1)
    heads_out = transpose(matmul(weights, V), (0, 2, 1, 3)).reshape((B, Tq, C))
    out = linear(heads_out, params["wo"], params["bo"])
    return (out, weights) if return_weights else out


def cross_entropy(logits, labels):
    """Média sobre frames da NLL da classe verdadeira. logits: [T x 2]; labels: {0,1}^T."""
    logits = _t(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise shape_error("cross_entropy", logits.shape, labels.shape)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise DataError(f"rótulos fora de {{0,1}}: {np.unique(labels)}")
    lab = labels.astype(np.int64)
    T = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(T)
    loss = -lp[rows, lab].mean()

    def bw(g):
        p = np.exp(lp)
        p[rows, lab] -= 1.0
        return (p * (g / T),)

    return _result("cross_entropy", np.asarray(loss), (logits,), bw)

# ==========================================
# 7. OTIMIZADOR (ADAM)
# ==========================================

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def init(cls, params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
                   m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params])


def adam_step(params, state):
    """Atualização Adam com correção de viés; gradiente ausente conta como zero."""
    params = list(params)
    if len(params) != len(state.m):
        raise ConfigError(f"Adam: {len(params)} parâmetros para {len(state.m)} momentos")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ConfigError(f"Adam: forma do parâmetro {p.shape} difere do estado {m.shape}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


class Adam:
    """Parâmetros + AdamState + decaimento de lr por época."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8, decay=1.0):
        self.params = list(params)
        self.state = AdamState.init(self.params, lr, beta1, beta2, epsilon)
        self.decay = decay

    @property
    def lr(self):
        return self.state.lr

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        adam_step(self.params, self.state)

    def end_epoch(self):
        self.state.lr *= self.decay
        return self.state.lr

# ==========================================
# 8. CHECKPOINT ("LCNT")
# ==========================================

MAGIC = b"LCNT"
FORMAT_VERSION = 1


def save_checkpoint(path, named_arrays):
    """Grava pares (nome, array) em f32 little-endian, na ordem recebida."""
    path = Path(path)
    items = named_arrays.items() if hasattr(named_arrays, "items") else named_arrays
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            for name, arr in items:
                arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as e:
        raise CheckpointError(f"Falha ao gravar checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path):
    """Lê o arquivo LCNT -> dict nome -> array f64 (na ordem gravada)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Falha ao ler checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: assinatura inválida (esperado LCNT)")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: cabeçalho truncado")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: versão de formato {version} desconhecida (suportada: {FORMAT_VERSION})")
    out, pos = {}, 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = payload.astype(np.float64).reshape(dims)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: registro truncado ou corrompido ({e})") from e
    return out

# ==========================================
# 9. CHECAGEM NUMÉRICA
# ==========================================

def numeric_gradient(fn, tensor, eps=1e-6):
    """Diferenças centrais de fn() (float) em relação a cada elemento de tensor.data."""
    grad = np.zeros(tensor.shape)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad
