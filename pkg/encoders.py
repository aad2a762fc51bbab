import numpy as np

import tensor_core as tc
from layers import Conv, Linear, Module, uniform_init
from utils import ConfigError, ShapeError

# ==========================================
# 1. ENCODER VISUAL
# ==========================================

class ResidualStage(Module):
    """conv3x3 (passo 2) -> ReLU -> conv3x3, atalho 1x1 (passo 2), ReLU na soma."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv1 = self.child("conv1", Conv(c_in, c_out, (3, 3), rng, stride=2, padding=1))
        self.conv2 = self.child("conv2", Conv(c_out, c_out, (3, 3), rng, stride=1, padding=1))
        self.shortcut = self.child("shortcut", Conv(c_in, c_out, (1, 1), rng, stride=2, padding=0))

    def __call__(self, x):
        return tc.relu(self.conv2(tc.relu(self.conv1(x))) + self.shortcut(x))


class TemporalBlock(Module):
    """Bloco V-TCN: conv temporal depthwise (k=3, same) -> ReLU -> pontual, com residual."""

    def __init__(self, c, rng, kernel=3):
        super().__init__()
        self.kernel = kernel
        self.dw = self.param("dw_weight", uniform_init(rng, (kernel, c), kernel))
        self.dw_bias = self.param("dw_bias", np.zeros(c))
        self.pw = self.child("pw", Linear(c, c, rng))

    def __call__(self, x):
        T = x.shape[0]
        half = (self.kernel - 1) // 2
        xp = tc.pad(x, [(half, half), (0, 0)])
        y = self.dw_bias
        for j in range(self.kernel):
            y = y + xp[j:j + T] * self.dw[j]
        return x + self.pw(tc.relu(y))


class VisualEncoder(Module):
    """
    Trilha de face [T x H x W x 1] -> f_v [T x C].
    Conv 3-D (k_t=5, passo espacial 2) -> 4 estágios residuais 2-D -> média espacial -> V-TCN.
    """

    def __init__(self, C, rng, widths=(16, 32, 32), crop=32, tcn_blocks=5):
        super().__init__()
        self.C = C
        self.crop = crop
        stage_widths = list(widths) + [C]
        self.front = self.child("front", Conv(1, stage_widths[0], (5, 3, 3), rng,
                                              stride=(1, 2, 2), padding=[(2, 2), (1, 1), (1, 1)]))
        self.stages = []
        c_in = stage_widths[0]
        for i, c_out in enumerate(stage_widths):
            self.stages.append(self.child(f"stage{i}", ResidualStage(c_in, c_out, rng)))
            c_in = c_out
        self.tcn = [self.child(f"tcn{i}", TemporalBlock(C, rng)) for i in range(tcn_blocks)]

    def encode_visual(self, track):
        track = track if isinstance(track, tc.Tensor) else tc.Tensor(track)
        if track.ndim != 4 or track.shape[1:] != (self.crop, self.crop, 1):
            raise ShapeError(f"trilha visual precisa ser [T x {self.crop} x {self.crop} x 1], recebeu {track.shape}")
        T = track.shape[0]
        x = track.reshape((1, 1, T, self.crop, self.crop))
        x = tc.relu(self.front(x))
        c0, h, w = x.shape[1], x.shape[3], x.shape[4]
        x = tc.transpose(x, (0, 2, 1, 3, 4)).reshape((T, c0, h, w))
        for stage in self.stages:
            x = stage(x)
        x = tc.mean(x, axis=(2, 3))
        for block in self.tcn:
            x = block(x)
        return x

    def encode(self, tracks):
        """Pilha [S x T x H x W x 1] -> [S x T x C]; cada falante é codificado isoladamente."""
        S = tracks.shape[0]
        per = [self.encode_visual(tracks[i]) for i in range(S)]
        return stack(per)

    __call__ = encode


def stack(seqs):
    """Empilha [T x C] em [len x T x C]."""
    T, C = seqs[0].shape
    return tc.concat([s.reshape((1, T, C)) for s in seqs], axis=0)

# ==========================================
# 2. ENCODER DE ÁUDIO (VGGFrame)
# ==========================================

class VGGFrame(Module):
    """
    A [4T x M] -> f_a [T x C].
    Blocos 1-3: conv3x3+ReLU e max-pool 2 (tempo e frequência); bloco 4 sem pool;
    deconv temporal passo 2 sobre o bloco 4, concatenada ao bloco 3 antes do pool.
    """

    def __init__(self, M, C, rng, widths=(32, 64, 128, 128)):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError(f"VGGFrame precisa de 4 larguras, recebeu {widths}")
        self.M = M
        self.C = C
        self.blocks = []
        c_in = 1
        for i, c_out in enumerate(widths):
            self.blocks.append(self.child(f"block{i + 1}", Conv(c_in, c_out, (3, 3), rng, padding=1)))
            c_in = c_out
        self.f3 = _ceil_div(M, 4)
        self.f4 = _ceil_div(M, 8)
        self.deconv = self.param("deconv_weight", uniform_init(rng, (widths[3], widths[3], 2), widths[3] * 2))
        self.deconv_bias = self.param("deconv_bias", np.zeros(widths[3]))
        self.proj = self.child("proj", Linear(widths[2] * self.f3 + widths[3] * self.f4, C, rng))

    def encode_audio_vggframe(self, A, trace=None):
        A = A if isinstance(A, tc.Tensor) else tc.Tensor(A)
        if A.ndim != 2 or A.shape[1] != self.M:
            raise ShapeError(f"espectrograma precisa ser [4T x {self.M}], recebeu {A.shape}")
        rows = A.shape[0]
        if rows == 0 or rows % 4 != 0:
            raise ShapeError(f"linhas do espectrograma ({rows}) não são múltiplo de 4 (alinhamento 4T)")
        x = A.reshape((1, 1, rows, self.M))
        _trace(trace, "input", x)
        tap = None
        for i, conv in enumerate(self.blocks):
            x = tc.relu(conv(x))
            _trace(trace, f"block{i + 1}", x)
            if i == 2:
                tap = x
            if i < 3:
                x = tc.max_pool(x, axes=(2, 3))
                _trace(trace, f"pool{i + 1}", x)
        T = tap.shape[2]
        c4, t4, f4 = x.shape[1], x.shape[2], x.shape[3]
        seq = tc.transpose(x.reshape((c4, t4, f4)), (2, 1, 0))
        up = tc.transposed_conv1d(seq, self.deconv, self.deconv_bias, stride=2)
        _trace(trace, "deconv", up, axis=1)
        up = up[:, :T, :]
        up = tc.transpose(up, (1, 0, 2)).reshape((T, f4 * c4))
        c3, f3 = tap.shape[1], tap.shape[3]
        tap = tc.transpose(tap.reshape((c3, T, f3)), (1, 2, 0)).reshape((T, f3 * c3))
        _trace(trace, "tap", tap, axis=0)
        return self.proj(tc.concat([tap, up], axis=1))

    __call__ = encode_audio_vggframe


def _ceil_div(a, b):
    return -(-a // b)


def _trace(trace, name, x, axis=2):
    if trace is not None:
        trace.append((name, x.shape[axis]))


def length_ladder(T):
    """Comprimentos temporais esperados: 4T -> 2T -> T -> T/2 -> T/2 -> deconv -> T."""
    l1 = 4 * T
    l2 = _ceil_div(l1, 2)
    l3 = _ceil_div(l2, 2)
    l4 = _ceil_div(l3, 2)
    return [("input", l1), ("block1", l1), ("pool1", l2), ("block2", l2), ("pool2", l3),
            ("block3", l3), ("pool3", l4), ("block4", l4), ("deconv", 2 * l4), ("tap", l3)]


def broadcast_audio(f_a, S):
    """Repete f_a [T x C] S vezes -> [S x T x C]."""
    if S < 1:
        raise ConfigError(f"S precisa ser >= 1, recebeu {S}")
    return tc.repeat_stack(f_a, S)
