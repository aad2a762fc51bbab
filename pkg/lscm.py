from dataclasses import dataclass

import numpy as np

import tensor_core as tc
from layers import MLP, ConvGrid, LayerNorm, Linear, Module, MultiHeadAttention
from utils import ConfigError, DataError, UsageError

SIM_KINDS = ("convolution", "window_attention")


@dataclass
class LSCMConfig:
    N: int = 3
    S: int = 3
    T: int = 64
    C: int = 64
    heads: int = 4
    k: int = 7
    s: int = 3
    sim_kind: str = "convolution"
    mlp_ratio: int = 4
    use_lim: bool = True
    use_sim: bool = True
    use_pe: bool = True

    def validate(self):
        if self.N < 0:
            raise ConfigError(f"N precisa ser >= 0, recebeu {self.N}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"k={self.k} precisa ser ímpar (centro indefinido)")
        if not 1 <= self.s <= self.S:
            raise ConfigError(f"s={self.s} precisa estar em [1, S={self.S}]")
        if self.C % self.heads != 0:
            raise ConfigError(f"C={self.C} não é divisível por heads={self.heads}")
        if self.sim_kind not in SIM_KINDS:
            raise ConfigError(f"sim_kind desconhecido: {self.sim_kind} (opções: {SIM_KINDS})")
        return self


@dataclass
class ContextState:
    u_v: tc.Tensor
    u_a: tc.Tensor
    block_index: int = 0

# ==========================================
# 1. LIM (atenção intra-falante)
# ==========================================

class SelfAttentionLayer(Module):
    """Pós-norma: y = LN(MHA(u,u,u) + u); saída = LN(MLP(y) + y). S faz papel de batch."""

    def __init__(self, C, heads, hidden, rng):
        super().__init__()
        self.mha = self.child("mha", MultiHeadAttention(C, heads, rng))
        self.ln1 = self.child("ln1", LayerNorm(C))
        self.mlp = self.child("mlp", MLP(C, hidden, rng))
        self.ln2 = self.child("ln2", LayerNorm(C))

    def __call__(self, query, context=None):
        context = query if context is None else context
        y = self.ln1(self.mha(query, context, context) + query)
        return self.ln2(self.mlp(y) + y)


# mesma estrutura; consulta de uma modalidade, chave/valor da outra
CrossAttentionLayer = SelfAttentionLayer


def lim_self_attention(u, layer):
    return layer(u)


def lim_cross_attention(u_v, u_a, layer_v, layer_a):
    """û_v consulta ũ_a e û_a consulta ũ_v, com parâmetros separados."""
    return layer_v(u_v, u_a), layer_a(u_a, u_v)

# ==========================================
# 2. SIM (inter-falante, curto prazo)
# ==========================================

class SIMConv(Module):
    """u = MLP(LN(Conv_{s×k}(û))) + û, padding zero em falantes e tempo."""

    def __init__(self, C, s, k, hidden, rng):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"k={k} precisa ser ímpar")
        self.conv = self.child("conv", ConvGrid(C, C, s, k, rng))
        self.ln = self.child("ln", LayerNorm(C))
        self.mlp = self.child("mlp", MLP(C, hidden, rng))

    def __call__(self, u):
        return self.mlp(self.ln(self.conv(u))) + u


class SIMWindowAttention(Module):
    """Atenção em janelas não sobrepostas de k frames × s falantes, no lugar da convolução."""

    def __init__(self, C, heads, s, k, hidden, rng):
        super().__init__()
        self.s = s
        self.k = k
        self.attn = self.child("attn", MultiHeadAttention(C, heads, rng))
        self.ln = self.child("ln", LayerNorm(C))
        self.mlp = self.child("mlp", MLP(C, hidden, rng))

    def windows(self, S, T):
        s, k = self.s, self.k
        G, W = -(-S // s), -(-T // k)
        valid = np.zeros((G, s, W, k), dtype=bool)
        valid[:, :, :, :] = ((np.arange(G)[:, None] * s + np.arange(s)[None, :]) < S)[:, :, None, None]
        valid &= ((np.arange(W)[:, None] * k + np.arange(k)[None, :]) < T)[None, None, :, :]
        return G, W, valid

    def __call__(self, u):
        S, T, C = u.shape
        s, k = self.s, self.k
        G, W, valid = self.windows(S, T)
        up = tc.pad(u, [(0, G * s - S), (0, W * k - T), (0, 0)])
        tokens = tc.transpose(up.reshape((G, s, W, k, C)), (0, 2, 1, 3, 4)).reshape((G * W, s * k, C))
        mask = valid.transpose(0, 2, 1, 3).reshape(G * W, 1, 1, s * k)
        key_bias = np.where(mask, 0.0, -np.inf)
        att = self.attn(tokens, tokens, tokens, key_bias=key_bias)
        att = tc.transpose(att.reshape((G, W, s, k, C)), (0, 2, 1, 3, 4)).reshape((G * s, W * k, C))
        att = att[:S, :T]
        return self.mlp(self.ln(att)) + u


def sim_forward(u, module):
    return module(u)


def sim_window_attention(u, module):
    return module(u)

# ==========================================
# 3. PILHA LSCM + CABEÇA COMPARTILHADA
# ==========================================

def sinusoidal_positional_encoding(T, C):
    pos = np.arange(T)[:, None]
    i = np.arange(C)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / C)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class LSCMBlock(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        hidden = cfg.mlp_ratio * cfg.C
        self.cfg = cfg
        if cfg.use_lim:
            self.self_v = self.child("self_v", SelfAttentionLayer(cfg.C, cfg.heads, hidden, rng))
            self.self_a = self.child("self_a", SelfAttentionLayer(cfg.C, cfg.heads, hidden, rng))
            self.cross_v = self.child("cross_v", CrossAttentionLayer(cfg.C, cfg.heads, hidden, rng))
            self.cross_a = self.child("cross_a", CrossAttentionLayer(cfg.C, cfg.heads, hidden, rng))
        if cfg.use_sim:
            if cfg.sim_kind == "convolution":
                self.sim_v = self.child("sim_v", SIMConv(cfg.C, cfg.s, cfg.k, hidden, rng))
                self.sim_a = self.child("sim_a", SIMConv(cfg.C, cfg.s, cfg.k, hidden, rng))
            else:
                self.sim_v = self.child("sim_v", SIMWindowAttention(cfg.C, cfg.heads, cfg.s, cfg.k, hidden, rng))
                self.sim_a = self.child("sim_a", SIMWindowAttention(cfg.C, cfg.heads, cfg.s, cfg.k, hidden, rng))

    def __call__(self, u_v, u_a):
        if self.cfg.use_lim:
            u_v = lim_self_attention(u_v, self.self_v)
            u_a = lim_self_attention(u_a, self.self_a)
            u_v, u_a = lim_cross_attention(u_v, u_a, self.cross_v, self.cross_a)
        if self.cfg.use_sim:
            u_v = self.sim_v(u_v)
            u_a = self.sim_a(u_a)
        return u_v, u_a


class LSCM(Module):
    """
    N blocos (LIM -> SIM) nos dois fluxos e uma cabeça FC única para todos os blocos.

    A cabeça começa com pesos e bias zerados: todo bloco emite logits [0, 0] e a
    perda inicial é exatamente max(N, 1)·ln 2. As demais camadas lineares e convoluções
    usam uniforme(±1/√fan_in).
    """

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg.validate()
        self.blocks = [self.child(f"block{i}", LSCMBlock(cfg, rng)) for i in range(cfg.N)]
        self.head = self.child("head", Linear(2 * cfg.C, 2, rng))
        self.head.weight.data[...] = 0.0

    def classify(self, u_v, u_a):
        """Logits [T x 2] do falante-alvo (índice 0) a partir de concat(u_a, u_v)."""
        return self.head(tc.concat([u_a[0], u_v[0]], axis=-1))

    def forward(self, f_v, f_a):
        if f_v.shape != f_a.shape or f_v.ndim != 3:
            raise DataError(f"f_v {f_v.shape} e f_a {f_a.shape} precisam ser [S x T x C] iguais")
        if not self.blocks:
            return ContextState(f_v, f_a, 0), [self.classify(f_v, f_a)]
        u_v, u_a = f_v, f_a
        if self.cfg.use_pe:
            pe = tc.Tensor(sinusoidal_positional_encoding(f_v.shape[1], f_v.shape[2]))
            u_v, u_a = u_v + pe, u_a + pe
        logits = []
        for block in self.blocks:
            u_v, u_a = block(u_v, u_a)
            logits.append(self.classify(u_v, u_a))
        return ContextState(u_v, u_a, len(self.blocks)), logits

    __call__ = forward


def lscm_forward(f_v, f_a, lscm):
    return lscm.forward(f_v, f_a)


def loss(logits, labels):
    """L = Σ_i CE(R̂^i, R), média sobre frames dentro de cada bloco."""
    if not logits:
        raise UsageError("loss precisa de pelo menos um array de logits")
    labels = np.asarray(labels)
    T = logits[0].shape[0]
    if labels.shape != (T,):
        raise DataError(f"rótulos com forma {labels.shape}, esperado ({T},)")
    total = tc.cross_entropy(logits[0], labels)
    for lg in logits[1:]:
        total = total + tc.cross_entropy(lg, labels)
    return total
