"""Feature extractor stub, learned 2-D positional encoding and the per-branch
transformer encoder whose token-0 output feeds the GIS block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch


@dataclass
class EncoderConfig:
    n_blocks: int = 6
    n_heads: int = 4
    mlp_ratio: float = 1.0
    dropout: float = 0.1
    C_t: int = 256

    def __post_init__(self):
        if self.C_t % 2:
            raise ValueError(f"C_t must be even, got {self.C_t}")
        if self.C_t % self.n_heads:
            raise ValueError(f"C_t={self.C_t} not divisible by n_heads={self.n_heads}")

    @property
    def mlp_hidden(self):
        return int(round(self.C_t * self.mlp_ratio))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


@dataclass
class ActivationMap:
    data: T.Tensor  # [B, H_m * W_m, C_t], row-major over (i, j)
    H_m: int
    W_m: int

    @property
    def C_t(self):
        return self.data.shape[-1]


class PatchEmbed:
    """Non-overlapping ``stride x stride`` patches, flattened and mapped linearly to C_t."""

    def __init__(self, C_in, C_t, stride, rng):
        self.C_in, self.C_t, self.stride = C_in, C_t, stride
        fan_in = stride * stride * C_in
        self.w = T.parameter(_uniform(rng, fan_in, (fan_in, C_t)), "w")
        self.b = T.parameter(np.zeros(C_t), "b")

    def named_parameters(self, prefix=""):
        return [(prefix + "w", self.w), (prefix + "b", self.b)]

    def __call__(self, grid):
        return backbone_stub(grid, self)


def backbone_stub(grid, embed):
    """[B, H, W, C_in] -> ActivationMap with H/stride x W/stride tokens."""
    grid = T.as_tensor(grid)
    s = embed.stride
    if grid.ndim != 4 or grid.shape[-1] != embed.C_in:
        raise ShapeMismatch(f"backbone expects [B, H, W, {embed.C_in}], got {grid.shape}")
    B, H, W, C = grid.shape
    if H % s or W % s:
        raise ShapeMismatch(f"grid {H}x{W} not divisible by patch stride {s}")
    Hm, Wm = H // s, W // s
    patches = grid.reshape(B, Hm, s, Wm, s, C).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(B, Hm * Wm, s * s * C)
    return ActivationMap(patches @ embed.w + embed.b, Hm, Wm)


class PosEncoding2D:
    """Separable learned encoding; row 0 of each table belongs to the task token."""

    def __init__(self, H_m, W_m, C_t, rng):
        self.H_m, self.W_m, self.C_t = H_m, W_m, C_t
        self.E_x = T.parameter(rng.uniform(0.0, 1.0, (W_m + 1, C_t // 2)), "E_x")
        self.E_y = T.parameter(rng.uniform(0.0, 1.0, (H_m + 1, C_t // 2)), "E_y")

    def named_parameters(self, prefix=""):
        return [(prefix + "E_x", self.E_x), (prefix + "E_y", self.E_y)]

    def indices(self):
        i, j = np.meshgrid(np.arange(1, self.H_m + 1), np.arange(1, self.W_m + 1), indexing="ij")
        return (np.concatenate([[0], i.reshape(-1)]), np.concatenate([[0], j.reshape(-1)]))

    def table(self):
        """[H_m * W_m + 1, C_t]; row 1 + i*W_m + j is concat(E_x[j+1], E_y[i+1])."""
        iy, jx = self.indices()
        return T.concat([T.take(self.E_x, jx), T.take(self.E_y, iy)], axis=-1)


def add_token_and_pos(amap, token, pos):
    if (amap.H_m, amap.W_m, amap.C_t) != (pos.H_m, pos.W_m, pos.C_t) or token.shape != (amap.C_t,):
        raise ShapeMismatch(
            f"map {amap.H_m}x{amap.W_m}x{amap.C_t}, pos {pos.H_m}x{pos.W_m}x{pos.C_t}, token {token.shape}")
    B = amap.data.shape[0]
    tok = token.reshape(1, 1, -1) + np.zeros((B, 1, 1))
    return T.concat([tok, amap.data], axis=1) + pos.table()


class EncoderBlock:
    def __init__(self, cfg, rng):
        C, Hd = cfg.C_t, cfg.mlp_hidden
        self.cfg = cfg
        self.ln1_g = T.parameter(np.ones(C))
        self.ln1_b = T.parameter(np.zeros(C))
        self.wq = T.parameter(_uniform(rng, C, (C, C)))
        self.wk = T.parameter(_uniform(rng, C, (C, C)))
        self.wv = T.parameter(_uniform(rng, C, (C, C)))
        self.wo = T.parameter(_uniform(rng, C, (C, C)))
        self.bq = T.parameter(np.zeros(C))
        self.bk = T.parameter(np.zeros(C))
        self.bv = T.parameter(np.zeros(C))
        self.bo = T.parameter(np.zeros(C))
        self.ln2_g = T.parameter(np.ones(C))
        self.ln2_b = T.parameter(np.zeros(C))
        self.fc1_w = T.parameter(_uniform(rng, C, (C, Hd)))
        self.fc1_b = T.parameter(np.zeros(Hd))
        self.fc2_w = T.parameter(_uniform(rng, Hd, (Hd, C)))
        self.fc2_b = T.parameter(np.zeros(C))

    _NAMES = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")

    def named_parameters(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in self._NAMES]

    def attention(self, x, pos_table):
        """Multi-head self-attention; positions enter queries and keys only."""
        B, S, C = x.shape
        h = self.cfg.n_heads
        dh = C // h
        qk_in = x + pos_table

        def heads(t):
            return t.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        q = heads(qk_in @ self.wq + self.bq)
        k = heads(qk_in @ self.wk + self.bk)
        v = heads(x @ self.wv + self.bv)
        probs = T.softmax(T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(dh)))
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, C)
        return ctx @ self.wo + self.bo, probs

    def __call__(self, x, pos_table, training=False, seed=None, attn_out=None):
        p = self.cfg.dropout
        key = (lambda k: None) if seed is None else (lambda k: (seed[0], seed[1] * 4 + k))
        a, probs = self.attention(T.layernorm(x, self.ln1_g, self.ln1_b), pos_table)
        if attn_out is not None:
            attn_out.append(probs.data)
        x = x + T.dropout(a, p, key(0), training)
        m = T.gelu(T.layernorm(x, self.ln2_g, self.ln2_b) @ self.fc1_w + self.fc1_b)
        m = T.dropout(m, p, key(1), training) @ self.fc2_w + self.fc2_b
        return x + T.dropout(m, p, key(2), training)


class Encoder:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.norm_g = T.parameter(np.ones(cfg.C_t))
        self.norm_b = T.parameter(np.zeros(cfg.C_t))

    def named_parameters(self, prefix=""):
        out = []
        for i, blk in enumerate(self.blocks):
            out += blk.named_parameters(f"{prefix}blocks.{i}.")
        return out + [(prefix + "norm_g", self.norm_g), (prefix + "norm_b", self.norm_b)]

    def __call__(self, seq, pos, training=False, seed=None, attn_out=None):
        return encoder_forward(seq, self, pos, training, seed, attn_out)


def encoder_forward(seq, encoder, pos, training=False, seed=None, attn_out=None):
    """seq [B, S, C_t] -> token-0 output G_in [B, 1, C_t].

    ``seed`` is a (step_seed, site_base) pair keying the dropout masks.
    """
    cfg = encoder.cfg
    if seq.ndim != 3 or seq.shape[-1] != cfg.C_t:
        raise ShapeMismatch(f"encoder expects [B, S, {cfg.C_t}], got {seq.shape}")
    table = pos.table() if isinstance(pos, PosEncoding2D) else T.as_tensor(pos)
    if table.shape != seq.shape[1:]:
        raise ShapeMismatch(f"positional table {table.shape} vs sequence {seq.shape}")
    x = seq
    for i, blk in enumerate(encoder.blocks):
        blk_seed = None if seed is None else (seed[0], seed[1] * 64 + i)
        x = blk(x, table, training, blk_seed, attn_out)
    x = T.layernorm(x, encoder.norm_g, encoder.norm_b)
    return T.slice_dim1(x, 0)
