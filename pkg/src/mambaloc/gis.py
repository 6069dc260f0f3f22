"""Global Information Selector: one selective-SSM layer with SiLU gating,
applied to the pooled encoder token and its channel-reversed copy.

Modes:
    bidirectional  [flip(G), G] is scanned as a length-2 sequence
    classical      G alone is scanned as a length-1 sequence
    off            identity (the no-Mamba ablation arm)
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ModeError, ShapeMismatch
from .ssm import DEFAULT_CHUNK, SsmParams, discretize, scan_chunked, selectivity, ssm_param_count

MODES = ("bidirectional", "classical", "off")
COMBINE = ("slice", "sum", "mean")

# trainer-facing aliases
MODE_ALIASES = {"gis": "bidirectional", "bidirectional": "bidirectional",
                "classical": "classical", "off": "off"}


class GisBlock:
    def __init__(self, D, N=16, mode="bidirectional", combine="slice", dt_rank="auto",
                 chunk=DEFAULT_CHUNK, rng=None, skip=True):
        if mode not in MODE_ALIASES:
            raise ModeError(f"unknown GIS mode {mode!r}")
        if combine not in COMBINE:
            raise ValueError(f"combine must be one of {COMBINE}, got {combine!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.D = D
        self.mode = MODE_ALIASES[mode]
        self.combine = combine
        self.chunk = chunk
        bound = 1.0 / math.sqrt(D)
        self.in_w = T.parameter(rng.uniform(-bound, bound, (D, 2 * D)), "in_proj.w")
        self.in_b = T.parameter(np.zeros(2 * D), "in_proj.b")
        self.ssm = SsmParams.init(D, N, dt_rank=dt_rank, rng=rng)
        self.out_w = T.parameter(rng.uniform(-bound, bound, (D, D)), "out_proj.w")
        self.out_b = T.parameter(np.zeros(D), "out_proj.b")
        self.skip = T.parameter(np.ones(D), "ssm.D") if skip else None

    def named_parameters(self, prefix=""):
        if self.mode == "off":
            return []
        named = [(prefix + "in_proj.w", self.in_w), (prefix + "in_proj.b", self.in_b),
                 *self.ssm.named_parameters(prefix + "ssm.")]
        if self.skip is not None:
            named.append((prefix + "ssm.D", self.skip))
        return named + [(prefix + "out_proj.w", self.out_w), (prefix + "out_proj.b", self.out_b)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, G_in, training=False):
        if self.mode == "off":
            return G_in
        if self.mode == "classical":
            return gis_classical_forward(G_in, self, training)
        return gis_forward(G_in, self, training)


def gis_param_count(D, N=16, dt_rank="auto", skip=True):
    return D * 2 * D + 2 * D + ssm_param_count(D, N, dt_rank) + D * D + D + (D if skip else 0)


def _check_input(G_in, block):
    if G_in.ndim != 3 or G_in.shape[1] != 1 or G_in.shape[2] != block.D:
        raise ShapeMismatch(f"GIS expects [B, 1, {block.D}], got {G_in.shape}")


def _gated_ssm(seq, block):
    proj = seq @ block.in_w + block.in_b
    D = block.D
    hidden = proj[:, :, :D]
    gate = proj[:, :, D:]
    B_sel, C_sel, delta = selectivity(hidden, block.ssm)
    sys = discretize(delta, block.ssm.A(), B_sel, C_sel)
    y = scan_chunked(sys, hidden, block.chunk)
    if block.skip is not None:
        # per-channel feed-through; without it the output starts ~delta times smaller than the input
        y = y + hidden * block.skip
    return (y * T.silu(gate)) @ block.out_w + block.out_b


def gis_forward(G_in, block, training=False):
    """Bidirectional GIS on G_in [B, 1, D] -> [B, 1, D]."""
    if block.mode == "off":
        raise ModeError("mode 'off' is an identity short-circuit; call the block instead")
    _check_input(G_in, block)
    G_concat = T.concat_dim1(T.flip_last_dim(G_in), G_in)
    out = _gated_ssm(G_concat, block)
    if block.combine == "slice":
        return T.slice_dim1(out, 1)
    total = out.sum(axis=1, keepdims=True)
    return total if block.combine == "sum" else T.scale(total, 0.5)


def gis_classical_forward(G_in, block, training=False):
    """Same gated SSM without the flip/concat: a length-1 sequence."""
    if block.mode == "off":
        raise ModeError("mode 'off' is an identity short-circuit; call the block instead")
    _check_input(G_in, block)
    return _gated_ssm(G_in, block)
