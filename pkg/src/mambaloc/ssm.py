"""Selective state-space layer: initialisation, input-dependent projections,
zero-order-hold discretisation and the discrete scan.

The state update per channel ``d`` and state slot ``n`` is

    h[t] = Abar[t] * h[t-1] + Bbar[t] * x[t],     y[t] = sum_n C[t, n] * h[t, n]

with ``h[-1] = 0``. ``A`` is diagonal per channel (a D x N array) and kept
strictly negative by storing ``A_log = log(-A)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeMismatch
from .tensor import Tensor

DEFAULT_CHUNK = 64


def hippo_init(D, N):
    """Diagonal real HiPPO-style initialisation: ``A[d, n] = -(n + 1)``.

    Returns the stored ``A_log`` buffer (log of ``-A``), identical across channels.
    """
    if D < 1 or N < 1:
        raise ValueError(f"need D >= 1 and N >= 1, got D={D}, N={N}")
    return np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))


def dt_rank_for(D, dt_rank="auto"):
    if dt_rank == "auto":
        return max(1, D // 16)
    r = int(dt_rank)
    if r < 1:
        raise ValueError(f"dt_rank must be >= 1, got {dt_rank}")
    return r


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


class SsmParams:
    """Learnable parameters of one selective SSM over ``D`` channels."""

    def __init__(self, A_log, W_B, W_C, W_dt_down, W_dt_up, dt_bias):
        self.A_log = A_log
        self.W_B = W_B
        self.W_C = W_C
        self.W_dt_down = W_dt_down
        self.W_dt_up = W_dt_up
        self.dt_bias = dt_bias
        D, N = A_log.shape
        R = W_dt_down.shape[1]
        expected = {"W_B": (D, N), "W_C": (D, N), "W_dt_down": (D, R),
                    "W_dt_up": (R, D), "dt_bias": (D,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {getattr(self, name).shape}")

    @classmethod
    def init(cls, D, N=16, dt_rank="auto", rng=None, dt_min=1e-3, dt_max=1e-1):
        rng = np.random.default_rng(0) if rng is None else rng
        R = dt_rank_for(D, dt_rank)
        bound = 1.0 / math.sqrt(D)
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=D))
        return cls(
            A_log=T.parameter(hippo_init(D, N), "A_log"),
            W_B=T.parameter(rng.uniform(-bound, bound, (D, N)), "W_B"),
            W_C=T.parameter(rng.uniform(-bound, bound, (D, N)), "W_C"),
            W_dt_down=T.parameter(rng.uniform(-bound, bound, (D, R)), "W_dt_down"),
            W_dt_up=T.parameter(rng.uniform(-R ** -0.5, R ** -0.5, (R, D)), "W_dt_up"),
            dt_bias=T.parameter(_inv_softplus(dt), "dt_bias"),
        )

    @property
    def D(self):
        return self.A_log.shape[0]

    @property
    def N(self):
        return self.A_log.shape[1]

    @property
    def rank(self):
        return self.W_dt_down.shape[1]

    def A(self):
        return -T.exp(self.A_log)

    def parameters(self):
        return [self.A_log, self.W_B, self.W_C, self.W_dt_down, self.W_dt_up, self.dt_bias]

    def named_parameters(self, prefix=""):
        names = ["A_log", "W_B", "W_C", "W_dt_down", "W_dt_up", "dt_bias"]
        return [(prefix + n, getattr(self, n)) for n in names]


def ssm_param_count(D, N=16, dt_rank="auto"):
    R = dt_rank_for(D, dt_rank)
    return D * N * 3 + D * R * 2 + D


@dataclass
class DiscretizedSystem:
    Abar: Tensor   # [B, L, D, N]
    Bbar: Tensor   # [B, L, D, N]
    C: Tensor | None = None  # [B, L, N]

    @property
    def shape(self):
        return self.Abar.shape


def selectivity(x, params):
    """Input-dependent (B, C, delta) from ``x`` of shape [B, L, D]."""
    if x.ndim != 3 or x.shape[-1] != params.D:
        raise ShapeMismatch(f"selectivity: x {x.shape} does not match D={params.D}")
    B_sel = x @ params.W_B
    C_sel = x @ params.W_C
    delta = T.softplus((x @ params.W_dt_down) @ params.W_dt_up + params.dt_bias)
    return B_sel, C_sel, delta


def discretize(delta, A, B_sel, C=None):
    """Zero-order hold: Abar = exp(delta*A), Bbar = (exp(delta*A) - 1)/(delta*A) * delta * B."""
    delta, A, B_sel = T.as_tensor(delta), T.as_tensor(A), T.as_tensor(B_sel)
    if np.any(delta.data <= 0):
        raise DomainError("discretize needs delta > 0 everywhere")
    if delta.ndim != 3 or A.ndim != 2 or B_sel.ndim != 3:
        raise ShapeMismatch(f"discretize: delta {delta.shape}, A {A.shape}, B {B_sel.shape}")
    b, l, d = delta.shape
    n = A.shape[1]
    if A.shape[0] != d or B_sel.shape != (b, l, n):
        raise ShapeMismatch(f"discretize: delta {delta.shape}, A {A.shape}, B {B_sel.shape}")
    dt = delta.reshape(b, l, d, 1)
    dA = dt * A
    Abar = T.exp(dA)
    Bbar = T.expm1_ratio(dA) * dt * B_sel.reshape(b, l, 1, n)
    return DiscretizedSystem(Abar, Bbar, None if C is None else T.as_tensor(C))


# -- recurrence kernels (numpy) ---------------------------------------------

def compose(p, q):
    """Associative composition of affine maps h -> a*h + b, applying p first."""
    a1, b1 = p
    a2, b2 = q
    return a1 * a2, a2 * b1 + b2


def _recurrence_sequential(a, u):
    Bn, L = a.shape[:2]
    h = np.empty_like(u)
    state = np.zeros((Bn,) + u.shape[2:])
    for t in range(L):
        state = a[:, t] * state + u[:, t]
        h[:, t] = state
    return h


def _recurrence_chunked(a, u, chunk):
    Bn, L = a.shape[:2]
    if chunk >= L:
        return _recurrence_sequential(a, u)
    rest = a.shape[2:]
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        # pad with the identity map (a=1, b=0)
        a = np.concatenate([a, np.ones((Bn, pad) + rest)], axis=1)
        u = np.concatenate([u, np.zeros((Bn, pad) + rest)], axis=1)
    a = a.reshape((Bn, nc, chunk) + rest)
    u = u.reshape((Bn, nc, chunk) + rest)

    # local scans from zero state, all chunks at once
    local = np.empty_like(u)
    decay = np.empty_like(a)
    s = np.zeros((Bn, nc) + rest)
    p = np.ones((Bn, nc) + rest)
    for t in range(chunk):
        s = a[:, :, t] * s + u[:, :, t]
        p = p * a[:, :, t]
        local[:, :, t] = s
        decay[:, :, t] = p

    # carry the boundary state across chunks
    carry_in = np.empty((Bn, nc) + rest)
    acc = (np.ones((Bn,) + rest), np.zeros((Bn,) + rest))
    for k in range(nc):
        carry_in[:, k] = acc[1]
        acc = compose(acc, (decay[:, k, -1], local[:, k, -1]))
    h = local + decay * carry_in[:, :, None]
    return h.reshape((Bn, nc * chunk) + rest)[:, :L]


def _recurrence(a, u, chunk):
    return _recurrence_sequential(a, u) if chunk is None else _recurrence_chunked(a, u, chunk)


def _check_scan_shapes(sys, x):
    if sys.C is None:
        raise ShapeMismatch("scan needs a DiscretizedSystem carrying C")
    b, l, d, n = sys.Abar.shape
    if sys.Bbar.shape != (b, l, d, n) or sys.C.shape != (b, l, n) or x.shape != (b, l, d):
        raise ShapeMismatch(
            f"scan: Abar {sys.Abar.shape}, Bbar {sys.Bbar.shape}, C {sys.C.shape}, x {x.shape}")


def _scan(sys, x, chunk, op, return_states):
    x = T.as_tensor(x)
    _check_scan_shapes(sys, x)
    a, bb, c, xd = sys.Abar.data, sys.Bbar.data, sys.C.data, x.data
    h = _recurrence(a, bb * xd[..., None], chunk)
    y = np.einsum("bldn,bln->bld", h, c)

    def bw(gy):
        g_state = gy[..., None] * c[:, :, None, :]
        a_next = np.concatenate([a[:, 1:], np.zeros_like(a[:, :1])], axis=1)
        dh = _recurrence(a_next[:, ::-1], g_state[:, ::-1], chunk)[:, ::-1]
        h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        return (dh * h_prev,
                dh * xd[..., None],
                np.einsum("bld,bldn->bln", gy, h),
                (dh * bb).sum(axis=-1))

    out = Tensor._make(y, (sys.Abar, sys.Bbar, sys.C, x), bw, op)
    return (out, h) if return_states else out


def scan_sequential(sys, x, return_states=False):
    """Reference scan, one time step at a time. ``x`` is [B, L, D]."""
    return _scan(sys, x, None, "scan_sequential", return_states)


def scan_chunked(sys, x, chunk=DEFAULT_CHUNK, return_states=False):
    """Chunked scan: local scans per chunk plus an associative carry between chunks.

    Matches ``scan_sequential`` to rounding; with ``chunk >= L`` it runs the
    sequential kernel itself.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    return _scan(sys, x, int(chunk), "scan_chunked", return_states)


def selective_ssm(x, params, chunk=DEFAULT_CHUNK):
    """selectivity -> discretize -> scan on ``x`` of shape [B, L, D]."""
    B_sel, C_sel, delta = selectivity(x, params)
    sys = discretize(delta, params.A(), B_sel, C_sel)
    return scan_chunked(sys, x, chunk)
