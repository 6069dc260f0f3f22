"""Hybrid distillation losses: hard pose loss, temperature-softened KL on the
pose outputs, and cosine feature matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateFeature
from .pose import BETA0, GAMMA0, uncertainty_weighted

TEMPERATURE = 10.0


@dataclass
class DistillConfig:
    T: float = TEMPERATURE
    beta_soft0: float = BETA0
    gamma_soft0: float = GAMMA0
    kl_direction: str = "teacher_student"  # KL(p_teacher || p_student); "student_teacher" reverses

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError(f"temperature must be positive, got {self.T}")
        if self.kl_direction not in ("teacher_student", "student_teacher"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")


class SoftWeights:
    def __init__(self, beta=BETA0, gamma=GAMMA0):
        self.beta = T.parameter(np.array(float(beta)), "beta_soft")
        self.gamma = T.parameter(np.array(float(gamma)), "gamma_soft")

    def named_parameters(self, prefix=""):
        return [(prefix + "beta_soft", self.beta), (prefix + "gamma_soft", self.gamma)]


def kl_temperature(y_s, y_t, temperature=TEMPERATURE, direction="teacher_student"):
    """T^2 * KL between softmax(y / T) distributions, summed over the last axis
    and averaged over rows. The teacher side never receives gradient."""
    y_s = T.as_tensor(y_s)
    y_t = T.as_tensor(y_t).detach()
    log_ps = T.logsoftmax(T.scale(y_s, 1.0 / temperature))
    log_pt = T.logsoftmax(T.scale(y_t, 1.0 / temperature))
    if direction == "teacher_student":
        kl = T.exp(log_pt) * (log_pt - log_ps)
    else:
        kl = T.exp(log_ps) * (log_ps - log_pt)
    rows = max(1, int(np.prod(y_s.shape[:-1])))
    return T.scale(kl.sum(), temperature ** 2 / rows)


def soft_loss(x_s, q_s, x_t, q_t, weights, temperature=TEMPERATURE, direction="teacher_student"):
    kl_x = kl_temperature(x_s, x_t, temperature, direction)
    kl_q = kl_temperature(q_s, q_t, temperature, direction)
    return uncertainty_weighted(kl_x, kl_q, weights.beta, weights.gamma)


def feature_loss(ft, fs):
    """1 - mean over rows of cos(ft_b, fs_b); ``ft`` is the (frozen) teacher side."""
    ft = T.as_tensor(ft).detach()
    fs = T.as_tensor(fs)
    nt = T.l2norm(ft, axis=-1)
    ns = T.l2norm(fs, axis=-1)
    if np.any(nt.data <= 1e-12) or np.any(ns.data <= 1e-12):
        raise DegenerateFeature("zero-norm feature row")
    cos = (ft * fs).sum(axis=-1) / (nt * ns)
    return 1.0 - cos.mean()


def distill_total(hard, soft, feat):
    return hard + soft + feat


class FeatureBridge:
    """Fixed random projection from student feature width to teacher width."""

    def __init__(self, d_student, d_teacher, seed=0):
        rng = np.random.default_rng(seed)
        self.matrix = T.Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_student), (d_student, d_teacher)))
        self.identity = d_student == d_teacher

    def __call__(self, fs):
        return fs if self.identity else fs @ self.matrix
