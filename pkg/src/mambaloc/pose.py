"""Pose representation, regression heads, the uncertainty-weighted pose loss
and median-error evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateQuaternion, EmptyDataset, NonUnitQuaternion, ShapeMismatch

Q_EPS = 1e-8
BETA0 = -0.5
GAMMA0 = -6.5


@dataclass
class Pose:
    x: np.ndarray  # (3,)
    q: np.ndarray  # (4,) as (w, x, y, z)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)


def canonicalize_quaternion(q):
    """Flip sign so that w >= 0 (rows of an [..., 4] array)."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q[..., :1] < 0, -q, q)


class LossWeights:
    """Learnable log-variance weights for the translation and rotation terms."""

    def __init__(self, beta=BETA0, gamma=GAMMA0):
        self.beta = T.parameter(np.array(float(beta)), "beta")
        self.gamma = T.parameter(np.array(float(gamma)), "gamma")

    def named_parameters(self, prefix=""):
        return [(prefix + "beta", self.beta), (prefix + "gamma", self.gamma)]


class PoseHead:
    """Linear(C, hidden) -> gelu -> Linear(hidden, k)."""

    def __init__(self, C, hidden, k, rng):
        self.C, self.hidden, self.k = C, hidden, k
        b1, b2 = 1.0 / math.sqrt(C), 1.0 / math.sqrt(hidden)
        self.w1 = T.parameter(rng.uniform(-b1, b1, (C, hidden)))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(rng.uniform(-b2, b2, (hidden, k)))
        self.b2 = T.parameter(np.zeros(k))

    def named_parameters(self, prefix=""):
        return [(prefix + n, getattr(self, n)) for n in ("w1", "b1", "w2", "b2")]

    def __call__(self, G):
        if G.shape[-1] != self.C:
            raise ShapeMismatch(f"head expects width {self.C}, got {G.shape}")
        G = G.reshape(G.shape[0], self.C)
        return T.gelu(G @ self.w1 + self.b1) @ self.w2 + self.b2


def head_param_count(C, hidden, k):
    return C * hidden + hidden + hidden * k + k


def regress_heads(G_x, G_q, head_x, head_q):
    """[B, 1, C] features -> (x_hat [B, 3], q_hat [B, 4])."""
    return head_x(G_x), head_q(G_q)


def normalize_quaternion(q_hat):
    norms = T.l2norm(q_hat, axis=-1, keepdims=True)
    if np.any(norms.data <= Q_EPS):
        raise DegenerateQuaternion(f"predicted quaternion norm <= {Q_EPS}")
    return q_hat / norms


def uncertainty_weighted(res_x, res_q, w_x, w_q):
    """res_x * exp(-w_x) + w_x + res_q * exp(-w_q) + w_q."""
    return res_x * T.exp(-w_x) + w_x + res_q * T.exp(-w_q) + w_q


def pose_loss(x_hat, q_hat, x, q, weights):
    """Batch-mean of the uncertainty-weighted translation + rotation L2 loss."""
    x_hat, q_hat = T.as_tensor(x_hat), T.as_tensor(q_hat)
    x = np.asarray(x, dtype=np.float64).reshape(x_hat.shape)
    q = np.asarray(q, dtype=np.float64).reshape(q_hat.shape)
    res_x = T.l2norm(x_hat - x, axis=-1).mean()
    res_q = T.l2norm(normalize_quaternion(q_hat) - q, axis=-1).mean()
    return uncertainty_weighted(res_x, res_q, weights.beta, weights.gamma)


def rotation_error_deg(q1, q2, tol=1e-6):
    """Angle between rotations in degrees; sign-invariant. Accepts [..., 4]."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    for q in (q1, q2):
        if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > tol):
            raise NonUnitQuaternion("rotation_error_deg expects unit quaternions")
    dot = np.minimum(1.0, np.abs(np.sum(q1 * q2, axis=-1)))
    return np.degrees(2.0 * np.arccos(dot))


def lower_median(values):
    """Median; for an even count the lower of the two middle values."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise EmptyDataset("median of empty sequence")
    return float(v[(v.size - 1) // 2])


@dataclass
class PoseMetrics:
    median_translation_error: float
    median_rotation_error: float
    translation_errors: list = field(default_factory=list)
    rotation_errors: list = field(default_factory=list)

    def to_dict(self, per_frame=False):
        out = {"median_translation_error": self.median_translation_error,
               "median_rotation_error": self.median_rotation_error}
        if per_frame:
            out["translation_errors"] = list(map(float, self.translation_errors))
            out["rotation_errors"] = list(map(float, self.rotation_errors))
        return out


def pose_metrics(x_pred, q_pred, x_true, q_true):
    x_pred = np.asarray(x_pred, dtype=np.float64)
    if x_pred.shape[0] == 0:
        raise EmptyDataset("no frames to evaluate")
    q_pred = np.asarray(q_pred, dtype=np.float64)
    q_pred = q_pred / np.linalg.norm(q_pred, axis=-1, keepdims=True)
    t_err = np.linalg.norm(x_pred - np.asarray(x_true), axis=-1)
    r_err = rotation_error_deg(q_pred, q_true)
    return PoseMetrics(lower_median(t_err), lower_median(r_err), t_err.tolist(), r_err.tolist())


def evaluate(model, dataset, batch_size=64):
    """Median translation / rotation error of ``model.predict`` over ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDataset("evaluation dataset is empty")
    xs, qs = [], []
    for start in range(0, len(dataset), batch_size):
        grids, _, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        x_hat, q_hat = model.predict(grids)
        xs.append(x_hat)
        qs.append(q_hat)
    return pose_metrics(np.concatenate(xs), np.concatenate(qs), dataset.positions, dataset.quaternions)
