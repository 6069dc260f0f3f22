"""Synthetic landmark scenes, pinhole feature rendering, pose datasets and the
``poses.txt`` + ``<frame_id>.bin`` on-disk format.

A rendered sample is a feature grid: each landmark in view is projected with a
60 degree pinhole camera and its descriptor is splatted with a Gaussian whose
width shrinks with depth.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BadMagic, FractionOutOfRange, MissingFeatureFile, ParseError
from .pose import Pose, canonicalize_quaternion

MAGIC = b"SLF1"
FOV_DEG = 60.0
NEAR = 0.1
SPARSITY_LEVELS = (1.0, 1 / 2, 1 / 3, 1 / 10, 1 / 20)


@dataclass
class Scene:
    seed: int
    points: np.ndarray       # [n, 3]
    descriptors: np.ndarray  # [n, C_in]
    diameter: float

    @property
    def landmarks(self):
        return list(zip(self.points, self.descriptors))

    @property
    def C_in(self):
        return self.descriptors.shape[1]


@dataclass
class Sample:
    feature_grid: np.ndarray  # [H, W, C_in]
    pose: Pose


def generate_scene(seed, n_landmarks, diameter, C_in=8, detail=0.25, amplitude=0.25):
    """Landmarks uniform in a cube of side ``diameter`` centred at the origin.

    Descriptors vary smoothly with position (random Fourier features) plus
    per-landmark noise of scale ``detail``, so nearby landmarks look alike.
    ``amplitude`` scales all descriptors; overlapping splats sum.
    """
    if n_landmarks < 1:
        raise ValueError(f"need at least one landmark, got {n_landmarks}")
    rng = np.random.default_rng(seed)
    half = diameter / 2.0
    points = rng.uniform(-half, half, (n_landmarks, 3))
    freqs = rng.normal(0.0, 2 * math.pi / diameter, (3, C_in))
    phase = rng.uniform(0.0, 2 * math.pi, C_in)
    desc = math.sqrt(2.0) * np.sin(points @ freqs + phase) + detail * rng.normal(size=(n_landmarks, C_in))
    desc *= amplitude
    return Scene(seed, points, desc, float(diameter))


def look_at(position, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world rotation with camera axes (right, down, forward)."""
    fwd = np.asarray(target, float) - np.asarray(position, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def matrix_to_quat(R):
    xyzw = Rotation.from_matrix(R).as_quat()
    return canonicalize_quaternion(np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1))


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1)).as_matrix()


# Azimuth of the sweep centre. Under the look-at convention above, cameras in
# this half of the circle have canonical quaternions with w well above zero, so
# the w >= 0 sign choice never flips inside the sweep.
SWEEP_CENTER = -math.pi / 2


def orbit_trajectory(n, diameter, seed, loops=3, jitter_deg=4.0, arc_deg=240.0):
    """Camera poses sweeping back and forth along an arc around the scene,
    looking at its centre.

    Azimuth follows a triangle wave over ``arc_deg`` degrees, ``loops`` times
    there and back. Radius and height oscillate at incommensurate rates so the
    sweeps cover a band rather than one curve; each frame gets a small random
    rotation jitter.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n) / n
    wave = 2.0 * np.abs(((loops * t + rng.uniform(0, 1)) % 1.0) - 0.5)  # in [0, 1]
    theta = SWEEP_CENTER + math.radians(arc_deg) * (wave - 0.5)
    radius = diameter * (0.8 + 0.12 * np.sin(2 * math.pi * 7.3 * t + rng.uniform(0, 2 * math.pi)))
    height = diameter * 0.15 * np.sin(2 * math.pi * 5.1 * t + rng.uniform(0, 2 * math.pi))
    pos = np.stack([radius * np.cos(theta), radius * np.sin(theta), height], axis=1)
    jitter = Rotation.from_euler("xyz", rng.uniform(-jitter_deg, jitter_deg, (n, 3)), degrees=True)
    poses = []
    for i in range(n):
        R = look_at(pos[i], (0.0, 0.0, 0.3 * height[i])) @ jitter[i].as_matrix()
        poses.append(Pose(pos[i], matrix_to_quat(R)))
    return poses


def render_features(pose, scene, H, W, noise_sigma=0.0, seed=0, splat_px=0.8):
    """Project landmarks into an H x W grid and splat their descriptors."""
    R = quat_to_matrix(pose.q)
    cam = (scene.points - pose.x) @ R  # rows are R^T (p - c)
    f = (W / 2.0) / math.tan(math.radians(FOV_DEG) / 2.0)
    grid = np.zeros((H * W, scene.C_in))
    z = cam[:, 2]
    front = z > NEAR
    if np.any(front):
        zc = z[front]
        u = f * cam[front, 0] / zc + W / 2.0
        v = f * cam[front, 1] / zc + H / 2.0
        sigma = np.clip(splat_px * (0.8 * scene.diameter) / zc, 0.35, 3.0)
        margin = 3.0 * sigma
        inside = (u > -margin) & (u < W + margin) & (v > -margin) & (v < H + margin)
        if np.any(inside):
            u, v, sigma = u[inside], v[inside], sigma[inside]
            py, px = np.mgrid[0:H, 0:W]
            px = px.reshape(-1) + 0.5
            py = py.reshape(-1) + 0.5
            d2 = (px[None, :] - u[:, None]) ** 2 + (py[None, :] - v[:, None]) ** 2
            weights = np.exp(-d2 / (2 * sigma[:, None] ** 2))
            grid = weights.T @ scene.descriptors[front][inside]
    grid = grid.reshape(H, W, scene.C_in)
    if noise_sigma > 0:
        grid = grid + np.random.default_rng(seed).normal(0.0, noise_sigma, grid.shape)
    return Sample(grid, pose)


class SceneDataset:
    """Feature grids plus poses, stored as stacked arrays.

    Views produced by ``subsample_uniform`` and ``split_tail`` slice the
    arrays and so share memory with their parent.
    """

    def __init__(self, grids, positions, quaternions, frame_ids=None):
        self.grids = grids
        self.positions = positions
        self.quaternions = quaternions
        n = grids.shape[0]
        if positions.shape != (n, 3) or quaternions.shape != (n, 4):
            raise ValueError("grids, positions and quaternions disagree on frame count")
        self.frame_ids = list(frame_ids) if frame_ids is not None else [f"frame-{i:06d}" for i in range(n)]

    @classmethod
    def from_samples(cls, samples, frame_ids=None):
        grids = np.stack([s.feature_grid for s in samples])
        pos = np.stack([s.pose.x for s in samples])
        quat = np.stack([s.pose.q for s in samples])
        return cls(grids, pos, quat, frame_ids)

    def __len__(self):
        return self.grids.shape[0]

    def __getitem__(self, i):
        return Sample(self.grids[i], Pose(self.positions[i], self.quaternions[i]))

    @property
    def grid_shape(self):
        return self.grids.shape[1:]

    def view(self, sl):
        return SceneDataset(self.grids[sl], self.positions[sl], self.quaternions[sl], self.frame_ids[sl])

    def split_tail(self, fraction):
        """(head, tail) with the last ``fraction`` of frames in the tail."""
        n_tail = int(round(len(self) * fraction))
        if len(self) > 1:
            n_tail = min(max(n_tail, 1), len(self) - 1)
        cut = len(self) - n_tail
        return self.view(slice(0, cut)), self.view(slice(cut, None))

    def batch(self, indices, crop=None, rng=None, noise_sigma=0.0):
        """Gather frames; optionally crop to ``crop=(H, W)`` (random if ``rng``, else centred)
        and add Gaussian noise."""
        indices = np.asarray(indices)
        grids = self.grids[indices]
        if crop is not None:
            grids = crop_grids(grids, crop, rng)
        if noise_sigma > 0 and rng is not None:
            grids = grids + rng.normal(0.0, noise_sigma, grids.shape)
        return grids, self.positions[indices], self.quaternions[indices]


def crop_grids(grids, crop, rng=None):
    H, W = crop
    gh, gw = grids.shape[1:3]
    if (gh, gw) == (H, W):
        return grids
    if gh < H or gw < W:
        raise ValueError(f"cannot crop {gh}x{gw} grids to {H}x{W}")
    if rng is None:
        top, left = (gh - H) // 2, (gw - W) // 2
    else:
        top, left = int(rng.integers(0, gh - H + 1)), int(rng.integers(0, gw - W + 1))
    return grids[:, top:top + H, left:left + W]


def synthesize(scene, poses, H, W, noise_sigma=0.0, seed=0, prefix="frame"):
    samples = [render_features(p, scene, H, W, noise_sigma, seed=(seed, i)) for i, p in enumerate(poses)]
    return SceneDataset.from_samples(samples, [f"{prefix}-{i:06d}" for i in range(len(samples))])


def subsample_uniform(dataset, fraction):
    """Keep frames 0, s, 2s, ... with s = round(1 / fraction)."""
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"fraction must be in (0, 1], got {fraction}")
    stride = max(1, int(round(1.0 / fraction)))
    return dataset.view(slice(None, None, stride))


# -- on-disk format ----------------------------------------------------------

def write_feature_file(path, grid):
    H, W, C = grid.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", H, W, C))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_feature_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {blob[:4]!r}")
    H, W, C = struct.unpack("<III", blob[4:16])
    body = blob[16:]
    if len(body) != H * W * C * 4:
        raise ParseError(f"{path}: payload is {len(body)} bytes, header says {H}x{W}x{C} f32")
    return np.frombuffer(body, dtype="<f4").reshape(H, W, C).astype(np.float64)


def save_dataset(root, dataset):
    os.makedirs(root, exist_ok=True)
    lines = []
    for i, fid in enumerate(dataset.frame_ids):
        x, q = dataset.positions[i], dataset.quaternions[i]
        lines.append(" ".join([fid] + [repr(float(v)) for v in (*x, *q)]))
        write_feature_file(os.path.join(root, f"{fid}.bin"), dataset.grids[i])
    with open(os.path.join(root, "poses.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(root, canonicalize=True, q_tol=1e-3):
    path = os.path.join(root, "poses.txt")
    ids, pos, quat = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", lineno)
            try:
                vals = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite pose value", lineno)
            q = vals[3:]
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > q_tol:
                raise ParseError(f"quaternion norm {norm:.6f} deviates from 1 by more than {q_tol}", lineno)
            q = q / norm
            ids.append(parts[0])
            pos.append(vals[:3])
            quat.append(canonicalize_quaternion(q) if canonicalize else q)
    on_disk = {f[:-4] for f in os.listdir(root) if f.endswith(".bin")}
    missing = [fid for fid in ids if fid not in on_disk]
    if missing:
        raise MissingFeatureFile(f"no feature file for frame {missing[0]!r} ({len(missing)} missing)")
    if len(on_disk) != len(ids):
        raise ParseError(f"{len(ids)} pose records but {len(on_disk)} feature files")
    grids = np.stack([read_feature_file(os.path.join(root, f"{fid}.bin")) for fid in ids]) if ids else np.zeros((0, 1, 1, 1))
    return SceneDataset(grids, np.array(pos).reshape(-1, 3), np.array(quat).reshape(-1, 4), ids)
