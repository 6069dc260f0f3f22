"""Training, evaluation and the experiment drivers (ablation, sparse sweep,
distillation, scan benchmark)."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import generate_scene, load_dataset, orbit_trajectory, subsample_uniform, synthesize
from .distill import DistillConfig, FeatureBridge, SoftWeights, distill_total, feature_loss, soft_loss
from .errors import ConfigError, NonFiniteLoss
from .gis import gis_param_count
from .model import MambaLoc, ModelConfig
from .optim import Adam
from .pose import evaluate, pose_loss
from .ssm import SsmParams, discretize, scan_chunked, scan_sequential, selectivity

log = logging.getLogger(__name__)

GIS_MODES = ("gis", "classical", "off")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10
    batch: int = 8
    max_epochs: int = 600
    lr_decay_every: int = 100
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    early_stop_patience: int = 5
    seed: int = 0
    gis_mode: str = "gis"
    sparsity: float = 1.0
    preset: str = "toy"
    # data
    data_dir: str = ""
    scene_seed: int = 42
    n_landmarks: int = 800
    diameter: float = 10.0
    n_train: int = 500
    n_test: int = 200
    grid: int = 16
    render_margin: int = 1
    C_in: int = 8
    render_noise: float = 0.02
    augment: bool = True
    aug_noise: float = 0.02
    train_traj_seed: int = 1
    test_traj_seed: int = 2
    val_fraction: float = 0.2
    canonicalize: bool = True
    # reporting
    threshold_factor: float = 1.2
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.gis_mode not in GIS_MODES:
            raise ConfigError(f"gis_mode must be one of {GIS_MODES}, got {self.gis_mode!r}")
        if self.preset not in ("toy", "desk"):
            raise ConfigError(f"preset must be 'toy' or 'desk', got {self.preset!r}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigError(f"sparsity must be in (0, 1], got {self.sparsity}")
        for name in ("lr", "eps", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch", "max_epochs", "lr_decay_every", "n_train", "n_test", "grid"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")

    def model_config(self):
        return ModelConfig.preset(self.preset, grid_hw=(self.grid, self.grid), C_in=self.C_in,
                                  gis_mode=self.gis_mode)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string or typed values, e.g. a parsed key=value file."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            if "/" in raw:
                num, den = raw.split("/")
                return float(num) / float(den)
            return float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


def parse_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def lr_at(cfg, epoch):
    """Step schedule; ``epoch`` counts from 1."""
    return cfg.lr * cfg.lr_decay_factor ** ((epoch - 1) // cfg.lr_decay_every)


@dataclass
class RunRecord:
    config: dict
    model_config: dict
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    epochs_to_threshold: int | None = None
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    n_parameters: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        """Write JSON atomically (temp file + rename)."""
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


# -- data --------------------------------------------------------------------

def make_splits(cfg):
    """(train, test) datasets, loaded from ``data_dir/{train,test}`` or synthesised."""
    if cfg.data_dir:
        return (load_dataset(os.path.join(cfg.data_dir, "train"), cfg.canonicalize),
                load_dataset(os.path.join(cfg.data_dir, "test"), cfg.canonicalize))
    scene = generate_scene(cfg.scene_seed, cfg.n_landmarks, cfg.diameter, C_in=cfg.C_in)
    size = cfg.grid + 2 * cfg.render_margin
    train = synthesize(scene, orbit_trajectory(cfg.n_train, cfg.diameter, cfg.train_traj_seed),
                       size, size, cfg.render_noise, seed=cfg.train_traj_seed, prefix="train")
    test = synthesize(scene, orbit_trajectory(cfg.n_test, cfg.diameter, cfg.test_traj_seed),
                      size, size, cfg.render_noise, seed=cfg.test_traj_seed, prefix="test")
    return train, test


def train_val_split(cfg, train_full):
    sparse = subsample_uniform(train_full, cfg.sparsity)
    return sparse.split_tail(cfg.val_fraction)


# -- the loop ----------------------------------------------------------------

def batch_loss(model, grids, x, q, training, step_seed=None):
    x_hat, q_hat, _ = model.forward(grids, training=training, step_seed=step_seed)
    return pose_loss(x_hat, q_hat, x, q, model.loss_weights)


def dataset_loss(loss_fn, dataset, crop, batch_size=64):
    total = 0.0
    with T.no_grad():
        for s in range(0, len(dataset), batch_size):
            idx = np.arange(s, min(s + batch_size, len(dataset)))
            grids, x, q = dataset.batch(idx, crop=crop)
            total += loss_fn(grids, x, q, False, None).item() * len(idx)
    return total / len(dataset)


class EarlyStopping:
    """Stop once the monitored value fails to beat its running minimum for
    more than ``patience`` consecutive epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, value):
        """Returns (improved, stop)."""
        if value < self.best:
            self.best, self.bad = value, 0
            return True, False
        self.bad += 1
        return False, self.bad > self.patience


def fit(cfg, params, loss_fn, train, val, crop, record, on_improve):
    """Generic Adam loop with the step schedule and patience-based early stop.

    ``loss_fn(grids, x, q, training, step_seed)`` returns a scalar Tensor.
    ``on_improve()`` is called whenever the validation loss reaches a new low.
    """
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    stopper = EarlyStopping(cfg.early_stop_patience)
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at(cfg, epoch)
        perm = rng.permutation(len(train))
        running = 0.0
        for s in range(0, len(train), cfg.batch):
            idx = perm[s:s + cfg.batch]
            aug = rng if cfg.augment else None
            grids, x, q = train.batch(idx, crop=crop, rng=aug, noise_sigma=cfg.aug_noise if aug else 0.0)
            opt.zero_grad()
            step += 1
            loss = loss_fn(grids, x, q, True, cfg.seed * 10_000_000 + step)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLoss(epoch, step, value)
            loss.backward()
            opt.step(lr)
            running += value * len(idx)
        record.train_losses.append(running / len(train))
        val_loss = dataset_loss(loss_fn, val, crop)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(epoch, step, val_loss)
        record.val_losses.append(val_loss)
        record.epochs_run = epoch
        log.debug("epoch %d lr %.1e train %.4f val %.4f", epoch, lr, record.train_losses[-1], val_loss)
        improved, stop = stopper.update(val_loss)
        if improved:
            record.best_epoch = epoch
            on_improve()
        if stop:
            record.stopped_early = True
            break
    return record


def fit_model(cfg, splits=None, model=None):
    """Train a MambaLoc model; returns (RunRecord, model with best-validation weights)."""
    t0 = time.perf_counter()
    train_full, test = splits if splits is not None else make_splits(cfg)
    train, val = train_val_split(cfg, train_full)
    mcfg = cfg.model_config()
    model = model or MambaLoc(mcfg, seed=cfg.seed)
    record = RunRecord(config=cfg.to_dict(), model_config=mcfg.to_dict(),
                       n_parameters=model.n_parameters())
    best_state = {}

    def snapshot():
        best_state.update(model.state_dict())

    def loss_fn(grids, x, q, training, step_seed):
        return batch_loss(model, grids, x, q, training, step_seed)

    fit(cfg, model.parameters(), loss_fn, train, val, mcfg.grid_hw, record, snapshot)
    model.load_state_dict(best_state)
    record.metrics = evaluate(model, test).to_dict()
    record.extra.update(n_train=len(train), n_val=len(val), n_test=len(test),
                        gis_parameters=gis_param_count(mcfg.C_t, mcfg.d_state, mcfg.dt_rank)
                        if cfg.gis_mode != "off" else 0)
    record.wall_time = time.perf_counter() - t0
    return record, model


def train(cfg, splits=None):
    record, model = fit_model(cfg, splits)
    if cfg.out:
        record.save(os.path.join(cfg.out, "run.json"))
        model.save(os.path.join(cfg.out, "weights.npz"))
    return record


def evaluate_weights(cfg, weights_path, splits=None):
    _, test = splits if splits is not None else make_splits(cfg)
    model = MambaLoc(cfg.model_config(), seed=cfg.seed)
    model.load(weights_path)
    return evaluate(model, test)


# -- experiment drivers ------------------------------------------------------

def epochs_to_threshold(val_losses, threshold):
    for i, v in enumerate(val_losses, start=1):
        if v <= threshold:
            return i
    return None


def loss_threshold(best, factor):
    """factor x best for positive losses; for negative ones the same relative slack upward."""
    return best + (factor - 1.0) * abs(best)


def ablate(cfg, splits=None):
    """Train the gis / classical / off arms on identical data and seed."""
    splits = splits if splits is not None else make_splits(cfg)
    records = {mode: train(cfg.replace(gis_mode=mode, out=os.path.join(cfg.out, mode) if cfg.out else ""),
                           splits)
               for mode in GIS_MODES}
    threshold = loss_threshold(min(records["off"].val_losses), cfg.threshold_factor)
    for rec in records.values():
        rec.epochs_to_threshold = epochs_to_threshold(rec.val_losses, threshold)
        rec.extra["loss_threshold"] = threshold
    return records


def ablation_table(records):
    lines = [f"{'arm':<10} {'params':>9} {'epochs':>6} {'to_thr':>6} {'t_err':>8} {'r_err':>8} {'time_s':>8}"]
    for mode, r in records.items():
        lines.append(f"{mode:<10} {r.n_parameters:>9d} {r.epochs_run:>6d} "
                     f"{str(r.epochs_to_threshold):>6} {r.metrics['median_translation_error']:>8.4f} "
                     f"{r.metrics['median_rotation_error']:>8.3f} {r.wall_time:>8.1f}")
    return "\n".join(lines)


def sparse_sweep(cfg, fractions=(1.0, 1 / 10, 1 / 20), arms=("gis",), splits=None):
    """One run per (arm, fraction); adds the translation-error degradation factor vs fraction 1."""
    splits = splits if splits is not None else make_splits(cfg)
    if 1.0 not in fractions:
        fractions = (1.0,) + tuple(fractions)
    out = {}
    for arm in arms:
        out[arm] = {}
        for f in fractions:
            sub = os.path.join(cfg.out, f"{arm}_f{f:.4f}") if cfg.out else ""
            out[arm][f] = train(cfg.replace(gis_mode=arm, sparsity=f, out=sub), splits)
        base = out[arm][1.0].metrics["median_translation_error"]
        for f, rec in out[arm].items():
            rec.extra["degradation"] = rec.metrics["median_translation_error"] / base
    return out


def distill(cfg, teacher, splits=None, dcfg=None):
    """Distil a frozen teacher into a half-width student with hard + soft + feature losses."""
    t0 = time.perf_counter()
    dcfg = dcfg or DistillConfig()
    train_full, test = splits if splits is not None else make_splits(cfg)
    train_set, val = train_val_split(cfg, train_full)
    teacher.freeze()
    scfg = teacher.cfg.student()
    student = MambaLoc(scfg, seed=cfg.seed + 1)
    soft_w = SoftWeights(dcfg.beta_soft0, dcfg.gamma_soft0)
    bridge = FeatureBridge(2 * scfg.C_t, 2 * teacher.cfg.C_t, seed=cfg.seed)
    record = RunRecord(config=cfg.to_dict(), model_config=scfg.to_dict(),
                       n_parameters=student.n_parameters())
    record.extra["distill"] = dataclasses.asdict(dcfg)
    best_state = {}

    def snapshot():
        best_state.update(student.state_dict())

    def loss_fn(grids, x, q, training, step_seed):
        with T.no_grad():
            x_t, q_t, f_t = teacher.forward(grids, training=False)
        x_s, q_s, f_s = student.forward(grids, training=training, step_seed=step_seed)
        hard = pose_loss(x_s, q_s, x, q, student.loss_weights)
        soft = soft_loss(x_s, q_s, x_t, q_t, soft_w, dcfg.T, dcfg.kl_direction)
        feat = feature_loss(f_t, bridge(f_s))
        return distill_total(hard, soft, feat)

    params = student.parameters() + [soft_w.beta, soft_w.gamma]
    fit(cfg, params, loss_fn, train_set, val, scfg.grid_hw, record, snapshot)
    student.load_state_dict(best_state)
    record.metrics = evaluate(student, test).to_dict()
    record.extra["teacher_metrics"] = evaluate(teacher, test).to_dict()
    record.wall_time = time.perf_counter() - t0
    if cfg.out:
        record.save(os.path.join(cfg.out, "distill.json"))
        student.save(os.path.join(cfg.out, "student.npz"))
    return record, student


def _random_system(rng, B, L, D, N):
    x = rng.normal(size=(B, L, D))
    params = SsmParams.init(D, N, rng=rng)
    with T.no_grad():
        B_sel, C_sel, delta = selectivity(T.Tensor(x), params)
        sys = discretize(delta, params.A(), B_sel, C_sel)
    return sys, T.Tensor(x)


def bench_scan(L_list=(256, 1024, 4096, 16384), D=32, N=16, B=1, reps=5, chunk=64, seed=0,
               with_sequential=True):
    """Time the scans over sequence lengths; returns rows and log-log fits."""
    if reps < 5:
        raise ValueError("reps must be >= 5")
    rng = np.random.default_rng(seed)
    rows = []
    for L in L_list:
        sys, x = _random_system(rng, B, L, D, N)
        kernels = {"chunked": lambda: scan_chunked(sys, x, chunk)}
        if with_sequential:
            kernels["sequential"] = lambda: scan_sequential(sys, x)
        outs = {}
        with T.no_grad():
            for name, fn in kernels.items():
                outs[name] = fn().data  # warm-up, discarded
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - t0)
                rows.append({"kernel": name, "L": L, "mean": float(np.mean(times)),
                             "std": float(np.std(times)), "D": D, "N": N, "B": B})
        if with_sequential:
            rows[-1]["max_abs_diff"] = rows[-2]["max_abs_diff"] = float(
                np.max(np.abs(outs["chunked"] - outs["sequential"])))
        del sys, x, outs
    fits = {name: loglog_fit([r["L"] for r in rows if r["kernel"] == name],
                             [r["mean"] for r in rows if r["kernel"] == name])
            for name in {r["kernel"] for r in rows}}
    return rows, fits


def loglog_fit(xs, ys):
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    pred = slope * lx + icpt
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    return {"slope": float(slope), "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0}


def bench_csv(rows):
    head = "kernel,L,mean,std"
    return "\n".join([head] + [f"{r['kernel']},{r['L']},{r['mean']:.6e},{r['std']:.6e}" for r in rows]) + "\n"
