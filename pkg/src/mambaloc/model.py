"""MambaLoc assembly: shared-input patch stubs, two encoder branches, one GIS
block per branch and the two pose heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import crop_grids
from .encoder import Encoder, EncoderConfig, PatchEmbed, PosEncoding2D, add_token_and_pos, encoder_forward
from .gis import MODE_ALIASES, GisBlock
from .pose import LossWeights, PoseHead, regress_heads


@dataclass
class ModelConfig:
    grid_hw: tuple = (16, 16)
    C_in: int = 8
    orient_stride: int = 4
    pos_stride_ratio: int = 2
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_hidden: int = 1024
    d_state: int = 16
    dt_rank: object = "auto"
    gis_mode: str = "gis"
    gis_combine: str = "slice"
    gis_skip: bool = True
    scan_chunk: int = 64

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.grid_hw = tuple(self.grid_hw)
        if self.gis_mode not in MODE_ALIASES:
            raise ValueError(f"unknown gis_mode {self.gis_mode!r}")

    @property
    def C_t(self):
        return self.encoder.C_t

    @property
    def pos_stride(self):
        return self.orient_stride * self.pos_stride_ratio

    @classmethod
    def toy(cls, **kw):
        """Full-width model: C_t = 256, six blocks per branch, 256 -> 1024 heads."""
        return cls(encoder=EncoderConfig(n_blocks=6, n_heads=4, mlp_ratio=1.0, dropout=0.1, C_t=256),
                   head_hidden=1024, **kw)

    @classmethod
    def desk(cls, **kw):
        """Reduced model used for multi-run sweeps on a single CPU core."""
        return cls(encoder=EncoderConfig(n_blocks=2, n_heads=2, mlp_ratio=2.0, dropout=0.1, C_t=32),
                   head_hidden=128, **kw)

    @classmethod
    def preset(cls, name, **kw):
        try:
            return {"toy": cls.toy, "desk": cls.desk}[name](**kw)
        except KeyError:
            raise ValueError(f"unknown model preset {name!r}") from None

    def student(self):
        """Same architecture at half channel width; head width scaled alike."""
        enc = replace(self.encoder, C_t=self.C_t // 2)
        return replace(self, encoder=enc, head_hidden=self.head_hidden // 2)

    def to_dict(self):
        return asdict(self)


class Branch:
    def __init__(self, cfg, stride, k_out, rng):
        H, W = cfg.grid_hw
        self.embed = PatchEmbed(cfg.C_in, cfg.C_t, stride, rng)
        self.token = T.parameter(rng.normal(0.0, 0.02, cfg.C_t), "token")
        self.pos = PosEncoding2D(H // stride, W // stride, cfg.C_t, rng)
        self.encoder = Encoder(cfg.encoder, rng)
        self.gis = GisBlock(cfg.C_t, cfg.d_state, mode=cfg.gis_mode, combine=cfg.gis_combine,
                            dt_rank=cfg.dt_rank, chunk=cfg.scan_chunk, rng=rng, skip=cfg.gis_skip)
        self.head = PoseHead(cfg.C_t, cfg.head_hidden, k_out, rng)

    def named_parameters(self, prefix=""):
        return (self.embed.named_parameters(prefix + "embed.")
                + [(prefix + "token", self.token)]
                + self.pos.named_parameters(prefix + "pos.")
                + self.encoder.named_parameters(prefix + "encoder.")
                + self.gis.named_parameters(prefix + "gis.")
                + self.head.named_parameters(prefix + "head."))

    def global_feature(self, grids, training, seed, site):
        amap = self.embed(grids)
        seq = add_token_and_pos(amap, self.token, self.pos)
        enc_seed = None if seed is None else (seed, site)
        G_in = encoder_forward(seq, self.encoder, self.pos, training, enc_seed)
        return self.gis(G_in, training)


class MambaLoc:
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or ModelConfig.toy()
        H, W = self.cfg.grid_hw
        for s in (self.cfg.orient_stride, self.cfg.pos_stride):
            if H % s or W % s:
                raise ValueError(f"grid {H}x{W} not divisible by stride {s}")
        rng = np.random.default_rng(seed)
        self.position = Branch(self.cfg, self.cfg.pos_stride, 3, rng)
        self.orientation = Branch(self.cfg, self.cfg.orient_stride, 4, rng)
        self.loss_weights = LossWeights()

    def named_parameters(self):
        return (self.position.named_parameters("position.")
                + self.orientation.named_parameters("orientation.")
                + self.loss_weights.named_parameters("loss."))

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def n_parameters(self, include_loss_weights=False):
        return sum(p.size for n, p in self.named_parameters()
                   if include_loss_weights or not n.startswith("loss."))

    def _prepare(self, grids):
        grids = np.asarray(grids, dtype=np.float64)
        return crop_grids(grids, self.cfg.grid_hw)

    def forward(self, grids, training=False, step_seed=None):
        """grids [B, H, W, C_in] -> (x_hat [B, 3], q_hat [B, 4], feature [B, 2*C_t]).

        ``feature`` concatenates the two post-GIS global features.
        """
        grids = self._prepare(grids)
        seed = step_seed if training else None
        G_x = self.position.global_feature(grids, training, seed, 1)
        G_q = self.orientation.global_feature(grids, training, seed, 2)
        x_hat, q_hat = regress_heads(G_x, G_q, self.position.head, self.orientation.head)
        B = G_x.shape[0]
        feature = T.concat([G_x.reshape(B, -1), G_q.reshape(B, -1)], axis=-1)
        return x_hat, q_hat, feature

    __call__ = forward

    def predict(self, grids):
        with T.no_grad():
            x_hat, q_hat, _ = self.forward(grids, training=False)
        return x_hat.data, q_hat.data

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:3]}...")
        for n, p in params.items():
            if p.data.shape != state[n].shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.data.shape}")
            p.data[...] = state[n]

    def save(self, path):
        np.savez(path, **self.state_dict())

    def load(self, path):
        with np.load(path) as f:
            self.load_state_dict({k: f[k] for k in f.files})

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
