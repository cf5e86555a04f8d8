"""Dual-branch segmentation network: configuration, parameters and forward pass."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .cic import (DEFAULT_TAU, SIGMA_FLOOR, DistributionHead, FeatureDistribution, PairedSites,
                  cic_loss, distribution_head, pair_sites, reparameterize)
from .errors import ConfigurationError, EmptyInputError
from .fusion import (AttentionParams, Projection, concat_features, global_fuse, local_fuse,
                     m_projection)
from .lidar_io import IGNORE_LABEL, PointCloud
from .rangeview import build_ref_encoder, ref_encoder_forward, spherical_project
from .rng import STREAM_INIT, make_rng
from .sparsevoxel import build_geo_encoder, devoxelize, geo_encoder_forward, voxelize

log = logging.getLogger(__name__)

# Ablation rows: name -> flag overrides.
ABLATIONS = {
    "gb": dict(geometry_only=True, reflectance_add_only=False, use_cic=False,
               use_local_fusion=False, use_global_fusion=False),
    "gb+rb": dict(geometry_only=False, reflectance_add_only=True, use_cic=False,
                  use_local_fusion=False, use_global_fusion=False),
    "+cic": dict(geometry_only=False, reflectance_add_only=True, use_cic=True,
                 use_local_fusion=False, use_global_fusion=False),
    "+lf": dict(geometry_only=False, reflectance_add_only=False, use_cic=True,
                use_local_fusion=True, use_global_fusion=False),
    "+gf": dict(geometry_only=False, reflectance_add_only=False, use_cic=True,
                use_local_fusion=True, use_global_fusion=True),
    "full": dict(geometry_only=False, reflectance_add_only=False, use_cic=True,
                 use_local_fusion=True, use_global_fusion=True),
    # single branch fed coordinates and reflectance together
    "unified": dict(geometry_only=True, unified_input=True, reflectance_add_only=False,
                    use_cic=False, use_local_fusion=False, use_global_fusion=False),
}


@dataclass
class ModelConfig:
    n_classes: int = 5
    voxel_size: float = 0.05
    geo_channels: tuple = (3, 16, 16, 32, 32)
    geo_strides: tuple = (1, 2, 1, 2)
    range_h: int = 64
    range_w: int = 512
    fov_up: float = 3.0
    fov_down: float = -25.0
    ref_channels: tuple = (2, 16, 16, 32, 32)
    ref_strides: tuple = (2, 1, 2, 1)
    expansion: int = 2
    n_queries: int = 8
    heads: int = 4
    decoder_hidden: int = 32
    skip_connection: bool = True
    beta: float = 0.01
    tau: float = DEFAULT_TAU
    sigma_floor: float = SIGMA_FLOOR
    ignore_label: int = IGNORE_LABEL
    geometry_only: bool = False
    reflectance_add_only: bool = False
    use_cic: bool = True
    use_local_fusion: bool = True
    use_global_fusion: bool = True
    unified_input: bool = False

    def __post_init__(self):
        self.geo_channels = tuple(self.geo_channels)
        self.geo_strides = tuple(self.geo_strides)
        self.ref_channels = tuple(self.ref_channels)
        self.ref_strides = tuple(self.ref_strides)

    @classmethod
    def for_ablation(cls, name, **overrides):
        if name not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        kw = dict(ABLATIONS[name])
        if kw.get("unified_input"):
            kw["geo_channels"] = (4,) + tuple(overrides.pop("geo_channels", cls.geo_channels))[1:]
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        if math.isinf(d["tau"]):
            d["tau"] = "inf"
        return d

    @property
    def width(self):
        return self.geo_channels[-1]

    @property
    def ablation(self):
        for name, flags in ABLATIONS.items():
            if all(getattr(self, k) == v for k, v in flags.items()) and name != "+gf":
                if self.unified_input == bool(flags.get("unified_input", False)):
                    return name
        return "custom"

    def validate(self):
        if isinstance(self.tau, str):
            self.tau = float(self.tau)
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.voxel_size <= 0:
            raise ConfigurationError("voxel_size must be positive")
        want_in = 4 if self.unified_input else 3
        if self.geo_channels[0] != want_in:
            raise ConfigurationError(f"geometric input width must be {want_in}")
        if len(self.geo_channels) != len(self.geo_strides) + 1:
            raise ConfigurationError("geo_channels must have one more entry than geo_strides")
        if self.unified_input and not self.geometry_only:
            raise ConfigurationError("unified_input is a single-branch configuration")
        if self.geometry_only:
            if self.use_cic or self.use_local_fusion or self.use_global_fusion or self.reflectance_add_only:
                raise ConfigurationError("geometry_only excludes every reflectance-dependent stage")
            return self
        if len(self.ref_channels) != len(self.ref_strides) + 1 or self.ref_channels[0] != 2:
            raise ConfigurationError("ref_channels must start at 2 and match ref_strides")
        if self.ref_channels[-1] != self.width:
            raise ConfigurationError("both encoders must end at the same width")
        if self.use_global_fusion and not self.use_local_fusion:
            raise ConfigurationError("global fusion requires the local fusion path")
        if self.use_local_fusion and not self.use_cic:
            raise ConfigurationError("local fusion needs the distribution heads (use_cic)")
        if self.reflectance_add_only == self.use_local_fusion:
            raise ConfigurationError("choose exactly one of additive fusion or local fusion")
        if self.width % self.heads:
            raise ConfigurationError("encoder width must be divisible by the head count")
        factor = int(np.prod(self.ref_strides))
        if self.range_h % factor or self.range_w % factor:
            raise ConfigurationError("range image size must be divisible by the total reflectance stride")
        if self.n_queries < 1:
            raise ConfigurationError("need at least one global query")
        return self


@dataclass
class ForwardResult:
    logits: DiffTensor
    cic: DiffTensor | None
    diagnostics: dict = field(default_factory=dict)


class GRCNet:
    """Parameters plus forward pass for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = make_rng(seed, STREAM_INIT)
        c = cfg.width
        self.geo_blocks = build_geo_encoder(cfg.geo_channels, cfg.geo_strides, rng)
        self.ref_blocks = None
        self.heads = None
        if not cfg.geometry_only:
            self.ref_blocks = build_ref_encoder(cfg.ref_channels, cfg.ref_strides, cfg.expansion, rng)
        if cfg.use_cic:
            self.heads = {b: DistributionHead.init(c, c, rng, cfg.sigma_floor) for b in ("geo", "ref")}
        if cfg.use_global_fusion:
            self.proj = {b: Projection.identity(c) for b in ("geo", "ref")}
            self.queries = ad.parameter(rng.normal(0, 1.0 / np.sqrt(c), (cfg.n_queries, c)))
            self.attn = {s: AttentionParams.init(c, cfg.heads, rng) for s in ("stage1", "stage2")}
        fused = 2 * c if cfg.use_global_fusion else c
        d_in = fused + (cfg.geo_channels[1] if cfg.skip_connection else 0)
        hid = cfg.decoder_hidden
        self.dec_w1 = ad.parameter(rng.normal(0, np.sqrt(2.0 / d_in), (d_in, hid)))
        self.dec_b1 = ad.parameter(np.zeros(hid))
        self.dec_w2 = ad.parameter(rng.normal(0, np.sqrt(1.0 / hid), (hid, cfg.n_classes)))
        self.dec_b2 = ad.parameter(np.zeros(cfg.n_classes))
        for name, p in self.parameters().items():
            p.name = name

    # ---------------------------------------------------------- state access
    def parameters(self) -> dict:
        out = {}
        for i, b in enumerate(self.geo_blocks):
            out.update(b.parameters(f"geo.{i}."))
        if self.ref_blocks:
            for i, b in enumerate(self.ref_blocks):
                out.update(b.parameters(f"ref.{i}."))
        if self.heads:
            for k, h in self.heads.items():
                out.update(h.parameters(f"head.{k}."))
        if self.cfg.use_global_fusion:
            for k, p in self.proj.items():
                out.update(p.parameters(f"proj.{k}."))
            out["queries"] = self.queries
            for k, a in self.attn.items():
                out.update(a.parameters(f"attn.{k}."))
        out.update({"dec.w1": self.dec_w1, "dec.b1": self.dec_b1,
                    "dec.w2": self.dec_w2, "dec.b2": self.dec_b2})
        return out

    def buffers(self) -> dict:
        out = {}
        for i, b in enumerate(self.geo_blocks):
            out.update(b.buffers(f"geo.{i}."))
        return out

    def state_dict(self) -> dict:
        state = {k: v.data for k, v in self.parameters().items()}
        state.update({f"buffer.{k}": v for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict):
        params = self.parameters()
        missing = [k for k in params if k not in state]
        if missing:
            raise ConfigurationError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigurationError(f"parameter {k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for i, b in enumerate(self.geo_blocks):
            if b.norm:
                b.running_mean = np.array(state[f"buffer.geo.{i}.running_mean"])
                b.running_var = np.array(state[f"buffer.geo.{i}.running_var"])

    # --------------------------------------------------------------- forward
    def forward(self, cloud: PointCloud, train=False, rng=None, update_stats=None) -> ForwardResult:
        """Per-point logits.

        ``train`` draws reparameterization noise from ``rng``; otherwise the
        noise is zero and the pass is a pure function of weights and input.
        Running normalization statistics update only when ``update_stats``
        (default: ``train``).
        """
        cfg = self.cfg
        if len(cloud) == 0:
            raise EmptyInputError("cannot segment an empty cloud")
        update_stats = train if update_stats is None else update_stats
        n = len(cloud)
        grid0 = voxelize(cloud.xyz, cfg.voxel_size, cloud.reflectance if cfg.unified_input else None)
        geo, levels = geo_encoder_forward(grid0, self.geo_blocks, train=update_stats, return_levels=True)
        diag = {"points": n, "voxels_in": len(grid0), "voxels_out": len(geo), "pairs": 0}
        V, c = len(geo), cfg.width
        cic = None

        if cfg.geometry_only:
            fused = geo.features
        else:
            img = spherical_project(cloud, cfg.range_h, cfg.range_w, cfg.fov_up, cfg.fov_down)
            ref = ref_encoder_forward(img, self.ref_blocks)
            cells = ref.features.shape[0] * ref.features.shape[1]
            f_ref = ad.reshape(ref.features, (cells, c))
            pairs = pair_sites(geo, img, ref)
            diag["pairs"] = len(pairs)
            degraded = len(pairs) == 0
            if degraded:
                log.warning("no voxel falls inside the range view; using the geometric path alone")
            diag["degraded"] = degraded
            # cell index per voxel, -1 where unpaired
            cell_of = np.full(V, -1, dtype=np.int64)
            cell_of[pairs.voxel_rows] = pairs.cells
            paired = cell_of >= 0

            if cfg.use_cic:
                d_geo = distribution_head(geo.features, self.heads["geo"])
                d_ref = distribution_head(f_ref, self.heads["ref"])
                if train:
                    if rng is None:
                        raise ValueError("training forward needs an rng for reparameterization noise")
                    m_geo = reparameterize(d_geo, rng.standard_normal(d_geo.mu.shape))
                    m_ref = reparameterize(d_ref, rng.standard_normal(d_ref.mu.shape))
                else:
                    m_geo, m_ref = d_geo.mu, d_ref.mu
                cic = cic_loss(pairs, d_geo, d_ref, cfg.tau)
            else:
                m_geo, m_ref = geo.features, f_ref

            if cfg.reflectance_add_only:
                fused = m_geo + ad.gather_rows(m_ref, cell_of)
            else:
                ref_at = d_ref.rows(np.where(paired, cell_of, 0))
                fused = local_fuse(d_geo, ref_at, paired)
                diag["alpha_mean"] = float(_alpha_mean(d_geo, ref_at, paired))
                if cfg.use_global_fusion:
                    cell_valid = ref.cell_mask.reshape(-1)
                    if degraded or not cell_valid.any():
                        glob = ad.tensor(np.zeros((V, c)))
                    else:
                        M_geo = m_projection(m_geo, self.proj["geo"])
                        M_ref = m_projection(m_ref, self.proj["ref"])
                        glob = global_fuse(M_geo, M_ref, self.queries, self.attn["stage1"],
                                           self.attn["stage2"], cell_valid)
                    fused = concat_features(fused, glob)

        per_point = devoxelize(geo.with_features(fused), n)
        if cfg.skip_connection:
            per_point = ad.concat([per_point, devoxelize(levels[0], n)], axis=-1)
        h = ad.relu(ad.matmul(per_point, self.dec_w1) + self.dec_b1)
        logits = ad.matmul(h, self.dec_w2) + self.dec_b2
        return ForwardResult(logits, cic, diag)

    __call__ = forward

    def predict(self, cloud: PointCloud) -> np.ndarray:
        return self.forward(cloud).logits.data.argmax(axis=1)


def _alpha_mean(d_geo, ref_at, paired):
    if not paired.any():
        return 1.0
    sg = d_geo.sigma.data.mean(axis=-1)[paired]
    sr = ref_at.sigma.data.mean(axis=-1)[paired]
    a, b = 1.0 / sg, 1.0 / sr
    m = np.maximum(a, b)
    return float(np.mean(np.exp(a - m) / (np.exp(a - m) + np.exp(b - m))))
