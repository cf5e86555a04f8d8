"""Local (uncertainty-weighted) and global (query-mediated attention) fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .cic import FeatureDistribution
from .errors import DegenerateAttentionError, DimensionError


def fusion_weight(sigma_bar_geo: DiffTensor, sigma_bar_ref: DiffTensor) -> DiffTensor:
    """alpha = e^(1/sg) / (e^(1/sg) + e^(1/sr)), as a max-shifted two-way softmax."""
    a = 1.0 / ad.constant(sigma_bar_geo)
    b = 1.0 / ad.constant(sigma_bar_ref)
    shift = np.maximum(a.data, b.data)
    ea = ad.exp(a - shift)
    eb = ad.exp(b - shift)
    return ea / (ea + eb)


def local_fuse(geo: FeatureDistribution, ref: FeatureDistribution, paired=None) -> DiffTensor:
    """alpha * mu_geo + (1 - alpha) * mu_ref with alpha from channel-mean sigmas.

    Works on single sites (``[c]``) or row batches (``[N, c]``).  Rows where
    ``paired`` is False take mu_geo unchanged.
    """
    if geo.mu.shape != ref.mu.shape:
        raise DimensionError(f"geometric {geo.mu.shape} and reflectance {ref.mu.shape} widths differ")
    alpha = fusion_weight(ad.mean(geo.sigma, axis=-1), ad.mean(ref.sigma, axis=-1))
    if paired is not None:
        keep = np.asarray(paired, dtype=np.float64)
        alpha = alpha * keep + (1.0 - keep)
    if geo.mu.ndim == 2:
        n, c = geo.mu.shape
        alpha = ad.broadcast_to(ad.reshape(alpha, (n, 1)), (n, c))
    return alpha * geo.mu + (1.0 - alpha) * ref.mu


@dataclass
class AttentionParams:
    wq: DiffTensor
    wk: DiffTensor
    wv: DiffTensor
    wo: DiffTensor
    heads: int = 4

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.heads:
            raise DimensionError(f"model width {c} not divisible by {self.heads} heads")

    @property
    def width(self):
        return self.wq.shape[0]

    @classmethod
    def init(cls, c, heads, rng):
        s = 1.0 / np.sqrt(c)
        return cls(*(ad.parameter(rng.normal(0, s, (c, c))) for _ in range(4)), heads=heads)

    def parameters(self, prefix=""):
        return {f"{prefix}{n}": getattr(self, n) for n in ("wq", "wk", "wv", "wo")}


def cross_attention(queries: DiffTensor, context: DiffTensor, params: AttentionParams,
                    mask=None, return_weights=False):
    """Multi-head scaled dot-product attention of ``queries`` over ``context`` rows.

    ``mask`` (bool, length b) marks usable context rows; masked rows are
    dropped before attention rather than zero-filled.
    """
    c = params.width
    if queries.shape[-1] != c or context.shape[-1] != c:
        raise DimensionError(f"attention width {c} does not match queries {queries.shape} / context {context.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (context.shape[0],):
            raise DimensionError(f"mask length {mask.shape} does not match {context.shape[0]} context rows")
        if not mask.any():
            raise DegenerateAttentionError("every context row is masked")
        if not mask.all():
            context = ad.gather_rows(context, np.flatnonzero(mask))
    q = ad.matmul(queries, params.wq)
    k = ad.matmul(context, params.wk)
    v = ad.matmul(context, params.wv)
    dh = c // params.heads
    scale = 1.0 / np.sqrt(dh)
    outs, weights = [], []
    for h in range(params.heads):
        sl = (slice(None), slice(h * dh, (h + 1) * dh))
        att = ad.softmax_lastaxis(ad.matmul(q[sl], ad.transpose(k[sl])) * scale)
        weights.append(att)
        outs.append(ad.matmul(att, v[sl]))
    out = ad.matmul(ad.concat(outs, axis=-1), params.wo)
    return (out, weights) if return_weights else out


def global_fuse(m_geo: DiffTensor, m_ref: DiffTensor, queries: DiffTensor,
                stage1: AttentionParams, stage2: AttentionParams, mask=None) -> DiffTensor:
    """Queries gather from reflectance cells, then voxels gather from the queries.

    Cost is O(cells * m + voxels * m); voxels never attend to cells directly.
    """
    tokens = cross_attention(queries, m_ref, stage1, mask)
    return cross_attention(m_geo, tokens, stage2)


@dataclass
class Projection:
    weight: DiffTensor
    bias: DiffTensor

    @classmethod
    def identity(cls, c):
        return cls(ad.parameter(np.eye(c)), ad.parameter(np.zeros(c)))

    def parameters(self, prefix=""):
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


def m_projection(f: DiffTensor, proj: Projection) -> DiffTensor:
    if f.shape[-1] != proj.weight.shape[0]:
        raise DimensionError(f"projection expects width {proj.weight.shape[0]}, got {f.shape}")
    return ad.matmul(f, proj.weight) + proj.bias


def concat_features(local: DiffTensor, glob: DiffTensor) -> DiffTensor:
    if local.shape[0] != glob.shape[0]:
        raise DimensionError(f"row counts differ: {local.shape[0]} vs {glob.shape[0]}")
    return ad.concat([local, glob], axis=-1)
