"""Gaussian feature heads and the complementarity constraint between branches."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import DimensionError, NumericDomainError
from .rangeview import RangeImage, RefFeatures, project_pixels
from .sparsevoxel import SparseVoxelGrid

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
DEFAULT_TAU = 10.0

# number of cic_loss calls that found no paired sites
empty_pair_warnings = 0


@dataclass
class FeatureDistribution:
    """Diagonal Gaussian(s): ``mu`` and ``sigma`` share shape ``[c]`` or ``[N, c]``."""

    mu: DiffTensor
    sigma: DiffTensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")

    @property
    def width(self):
        return self.mu.shape[-1]

    def rows(self, index) -> "FeatureDistribution":
        return FeatureDistribution(ad.gather_rows(self.mu, index), ad.gather_rows(self.sigma, index))


@dataclass
class DistributionHead:
    w_mu: DiffTensor
    b_mu: DiffTensor
    w_sigma: DiffTensor
    b_sigma: DiffTensor
    sigma_floor: float = SIGMA_FLOOR

    @classmethod
    def init(cls, c_in, c, rng, sigma_floor=SIGMA_FLOOR):
        s = 1.0 / np.sqrt(c_in)
        p = ad.parameter
        return cls(p(rng.normal(0, s, (c_in, c))), p(np.zeros(c)),
                   p(rng.normal(0, s, (c_in, c))), p(np.zeros(c)), sigma_floor)

    def parameters(self, prefix=""):
        return {f"{prefix}w_mu": self.w_mu, f"{prefix}b_mu": self.b_mu,
                f"{prefix}w_sigma": self.w_sigma, f"{prefix}b_sigma": self.b_sigma}


def distribution_head(f: DiffTensor, head: DistributionHead) -> FeatureDistribution:
    """mu = affine(f); sigma = softplus(affine(f)) + floor.  ``f`` is ``[c_in]`` or ``[N, c_in]``."""
    f = ad.constant(f)
    c_in = head.w_mu.shape[0]
    if f.shape[-1] != c_in or head.w_sigma.shape[0] != c_in:
        raise DimensionError(f"feature width {f.shape[-1]} does not match head input {c_in}")
    single = f.ndim == 1
    x = ad.reshape(f, (1, c_in)) if single else f
    mu = ad.matmul(x, head.w_mu) + head.b_mu
    sigma = ad.softplus(ad.matmul(x, head.w_sigma) + head.b_sigma) + head.sigma_floor
    if single:
        mu, sigma = ad.reshape(mu, (mu.shape[1],)), ad.reshape(sigma, (sigma.shape[1],))
    return FeatureDistribution(mu, sigma)


def reparameterize(d: FeatureDistribution, eps) -> DiffTensor:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != d.mu.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match {d.mu.shape}")
    return d.mu + d.sigma * eps


def kl_diag_gaussian(p: FeatureDistribution, q: FeatureDistribution) -> DiffTensor:
    """KL(p || q) summed over the channel axis (one value per row for batched input)."""
    if p.mu.shape != q.mu.shape:
        raise DimensionError(f"distribution shapes {p.mu.shape} and {q.mu.shape} differ")
    for d in (p, q):
        if not (d.sigma.data > 0).all():
            raise NumericDomainError("standard deviations must be positive")
    var_ratio = ad.square(p.sigma / q.sigma)
    mean_term = ad.square((p.mu - q.mu) / q.sigma)
    per = 0.5 * (var_ratio + mean_term - 1.0) - ad.log(p.sigma / q.sigma)
    return ad.sum(per, axis=-1)


def kl_to_standard_normal(p: FeatureDistribution) -> DiffTensor:
    per = 0.5 * (ad.square(p.sigma) + ad.square(p.mu) - 1.0) - ad.log(p.sigma)
    return ad.sum(per, axis=-1)


@dataclass
class PairedSites:
    voxel_rows: np.ndarray      # (P,) rows of the geometric feature grid
    cells: np.ndarray           # (P,) flat index into the h * w reflectance cells

    def __len__(self):
        return len(self.voxel_rows)


def pair_sites(geo: SparseVoxelGrid, img: RangeImage, ref: RefFeatures) -> PairedSites:
    """Link each voxel to the reflectance cell its representative point projects into.

    Voxels outside the field of view, or landing on a cell with no valid
    pixel, stay unpaired.
    """
    u, v, ok, _ = project_pixels(geo.rep_points, img.H, img.W, img.fov_up, img.fov_down)
    h, w = ref.cell_mask.shape
    cells = (v // ref.factor) * w + (u // ref.factor)
    ok &= ref.cell_mask.reshape(-1)[cells]
    rows = np.flatnonzero(ok)
    return PairedSites(rows, cells[rows])


def _clip_above(x: DiffTensor, tau):
    return x if math.isinf(tau) else ad.clamp(x, -np.inf, tau)


def cic_terms(p_geo: FeatureDistribution, p_ref: FeatureDistribution, tau=DEFAULT_TAU):
    """The four per-pair KL terms (cross terms already clipped at ``tau``)."""
    return (kl_to_standard_normal(p_geo), kl_to_standard_normal(p_ref),
            _clip_above(kl_diag_gaussian(p_geo, p_ref), tau),
            _clip_above(kl_diag_gaussian(p_ref, p_geo), tau))


def cic_loss(pairs: PairedSites, geo_dists: FeatureDistribution, ref_dists: FeatureDistribution,
             tau=DEFAULT_TAU) -> DiffTensor:
    """Mean over pairs of KL(g||N) + KL(r||N) - min(KL(g||r), tau) - min(KL(r||g), tau).

    ``geo_dists`` are indexed by voxel row and ``ref_dists`` by flat cell.
    """
    global empty_pair_warnings
    if len(pairs) == 0:
        empty_pair_warnings += 1
        log.warning("no paired sites; complementarity loss is zero")
        return ad.tensor(0.0)
    pg = geo_dists.rows(pairs.voxel_rows)
    pr = ref_dists.rows(pairs.cells)
    a, b, c, d = cic_terms(pg, pr, tau)
    return ad.mean(a + b - c - d)
