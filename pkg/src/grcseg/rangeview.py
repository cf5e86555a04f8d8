"""Range-view projection and the reflectance encoder.

Feature maps are channels-last, ``[h, w, c]``, so per-channel parameters
broadcast along the trailing axis.  Horizontal padding wraps around
(azimuth is periodic); vertical padding is zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ConfigurationError, DimensionError


@dataclass
class RangeImage:
    H: int
    W: int
    fov_up: float
    fov_down: float
    reflectance: np.ndarray     # (H, W) raw reflectance, 0 where empty
    depth: np.ndarray           # (H, W) range of the stored point
    mask: np.ndarray            # (H, W) bool
    point_index: np.ndarray     # (H, W) int64 source index, -1 where empty
    skipped_origin: int = 0
    out_of_fov: int = 0


def project_pixels(xyz, H, W, fov_up, fov_down):
    """Pixel ``(u, v)`` of each point plus an in-FOV flag and its range.

    Points at the origin get ``in_fov = False``.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rng = np.linalg.norm(xyz, axis=1)
    up, down = math.radians(fov_up), math.radians(fov_down)
    safe = np.where(rng > 0, rng, 1.0)
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    pitch = np.arcsin(np.clip(xyz[:, 2] / safe, -1.0, 1.0))
    u = np.clip(np.floor(0.5 * (1.0 - yaw / np.pi) * W), 0, W - 1).astype(np.int64)
    v = np.clip(np.floor((1.0 - (pitch - down) / (up - down)) * H), 0, H - 1).astype(np.int64)
    in_fov = (rng > 0) & (pitch >= down) & (pitch <= up)
    return u, v, in_fov, rng


def spherical_project(cloud, H=64, W=512, fov_up=3.0, fov_down=-25.0) -> RangeImage:
    if fov_up <= fov_down:
        raise ConfigurationError("fov_up must exceed fov_down")
    if H < 1 or W < 1:
        raise ConfigurationError("range image needs H, W >= 1")
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    u, v, ok, rng = project_pixels(pts[:, :3], H, W, fov_up, fov_down)
    idx = np.flatnonzero(ok)
    lin = v[idx] * W + u[idx]
    # nearest point wins each pixel; ties go to the lower source index
    order = np.lexsort((idx, rng[idx], lin))
    lin_s = lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin_s[1:] != lin_s[:-1]
    win = idx[order[first]]
    pix = lin_s[first]
    point_index = np.full(H * W, -1, dtype=np.int64)
    point_index[pix] = win
    refl = np.zeros(H * W)
    refl[pix] = pts[win, 3]
    depth = np.zeros(H * W)
    depth[pix] = rng[win]
    return RangeImage(H, W, fov_up, fov_down, refl.reshape(H, W), depth.reshape(H, W),
                      (point_index >= 0).reshape(H, W), point_index.reshape(H, W),
                      skipped_origin=int((rng == 0).sum()),
                      out_of_fov=int(((rng > 0) & ~ok).sum()))


def unproject(img: RangeImage, u: int, v: int):
    """Source point index stored at pixel ``(u, v)``; ``None`` for an empty pixel."""
    if not (0 <= u < img.W and 0 <= v < img.H):
        raise IndexError(f"pixel ({u}, {v}) outside {img.W}x{img.H} image")
    i = int(img.point_index[v, u])
    return None if i < 0 else i


def standardized_input(img: RangeImage) -> np.ndarray:
    """``[H, W, 2]`` encoder input: standardized reflectance and the validity mask.

    Reflectance is shifted and scaled by the mean and standard deviation over
    valid pixels, which makes the encoder blind to any positive affine
    rescaling of intensities.  Empty pixels stay at 0.
    """
    x = np.zeros((img.H, img.W, 2))
    m = img.mask
    if m.any():
        vals = img.reflectance[m]
        sd = vals.std()
        x[..., 0][m] = (vals - vals.mean()) / sd if sd > 1e-12 else 0.0
    x[..., 1] = m
    return x


# ------------------------------------------------------------------ layers

def instance_norm2d(x: DiffTensor, gamma, beta, eps=1e-5) -> DiffTensor:
    """Normalize each channel of an ``[h, w, c]`` map over its own plane."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    h, w, c = x.shape
    flat = ad.reshape(x, (h * w, c))
    centered = flat - ad.mean(flat, axis=0)
    var = ad.mean(ad.square(centered), axis=0)
    out = centered / ad.sqrt(var + eps) * gamma + beta
    return ad.reshape(out, (h, w, c))


def pointwise_conv(x: DiffTensor, weight: DiffTensor) -> DiffTensor:
    h, w, c = x.shape
    if weight.shape[0] != c:
        raise DimensionError(f"pointwise weight {weight.shape} does not fit {c} channels")
    return ad.reshape(ad.matmul(ad.reshape(x, (h * w, c)), weight), (h, w, weight.shape[1]))


def depthwise_conv2d(x: DiffTensor, weight: DiffTensor, stride=1) -> DiffTensor:
    """3x3 depthwise convolution of an ``[H, W, C]`` map with ``weight`` of shape ``[3, 3, C]``.

    Padding is one cell: circular along W, zero along H.  Output size is
    ``(H - 1) // stride + 1`` by ``(W - 1) // stride + 1``.
    """
    x, weight = ad.constant(x), ad.constant(weight)
    H, W, C = x.shape
    if weight.shape != (3, 3, C):
        raise DimensionError(f"depthwise weight {weight.shape} does not fit {C} channels")
    s = stride
    ho, wo = (H - 1) // s + 1, (W - 1) // s + 1
    xp = np.pad(x.data, ((1, 1), (0, 0), (0, 0)))
    xp = np.concatenate([xp[:, -1:], xp, xp[:, :1]], axis=1)
    wd = weight.data
    out = np.zeros((ho, wo, C))
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s] * wd[dy, dx]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for dy in range(3):
            for dx in range(3):
                win = (slice(dy, dy + s * (ho - 1) + 1, s), slice(dx, dx + s * (wo - 1) + 1, s))
                gw[dy, dx] = (xp[win] * g).sum(axis=(0, 1))
                gxp[win] += g * wd[dy, dx]
        gx = gxp[1:-1, 1:-1].copy()
        gx[:, -1] += gxp[1:-1, 0]
        gx[:, 0] += gxp[1:-1, -1]
        return gx, gw

    return ad._node(out, (x, weight), bw)


@dataclass
class InvertedResidualBlock:
    """Expand (1x1) -> depthwise 3x3 -> norm -> ReLU6 -> project (1x1) -> norm, plus skip."""

    w_expand: DiffTensor        # (c_in, t * c_in)
    w_depth: DiffTensor         # (3, 3, t * c_in)
    w_project: DiffTensor       # (t * c_in, c_out)
    gamma1: DiffTensor
    beta1: DiffTensor
    gamma2: DiffTensor
    beta2: DiffTensor
    stride: int = 1
    use_norm: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if self.w_depth.shape[2] != self.w_expand.shape[1] or self.w_project.shape[0] != self.w_expand.shape[1]:
            raise ConfigurationError("inverted residual stages disagree on the expanded width")

    @property
    def c_in(self):
        return self.w_expand.shape[0]

    @property
    def c_out(self):
        return self.w_project.shape[1]

    @property
    def skip(self):
        return self.c_in == self.c_out and self.stride == 1

    @classmethod
    def init(cls, c_in, c_out, stride, rng, expansion=2):
        ce = expansion * c_in
        p = ad.parameter
        return cls(p(rng.normal(0, np.sqrt(1.0 / c_in), (c_in, ce))),
                   p(rng.normal(0, np.sqrt(1.0 / 9), (3, 3, ce))),
                   p(rng.normal(0, np.sqrt(1.0 / ce), (ce, c_out))),
                   p(np.ones(ce)), p(np.zeros(ce)), p(np.ones(c_out)), p(np.zeros(c_out)),
                   stride)

    def parameters(self, prefix=""):
        names = ("w_expand", "w_depth", "w_project", "gamma1", "beta1", "gamma2", "beta2")
        return {f"{prefix}{n}": getattr(self, n) for n in names}


def inverted_residual_forward(x: DiffTensor, block: InvertedResidualBlock) -> DiffTensor:
    if x.shape[-1] != block.c_in:
        raise DimensionError(f"input has {x.shape[-1]} channels, block expects {block.c_in}")
    h = pointwise_conv(x, block.w_expand)
    h = depthwise_conv2d(h, block.w_depth, block.stride)
    if block.use_norm:
        h = instance_norm2d(h, block.gamma1, block.beta1, block.eps)
    h = ad.clamp(h, 0.0, 6.0)
    h = pointwise_conv(h, block.w_project)
    if block.use_norm:
        h = instance_norm2d(h, block.gamma2, block.beta2, block.eps)
    return h + x if block.skip else h


def build_ref_encoder(channels=(2, 16, 16, 32, 32), strides=(2, 1, 2, 1), expansion=2, rng=None):
    if len(channels) != len(strides) + 1:
        raise ConfigurationError("channel chain must have one more entry than the stride list")
    rng = rng if rng is not None else np.random.default_rng(0)
    return [InvertedResidualBlock.init(ci, co, s, rng, expansion)
            for ci, co, s in zip(channels[:-1], channels[1:], strides)]


@dataclass
class RefFeatures:
    features: DiffTensor        # (h, w, c)
    factor: int                 # pixel (u, v) -> cell (v // factor, u // factor)
    cell_mask: np.ndarray       # (h, w) True where the cell covers a valid pixel


def ref_encoder_forward(img: RangeImage, blocks) -> RefFeatures:
    if not blocks or blocks[0].c_in != 2:
        raise ConfigurationError("the reflectance encoder takes a 2-channel input (reflectance, mask)")
    for i in range(1, len(blocks)):
        if blocks[i].c_in != blocks[i - 1].c_out:
            raise ConfigurationError(f"block {i} expects {blocks[i].c_in} channels, "
                                     f"block {i - 1} produces {blocks[i - 1].c_out}")
    factor = int(np.prod([b.stride for b in blocks]))
    if img.H % factor or img.W % factor:
        raise ConfigurationError(f"range image {img.H}x{img.W} not divisible by total stride {factor}")
    x = ad.tensor(standardized_input(img))
    for blk in blocks:
        x = inverted_residual_forward(x, blk)
    h, w = img.H // factor, img.W // factor
    cell_mask = img.mask.reshape(h, factor, w, factor).any(axis=(1, 3))
    return RefFeatures(x, factor, cell_mask)


def write_pgm(path, values: np.ndarray, scale: float = 1.0) -> None:
    """16-bit binary PGM (P5, big-endian); pixel = round(clip(value / scale, 0, 1) * 65535)."""
    arr = np.round(np.clip(np.asarray(values, dtype=np.float64) / scale, 0.0, 1.0) * 65535)
    H, W = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H, maxval = (int(f) for f in fields[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, count=H * W, offset=pos + 1).reshape(H, W)
