"""LiDAR scans: KITTI binary formats, synthetic scenes and weather corruption."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict, replace
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import ConfigurationError, EmptyInputError, ParseError, TruncationError
from .rng import STREAM_SCENE, STREAM_WEATHER, make_rng

log = logging.getLogger(__name__)

# Label of injected clutter points.  Shares the ignore slot with unmapped ids,
# so it never enters a confusion matrix.
IGNORE_LABEL = 255
NOISE_LABEL = IGNORE_LABEL

DEFAULT_CLASSES = ("ground", "curb", "vehicle", "pole", "building")


@dataclass
class PointCloud:
    """``points`` is an ``(n, 4)`` float64 array of x, y, z (m) and reflectance."""

    points: np.ndarray
    labels: np.ndarray | None = None
    clamped: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (n, 4), got {pts.shape}")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise ValueError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
            self.labels = lab

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.points[:, :3], axis=1)

    def subset(self, index) -> "PointCloud":
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels)

    def with_reflectance(self, r) -> "PointCloud":
        pts = self.points.copy()
        pts[:, 3] = r
        return PointCloud(pts, None if self.labels is None else self.labels.copy())


# ------------------------------------------------------------ KITTI formats

def parse_kitti_bin(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise TruncationError(len(data) - len(data) % 16)
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(raw).all(axis=1))
    if bad.size:
        raise ParseError(f"non-finite value in point {int(bad[0])} (byte offset {16 * int(bad[0])})")
    neg = raw[:, 3] < 0
    clamped = int(neg.sum())
    if clamped:
        log.warning("clamped %d negative reflectance values to 0", clamped)
        raw[neg, 3] = 0.0
    return PointCloud(raw, clamped=clamped)


def write_kitti_bin(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def parse_kitti_label(data: bytes, n: int, class_map: dict | None = None,
                      ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Semantic ids (low 16 bits of each u32 word), optionally remapped.

    Ids missing from ``class_map`` map to ``ignore``.
    """
    if len(data) != 4 * n:
        raise ParseError(f"label file has {len(data)} bytes, expected {4 * n} for {n} points")
    sem = (np.frombuffer(data, dtype="<u4") & 0xFFFF).astype(np.int64)
    if class_map is None:
        return sem
    lut = np.full(0x10000, ignore, dtype=np.int64)
    for raw, mapped in class_map.items():
        lut[int(raw)] = int(mapped)
    return lut[sem]


def write_kitti_label(labels, instance=None) -> bytes:
    sem = np.asarray(labels, dtype=np.int64)
    if sem.size and (sem.min() < 0 or sem.max() > 0xFFFF):
        raise ValueError("semantic ids must fit in 16 bits")
    words = sem.astype(np.uint32)
    if instance is not None:
        words |= (np.asarray(instance, dtype=np.uint32) & 0xFFFF) << 16
    return words.astype("<u4").tobytes()


def load_class_map(path) -> tuple[dict, int]:
    """Read ``{"version": 1, "map": {raw: id}, "ignore": id}``."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc.get("map"), dict):
        raise ConfigurationError(f"{path}: class map needs a 'map' object")
    return {int(k): int(v) for k, v in doc["map"].items()}, int(doc.get("ignore", IGNORE_LABEL))


def read_scan(bin_path, label_path=None, class_map=None) -> PointCloud:
    with open(bin_path, "rb") as fh:
        cloud = parse_kitti_bin(fh.read())
    if label_path is not None:
        with open(label_path, "rb") as fh:
            cloud.labels = parse_kitti_label(fh.read(), len(cloud), class_map)
    return cloud


# ----------------------------------------------------------- scene synthesis

@dataclass
class SensorModel:
    beams: int = 32
    azimuth_steps: int = 512
    fov_up: float = 3.0
    fov_down: float = -25.0
    height: float = 1.73
    max_range: float = 40.0
    range_noise: float = 0.01
    reflectance_noise: float = 0.02
    falloff_range: float = 30.0


@dataclass
class Template:
    """A scene primitive.

    ``kind`` is one of ``plane`` (params: z), ``patch`` (xmin, xmax, ymin,
    ymax: a painted region of the ground plane), ``box`` / ``wall`` (center
    cx, cy, cz, size sx, sy, sz, yaw) or ``cylinder`` (cx, cy, radius, z0, z1).
    """

    kind: str
    class_id: int
    reflectance: float
    params: dict = field(default_factory=dict)


@dataclass
class SceneSpec:
    n_classes: int
    templates: list
    sensor: SensorModel = field(default_factory=SensorModel)
    seed: int = 0

    def validate(self):
        s = self.sensor
        if self.n_classes < 2:
            raise ConfigurationError("a scene needs at least 2 classes")
        if s.fov_up <= s.fov_down:
            raise ConfigurationError("vertical field of view: fov_up must exceed fov_down")
        if s.beams < 2 or s.azimuth_steps < 1:
            raise ConfigurationError("sensor needs at least 2 beams and 1 azimuth step")
        for t in self.templates:
            if t.kind not in ("plane", "patch", "box", "wall", "cylinder"):
                raise ConfigurationError(f"unknown template kind {t.kind!r}")
            if not 0 <= t.class_id < self.n_classes:
                raise ConfigurationError(f"template class {t.class_id} outside [0, {self.n_classes})")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        sensor = SensorModel(**doc.get("sensor", {}))
        templates = [Template(**t) for t in doc["templates"]]
        return cls(int(doc["n_classes"]), templates, sensor, int(doc.get("seed", 0)))


def sensor_rays(sensor: SensorModel) -> np.ndarray:
    """Unit ray directions, beam-major; one ray per range-image pixel centre."""
    up, down = math.radians(sensor.fov_up), math.radians(sensor.fov_down)
    pitch = up - (np.arange(sensor.beams) + 0.5) * (up - down) / sensor.beams
    yaw = np.pi * (1.0 - 2.0 * (np.arange(sensor.azimuth_steps) + 0.5) / sensor.azimuth_steps)
    P, Y = np.meshgrid(pitch, yaw, indexing="ij")
    d = np.stack([np.cos(P) * np.cos(Y), np.cos(P) * np.sin(Y), np.sin(P)], axis=-1)
    return d.reshape(-1, 3)


def _hit_plane(d, z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = z / d[:, 2]
    return np.where((t > 0) & np.isfinite(t), t, np.inf)


def _hit_box(d, p):
    c = np.array([p["cx"], p["cy"], p["cz"]])
    half = 0.5 * np.array([p["sx"], p["sy"], p["sz"]])
    yaw = p.get("yaw", 0.0)
    cs, sn = math.cos(yaw), math.sin(yaw)
    rot = np.array([[cs, sn, 0.0], [-sn, cs, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    o = rot @ (-c)
    dl = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    return np.where((tfar >= tnear) & (tnear > 0), tnear, np.inf)


def _hit_cylinder(d, p):
    cx, cy, rad, z0, z1 = p["cx"], p["cy"], p["radius"], p["z0"], p["z1"]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = -2.0 * (d[:, 0] * cx + d[:, 1] * cy)
    c = cx * cx + cy * cy - rad * rad
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    z = t * d[:, 2]
    side = np.where((disc >= 0) & (t > 0) & (z >= z0) & (z <= z1), t, np.inf)
    tc = _hit_plane(d, z1)
    hx, hy = tc * d[:, 0] - cx, tc * d[:, 1] - cy
    with np.errstate(invalid="ignore"):
        cap = np.where(np.isfinite(tc) & (hx * hx + hy * hy <= rad * rad), tc, np.inf)
    return np.minimum(side, cap)


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Single-return sweep of ``spec`` from a sensor at the origin.

    Range jitter is Gaussian truncated at three standard deviations, so every
    return lies within ``3 * range_noise`` of the surface it hit.
    """
    spec.validate()
    s = spec.sensor
    rng = make_rng(spec.seed, STREAM_SCENE)
    d = sensor_rays(s)
    best = np.full(d.shape[0], np.inf)
    cls = np.full(d.shape[0], -1, dtype=np.int64)
    refl = np.zeros(d.shape[0])
    patches = []
    for tpl in spec.templates:
        if tpl.kind == "patch":
            patches.append(tpl)
            continue
        if tpl.kind == "plane":
            t = _hit_plane(d, tpl.params.get("z", -s.height))
        elif tpl.kind in ("box", "wall"):
            t = _hit_box(d, tpl.params)
        else:
            t = _hit_cylinder(d, tpl.params)
        closer = t < best
        best[closer] = t[closer]
        cls[closer] = tpl.class_id
        refl[closer] = tpl.reflectance
    # painted regions overlay whatever plane surface was hit
    plane_ids = {t.class_id for t in spec.templates if t.kind == "plane"}
    on_plane = np.isin(cls, list(plane_ids)) & np.isfinite(best)
    for ptc in patches:
        q = ptc.params
        hx, hy = best * d[:, 0], best * d[:, 1]
        inside = on_plane & (hx >= q["xmin"]) & (hx <= q["xmax"]) & (hy >= q["ymin"]) & (hy <= q["ymax"])
        cls[inside] = ptc.class_id
        refl[inside] = ptc.reflectance
    keep = np.isfinite(best) & (best <= s.max_range)
    jitter = np.clip(rng.standard_normal(d.shape[0]), -3.0, 3.0) * s.range_noise
    rng_r = best + jitter
    xyz = d * rng_r[:, None]
    falloff = 1.0 / (1.0 + (best / s.falloff_range) ** 2)
    r = np.maximum(refl * falloff + rng.normal(0.0, s.reflectance_noise, d.shape[0]), 0.0)
    pts = np.column_stack([xyz, r])[keep]
    return PointCloud(pts, cls[keep])


def random_scene_spec(seed: int, n_classes: int = 5, sensor: SensorModel | None = None,
                      extent: float = 25.0) -> SceneSpec:
    """Random street-like layout over the default class set.

    Classes: 0 ground, 1 curb (low raised strips, bright), 2 vehicle boxes,
    3 poles, 4 building walls.  With fewer classes the later kinds are
    dropped.  Every class has a geometric signature; base reflectance is
    class-dependent too, so reflectance alone is a tempting shortcut.
    """
    sensor = sensor or SensorModel()
    rng = make_rng(seed, STREAM_SCENE, 0)
    h = sensor.height
    tpl = [Template("plane", 0, 0.25, {"z": -h})]
    if n_classes > 1:
        for _ in range(int(rng.integers(3, 7))):
            ang = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(4.0, extent * 0.8)
            sz = rng.uniform(0.15, 0.3)
            tpl.append(Template("box", 1, float(rng.uniform(0.7, 0.9)), {
                "cx": dist * math.cos(ang), "cy": dist * math.sin(ang), "cz": -h + sz / 2,
                "sx": rng.uniform(4.0, 12.0), "sy": rng.uniform(0.4, 1.2), "sz": sz,
                "yaw": rng.uniform(0, np.pi)}))
    if n_classes > 2:
        for _ in range(int(rng.integers(3, 7))):
            ang = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(5.0, extent)
            sz = rng.uniform(1.4, 1.9)
            tpl.append(Template("box", 2, float(rng.uniform(0.45, 0.6)), {
                "cx": dist * math.cos(ang), "cy": dist * math.sin(ang), "cz": -h + sz / 2,
                "sx": rng.uniform(3.8, 4.8), "sy": rng.uniform(1.6, 2.0), "sz": sz,
                "yaw": rng.uniform(0, np.pi)}))
    if n_classes > 3:
        for _ in range(int(rng.integers(4, 9))):
            ang = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(3.0, extent)
            tpl.append(Template("cylinder", 3, float(rng.uniform(0.3, 0.4)), {
                "cx": dist * math.cos(ang), "cy": dist * math.sin(ang),
                "radius": rng.uniform(0.1, 0.3), "z0": -h, "z1": -h + rng.uniform(3.0, 6.0)}))
    if n_classes > 4:
        for _ in range(int(rng.integers(2, 4))):
            ang = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(12.0, extent + 8.0)
            height = rng.uniform(4.0, 10.0)
            tpl.append(Template("wall", 4, float(rng.uniform(0.35, 0.5)), {
                "cx": dist * math.cos(ang), "cy": dist * math.sin(ang), "cz": -h + height / 2,
                "sx": rng.uniform(8.0, 20.0), "sy": 0.5, "sz": height, "yaw": ang + np.pi / 2}))
    return SceneSpec(n_classes, tpl, sensor, seed)


# ------------------------------------------------------------------ weather

@dataclass
class CorruptionParams:
    attenuation: float = 0.0   # gamma in exp(-gamma * distance), 1/m
    noise: float = 0.0         # std of additive reflectance noise
    drop: float = 0.0          # fraction of points removed
    clutter: float = 0.0       # injected points, as a fraction of survivors
    jitter: float = 0.0        # max displacement of surviving points, m
    clutter_range: tuple = (1.0, 6.0)

    def validate(self):
        if self.attenuation < 0 or self.noise < 0 or self.jitter < 0:
            raise ConfigurationError("corruption strengths must be non-negative")
        if not 0 <= self.drop < 1 or self.clutter < 0:
            raise ConfigurationError("drop must be in [0, 1) and clutter non-negative")


WEATHER_KINDS = ("fog_dense", "fog_light", "rain", "snow")


def load_presets(path=None) -> dict:
    """Corruption presets: the shipped ``weather_presets.json`` unless ``path`` is given."""
    if path is None:
        text = resources.files("grcseg").joinpath("data/weather_presets.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    out = {}
    for name, params in doc["presets"].items():
        unknown = set(params) - set(CorruptionParams.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"preset {name!r}: unknown keys {sorted(unknown)}")
        p = CorruptionParams(**params)
        p.clutter_range = tuple(p.clutter_range)
        p.validate()
        out[name] = p
    return out


def corrupt_weather(cloud: PointCloud, kind, seed: int, presets: dict | None = None,
                    return_index=False):
    """Weather-style corruption that hits reflectance much harder than geometry.

    ``kind`` is a preset name or a :class:`CorruptionParams`.  Survivors keep
    their order and labels; clutter points are appended with ``NOISE_LABEL``.
    With ``return_index`` the source indices of survivors are also returned.
    """
    if isinstance(kind, CorruptionParams):
        p = kind
    else:
        presets = presets if presets is not None else load_presets()
        if kind not in presets:
            raise ConfigurationError(f"unknown corruption kind {kind!r}")
        p = presets[kind]
    p.validate()
    rng = make_rng(seed, STREAM_WEATHER)
    n = len(cloud)
    keep = np.flatnonzero(rng.random(n) >= p.drop)
    pts = cloud.points[keep].copy()
    dist = np.linalg.norm(pts[:, :3], axis=1)
    r = pts[:, 3] * np.exp(-p.attenuation * dist)
    if p.noise:
        r = r + rng.normal(0.0, p.noise, len(keep))
    pts[:, 3] = np.maximum(r, 0.0)
    if p.jitter:
        v = rng.standard_normal((len(keep), 3))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        pts[:, :3] += v * rng.uniform(0.0, p.jitter, (len(keep), 1))
    labels = None if cloud.labels is None else cloud.labels[keep].copy()
    k = int(round(p.clutter * len(keep)))
    if k:
        rr = rng.uniform(*p.clutter_range, k)
        yaw = rng.uniform(-np.pi, np.pi, k)
        pitch = np.radians(rng.uniform(-25.0, 3.0, k))
        extra = np.column_stack([rr * np.cos(pitch) * np.cos(yaw), rr * np.cos(pitch) * np.sin(yaw),
                                 rr * np.sin(pitch), rng.uniform(0.6, 1.0, k)])
        pts = np.vstack([pts, extra])
        if labels is not None:
            labels = np.concatenate([labels, np.full(k, NOISE_LABEL, dtype=np.int64)])
    out = PointCloud(pts, labels)
    return (out, keep) if return_index else out


# --------------------------------------------------------------- histograms

def histogram(cloud: PointCloud, field: str, bins: int, upper: float | None = None):
    """Counts over ``bins`` equal-width bins spanning ``[0, upper]`` (default: max)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(cloud) == 0:
        raise EmptyInputError("cannot histogram an empty cloud")
    values = _field(cloud, field)
    hi = float(values.max()) if upper is None else float(upper)
    if hi <= 0:
        hi = 1.0
    counts, edges = np.histogram(np.clip(values, 0.0, hi), bins=bins, range=(0.0, hi))
    return counts, edges


def _field(cloud, field):
    if field == "distance":
        return cloud.distance
    if field == "reflectance":
        return cloud.reflectance
    raise ValueError(f"unknown histogram field {field!r}")


def write_histogram_csv(path, counts, edges):
    total = max(int(np.sum(counts)), 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "frequency"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c), f"{c / total:.6g}"])


def distribution_shift(clean: PointCloud, other: PointCloud, field: str) -> float:
    """Wasserstein-1 distance between ``field`` distributions, in units of the clean maximum."""
    a = _field(clean, field)
    scale = float(a.max()) or 1.0
    return float(wasserstein_distance(a / scale, _field(other, field) / scale))
