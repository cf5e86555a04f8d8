"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyInputError
from .lidar_io import PointCloud


def check_cloud(x, labels=None, name="cloud") -> PointCloud:
    """Coerce ``x`` (a PointCloud or an ``(n, 4)`` array) into a finite PointCloud."""
    if isinstance(x, PointCloud):
        cloud = x if labels is None else PointCloud(x.points, labels)
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise DimensionError(f"{name}: expected an (n, 4) array of x, y, z, r, got shape {arr.shape}")
        cloud = PointCloud(arr, labels)
    if len(cloud) == 0:
        raise EmptyInputError(f"{name} has no points")
    if not np.isfinite(cloud.points).all():
        raise ValueError(f"{name} contains non-finite values")
    return cloud


def check_clouds(X, y=None, require_labels=False) -> list[PointCloud]:
    """Validate a sequence of clouds and optional per-cloud label arrays."""
    if isinstance(X, (PointCloud, np.ndarray)):
        X = [X]
    X = list(X)
    if not X:
        raise EmptyInputError("no clouds given")
    if y is not None:
        if isinstance(y, np.ndarray) and y.ndim == 1 and len(X) == 1:
            y = [y]
        y = list(y)
        if len(y) != len(X):
            raise DimensionError(f"{len(X)} clouds but {len(y)} label arrays")
    out = []
    for i, x in enumerate(X):
        c = check_cloud(x, None if y is None else y[i], name=f"cloud {i}")
        if require_labels and c.labels is None:
            raise ValueError(f"cloud {i} has no labels")
        out.append(c)
    return out


def check_labels(labels, n_classes, ignore_label=255):
    """Labels must be in ``[0, n_classes)`` or equal to the ignore id."""
    lab = np.asarray(labels)
    bad = (lab != ignore_label) & ((lab < 0) | (lab >= n_classes))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {int(lab[i])} at index {i} outside [0, {n_classes})")
    return lab
