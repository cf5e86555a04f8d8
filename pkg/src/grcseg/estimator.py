"""scikit-learn style wrapper around the network and its training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .model import GRCNet, ModelConfig
from .train import TrainSettings, confusion_matrix, iou_from_confusion, train_loop
from .validation import check_clouds, check_labels


class GRCSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point semantic segmentation of LiDAR clouds.

    ``X`` is a list of clouds (PointCloud or ``(n, 4)`` arrays); ``y`` is a
    matching list of label arrays, or None when the clouds carry labels.
    ``predict`` returns one label array per cloud.

    Parameters
    ----------
    ablation : str
        Model row: ``gb``, ``gb+rb``, ``+cic``, ``+lf``, ``+gf``, ``full`` or ``unified``.
    model_params : dict or None
        Extra ModelConfig fields (range size, widths, beta, tau, ...).
    """

    def __init__(self, ablation="full", n_classes=5, voxel_size=0.4, range_h=16, range_w=256,
                 steps=300, max_lr=0.05, accum_steps=2, augment=True, model_params=None,
                 random_state=0):
        self.ablation = ablation
        self.n_classes = n_classes
        self.voxel_size = voxel_size
        self.range_h = range_h
        self.range_w = range_w
        self.steps = steps
        self.max_lr = max_lr
        self.accum_steps = accum_steps
        self.augment = augment
        self.model_params = model_params
        self.random_state = random_state

    def _config(self):
        extra = dict(self.model_params or {})
        return ModelConfig.for_ablation(self.ablation, n_classes=self.n_classes,
                                        voxel_size=self.voxel_size, range_h=self.range_h,
                                        range_w=self.range_w, **extra).validate()

    def fit(self, X, y=None):
        clouds = check_clouds(X, y, require_labels=True)
        cfg = self._config()
        for c in clouds:
            check_labels(c.labels, cfg.n_classes, cfg.ignore_label)
        settings = TrainSettings(steps=self.steps, max_lr=self.max_lr,
                                 accum_steps=self.accum_steps, augment=self.augment)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_, self.state_, self.history_ = train_loop(cfg, clouds, settings, seed=seed)
        self.classes_ = np.arange(cfg.n_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.forward(c).logits.data for c in check_clouds(X)]

    def predict_proba(self, X):
        return [ad.softmax_lastaxis(ad.tensor(z)).data for z in self.decision_function(X)]

    def predict(self, X):
        return [z.argmax(axis=1) for z in self.decision_function(X)]

    def score(self, X, y=None, sample_weight=None):
        """Mean IoU pooled over all clouds."""
        check_is_fitted(self, "model_")
        clouds = check_clouds(X, y, require_labels=True)
        C = self.model_.cfg.n_classes
        conf = np.zeros((C, C), dtype=np.int64)
        for c, p in zip(clouds, self.predict(clouds)):
            conf += confusion_matrix(p, c.labels, C, self.model_.cfg.ignore_label)
        return iou_from_confusion(conf)[1]

    @classmethod
    def from_model(cls, model: GRCNet, **params):
        """Wrap an already trained network (e.g. a loaded checkpoint)."""
        cfg = model.cfg
        est = cls(ablation=cfg.ablation if cfg.ablation != "custom" else "full",
                  n_classes=cfg.n_classes, voxel_size=cfg.voxel_size,
                  range_h=cfg.range_h, range_w=cfg.range_w, **params)
        est.model_ = model
        est.classes_ = np.arange(cfg.n_classes)
        return est
