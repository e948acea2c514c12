"""scikit-learn style wrappers around the segmentation network.

Samples are whole volumes: ``X`` is a sequence of 3-D arrays (or an
``[n, D, H, W]`` array) and ``y`` is either a sequence of label arrays (one
protocol) or a mapping protocol name -> sequence of label arrays.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import InputError
from .evaluation import mean_dice, predict_volume
from .graph import DecoderSpec, EncoderConfig, ModelConfig, build_model
from .training import TrainConfig, train
from .volume_io import NORM_EPS, Subject

SINGLE_PROTOCOL = "labels"


def check_volumes(X):
    """Validate ``X`` as a non-empty list of finite 3-D float arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    vols = [np.asarray(v, dtype=np.float64) for v in X]
    if not vols:
        raise InputError("X is empty")
    for i, v in enumerate(vols):
        if v.ndim != 3:
            raise InputError(f"sample {i}: expected a 3-D volume, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise InputError(f"sample {i}: volume contains non-finite values")
    return vols


def check_targets(y, volumes):
    """Normalise ``y`` to ``{protocol: [int64 arrays]}`` aligned with ``volumes``."""
    if not isinstance(y, dict):
        y = {SINGLE_PROTOCOL: y}
    out = {}
    for name, maps in y.items():
        maps = [np.asarray(m) for m in maps]
        if len(maps) != len(volumes):
            raise InputError(f"protocol {name!r}: {len(maps)} label maps for {len(volumes)} volumes")
        for i, (m, v) in enumerate(zip(maps, volumes)):
            if m.shape != v.shape:
                raise InputError(f"protocol {name!r}, sample {i}: label shape {m.shape} != image {v.shape}")
            if not np.issubdtype(m.dtype, np.integer) or (m.size and m.min() < 0):
                raise InputError(f"protocol {name!r}, sample {i}: labels must be non-negative integers")
        out[name] = [m.astype(np.int64) for m in maps]
    return out


class ZScoreNormalizer(TransformerMixin, BaseEstimator):
    """Per-volume z-scoring; stateless, so ``fit`` only validates."""

    def __init__(self, eps=NORM_EPS):
        self.eps = eps

    def fit(self, X, y=None):
        self.n_samples_seen_ = len(check_volumes(X))
        return self

    def transform(self, X):
        vols = check_volumes(X)
        return [((v - v.mean()) / max(v.std(), self.eps)).astype(np.float32) for v in vols]


class NeuroNetSegmenter(BaseEstimator):
    """Multi-decoder volumetric segmenter with a shared residual encoder.

    ``fit`` trains one decoder per protocol in ``y`` on random crops;
    ``predict`` returns full-volume argmax maps via sliding-window tiling.
    """

    def __init__(self, n_scales=3, n_units=2, strides=(1, 2, 2), filters=(8, 16, 32),
                 crop_size=(24, 24, 24), total_steps=2000, learning_rate=1e-3, epsilon=1e-5,
                 queue_capacity=16, seed=0):
        self.n_scales = n_scales
        self.n_units = n_units
        self.strides = strides
        self.filters = filters
        self.crop_size = crop_size
        self.total_steps = total_steps
        self.learning_rate = learning_rate
        self.epsilon = epsilon
        self.queue_capacity = queue_capacity
        self.seed = seed

    def _model_config(self, targets):
        encoder = EncoderConfig(n_scales=self.n_scales, n_units=self.n_units,
                                strides=tuple(self.strides), filters=tuple(self.filters))
        decoders = [DecoderSpec(name, max(2, int(max(m.max() for m in maps)) + 1))
                    for name, maps in targets.items()]
        return ModelConfig(encoder, decoders, seed=self.seed)

    def fit(self, X, y):
        vols = ZScoreNormalizer().fit_transform(X)
        targets = check_targets(y, vols)
        config = self._model_config(targets)
        train_config = TrainConfig(total_steps=self.total_steps, crop_size=tuple(self.crop_size),
                                   queue_capacity=self.queue_capacity, seed=self.seed,
                                   checkpoint_interval=0, learning_rate=self.learning_rate,
                                   epsilon=self.epsilon)
        subjects = [Subject(f"sample-{i}", v, {p: targets[p][i] for p in targets}) for i, v in enumerate(vols)]
        result = train(build_model(config), subjects, train_config)
        self.model_ = result.params
        self.protocols_ = list(config.protocols)
        self.n_classes_ = {d.protocol_name: d.n_classes for d in config.decoders}
        self.loss_curve_ = [r.total for r in result.records]
        return self

    def _predict_all(self, X):
        check_is_fitted(self, "model_")
        vols = ZScoreNormalizer().transform(X)
        preds = [predict_volume(self.model_, v, self.crop_size) for v in vols]
        return {p: [pr[j] for pr in preds] for j, p in enumerate(self.protocols_)}

    def predict(self, X):
        """Label maps per protocol; a plain list when fitted on a single protocol."""
        out = self._predict_all(X)
        if self.protocols_ == [SINGLE_PROTOCOL]:
            return out[SINGLE_PROTOCOL]
        return out

    def score(self, X, y):
        """Mean DSC averaged over samples and protocols."""
        vols = check_volumes(X)
        targets = check_targets(y, vols)
        preds = self._predict_all(vols)
        vals = [mean_dice(p, t, self.n_classes_[name])
                for name in targets for p, t in zip(preds[name], targets[name])]
        return float(np.nanmean(vals))

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path, crop_size=(24, 24, 24)):
        params = load_checkpoint(path)
        enc = params.config.encoder
        est = cls(n_scales=enc.n_scales, n_units=enc.n_units, strides=enc.strides, filters=enc.filters,
                  crop_size=crop_size, seed=params.config.seed)
        est.model_ = params
        est.protocols_ = list(params.config.protocols)
        est.n_classes_ = {d.protocol_name: d.n_classes for d in params.config.decoders}
        return est
