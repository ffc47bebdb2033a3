"""scikit-learn style wrapper around the two training stages.

``fit`` runs both stages on labelled images (every label is a base class),
``transform`` returns backbone feature maps, and ``predict`` classifies query
images against a labelled support set, which is the few-shot use case.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import DatasetSplit
from .errors import DataError, DimensionError
from .trainer import Stage1Config, Stage2Config, TrainConfig, meta_train, model_from_checkpoint, pretrain_backbone


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an ``n x 3 x H x W`` finite float batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise DimensionError(f"expected images of shape n x 3 x H x W, got {X.shape}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise DimensionError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if len(X) == 0:
        raise DataError("empty image batch")
    if not np.isfinite(X).all():
        raise DataError("images contain NaN or infinity")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


class HelixFormerClassifier(BaseEstimator, ClassifierMixin):
    def __init__(self, variant="sym", heads=2, stack=1, embed="conv", rep=True, channels=64, image_size=84,
                 pool_blocks=(0, 1, 2, 3), n_way=5, k_shot=1, query_per_class=15, pretrain_epochs=200,
                 pretrain_decay=(85, 170), meta_epochs=130, meta_decay=(70, 110), episodes_per_epoch=100,
                 dtype="float64", random_state=0):
        self.variant = variant
        self.heads = heads
        self.stack = stack
        self.embed = embed
        self.rep = rep
        self.channels = channels
        self.image_size = image_size
        self.pool_blocks = pool_blocks
        self.n_way = n_way
        self.k_shot = k_shot
        self.query_per_class = query_per_class
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_decay = pretrain_decay
        self.meta_epochs = meta_epochs
        self.meta_decay = meta_decay
        self.episodes_per_epoch = episodes_per_epoch
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            seed=int(self.random_state), n_way=self.n_way, k_shot=self.k_shot, query_per_class=self.query_per_class,
            variant=str(self.variant), heads=self.heads, stack=self.stack, embed=self.embed, rep=bool(self.rep),
            channels=self.channels, image_size=self.image_size, pool_blocks=tuple(self.pool_blocks), dtype=self.dtype,
            val_every=0,
            stage1=Stage1Config(epochs=self.pretrain_epochs, decay_epochs=tuple(self.pretrain_decay)),
            stage2=Stage2Config(epochs=self.meta_epochs, decay_epochs=tuple(self.meta_decay),
                                episodes_per_epoch=self.episodes_per_epoch),
        )

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        config = self._config()
        self.classes_ = np.unique(y)
        base = {f"class{i:04d}": X[y == c] for i, c in enumerate(self.classes_)}
        dataset = DatasetSplit(base, {}, {})
        pretrained = pretrain_backbone(config, dataset)
        self.checkpoint_ = meta_train(config, dataset, pretrained)
        self.model_ = model_from_checkpoint(self.checkpoint_, use_best=False)
        return self

    def transform(self, X) -> np.ndarray:
        """Backbone feature maps, ``n x C x h x w``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        self.model_.eval()
        with T.no_grad(), T.default_dtype(self.dtype):
            return self.model_.backbone(self.model_.prepare(X)).data.copy()

    def predict_scores(self, X, support_X, support_y) -> tuple[np.ndarray, np.ndarray]:
        """Relation scores of each query against each support class, and the class order."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        support_X = check_images(support_X, self.image_size)
        support_y = check_labels(support_y, len(support_X))
        classes, counts = np.unique(support_y, return_counts=True)
        if len(classes) < 2:
            raise DataError("support set needs at least two classes")
        if len(set(counts)) != 1:
            raise DataError("every support class needs the same number of shots")
        order = np.concatenate([np.flatnonzero(support_y == c) for c in classes])
        model = self.model_
        model.eval()
        with T.no_grad(), T.default_dtype(self.dtype):
            feats = model.backbone(model.prepare(np.concatenate([support_X[order], X])))
            support = T.take(feats, np.arange(len(order)))
            query = T.take(feats, np.arange(len(order), feats.shape[0]))
            scores = model.logits_from_features(support, query, len(classes), int(counts[0])).data
        return scores, classes

    def predict(self, X, support_X, support_y) -> np.ndarray:
        scores, classes = self.predict_scores(X, support_X, support_y)
        return classes[scores.argmax(axis=1)]

    def predict_proba(self, X, support_X, support_y) -> np.ndarray:
        scores, _ = self.predict_scores(X, support_X, support_y)
        z = scores - scores.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def score(self, X, y, support_X=None, support_y=None) -> float:
        if support_X is None or support_y is None:
            raise DataError("score needs a labelled support set")
        return float(np.mean(self.predict(X, support_X, support_y) == np.asarray(y)))
