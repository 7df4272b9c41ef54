"""scikit-learn style front end.

``HybridStyleSiamese`` fits on an image array plus ``(outfit_id, category)``
labels and transforms images into embeddings, so it can sit inside a
``Pipeline`` or be cloned / grid-searched like any other transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .data import CATEGORIES, FoldSplit, ItemRecord, complete_outfits
from .evaluate import EvalPairSet, compute_map, rank_pairs
from .losses import LossParams
from .model import ModelConfig, embed
from .train import Schedule, TrainConfig, train


class ArrayImageSource:
    """In-memory stand-in for :class:`hssn.data.ImageCache`."""

    def __init__(self, images: dict):
        self.images = images

    def __getitem__(self, item_id):
        return self.images[item_id]

    def stack(self, item_ids):
        return np.stack([self.images[i] for i in item_ids])


def _check_labels(y, n):
    labels = [tuple(row) for row in np.asarray(y, dtype=object)]
    if len(labels) != n or any(len(row) != 2 for row in labels):
        raise ValueError("y must hold one (outfit_id, category) pair per image")
    for outfit, category in labels:
        if category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}, got {category!r}")
    return [(str(o), str(c)) for o, c in labels]


class HybridStyleSiamese(TransformerMixin, BaseEstimator):
    """Shared-weight CNN embedder trained with the hybrid triplet + style loss.

    Parameters mirror :class:`~hssn.model.ModelConfig`,
    :class:`~hssn.losses.LossParams` and :class:`~hssn.train.TrainConfig`;
    ``w2=0`` gives the plain triplet-loss siamese baseline.
    """

    def __init__(
        self,
        blocks=((16, 3, True), (32, 3, True), (64, 3, True), (64, 3, True)),
        tap_indices=(0, 1, 2, 3),
        embedding_dim=128,
        style_out_dim=128,
        bn_position="before_gram",
        alpha=0.2,
        K=2.0,
        w1=1.0,
        w2=1.0,
        style_mode="aux_vector",
        distance="euclidean",
        epochs=30,
        batch_size=8,
        triplets_per_epoch=None,
        learning_rate=8e-5,
        schedule="step_decay",
        clip_norm=5.0,
        random_state=0,
    ):
        self.blocks = blocks
        self.tap_indices = tap_indices
        self.embedding_dim = embedding_dim
        self.style_out_dim = style_out_dim
        self.bn_position = bn_position
        self.alpha = alpha
        self.K = K
        self.w1 = w1
        self.w2 = w2
        self.style_mode = style_mode
        self.distance = distance
        self.epochs = epochs
        self.batch_size = batch_size
        self.triplets_per_epoch = triplets_per_epoch
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _images(self, X, reset):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
        if X.ndim == 2:
            if reset:
                raise ValueError("fit needs images shaped [n, channels, height, width]")
            X = X.reshape((len(X),) + self.input_shape_)
        if X.ndim != 4:
            raise ValueError(f"expected [n, channels, height, width] images, got shape {X.shape}")
        if reset:
            self.input_shape_ = tuple(X.shape[1:])
            self.n_features_in_ = int(np.prod(self.input_shape_))
        elif tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"images are {X.shape[1:]}, estimator was fitted on {self.input_shape_}")
        return X

    def _train_config(self):
        model = ModelConfig(
            blocks=tuple(self.blocks),
            tap_indices=tuple(self.tap_indices),
            embedding_dim=self.embedding_dim,
            style_out_dim=self.style_out_dim,
            input_shape=self.input_shape_,
            bn_position=self.bn_position,
        )
        loss = LossParams(
            alpha=self.alpha, K=self.K, w1=self.w1, w2=self.w2, style_mode=self.style_mode, distance=self.distance
        )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            triplets_per_epoch=self.triplets_per_epoch,
            seed=self.random_state,
            loss=loss,
            model=model,
            schedule=Schedule(self.schedule, base_lr=self.learning_rate),
            clip_norm=self.clip_norm,
        )

    def fit(self, X, y):
        """Train on images ``X`` labelled by ``y = [(outfit_id, category), ...]``."""
        X = self._images(X, reset=True)
        check_consistent_length(X, y)
        labels = _check_labels(y, len(X))
        records, images = [], {}
        for i, (outfit, category) in enumerate(labels):
            item = f"item{i}"
            records.append(ItemRecord(item, outfit, category, "", ""))
            images[item] = X[i]
        outfits = tuple(complete_outfits(records))
        result = train(self._train_config(), records, FoldSplit(0, outfits, ()), ArrayImageSource(images))
        self.model_ = result.model
        self.training_log_ = result.log
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = self._images(X, reset=False)
        return embed(self.model_, X)

    def score(self, X, y):
        """Normalised reciprocal-rank MAP over the complete outfits in ``y``."""
        emb = self.transform(X)
        labels = _check_labels(y, len(emb))
        by_outfit = {}
        for i, (outfit, category) in enumerate(labels):
            by_outfit.setdefault(outfit, {})[category] = i
        pairs, vectors = [], {}
        for outfit, items in sorted(by_outfit.items()):
            if len(items) == 2:
                a, b = f"A:{items['typeA']}", f"B:{items['typeB']}"
                pairs.append((a, b))
                vectors[a], vectors[b] = emb[items["typeA"]], emb[items["typeB"]]
        return compute_map(rank_pairs(EvalPairSet(pairs, vectors)))
