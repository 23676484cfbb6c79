"""SGD-with-momentum trainer and a scikit-learn compatible classifier facade."""

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import rng as rngmod
from .datagen import TRAIN, VAL, Dataset
from .engine import softmax_cross_entropy
from .errors import TrainingError
from .models import Model, build_model, spec_for
from .validation import check_clip_batch, check_labels


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.08
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0


def accuracy(model: Model, clips, labels, batch_size: int = 64) -> float:
    """Fraction of clips whose argmax prediction matches the label."""
    if len(labels) == 0:
        raise ValueError("accuracy needs at least one clip")
    hits = 0
    for lo in range(0, len(labels), batch_size):
        pred = model.predict(clips[lo:lo + batch_size])
        hits += int((pred == np.asarray(labels[lo:lo + batch_size])).sum())
    return hits / len(labels)


def train(model: Model, dataset: Dataset, config: TrainConfig) -> Model:
    """Plain SGD with momentum on the train split; deterministic given the seed.

    Returns a new model carrying per-epoch train/validation accuracy history.
    Train accuracy is measured on the update passes as the parameters evolve;
    validation accuracy is a dedicated pass after each epoch. Non-finite
    parameters abort with TrainingError.
    """
    train_clips, train_labels = dataset.subset(TRAIN)
    if len(train_labels) == 0:
        raise ValueError("dataset has no training clips")
    val_clips, val_labels = dataset.subset(VAL)

    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    work = Model(spec=model.spec, params=params)
    lr = np.float32(config.learning_rate)
    mu = np.float32(config.momentum)
    history = {"train_acc": [], "val_acc": [], "train_loss": [], "config": asdict(config)}

    n = len(train_labels)
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, rngmod.SHUFFLE, epoch).permutation(n)
        hits = 0
        loss_total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            clips = train_clips[idx]
            labels = train_labels[idx]
            logits, state = work._forward(clips, cache=True)
            loss, grad_logits = softmax_cross_entropy(logits, labels)
            loss_total += loss
            hits += int((logits.argmax(axis=1) + 1 == labels).sum())
            grad_logits /= np.float32(len(idx))
            _, grads = work._backward(grad_logits, state, want_params=True, need_input=False)
            for name, g in grads.items():
                v = velocity[name]
                v *= mu
                v += g
                params[name] -= lr * v
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise TrainingError(f"non-finite values in {name} after epoch {epoch + 1}")
        history["train_acc"].append(hits / n)
        history["train_loss"].append(loss_total / n)
        history["val_acc"].append(
            accuracy(work, val_clips, val_labels) if len(val_labels) else float("nan")
        )
    return Model(spec=model.spec, params=params, history=history)


class VideoActionClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn style wrapper: fit/predict on (n, c, t, h, w) pixel arrays.

    ``fit`` builds the requested miniature architecture and trains it with
    SGD; the fitted low-level model is available as ``model_`` for the
    attack and profiling APIs.
    """

    def __init__(self, architecture="mini_i3d", clip_length=32, spatial_size=32,
                 in_channels=1, num_classes=4, learning_rate=0.08, momentum=0.9,
                 epochs=30, batch_size=16, seed=0):
        self.architecture = architecture
        self.clip_length = clip_length
        self.spatial_size = spatial_size
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = check_clip_batch(X)
        y = check_labels(y, X.shape[0], self.num_classes)
        spec = spec_for(self.architecture, clip_length=self.clip_length,
                        spatial_size=self.spatial_size, in_channels=self.in_channels,
                        num_classes=self.num_classes)
        dataset = Dataset(clips=X, labels=y, splits=np.zeros(len(y), dtype=np.uint8))
        cfg = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                          epochs=self.epochs, batch_size=self.batch_size, seed=self.seed)
        self.model_ = train(build_model(spec, self.seed), dataset, cfg)
        self.classes_ = np.unique(y)
        self.history_ = self.model_.history
        return self

    def _fitted_model(self) -> Model:
        if not hasattr(self, "model_"):
            raise AttributeError("classifier is not fitted yet; call fit first")
        return self.model_

    def predict(self, X):
        return self._fitted_model().predict(check_clip_batch(X))

    def predict_proba(self, X):
        return self._fitted_model().predict_proba(check_clip_batch(X))
