"""scikit-learn compatible classifier around the ResNet host networks."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import LabeledBatch
from .tensor import log_softmax
from .train import TrainConfig, build_model, evaluate, train
from .validation import check_images


class ATACResNetClassifier(ClassifierMixin, BaseEstimator):
    """Pre-activation ResNet image classifier with attentional activations.

    Parameters
    ----------
    blocks : int
        Basic blocks per stage (3 gives ResNet-20).
    activation : str
        Activation at every site, e.g. ``"relu"``, ``"swish"``, ``"atac:2"``.
    replacement_ratio : float
        Fraction of activation sites, counted from the output end, turned into ATAC units.
    reduction_ratio : int
        Channel reduction ratio used by replaced sites and NiN blocks.
    micro_module : {"none", "nin", "local_senet"}
        Extra ablation module inserted into the host network.
    epochs, base_lr, batch_size, momentum, weight_decay, lr_decay_factor, lr_decay_epochs
        Optimization recipe (Nesterov SGD with step decay).
    augment : bool
        Random pad-crop and horizontal flip on the training images.
    random_state : int
        Seed for initialization, shuffling and augmentation.

    Input images must be float arrays of shape [N, 3, H, W] that are already
    normalized; H and W must be equal multiples of 4.
    """

    def __init__(
        self,
        blocks=1,
        activation="atac:2",
        replacement_ratio=0.0,
        reduction_ratio=2,
        micro_module="none",
        epochs=10,
        base_lr=0.1,
        batch_size=128,
        momentum=0.9,
        weight_decay=1e-4,
        lr_decay_factor=0.1,
        lr_decay_epochs=(),
        augment=False,
        random_state=0,
    ):
        self.blocks = blocks
        self.activation = activation
        self.replacement_ratio = replacement_ratio
        self.reduction_ratio = reduction_ratio
        self.micro_module = micro_module
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_epochs = lr_decay_epochs
        self.augment = augment
        self.random_state = random_state

    def _config(self, n_classes: int, image_size: int) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            momentum=self.momentum,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_epochs=tuple(self.lr_decay_epochs),
            seed=self.random_state,
            dataset="synthetic",
            augment=self.augment,
            image_size=image_size,
            num_classes=max(n_classes, 2),
            blocks=self.blocks,
            activation=self.activation,
            replacement_ratio=self.replacement_ratio,
            reduction_ratio=self.reduction_ratio,
            micro_module=self.micro_module,
        )

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-d with {len(X)} entries, got shape {y.shape}")
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        cfg = self._config(len(self.classes_), X.shape[2])
        self.config_ = cfg
        self.graph_ = build_model(cfg)
        result = train(cfg, self.graph_, LabeledBatch(X, self._encoder.transform(y)))
        self.history_ = result.rows
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        X = check_images(X, image_size=self.config_.image_size)
        return self.graph_.predict_logits(X)[:, : len(self.classes_)]

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        check_is_fitted(self, "graph_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def evaluate(self, X, y) -> tuple[float, float]:
        """(accuracy, mean cross-entropy) on encoded labels."""
        check_is_fitted(self, "graph_")
        X = check_images(X, image_size=self.config_.image_size)
        return evaluate(self.graph_, LabeledBatch(X, self._encoder.transform(np.asarray(y))))
