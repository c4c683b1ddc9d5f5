"""scikit-learn compatible wrapper around the adaptation trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import adaptation
from .adaptation import ADVERSARIAL_PLAIN, SOURCE_ONLY, TrainConfig
from .autograd import DETERMINISTIC, Tensor
from .data import DomainDataset
from .models import ModelBundle, default_specs
from .uncertainty import ENTROPY


class UncertaintyDomainAdapter(ClassifierMixin, TransformerMixin, BaseEstimator):
    """MC-dropout classifier adapted to an unlabeled target domain.

    ``fit(X, y, X_target=...)`` trains on labeled source rows and unlabeled
    target rows.  ``predict``/``predict_proba`` marginalise over ``n_mc_passes``
    dropout samples, ``transform`` returns dropout-free features and
    ``predict_uncertainty`` the per-row uncertainty.

    ``mode`` is one of ``"source_only"``, ``"adversarial_plain"`` (unweighted,
    unconditioned discriminator) and ``"uncertainty_full"``.
    """

    def __init__(self, mode="uncertainty_full", uncertainty_metric="entropy", n_mc_passes=12,
                 temperature=1.5, classifier_temperature=1.8, uncertainty_threshold=0.2,
                 gamma=-10.0, lambda_u_ratio=0.25, discrepancy_q=2, dropout_p=0.5,
                 feature_layers=(128, 64), discriminator_layers=(32,),
                 discriminator_dropout=False, lu_through_classifier=True, epochs=30,
                 batch_size=64, learning_rate=0.01, momentum=0.9, weight_decay=5e-4,
                 standardize=True, random_state=0, force_lambda_adv=None, force_lambda_u=None):
        self.mode = mode
        self.uncertainty_metric = uncertainty_metric
        self.n_mc_passes = n_mc_passes
        self.temperature = temperature
        self.classifier_temperature = classifier_temperature
        self.uncertainty_threshold = uncertainty_threshold
        self.gamma = gamma
        self.lambda_u_ratio = lambda_u_ratio
        self.discrepancy_q = discrepancy_q
        self.dropout_p = dropout_p
        self.feature_layers = feature_layers
        self.discriminator_layers = discriminator_layers
        self.discriminator_dropout = discriminator_dropout
        self.lu_through_classifier = lu_through_classifier
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.random_state = random_state
        self.force_lambda_adv = force_lambda_adv
        self.force_lambda_u = force_lambda_u

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            uncertainty_metric=self.uncertainty_metric,
            T=self.n_mc_passes,
            tau=self.temperature,
            tau_c=self.classifier_temperature,
            t_u=self.uncertainty_threshold,
            gamma=self.gamma,
            lambda_u_ratio=self.lambda_u_ratio,
            discrepancy_q=self.discrepancy_q,
            lr=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            lu_through_classifier=self.lu_through_classifier,
            force_lambda_adv=self.force_lambda_adv,
            force_lambda_u=self.force_lambda_u,
        )

    def uncertainty_dim(self, n_classes: int) -> int:
        if self.mode in (SOURCE_ONLY, ADVERSARIAL_PLAIN):
            return 0
        return 1 if self.uncertainty_metric == ENTROPY else n_classes

    def fit(self, X, y, X_target=None, epoch_callback=None, n_classes=None):
        """Train from scratch.

        ``epoch_callback(epoch, reports)`` is called after every epoch with
        the list of per-step :class:`LossReport`.
        """
        cfg = self.train_config()
        X, y = check_X_y(X, y, dtype=np.float64)
        if X_target is not None:
            X_target = check_array(X_target, dtype=np.float64)
            if X_target.shape[1] != X.shape[1]:
                raise ValueError(
                    f"X_target has {X_target.shape[1]} features, X has {X.shape[1]}"
                )
        elif self.mode != SOURCE_ONLY:
            raise ValueError(f"mode={self.mode!r} needs X_target")
        self.classes_ = unique_labels(y) if n_classes is None else np.arange(n_classes)
        y_enc = np.searchsorted(self.classes_, y)
        if not np.array_equal(self.classes_[y_enc], y):
            raise ValueError("y contains labels outside classes_")
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            sd = X.std(axis=0)
            self.scale_ = np.where(sd > 0, sd, 1.0)
        else:
            self.mean_ = np.zeros(X.shape[1])
            self.scale_ = np.ones(X.shape[1])
        n_classes = len(self.classes_)
        specs = default_specs(X.shape[1], n_classes, self.uncertainty_dim(n_classes),
                              self.feature_layers, self.discriminator_layers, self.dropout_p,
                              self.discriminator_dropout)
        self.bundle_ = ModelBundle.build(specs, self.random_state, self.uncertainty_dim(n_classes))
        source = DomainDataset(self._scale(X), y_enc, "source", n_classes)
        target = None if X_target is None else DomainDataset(self._scale(X_target), None, "target", n_classes)
        self.history_ = adaptation.fit(self.bundle_, source, target, cfg, epoch_callback)
        return self

    def _scale(self, X):
        return (X - self.mean_) / self.scale_

    def _validate(self, X):
        check_is_fitted(self, "bundle_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return self._scale(X)

    def predict_proba(self, X, n_mc_passes=None):
        x = self._validate(X)
        probs, _, _ = adaptation.predict_mc(self.bundle_, x, n_mc_passes or self.n_mc_passes,
                                            self.temperature)
        return probs

    def predict(self, X, n_mc_passes=None):
        idx = self.predict_proba(X, n_mc_passes).argmax(axis=1)
        return self.classes_[idx]

    def predict_uncertainty(self, X, n_mc_passes=None):
        """Normalized entropy in ``[0, 1]`` (or class-mean logit variance)."""
        x = self._validate(X)
        _, ent, var = adaptation.predict_mc(self.bundle_, x, n_mc_passes or self.n_mc_passes,
                                            self.temperature)
        if self.uncertainty_metric == ENTROPY:
            return ent / np.log(len(self.classes_))
        return var

    def transform(self, X):
        """Dropout-free feature extractor outputs."""
        return self.bundle_.extract_features(Tensor(self._validate(X)), DETERMINISTIC).data

    def evaluate(self, X, y=None, n_mc_passes=None) -> dict:
        x = self._validate(X)
        y_enc = None
        if y is not None:
            y = np.asarray(y)
            known = np.isin(y, self.classes_)
            y_enc = np.where(known, np.searchsorted(self.classes_, y), -1)
        return adaptation.evaluate(self.bundle_, x, y_enc,
                                   n_mc_passes or self.n_mc_passes, self.temperature,
                                   metric=self.uncertainty_metric)

    def save(self, path, meta=None) -> None:
        check_is_fitted(self, "bundle_")
        info = {
            "estimator_params": _jsonable(self.get_params()),
            "classes": self.classes_.tolist(),
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
        }
        if meta:
            info.update(meta)
        self.bundle_.save(path, meta=info)

    @classmethod
    def load(cls, path) -> "UncertaintyDomainAdapter":
        bundle = ModelBundle.load(path)
        params = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in bundle.meta["estimator_params"].items()}
        est = cls(**params)
        est.bundle_ = bundle
        est.classes_ = np.asarray(bundle.meta["classes"])
        est.mean_ = np.asarray(bundle.meta["mean"], dtype=np.float64)
        est.scale_ = np.asarray(bundle.meta["scale"], dtype=np.float64)
        est.n_features_in_ = len(est.mean_)
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
