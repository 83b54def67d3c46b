"""Estimator-style wrapper: ``fit(X, y)`` / ``predict(X)`` over raw arrays.

``SparseformerClassifier`` flattens the whole configuration surface into
keyword arguments, holds them unvalidated until ``fit`` (so instances are
cheap to construct, copy, and grid over), and exposes the usual
``get_params`` / ``set_params`` pair.  ``fit`` wraps the arrays in an
internal dataset bundle, carves out a stratified validation split, and
runs the standard supervised loop; labels can be any hashable integers —
they are mapped onto contiguous class ids internally and mapped back on
``predict``.
"""

import inspect

import numpy as np

import sparseformer.tensor as T
from sparseformer.data import ClassDef, DatasetBundle, _largest_remainder, \
    channel_stats
from sparseformer.encoder import AttentionConfig, EncoderConfig, \
    GranularitySpec
from sparseformer.errors import ConfigError, DataError, DimensionError
from sparseformer.labels import predict as table_predict
from sparseformer.tensor import Tensor
from sparseformer.training import LabelConfig, TrainConfig, train_supervised


def _as_sample_block(X):
    """Coerce input to float [N, L, C]; a 2-D matrix means one channel."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise DimensionError(f"X must be [N, L] or [N, L, C], "
                             f"got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("X contains non-finite values")
    return X


class SparseformerClassifier:
    """Supervised multi-channel sequence classifier.

    Parameters mirror the training config: optimizer/loop knobs first,
    then encoder geometry, then the label pathway.  ``class_names`` may
    supply one descriptive text per class (sorted label order); richer
    names give the zero-shot alignment more to work with but are not
    required for supervised use.
    """

    def __init__(self, *, seed=0, max_epochs=40, patience=7, batch_size=32,
                 peak_lr=1e-4, lr_floor=None, weight_decay=1e-2,
                 betas=(0.9, 0.999), eps=1e-8,
                 granularities=(25, 50, 100, 150),
                 intra_token_list=(128, 64, 32), inter_tokens=8,
                 cross_tokens=3, model_dim=128, num_heads=8, dropout=0.1,
                 prior_dim=64, max_patches=512, positional=True,
                 embed_dim=64, hidden=256, val_fraction=0.2,
                 class_names=None, dataset_description=""):
        args = dict(locals())
        args.pop("self")
        for name, value in args.items():
            setattr(self, name, value)

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [n for n in sig.parameters if n != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        known = set(self._param_names())
        for name, value in params.items():
            if name not in known:
                raise ConfigError(f"unknown parameter {name!r} for "
                                  f"SparseformerClassifier")
            setattr(self, name, value)
        return self

    # ------------------------------------------------------------- fitting

    def _train_config(self):
        encoder = EncoderConfig(
            granularities=GranularitySpec(tuple(self.granularities)),
            intra_token_list=tuple(self.intra_token_list),
            inter_tokens=self.inter_tokens, cross_tokens=self.cross_tokens,
            attention=AttentionConfig(model_dim=self.model_dim,
                                      num_heads=self.num_heads,
                                      dropout=self.dropout,
                                      prior_dim=self.prior_dim),
            max_patches=self.max_patches, positional=self.positional)
        return TrainConfig(seed=self.seed, max_epochs=self.max_epochs,
                           patience=self.patience,
                           batch_size=self.batch_size, peak_lr=self.peak_lr,
                           lr_floor=self.lr_floor,
                           weight_decay=self.weight_decay,
                           betas=self.betas, eps=self.eps, encoder=encoder,
                           labels=LabelConfig(embed_dim=self.embed_dim,
                                              hidden=self.hidden))

    def _holdout_split(self, y_ids, num_classes, rng):
        n = len(y_ids)
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), "
                              f"got {self.val_fraction}")
        total_val = int(round(n * self.val_fraction))
        total_val = min(max(total_val, 1), n - 1)
        per_class = [np.flatnonzero(y_ids == c + 1) for c in range(num_classes)]
        targets = [len(idx) * self.val_fraction for idx in per_class]
        val_counts = _largest_remainder(targets, total_val)
        train_idx, val_idx = [], []
        for idx, k, cls in zip(per_class, val_counts, range(num_classes)):
            if k >= len(idx):
                raise DataError(f"class id {cls + 1} would lose every "
                                "training sample to the validation split")
            shuffled = rng.permutation(idx)
            val_idx.extend(int(i) for i in shuffled[:k])
            train_idx.extend(int(i) for i in shuffled[k:])
        return sorted(train_idx), sorted(val_idx)

    def fit(self, X, y):
        X = _as_sample_block(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise DimensionError(f"y must be one label per sample, got "
                                 f"{y.shape} for {len(X)} samples")
        classes, y_ids = np.unique(y, return_inverse=True)
        y_ids = y_ids + 1
        if len(classes) < 2:
            raise DataError(f"need at least two classes, got {len(classes)}")
        if self.class_names is not None and \
                len(self.class_names) != len(classes):
            raise ConfigError(f"{len(self.class_names)} class_names for "
                              f"{len(classes)} classes")
        names = (list(self.class_names) if self.class_names is not None
                 else [f"class-{value}" for value in classes])
        defs = tuple(ClassDef(i + 1, name) for i, name in enumerate(names))
        description = self.dataset_description or (
            f"supervised fit: {X.shape[1]} timestamps, {X.shape[2]} "
            f"channels, {len(classes)} classes")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(self.seed),
                                   spawn_key=(7,)).generate_state(1)[0])
        train_idx, val_idx = self._holdout_split(y_ids, len(classes), rng)
        bundle = DatasetBundle(name="fit", samples=X, labels=y_ids,
                               classes=defs,
                               dataset_description=description,
                               splits={"train": train_idx, "val": val_idx,
                                       "test": []})
        record, system = train_supervised(bundle, self._train_config())
        self.classes_ = classes
        self.system_ = system
        self.record_ = record
        self.bundle_ = bundle
        # predict-time inputs are scaled exactly as the trainer scaled these
        self.norm_mean_, self.norm_std_ = channel_stats(X, train_idx)
        self.label_table_ = system.label_table(bundle)
        return self

    # ----------------------------------------------------------- inference

    def _check_fitted(self):
        if not hasattr(self, "system_"):
            raise ConfigError("this SparseformerClassifier is not fitted "
                              "yet; call fit first")

    def _logits(self, X):
        self._check_fitted()
        X = _as_sample_block(X)
        X = (X - self.norm_mean_) / self.norm_std_
        system = self.system_
        with T.no_grad():
            prior = system.prior_vector(self.bundle_)
            prior = None if prior is None else Tensor(prior)
            encoded = system.encoder.encode_batch(X, prior=prior)
            logits = encoded.data @ self.label_table_.vectors.data.T
        return encoded.data, logits

    def transform(self, X):
        """Latent encodings [N, model_dim] from the fitted encoder."""
        encoded, _ = self._logits(X)
        return encoded

    def decision_function(self, X):
        """Label-alignment similarity scores [N, M] in ``classes_`` order."""
        _, logits = self._logits(X)
        return logits

    def predict(self, X):
        encoded, _ = self._logits(X)
        ids = table_predict(encoded, self.label_table_)
        return self.classes_[ids - 1]

    def predict_proba(self, X):
        _, logits = self._logits(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def score(self, X, y):
        """Mean accuracy against true labels."""
        y = np.asarray(y)
        pred = self.predict(X)
        if y.shape != pred.shape:
            raise DimensionError(f"y has shape {y.shape}, expected "
                                 f"{pred.shape}")
        return float(np.mean(pred == y))
