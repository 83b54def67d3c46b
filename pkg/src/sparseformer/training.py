"""Optimizer, schedule, early stopping, and the three training protocols.

``train_multisource`` is the single training loop: batches interleave
round-robin across bundles (an epoch is one pass over the largest bundle,
smaller ones recycle with fresh shuffles), every batch's loss uses its own
bundle's label table, and one shared encoder + projector absorbs all of it.
``train_supervised`` is the one-bundle special case.  Few-shot adaptation
freezes the encoder — encodings are precomputed once, so only the projector
(or an optional fresh linear head) trains.  Zero-shot evaluation is the
shared evaluation path with no updates at all.

Determinism: all randomness descends from the config seed through
``numpy.random.SeedSequence`` spawn keys, so identical config + data yield
bit-identical run records in double precision.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

import sparseformer.tensor as T
from sparseformer.attention import Linear
from sparseformer.checkpoint import load_checkpoint, save_checkpoint
from sparseformer.data import batches, normalize_bundle, subsample_shots
from sparseformer.encoder import (AttentionConfig, EncoderConfig,
                                  GranularitySpec, SparseformerModel)
from sparseformer.errors import ConfigError, DataError, NumericError
from sparseformer.labels import (HashedTextProvider, LabelProjector,
                                 TableTextProvider, build_label_table,
                                 classification_loss, label_text)
from sparseformer.metrics import classification_metrics, evaluate_scores
from sparseformer.tensor import Tensor

CHECKPOINT_NAME = "model.ckpt"
RECORD_NAME = "record.json"
REPORT_NAME = "report.txt"


def _child_seed(base, *key):
    """Deterministic derived seed; spawn keys keep streams independent."""
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(key))
    return int(ss.generate_state(1)[0])


# ----------------------------------------------------------------- config

def check_config_keys(mapping, allowed, section):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {section} config")


_ATTENTION_KEYS = ("model_dim", "num_heads", "dropout", "prior_dim")
_ENCODER_KEYS = ("granularities", "intra_token_list", "inter_tokens",
                 "cross_tokens", "attention", "max_patches", "positional",
                 "head_hidden")
_LABEL_KEYS = ("embed_dim", "hidden", "provider", "table_path",
               "prior_table_path")
_TRAIN_KEYS = ("seed", "max_epochs", "patience", "batch_size", "peak_lr",
               "lr_floor", "weight_decay", "betas", "eps", "encoder", "labels")


def _attention_from_dict(d):
    check_config_keys(d, _ATTENTION_KEYS, "attention")
    return AttentionConfig(model_dim=d.get("model_dim", 128),
                           num_heads=d.get("num_heads", 8),
                           dropout=d.get("dropout", 0.1),
                           prior_dim=d.get("prior_dim", 64))


def _encoder_from_dict(d):
    check_config_keys(d, _ENCODER_KEYS, "encoder")
    return EncoderConfig(
        granularities=GranularitySpec(tuple(d.get("granularities",
                                                  (25, 50, 100, 150)))),
        intra_token_list=tuple(d.get("intra_token_list", (128, 64, 32))),
        inter_tokens=d.get("inter_tokens", 8),
        cross_tokens=d.get("cross_tokens", 3),
        attention=_attention_from_dict(d.get("attention", {})),
        max_patches=d.get("max_patches", 512),
        positional=d.get("positional", True),
        head_hidden=d.get("head_hidden", 0))


def _encoder_to_dict(cfg):
    return {"granularities": list(cfg.granularities),
            "intra_token_list": list(cfg.intra_token_list),
            "inter_tokens": cfg.inter_tokens,
            "cross_tokens": cfg.cross_tokens,
            "attention": {"model_dim": cfg.attention.model_dim,
                          "num_heads": cfg.attention.num_heads,
                          "dropout": cfg.attention.dropout,
                          "prior_dim": cfg.attention.prior_dim},
            "max_patches": cfg.max_patches,
            "positional": cfg.positional,
            "head_hidden": cfg.head_hidden}


@dataclass(frozen=True)
class LabelConfig:
    """Label-encoder wiring: provider choice plus projector dims."""
    embed_dim: int = 64
    hidden: int = 256
    provider: str = "hashed"
    table_path: str = None
    prior_table_path: str = None

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden < 1:
            raise ConfigError(f"label dims must be positive, got "
                              f"E={self.embed_dim} hidden={self.hidden}")
        if self.provider not in ("hashed", "table"):
            raise ConfigError(f"provider must be 'hashed' or 'table', "
                              f"got {self.provider!r}")
        if self.provider == "table" and not self.table_path:
            raise ConfigError("table provider requires table_path")

    @classmethod
    def from_dict(cls, d):
        check_config_keys(d, _LABEL_KEYS, "labels")
        return cls(**d)

    def to_dict(self):
        return {"embed_dim": self.embed_dim, "hidden": self.hidden,
                "provider": self.provider, "table_path": self.table_path,
                "prior_table_path": self.prior_table_path}


def _default_encoder():
    return EncoderConfig(granularities=GranularitySpec((25, 50, 100, 150)),
                         intra_token_list=(128, 64, 32), inter_tokens=8,
                         cross_tokens=3)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    max_epochs: int = 40
    patience: int = 7
    batch_size: int = 32
    peak_lr: float = 1e-4
    lr_floor: float = None  # defaults to peak_lr / 100
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    encoder: EncoderConfig = field(default_factory=_default_encoder)
    labels: LabelConfig = field(default_factory=LabelConfig)

    def __post_init__(self):
        if self.lr_floor is None:
            object.__setattr__(self, "lr_floor", self.peak_lr / 100.0)
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be positive, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must be in 1..max_epochs, got "
                              f"{self.patience} with max_epochs={self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.peak_lr <= 0 or self.lr_floor < 0 or self.lr_floor > self.peak_lr:
            raise ConfigError(f"need 0 <= lr_floor <= peak_lr and peak_lr > 0, "
                              f"got floor={self.lr_floor} peak={self.peak_lr}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), "
                              f"got {self.betas}")

    @classmethod
    def from_dict(cls, d):
        check_config_keys(d, _TRAIN_KEYS, "train")
        d = dict(d)
        encoder = _encoder_from_dict(d.pop("encoder", {}))
        labels = LabelConfig.from_dict(d.pop("labels", {}))
        return cls(encoder=encoder, labels=labels, **d)

    def to_dict(self):
        return {"seed": self.seed, "max_epochs": self.max_epochs,
                "patience": self.patience, "batch_size": self.batch_size,
                "peak_lr": self.peak_lr, "lr_floor": self.lr_floor,
                "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "encoder": _encoder_to_dict(self.encoder),
                "labels": self.labels.to_dict()}


# -------------------------------------------------------------- optimizer

def cosine_lr(t, total, peak, floor):
    """floor + 0.5 (peak - floor) (1 + cos(pi t / total))."""
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """AdamW over a name->Tensor dict; weight decay is decoupled.

    Both the moment step and the decay term are computed from the
    pre-update parameter: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    A missing gradient counts as zero (the moments still decay).
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr):
        grads = {}
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}; "
                                   "step rejected")
            grads[name] = g
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            p = self.params[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                    + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class EarlyStopper:
    """Strict-improvement patience counter on a maximized score."""

    def __init__(self, patience):
        if patience < 1:
            raise ConfigError(f"patience must be positive, got {patience}")
        self.patience = patience
        self.best_value = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, value):
        """Record one epoch's score; True means stop now."""
        self.epoch += 1
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# ----------------------------------------------------------------- system

def _build_label_provider(labels_cfg):
    if labels_cfg.provider == "hashed":
        return HashedTextProvider(labels_cfg.embed_dim)
    provider = TableTextProvider.from_file(labels_cfg.table_path)
    if provider.output_dim != labels_cfg.embed_dim:
        raise ConfigError(f"embedding table has dim {provider.output_dim}, "
                          f"config says {labels_cfg.embed_dim}")
    return provider


def _build_prior_provider(config):
    prior_dim = config.encoder.prior_dim
    if prior_dim == 0:
        return None
    if config.labels.prior_table_path:
        provider = TableTextProvider.from_file(config.labels.prior_table_path)
        if provider.output_dim != prior_dim:
            raise ConfigError(f"prior table has dim {provider.output_dim}, "
                              f"encoder expects {prior_dim}")
        return provider
    return HashedTextProvider(prior_dim)


class SparseformerSystem:
    """Encoder + label projector + text providers, built from one config."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(_child_seed(config.seed, 1))
        self.encoder = SparseformerModel(rng, config.encoder)
        self.projector = LabelProjector(rng, config.labels.embed_dim,
                                        config.encoder.model_dim,
                                        hidden=config.labels.hidden)
        self.label_provider = _build_label_provider(config.labels)
        self.prior_provider = _build_prior_provider(config)

    def named_params(self):
        params = {f"encoder.{n}": p for n, p in self.encoder.named_params()}
        params.update({f"labels.{n}": p
                       for n, p in self.projector.named_params()})
        return params

    def prior_vector(self, bundle):
        """Dataset-description embedding, or None when priors are disabled."""
        if self.prior_provider is None:
            return None
        return np.asarray(self.prior_provider(bundle.dataset_description),
                          dtype=float)

    def label_table(self, bundle):
        classes = [(c.id, label_text(c.name, c.description))
                   for c in bundle.classes]
        return build_label_table(classes, self.label_provider, self.projector)

    def save(self, path):
        save_checkpoint(path, self.named_params(), config=self.config.to_dict())

    def load_state(self, arrays):
        encoder_part, label_part = {}, {}
        for name, array in arrays.items():
            if name.startswith("encoder."):
                encoder_part[name[len("encoder."):]] = array
            elif name.startswith("labels."):
                label_part[name[len("labels."):]] = array
            else:
                raise ConfigError(f"unrecognized parameter {name!r} in state")
        self.encoder.load_state(encoder_part)
        self.projector.load_state(label_part)

    @classmethod
    def load(cls, path):
        config_dict, _, arrays = load_checkpoint(path)
        system = cls(TrainConfig.from_dict(config_dict))
        system.load_state(arrays)
        return system


# ------------------------------------------------------------- evaluation

def split_scores(system, bundle, split):
    """(true ids, similarity logits [N, M]) for one split, no updates."""
    with T.no_grad():
        samples, true_ids = bundle.split_arrays(split)
        if len(true_ids) == 0:
            raise DataError(f"split {split!r} of {bundle.name!r} is empty")
        prior = system.prior_vector(bundle)
        prior = None if prior is None else Tensor(prior)
        table = system.label_table(bundle)
        encoded = system.encoder.encode_batch(samples, prior=prior)
        scores = encoded.data @ table.vectors.data.T
    return true_ids, scores


def evaluate_split(system, bundle, split):
    bundle = normalize_bundle(bundle)
    true_ids, scores = split_scores(system, bundle, split)
    return evaluate_scores(true_ids, scores)


def _macro_f1(true_ids, scores, num_classes):
    """Validation scorer: macro-F1 only, defined even when a class is
    missing from the split (unlike the ranking metrics in full reports)."""
    pred = np.argmax(scores, axis=1) + 1
    _, _, _, f1 = classification_metrics(true_ids, pred, num_classes)
    return float(np.mean(f1))


def validation_f1(system, bundle):
    true_ids, scores = split_scores(system, bundle, "val")
    return _macro_f1(true_ids, scores, bundle.num_classes)


def zeroshot_eval(system, bundle):
    """Label-similarity classification on an unseen bundle: project its
    label texts, score the test split, no parameter updates."""
    return evaluate_split(system, bundle, "test")


# --------------------------------------------------------------- training

@dataclass
class RunRecord:
    seed: int
    config: dict
    bundles: list
    epochs: list
    best_epoch: int
    stopped_early: bool
    test: dict  # bundle name -> EvalResult

    def as_dict(self):
        test = {}
        for name, result in self.test.items():
            entry = dict(result.summary())
            entry["per_class"] = [{"id": r.id, "precision": r.precision,
                                   "recall": r.recall, "f1": r.f1,
                                   "auroc": r.auroc, "auprc": r.auprc,
                                   "support": r.support}
                                  for r in result.per_class]
            test[name] = entry
        return {"seed": self.seed, "config": self.config,
                "bundles": self.bundles, "epochs": self.epochs,
                "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early, "test": test}

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def report_lines(self):
        lines = [f"seed={self.seed}",
                 f"bundles={','.join(self.bundles)}",
                 f"epochs_trained={len(self.epochs)}",
                 f"best_epoch={self.best_epoch}",
                 f"stopped_early={self.stopped_early}"]
        for name, result in self.test.items():
            lines.extend(result.report_lines(prefix=f"test.{name}."))
        return lines


def _bundle_stream(bundle, config, epoch, index):
    """Endless train batches; each pass reshuffles with a derived seed."""
    pass_index = 0
    while True:
        seed = _child_seed(config.seed, 3, epoch, index, pass_index)
        yield from batches(bundle, "train", config.batch_size, seed)
        pass_index += 1


def _train_batch(system, bundle, xb, yb, prior, optimizer, lr, rng,
                 where):
    table = system.label_table(bundle)
    encoded = system.encoder.encode_batch(xb, prior=prior, rng=rng)
    loss = classification_loss(encoded, yb, table)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at {where}")
    loss.backward()
    optimizer.step(lr)
    optimizer.zero_grad()
    return value


def train_multisource(bundles, config, out_dir=None):
    """Shared-weights training over heterogeneous bundles.

    Returns (RunRecord, SparseformerSystem); the system holds the
    best-validation parameters.  When ``out_dir`` is given, the checkpoint,
    record JSON, and key=value report are written there.
    """
    if not bundles:
        raise ConfigError("need at least one bundle")
    names = [b.name for b in bundles]
    if len(set(names)) != len(names):
        raise DataError(f"bundle names must be unique, got {names}")
    bundles = [normalize_bundle(b) for b in bundles]
    for bundle in bundles:
        for split in ("train", "val"):
            if len(bundle.splits[split]) == 0:
                raise DataError(f"bundle {bundle.name!r} has an empty "
                                f"{split} split")

    system = SparseformerSystem(config)
    params = system.named_params()
    optimizer = AdamW(params, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    dropout_rng = np.random.default_rng(_child_seed(config.seed, 2))
    stopper = EarlyStopper(config.patience)
    priors = {b.name: (None if system.prior_vector(b) is None
                       else Tensor(system.prior_vector(b)))
              for b in bundles}
    largest = max(len(b.splits["train"]) for b in bundles)
    steps = -(-largest // config.batch_size)  # ceil

    epochs_log = []
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.peak_lr,
                       config.lr_floor)
        streams = [_bundle_stream(b, config, epoch, i)
                   for i, b in enumerate(bundles)]
        total, count = 0.0, 0
        for step in range(steps):
            for bundle, stream in zip(bundles, streams):
                xb, yb = next(stream)
                where = (f"epoch {epoch}, step {step}, "
                         f"bundle {bundle.name!r}")
                total += _train_batch(system, bundle, xb, yb,
                                      priors[bundle.name], optimizer, lr,
                                      dropout_rng, where)
                count += 1
        val_f1 = {b.name: validation_f1(system, b) for b in bundles}
        mean_val = float(np.mean(list(val_f1.values())))
        epochs_log.append({"epoch": epoch, "lr": lr,
                           "train_loss": total / count,
                           "val_f1": val_f1, "val_f1_mean": mean_val})
        stop = stopper.update(mean_val)
        if stopper.best_epoch == epoch:
            best_state = {n: p.data.copy() for n, p in params.items()}
        if stop:
            break

    system.load_state(best_state)
    test = {b.name: evaluate_split(system, b, "test")
            for b in bundles if len(b.splits["test"])}
    record = RunRecord(seed=config.seed, config=config.to_dict(),
                       bundles=names, epochs=epochs_log,
                       best_epoch=stopper.best_epoch,
                       stopped_early=stopper.epoch < config.max_epochs,
                       test=test)
    if out_dir is not None:
        write_run_outputs(out_dir, record, system)
    return record, system


def train_supervised(bundle, config, out_dir=None):
    """Single-bundle training; exactly train_multisource([bundle], ...)."""
    return train_multisource([bundle], config, out_dir=out_dir)


def write_run_outputs(out_dir, record, system):
    os.makedirs(out_dir, exist_ok=True)
    system.save(os.path.join(out_dir, CHECKPOINT_NAME))
    with open(os.path.join(out_dir, RECORD_NAME), "w", encoding="utf-8") as fh:
        fh.write(record.to_json())
        fh.write("\n")
    with open(os.path.join(out_dir, REPORT_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(record.report_lines()))
        fh.write("\n")


# --------------------------------------------------------------- few-shot

def _encode_fixed(system, bundle, split):
    """Encodings as plain arrays: the few-shot backbone is frozen."""
    with T.no_grad():
        samples, true_ids = bundle.split_arrays(split)
        prior = system.prior_vector(bundle)
        prior = None if prior is None else Tensor(prior)
        encoded = system.encoder.encode_batch(samples, prior=prior)
    return encoded.data, true_ids


def fewshot_adapt(system, bundle, shots, config, mode="projector"):
    """Adapt a pretrained system to a target bundle from k shots per class.

    The encoder never updates.  ``mode="projector"`` continues training the
    label projector on the shot subset; ``mode="head"`` trains a fresh
    linear classification head on the frozen encodings instead.  Early
    stopping runs on target-val macro-F1; returns test EvalResult at the
    best epoch.
    """
    if mode not in ("projector", "head"):
        raise ConfigError(f"mode must be 'projector' or 'head', got {mode!r}")
    bundle = normalize_bundle(bundle)
    few = subsample_shots(bundle, shots, seed=_child_seed(config.seed, 4))
    enc_train, y_train = _encode_fixed(system, few, "train")
    enc_val, y_val = _encode_fixed(system, few, "val")
    enc_test, y_test = _encode_fixed(system, few, "test")
    num_classes = bundle.num_classes

    if mode == "projector":
        trainable = dict(system.projector.named_params())

        def batch_loss(rows, ids):
            table = system.label_table(bundle)
            return classification_loss(Tensor(rows), ids, table)

        def score(rows):
            with T.no_grad():
                table = system.label_table(bundle)
            return rows @ table.vectors.data.T
    else:
        head_rng = np.random.default_rng(_child_seed(config.seed, 5))
        head = Linear(head_rng, system.config.encoder.model_dim, num_classes)
        trainable = dict(head.named_params("head."))

        def batch_loss(rows, ids):
            logits = T.linear(Tensor(rows), head.w, head.b)
            return T.cross_entropy_rows(logits, np.asarray(ids) - 1)

        def score(rows):
            with T.no_grad():
                return rows @ head.w.data + head.b.data

    optimizer = AdamW(trainable, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    stopper = EarlyStopper(config.patience)
    shuffle_rng = np.random.default_rng(_child_seed(config.seed, 6))
    best_state = None
    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.peak_lr,
                       config.lr_floor)
        order = shuffle_rng.permutation(len(y_train))
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            loss = batch_loss(enc_train[chunk], y_train[chunk])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at adaptation epoch "
                                   f"{epoch}")
            loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad()
        val_f1 = _macro_f1(y_val, score(enc_val), num_classes)
        stop = stopper.update(val_f1)
        if stopper.best_epoch == epoch:
            best_state = {n: p.data.copy() for n, p in trainable.items()}
        if stop:
            break
    for name, p in trainable.items():
        p.data = best_state[name]
    return evaluate_scores(y_test, score(enc_test))
