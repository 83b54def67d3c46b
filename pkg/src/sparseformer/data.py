"""Dataset bundles: on-disk format, splits, batching, synthetic corpora.

A bundle is one classification dataset: samples [N, L, C], integer labels
in 1..M, class metadata (names and descriptions feed the label encoder),
a free-text dataset description (feeds the attention prior), and a fixed
train/val/test split.  Bundles from different sources may disagree on L,
C, and M — the encoder is built to absorb that, so no harmonization
happens here.

On disk a bundle is a directory of three files: ``meta.json``,
``samples.f32`` (little-endian float32, row-major [N][L][C]) and
``labels.i32`` (little-endian int32).  Samples are held in float32
in memory too, so save/load round-trips are byte-exact.

The synthetic generator builds desk-scale corpora where each class is a
fixed sum of sinusoids plus Gaussian noise.  Recipes tag each component
as a fine (high-frequency) or coarse (low-frequency) cue so tasks can be
constructed where evidence genuinely spans scales; a DFT band-energy
oracle is included to certify that a generated task is learnable before
any model touches it.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from sparseformer.errors import ConfigError, DataError

META_NAME = "meta.json"
SAMPLES_NAME = "samples.f32"
LABELS_NAME = "labels.i32"
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_FRACTIONS = (0.6, 0.2)  # train, val; test takes the remainder
_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    description: str = ""


class DatasetBundle:
    """Immutable-by-convention container for one dataset."""

    def __init__(self, name, samples, labels, classes, dataset_description,
                 splits, normalized=False, complete=True):
        samples = np.ascontiguousarray(samples, dtype="<f4")
        labels = np.asarray(labels, dtype=np.int64)
        if samples.ndim != 3:
            raise DataError(f"samples must be [N, L, C], got {samples.shape}")
        n = samples.shape[0]
        if labels.shape != (n,):
            raise DataError(f"labels shape {labels.shape} does not match "
                            f"{n} samples")
        if not np.all(np.isfinite(samples)):
            offset = int(np.flatnonzero(~np.isfinite(samples).ravel())[0])
            raise DataError(f"non-finite sample value at flat offset {offset}")
        classes = tuple(classes)
        ids = [c.id for c in classes]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate class ids in {sorted(ids)}")
        if len(labels) and (labels.min() < 1 or labels.max() > len(classes)):
            bad = labels[(labels < 1) | (labels > len(classes))][0]
            raise DataError(f"label {int(bad)} outside 1..{len(classes)}")
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}
        if set(splits) != set(SPLIT_NAMES):
            raise DataError(f"splits must be exactly {SPLIT_NAMES}, "
                            f"got {sorted(splits)}")
        merged = np.concatenate([splits[k] for k in SPLIT_NAMES])
        if len(np.unique(merged)) != len(merged) or (
                len(merged) and (merged.min() < 0 or merged.max() >= n)):
            raise DataError("split index lists must be disjoint and in range")
        if complete and len(merged) != n:
            # Loaded and generated bundles assign every sample to a split;
            # shot-subsampled views legitimately reference fewer.
            raise DataError(f"splits reference {len(merged)} of {n} samples")
        self.name = name
        self.samples = samples
        self.labels = labels
        self.classes = classes
        self.dataset_description = dataset_description
        self.splits = splits
        self.normalized = normalized

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def channels(self):
        return self.samples.shape[2]

    @property
    def num_classes(self):
        return len(self.classes)

    def split_arrays(self, split):
        """(samples, labels) restricted to one split."""
        idx = self.splits[split]
        return self.samples[idx], self.labels[idx]


def save_bundle(directory, bundle):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "name": bundle.name,
        "length": bundle.length,
        "channels": bundle.channels,
        "classes": [{"id": c.id, "name": c.name, "description": c.description}
                    for c in bundle.classes],
        "dataset_description": bundle.dataset_description,
        "count": bundle.count,
        "splits": {k: [int(i) for i in v] for k, v in bundle.splits.items()},
    }
    with open(os.path.join(directory, META_NAME), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(directory, SAMPLES_NAME), "wb") as fh:
        fh.write(np.ascontiguousarray(bundle.samples, dtype="<f4").tobytes())
    with open(os.path.join(directory, LABELS_NAME), "wb") as fh:
        fh.write(bundle.labels.astype("<i4").tobytes())


def load_bundle(directory, normalize=True):
    """Read a bundle directory; optionally apply train-split z-scoring."""
    meta_path = os.path.join(directory, META_NAME)
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{directory}: missing {META_NAME}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: invalid JSON ({exc})") from None
    try:
        n, length, channels = meta["count"], meta["length"], meta["channels"]
        classes = tuple(ClassDef(c["id"], c["name"], c.get("description", ""))
                        for c in meta["classes"])
        description = meta["dataset_description"]
        splits = meta["splits"]
        name = meta["name"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{meta_path}: missing or malformed key ({exc})") from None

    samples_path = os.path.join(directory, SAMPLES_NAME)
    try:
        raw = np.fromfile(samples_path, dtype="<f4")
    except FileNotFoundError:
        raise DataError(f"{directory}: missing {SAMPLES_NAME}") from None
    expected = n * length * channels
    if raw.size != expected:
        raise DataError(f"{samples_path}: expected {expected} float32 values "
                        f"({expected * 4} bytes), found {raw.size}")
    samples = raw.reshape(n, length, channels)
    if not np.all(np.isfinite(samples)):
        offset = int(np.flatnonzero(~np.isfinite(raw))[0])
        raise DataError(f"{samples_path}: non-finite value at offset {offset}")

    labels_path = os.path.join(directory, LABELS_NAME)
    try:
        labels = np.fromfile(labels_path, dtype="<i4").astype(np.int64)
    except FileNotFoundError:
        raise DataError(f"{directory}: missing {LABELS_NAME}") from None
    if labels.size != n:
        raise DataError(f"{labels_path}: expected {n} labels, found {labels.size}")
    bad = np.flatnonzero((labels < 1) | (labels > len(classes)))
    if bad.size:
        raise DataError(f"{labels_path}: label {int(labels[bad[0]])} at offset "
                        f"{int(bad[0])} outside 1..{len(classes)}")

    bundle = DatasetBundle(name, samples, labels, classes, description, splits)
    return normalize_bundle(bundle) if normalize else bundle


def channel_stats(samples, indices):
    """Per-channel (mean, std) over the given sample rows; near-constant
    channels get std 1.0 so they pass through unscaled."""
    block = np.asarray(samples)[list(indices)].astype(np.float64)
    mean = block.mean(axis=(0, 1))
    std = block.std(axis=(0, 1))
    return mean, np.where(std < _STD_FLOOR, 1.0, std)


def normalize_bundle(bundle):
    """Per-channel z-score with statistics from the train split only."""
    if bundle.normalized:
        return bundle
    mean, std = channel_stats(bundle.samples, bundle.splits["train"])
    scaled = (bundle.samples.astype(np.float64) - mean) / std
    return DatasetBundle(bundle.name, scaled, bundle.labels, bundle.classes,
                         bundle.dataset_description, bundle.splits,
                         normalized=True)


# ------------------------------------------------------------------ synth

@dataclass(frozen=True)
class SignalComponent:
    """One sinusoidal cue: frequency is in cycles per sample window."""
    frequency: float
    amplitude: float
    channels: tuple = None  # None means every channel
    scale: str = "fine"

    def __post_init__(self):
        if self.frequency <= 0:
            raise ConfigError(f"frequency must be positive, got {self.frequency}")
        if self.scale not in ("fine", "coarse"):
            raise ConfigError(f"scale must be 'fine' or 'coarse', got {self.scale!r}")
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))

    def describe(self):
        where = ("all channels" if self.channels is None else
                 "channels " + " ".join(str(c) for c in self.channels))
        return f"{self.scale} rhythm near {self.frequency:g} cycles on {where}"


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic dataset; one component tuple per class.

    ``samples_per_class`` is either one count for every class or a
    per-class sequence (so totals like 1000 over 3 classes are reachable).
    """
    seed: int
    length: int
    channels: int
    samples_per_class: object
    recipes: tuple  # tuple of per-class tuples of SignalComponent
    noise_std: float = 0.1
    name: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "recipes",
                           tuple(tuple(r) for r in self.recipes))
        counts = self.samples_per_class
        counts = (tuple(counts) if hasattr(counts, "__len__")
                  else (int(counts),) * len(self.recipes))
        object.__setattr__(self, "samples_per_class", counts)
        if len(counts) != len(self.recipes):
            raise ConfigError(f"{len(counts)} class counts for "
                              f"{len(self.recipes)} recipes")
        if min(self.length, self.channels, *counts) < 1:
            raise ConfigError("length, channels, samples_per_class must be "
                              f"positive, got {self.length}/{self.channels}/"
                              f"{counts}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")
        if not self.recipes or any(not r for r in self.recipes):
            raise ConfigError("every class needs at least one signal component")
        if len(set(self.recipes)) != len(self.recipes):
            raise ConfigError("class recipes must be pairwise distinct")
        for recipe in self.recipes:
            for comp in recipe:
                if comp.channels is not None and (
                        min(comp.channels) < 0 or max(comp.channels) >= self.channels):
                    raise ConfigError(f"component channels {comp.channels} out of "
                                      f"range for {self.channels} channels")

    @property
    def num_classes(self):
        return len(self.recipes)

    @property
    def total_count(self):
        return sum(self.samples_per_class)


def _clean_signal(spec, recipe):
    """Noise-free class template [L, C]."""
    t = np.arange(spec.length, dtype=np.float64)
    signal = np.zeros((spec.length, spec.channels))
    for comp in recipe:
        wave = comp.amplitude * np.sin(2.0 * np.pi * comp.frequency * t / spec.length)
        cols = range(spec.channels) if comp.channels is None else comp.channels
        for c in cols:
            signal[:, c] += wave
    return signal


def _largest_remainder(targets, total):
    """Integer allocation summing to ``total``, each within 1 of its target."""
    base = [int(t) for t in targets]
    order = sorted(range(len(targets)),
                   key=lambda i: (targets[i] - base[i], -i), reverse=True)
    for i in order[:max(0, total - sum(base))]:
        base[i] += 1
    return base


def _stratified_split(per_class_indices):
    """60/20/20 split, exact in total, within one sample per class.

    Global split sizes come first (largest remainder over N*0.6/0.2/0.2),
    then the val+test pool is apportioned over classes and halved; this
    keeps every per-class count within one sample of its proportional
    target while the totals land exactly.
    """
    counts = [len(ix) for ix in per_class_indices]
    n = sum(counts)
    frac_train, frac_val = _SPLIT_FRACTIONS
    totals = _largest_remainder([n * frac_train, n * frac_val,
                                 n * (1.0 - frac_train - frac_val)], n)
    rest = _largest_remainder([c * (1.0 - frac_train) for c in counts],
                              totals[1] + totals[2])
    val = [r // 2 for r in rest]
    deficit = totals[1] - sum(val)
    for i in (i for i, r in enumerate(rest) if r % 2):
        if deficit <= 0:
            break
        val[i] += 1
        deficit -= 1
    splits = {k: [] for k in SPLIT_NAMES}
    for indices, r, v in zip(per_class_indices, rest, val):
        n_train = len(indices) - r
        splits["train"].extend(indices[:n_train])
        splits["val"].extend(indices[n_train:n_train + v])
        splits["test"].extend(indices[n_train + v:])
    return {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}


def generate_synthetic(spec):
    """Deterministic synthetic bundle: class template + Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    n = spec.total_count
    samples = np.empty((n, spec.length, spec.channels))
    labels = np.empty(n, dtype=np.int64)
    classes = []
    index_blocks = []
    start = 0
    for k, (recipe, count) in enumerate(zip(spec.recipes, spec.samples_per_class)):
        cid = k + 1
        template = _clean_signal(spec, recipe)
        block = slice(start, start + count)
        start += count
        noise = rng.normal(0.0, spec.noise_std,
                           size=(count, spec.length, spec.channels))
        samples[block] = template + noise
        labels[block] = cid
        classes.append(ClassDef(cid, f"pattern-{cid}",
                                " with ".join(c.describe() for c in recipe)))
        index_blocks.append(np.arange(block.start, block.stop))
    description = (f"{spec.name}: synthetic recordings, {spec.length} timestamps, "
                   f"{spec.channels} channels, {spec.num_classes} classes")
    return DatasetBundle(spec.name, samples, labels, classes, description,
                         _stratified_split(index_blocks))


def band_energy_oracle(samples, spec):
    """Model-free classifier: DFT energy in each class's component bins.

    Scores a sample against class k by summing squared spectrum magnitudes
    at k's component frequencies over that component's channels; predicts
    the argmax (ties go to the lowest class id).  Used to certify that a
    synthetic task is solvable from frequency evidence alone.
    """
    samples = np.asarray(samples, dtype=np.float64)
    spectra = np.abs(np.fft.rfft(samples, axis=1)) ** 2  # [N, bins, C]
    top = spectra.shape[1] - 1
    scores = np.zeros((samples.shape[0], spec.num_classes))
    for k, recipe in enumerate(spec.recipes):
        for comp in recipe:
            b = min(int(round(comp.frequency)), top)
            cols = (slice(None) if comp.channels is None
                    else list(comp.channels))
            scores[:, k] += spectra[:, b, cols].sum(axis=-1)
    return np.argmax(scores, axis=1) + 1


# --------------------------------------------------------------- batching

def batches(bundle, split, batch_size, seed):
    """Seeded epoch shuffle; emits every split sample exactly once."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    if split not in bundle.splits:
        raise DataError(f"unknown split {split!r}")
    idx = bundle.splits[split]
    if len(idx) == 0:
        raise DataError(f"split {split!r} of {bundle.name!r} is empty")
    order = np.random.default_rng(seed).permutation(idx)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        yield bundle.samples[chunk], bundle.labels[chunk]


def subsample_shots(bundle, shots, seed):
    """Reduce the train split to exactly ``shots`` per class."""
    if shots < 1:
        raise ConfigError(f"shots must be positive, got {shots}")
    rng = np.random.default_rng(seed)
    train = bundle.splits["train"]
    kept = []
    for cls in bundle.classes:
        pool = train[bundle.labels[train] == cls.id]
        if len(pool) < shots:
            raise DataError(f"class {cls.name!r} has {len(pool)} train samples, "
                            f"need {shots}")
        kept.extend(rng.choice(pool, size=shots, replace=False))
    splits = dict(bundle.splits)
    splits["train"] = np.sort(np.asarray(kept, dtype=np.int64))
    return DatasetBundle(bundle.name, bundle.samples, bundle.labels,
                         bundle.classes, bundle.dataset_description, splits,
                         normalized=bundle.normalized, complete=False)
