"""Text-anchored label embeddings, similarity scoring, and prediction.

Class labels are encoded from their descriptions: a text-embedding provider
maps label text to a fixed vector, and a small trainable projector lifts it
into the encoder's output space.  Classification is dot-product similarity
against the projected table, trained with softmax cross-entropy.  Because
the table is a function of the projector, it must be rebuilt whenever the
projector's parameters change; callers rebuild it every batch.

Two providers are supplied: a file-backed table for embeddings computed
offline (by whatever text model the user prefers), and a hashed bag-of-words
fallback that keeps the toolkit self-contained.  Both are deterministic and
emit unit-norm vectors (the empty embedding stays zero).
"""

import math

import numpy as np

import sparseformer.tensor as T
from sparseformer.errors import ConfigError, DataError, DimensionError
from sparseformer.tensor import Tensor

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data):
    """64-bit FNV-1a of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _unit(vec):
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm == 0.0:
        return vec
    return vec / norm


def hashed_text_embedding(text, dim):
    """Signed bag-of-words: FNV-1a buckets with a sign bit, L2-normalized.

    Tokens are lowercased whitespace splits; each lands in bucket
    ``hash mod dim`` with sign +1 when the hash's top bit is clear, -1
    otherwise.  Pure integer hashing keeps the result bit-exact across
    platforms.
    """
    if dim < 1:
        raise ConfigError(f"embedding dim must be positive, got {dim}")
    vec = np.zeros(dim)
    for token in text.lower().split():
        h = fnv1a64(token.encode("utf-8"))
        sign = 1.0 if (h >> 63) == 0 else -1.0
        vec[h % dim] += sign
    return _unit(vec)


class HashedTextProvider:
    """Self-contained deterministic text embedder."""

    variant = "hashed"

    def __init__(self, output_dim):
        if output_dim < 1:
            raise ConfigError(f"output_dim must be positive, got {output_dim}")
        self.output_dim = output_dim

    def __call__(self, text):
        return hashed_text_embedding(text, self.output_dim)


class TableTextProvider:
    """Embeddings precomputed offline, keyed by exact text.

    File format: a header line ``dim=<E>``, then one record per line of
    ``text<TAB>E space-separated decimals``.  Vectors are normalized on
    load so the provider's unit-norm contract holds regardless of how the
    file was produced.
    """

    variant = "table"

    def __init__(self, entries, output_dim):
        if output_dim < 1:
            raise ConfigError(f"output_dim must be positive, got {output_dim}")
        self.output_dim = output_dim
        self._entries = {text: _unit(np.asarray(vec, dtype=float))
                         for text, vec in entries.items()}

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if not header.startswith("dim="):
                raise DataError(f"{path}: expected 'dim=<E>' header, got {header!r}")
            try:
                dim = int(header[4:])
            except ValueError:
                raise DataError(f"{path}: bad embedding dim in header {header!r}") from None
            entries = {}
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                text, sep, rest = line.partition("\t")
                if not sep:
                    raise DataError(f"{path}:{lineno}: missing tab separator")
                values = rest.split()
                if len(values) != dim:
                    raise DataError(f"{path}:{lineno}: expected {dim} values, "
                                    f"got {len(values)}")
                try:
                    entries[text] = [float(v) for v in values]
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value") from None
        return cls(entries, dim)

    def __call__(self, text):
        try:
            return self._entries[text]
        except KeyError:
            raise DataError(f"no precomputed embedding for text {text!r}") from None


def label_text(name, description=""):
    """Canonical label text: the class name followed by its description."""
    return f"{name} {description}".strip()


class LabelProjector:
    """Two-layer map from provider space to the encoder's output space.

    ``h = relu(e @ w2 + b) @ w1`` — the outer layer is bias-free.  Provider
    outputs are treated as constants; only w1, w2, b are trainable.

    The outer layer starts at zero, so a fresh projector maps every label
    to the zero vector: all similarities tie, the softmax is exactly
    uniform, and the initial loss is exactly ln M regardless of the
    encoder's output scale.  The first optimizer step moves w1 off zero
    (its gradient is nonzero whenever the hidden activations are).
    """

    def __init__(self, rng, embed_dim, model_dim, hidden=256):
        if min(embed_dim, model_dim, hidden) < 1:
            raise ConfigError("projector dims must be positive, got "
                              f"E={embed_dim} D={model_dim} hidden={hidden}")
        self.embed_dim = embed_dim
        self.model_dim = model_dim
        self.w2 = Tensor(T.xavier_uniform(rng, embed_dim, hidden),
                         requires_grad=True)
        self.b = Tensor(np.zeros(hidden), requires_grad=True)
        self.w1 = Tensor(np.zeros((hidden, model_dim)), requires_grad=True)

    def __call__(self, embeddings):
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
        if embeddings.shape[1] != self.embed_dim:
            raise DimensionError(f"provider vectors have dim {embeddings.shape[1]}, "
                                 f"projector expects {self.embed_dim}")
        hidden = T.relu(T.linear(Tensor(embeddings), self.w2, self.b))
        return T.matmul(hidden, self.w1)

    def named_params(self, prefix=""):
        yield prefix + "w1", self.w1
        yield prefix + "w2", self.w2
        yield prefix + "b", self.b

    def load_state(self, arrays):
        """Overwrite parameters from a {name: ndarray} mapping."""
        current = dict(self.named_params())
        if set(arrays) != set(current):
            missing = sorted(set(current) - set(arrays))
            extra = sorted(set(arrays) - set(current))
            raise ConfigError(f"projector state mismatch: missing {missing}, "
                              f"unexpected {extra}")
        for name, tensor in current.items():
            incoming = np.asarray(arrays[name])
            if incoming.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {incoming.shape} "
                                     f"!= model shape {tensor.shape}")
            tensor.data = incoming.astype(tensor.data.dtype)


class LabelTable:
    """Projected label embeddings for one dataset's classes.

    Rows are ordered by class id, which must be exactly 1..M.  The vectors
    are a live autodiff node, so a table built inside a training step
    back-propagates into the projector.
    """

    def __init__(self, ids, texts, vectors):
        self.ids = tuple(ids)
        self.texts = tuple(texts)
        self.vectors = vectors

    @property
    def num_classes(self):
        return len(self.ids)


def build_label_table(classes, provider, projector):
    """Project every class's label text; ``classes`` is (id, text) pairs."""
    entries = sorted(classes, key=lambda pair: pair[0])
    if len(entries) < 2:
        raise DataError(f"need at least 2 classes, got {len(entries)}")
    ids = [cid for cid, _ in entries]
    if ids != list(range(1, len(ids) + 1)):
        raise DataError(f"class ids must be exactly 1..{len(ids)}, got {ids}")
    texts = [text for _, text in entries]
    embeddings = np.stack([np.asarray(provider(t), dtype=float) for t in texts])
    vectors = projector(embeddings)
    T.check_finite(vectors, "label table")
    return LabelTable(ids, texts, vectors)


def similarity(a, b):
    """Dot-product similarity between two vectors."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=float)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"similarity needs equal-length vectors, "
                             f"got {a.shape} and {b.shape}")
    return float(np.dot(a, b))


def class_logits(encoded, table):
    """Similarity of each encoded row against every table row: [B, M]."""
    return T.matmul(encoded, T.transpose2d(table.vectors))


def classification_loss(encoded, class_ids, table):
    """Mean softmax cross-entropy of similarities at the true class."""
    ids = np.asarray(class_ids)
    if ids.ndim != 1 or len(ids) != encoded.shape[0]:
        raise DimensionError(f"expected {encoded.shape[0]} class ids, "
                             f"got shape {ids.shape}")
    bad = (ids < 1) | (ids > table.num_classes)
    if bad.any():
        raise DataError(f"class id {int(ids[bad][0])} outside "
                        f"1..{table.num_classes}")
    return T.cross_entropy_rows(class_logits(encoded, table), ids - 1)


def predict(encoded, table):
    """Highest-similarity class per row; ties go to the lowest class id."""
    data = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded)
    single = data.ndim == 1
    logits = np.atleast_2d(data) @ table.vectors.data.T
    picks = np.argmax(logits, axis=1)  # first max <=> lowest class id
    ids = np.asarray(table.ids)[picks]
    return int(ids[0]) if single else ids
