"""Frozen text encoders that turn prompt batches into ``[N, L, C]`` tensors.

The built-in encoder hashes character trigrams with FNV-1a (pure integer
arithmetic, so bucket ids are identical on every platform) and looks each
bucket up in a fixed seeded random projection.  Every item is encoded on
its own; nothing leaks between rows of a batch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

NULL = 0


def chunk_long_sequence(token_ids, window=512):
    """Pad ``token_ids`` with the null token to a multiple of ``window`` and slice."""
    if window < 1:
        raise DomainError("window must be >= 1")
    ids = list(token_ids)
    n = -(-len(ids) // window) * window
    ids = ids + [NULL] * (n - len(ids))
    return [ids[i : i + window] for i in range(0, n, window)]


def fnv1a(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


@dataclass
class ConditionEmbedding:
    values: np.ndarray  # [N, L, C]
    task_id: str | None = None  # provenance only

    @property
    def shape(self):
        return self.values.shape


class HashedNgramEncoder:
    """Character n-gram hashing followed by a fixed random projection.

    ``window`` is the native encoding window; each item is split into
    windows that are encoded independently and concatenated, then padded
    with empty windows up to ``input_len`` slots.
    """

    encoder_id = "hashed-trigram"

    def __init__(self, dim=64, n=3, buckets=4096, window=32, input_len=32, seed=0):
        if input_len % window:
            raise ConfigurationError("input_len must be a multiple of window")
        self.dim, self.n, self.buckets = dim, n, buckets
        self.window, self.input_len, self.seed = window, input_len, seed
        rng = np.random.default_rng(seed)
        self.table = (rng.standard_normal((buckets, dim)) / np.sqrt(dim)).astype(np.float32)
        self.table.flags.writeable = False
        self._cache = {}

    @property
    def out_dims(self):
        return self.input_len, self.dim

    def params(self):
        return {"dim": self.dim, "n": self.n, "buckets": self.buckets,
                "window": self.window, "input_len": self.input_len, "seed": self.seed}

    def param_hash(self):
        return hashlib.sha256(self.table.tobytes()).hexdigest()

    def _bucket(self, gram):
        return fnv1a(bytes(gram)) % self.buckets

    def _encode_window(self, ids):
        out = np.zeros((len(ids), self.dim), dtype=np.float32)
        padded = list(ids) + [NULL] * (self.n - 1)
        for t, tok in enumerate(ids):
            if tok == NULL:
                continue
            out[t] = self.table[self._bucket(padded[t : t + self.n])]
        return out

    def encode_item(self, text):
        if not text:
            raise DomainError("cannot encode an empty prompt")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        ids = list(text.encode("utf-8"))
        windows = chunk_long_sequence(ids, self.window)
        if len(windows) * self.window > self.input_len:
            raise DomainError(
                f"item of {len(ids)} bytes exceeds the input budget of {self.input_len}"
            )
        out = np.zeros((self.input_len, self.dim), dtype=np.float32)
        for w, chunk in enumerate(windows):
            out[w * self.window : (w + 1) * self.window] = self._encode_window(chunk)
        out.flags.writeable = False
        self._cache[text] = out
        return out

    def encode_items(self, items):
        if len(items) == 0:
            raise DomainError("cannot encode an empty batch")
        return np.stack([self.encode_item(s) for s in items])

    def encode_batch(self, batch):
        return ConditionEmbedding(self.encode_items(batch.prompts), batch.task_id)


class CharUnigramEncoder(HashedNgramEncoder):
    """Single-character variant, useful as a weaker extractor in ablations."""

    encoder_id = "char-unigram"

    def __init__(self, dim=64, buckets=256, window=32, input_len=32, seed=0):
        super().__init__(dim=dim, n=1, buckets=buckets, window=window, input_len=input_len, seed=seed)

    def params(self):
        p = super().params()
        p.pop("n")
        return p


ENCODERS = {
    HashedNgramEncoder.encoder_id: HashedNgramEncoder,
    CharUnigramEncoder.encoder_id: CharUnigramEncoder,
}


def register_encoder(encoder_id, factory):
    """Make an external encoder available under ``encoder_id``.

    ``factory(**params)`` must return an object with ``encode_items``,
    ``encode_batch``, ``out_dims`` and ``param_hash``.
    """
    ENCODERS[encoder_id] = factory


def make_encoder(encoder_id="hashed-trigram", **params):
    try:
        factory = ENCODERS[encoder_id]
    except KeyError:
        raise ConfigurationError(f"unknown encoder {encoder_id!r}; registered: {sorted(ENCODERS)}") from None
    return factory(**params)


class EmbeddingCache:
    """On-disk cache of batch embeddings keyed by encoder id and content hash."""

    def __init__(self, root):
        self.root = Path(root)

    def _path(self, encoder, items):
        h = hashlib.sha256()
        h.update(encoder.encoder_id.encode())
        h.update(encoder.param_hash().encode())
        for s in items:
            h.update(s.encode("utf-8") + b"\x00")
        return self.root / encoder.encoder_id / f"{h.hexdigest()}.npy"

    def get(self, encoder, items):
        path = self._path(encoder, items)
        if path.exists():
            return np.load(path)
        values = encoder.encode_items(items)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, values)
        return values
