"""Signed feature-hashing text encoder and word-dropout corruption.

Tokens are maximal runs of Unicode letters/digits in the lowercased text.
Each token is hashed with 64-bit FNV-1a over its UTF-8 bytes, XOR-ed with
the encoder seed; ``hash % dim`` picks the bucket and the top bit picks
the sign (0 -> +1, 1 -> -1). The bucket counts are L2-normalised.
"""

import re
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingStore
from .errors import ConfigInvalid, EmptyText
from .rng import Xoshiro256pp

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK = (1 << 64) - 1
_TOKEN = re.compile(r"[^\W_]+")


def fnv1a_64(data):
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def tokenize(text):
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class HashedEncoderConfig:
    dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigInvalid("encoder dimension must be at least 2")


def encode_text(text, cfg=HashedEncoderConfig()):
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText(f"no tokens in {text[:40]!r}")
    vec = np.zeros(cfg.dim)
    seed = cfg.seed & _MASK
    for tok in tokens:
        h = fnv1a_64(tok.encode("utf-8")) ^ seed
        vec[h % cfg.dim] += -1.0 if h >> 63 else 1.0
    norm = np.sqrt(np.dot(vec, vec))
    if norm == 0.0:
        # every token cancelled against another with the opposite sign
        raise EmptyText(f"hashed features cancel out for {text[:40]!r}")
    return vec / norm


def encode_texts(texts, cfg=HashedEncoderConfig(), ids=None):
    return EmbeddingStore(np.stack([encode_text(t, cfg) for t in texts]), ids=ids)


def corrupt_text(text, p, seed):
    """Drop each whitespace-separated word independently with probability ``p``.

    One uniform draw per word, in order; a word is dropped when the draw is
    below ``p``.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigInvalid(f"drop probability {p} outside [0, 1]")
    rng = Xoshiro256pp(seed)
    return " ".join(w for w in text.split() if not rng.uniform() < p)
