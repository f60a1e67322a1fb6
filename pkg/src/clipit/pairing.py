"""Image-to-report pseudo-pairing in a shared retrieval space."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import EmbeddingStore, PairRecord, PseudoPairedDataset, filter_corpus
from .errors import DimensionMismatch, EmptyFilterResult, InputError, RankExceedsCorpus, ZeroVector
from .numeric import ZERO_NORM, coordinate_dot
from .rng import Xoshiro256pp


@dataclass
class PairingRequest:
    """Retrieval-space embeddings for images and reports.

    ``texts`` must carry ids. When ``keywords`` is given, ``corpus`` is
    filtered with them and only reports surviving the filter are candidates.
    """

    images: EmbeddingStore
    texts: EmbeddingStore
    corpus: object = None
    keywords: list | None = None

    def candidates(self):
        """Row indices of ``texts`` eligible for pairing, ascending."""
        if self.texts.ids is None:
            raise InputError("text retrieval store needs ids")
        if self.images.dim != self.texts.dim:
            raise DimensionMismatch(f"image dim {self.images.dim} vs text dim {self.texts.dim}")
        if not self.keywords:
            return np.arange(len(self.texts))
        if self.corpus is None:
            raise InputError("keyword filtering needs the report corpus")
        keep = {r.id for r in filter_corpus(self.corpus, self.keywords)}
        idx = [j for j, tid in enumerate(self.texts.ids) if tid in keep]
        if not idx:
            raise EmptyFilterResult("no filtered report has a retrieval embedding")
        return np.asarray(idx, dtype=np.int64)


def _unit_rows(m):
    # squared norms accumulated in ascending coordinate order
    sq = np.zeros((m.shape[0], 1))
    for k in range(m.shape[1]):
        sq[:, 0] += m[:, k] * m[:, k]
    norms = np.sqrt(sq)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector("zero row in retrieval embeddings")
    return m / norms


def similarity_matrix(images, texts, workers=1, block=1024):
    """Cosine similarities (N x M), clamped to [-1, 1].

    Rows are scaled to unit length, then each dot product is summed in
    ascending coordinate order, so exact ties are reproducible by a plain
    scalar loop.

    With ``workers > 1`` row blocks are computed concurrently; every block
    is written at its own rows, so the result does not depend on scheduling.
    """
    img = _unit_rows(images)
    txt = _unit_rows(texts)
    out = np.empty((img.shape[0], txt.shape[0]))

    def fill(start):
        out[start:start + block] = coordinate_dot(img[start:start + block], txt)

    starts = range(0, img.shape[0], block)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return np.clip(out, -1.0, 1.0)


def _labels_for(images):
    if images.labels is None:
        return np.full(len(images), -1, dtype=np.int64)
    return images.labels


def pair_modalities(req, k=1, workers=1):
    """Pair each image with its k-th most similar report.

    Reports are ranked by descending cosine; equal scores keep ascending
    report order. ``k = 1`` is the plain argmax.
    """
    cand = req.candidates()
    if k < 1:
        raise InputError("rank must be >= 1")
    if k > len(cand):
        raise RankExceedsCorpus(f"rank {k} with {len(cand)} candidate reports")
    sims = similarity_matrix(req.images.vectors, req.texts.vectors[cand], workers=workers)
    order = np.argsort(-sims, axis=1, kind="stable")
    choice = order[:, k - 1]
    labels = _labels_for(req.images)
    ids = req.texts.ids
    records = [
        PairRecord(i, ids[cand[j]], int(labels[i]), float(sims[i, j]))
        for i, j in enumerate(choice)
    ]
    return PseudoPairedDataset(records)


def pair_random(req, seed):
    """Uniform random report per image (with replacement), seeded."""
    cand = req.candidates()
    rng = Xoshiro256pp(seed)
    choice = np.array([rng.below(len(cand)) for _ in range(len(req.images))], dtype=np.int64)
    img = _unit_rows(req.images.vectors)
    txt = _unit_rows(req.texts.vectors[cand])
    labels = _labels_for(req.images)
    ids = req.texts.ids
    records = []
    for i, j in enumerate(choice):
        s = float(np.clip(coordinate_dot(img[i:i + 1], txt[j:j + 1])[0, 0], -1.0, 1.0))
        records.append(PairRecord(i, ids[cand[j]], int(labels[i]), s))
    return PseudoPairedDataset(records)


@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def similarity_histogram(pairs, bins=20):
    """Equal-width bins over [-1, 1]; the top bin is closed on the right."""
    if bins < 1:
        raise InputError("bins must be >= 1")
    s = pairs.similarities
    edges = np.linspace(-1.0, 1.0, bins + 1)
    idx = np.floor((s + 1.0) / 2.0 * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    mean = float(s.mean()) if s.size else 0.0
    std = float(s.std()) if s.size else 0.0
    return SimilarityHistogram(edges, counts, mean, std)
