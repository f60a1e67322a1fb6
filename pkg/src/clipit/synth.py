"""Synthetic benchmark with a tunable amount of text-only class information.

Each sample has a class ``y = index mod C``. Task-space vectors sit at the
class prototype plus Gaussian noise, except that a fixed fraction of samples
(chosen by a seeded shuffle) sit at the midpoint between their own prototype
and that of a decoy class ``(y + 1) mod C``: these are ambiguous to vision.

Reports are bags of class-specific keywords (``c{y}kw{j}``) plus shared
filler words and an organ term. In the retrieval space every report sits
near its class's retrieval prototype, and every image sits near the
prototype of its true class at a planted mean cosine, so nearest-report
retrieval recovers a report of the right class.

All randomness comes from one xoshiro256++ stream, consumed in this order:
task prototypes, retrieval prototypes, reports (text, then retrieval
vector, report by report), then for the train and test blocks in turn:
ambiguity shuffle, task noise, then per sample the retrieval offset
direction and retrieval noise.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import EmbeddingStore, Report, TextCorpus, save_corpus, save_embeddings
from .errors import ConfigInvalid, InstanceMismatch
from .rng import Xoshiro256pp

FILLER = (
    "specimen tissue section slide sample received examined margin fragment biopsy "
    "gross microscopic description noted identified submitted fixed formalin stained "
    "cassette labeled measuring portion surface"
).split()


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 2
    n_samples: int = 2000
    n_test: int = 0
    n_reports: int = 40
    d_r: int = 64
    d_v: int = 64
    d_t: int = 64
    ambiguous_frac: float = 0.3
    noise: float = 0.1
    vocab_size: int = 8
    keywords_per_report: int = 12
    filler_per_report: int = 4
    retrieval_similarity: float = 0.55
    organ: str = "breast"
    seed: int = 0

    def validate(self):
        counts = (self.n_classes, self.n_samples, self.n_reports, self.d_r, self.d_v,
                  self.d_t, self.vocab_size, self.keywords_per_report)
        if any(c < 1 for c in counts) or self.n_test < 0 or self.filler_per_report < 0:
            raise ConfigInvalid("counts and dimensions must be positive")
        if self.n_classes < 2:
            raise ConfigInvalid("need at least two classes")
        if self.n_reports < self.n_classes:
            raise ConfigInvalid("need at least one report per class")
        if self.n_classes > self.d_v or self.n_classes >= self.d_r:
            raise ConfigInvalid("need d_v >= C and d_r > C for the prototype geometry")
        if not 0.0 <= self.ambiguous_frac <= 1.0:
            raise ConfigInvalid("ambiguous_frac must lie in [0, 1]")
        if self.noise < 0:
            raise ConfigInvalid("noise must be nonnegative")
        if not 0.0 < self.retrieval_similarity <= 1.0:
            raise ConfigInvalid("retrieval_similarity must lie in (0, 1]")
        if not self.organ.strip():
            raise ConfigInvalid("organ term must be nonempty")


@dataclass
class SynthSplit:
    retrieval: EmbeddingStore
    task: EmbeddingStore
    ambiguous: np.ndarray


@dataclass
class SynthDataset:
    config: SynthConfig
    train: SynthSplit
    test: SynthSplit | None
    corpus: TextCorpus
    text_retrieval: EmbeddingStore
    report_classes: list

    def manifest(self):
        def split(s):
            return [{"class": int(y), "ambiguous": bool(a)} for y, a in zip(s.task.labels, s.ambiguous)]

        return {
            "config": asdict(self.config),
            "samples": split(self.train),
            "test_samples": split(self.test) if self.test is not None else [],
            "reports": [{"id": r.id, "class": int(c)} for r, c in zip(self.corpus, self.report_classes)],
        }

    def save(self, outdir):
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "image_retrieval": out / "image_retrieval.cipe",
            "image_task": out / "image_task.cipe",
            "text_retrieval": out / "text_retrieval.cipe",
            "corpus": out / "corpus.jsonl",
            "manifest": out / "manifest.json",
        }
        save_embeddings(self.train.retrieval, files["image_retrieval"])
        save_embeddings(self.train.task, files["image_task"])
        save_embeddings(self.text_retrieval, files["text_retrieval"])
        save_corpus(self.corpus, files["corpus"])
        if self.test is not None:
            files["test_retrieval"] = out / "test_retrieval.cipe"
            files["test_task"] = out / "test_task.cipe"
            save_embeddings(self.test.retrieval, files["test_retrieval"])
            save_embeddings(self.test.task, files["test_task"])
        files["manifest"].write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")
        return files


def _prototypes(rng, n, d):
    """Gram-Schmidt over seeded Gaussian draws, rows normalised to unit length."""
    protos = []
    for _ in range(n):
        v = rng.normals((d,))
        for p in protos:
            v = v - np.dot(v, p) * p
        protos.append(v / np.linalg.norm(v))
    return np.stack(protos)


def _unit(v):
    return v / np.linalg.norm(v)


def _split(cfg, rng, n, task_protos, retr_protos):
    C = cfg.n_classes
    labels = np.arange(n) % C
    ambiguous = np.zeros(n, dtype=bool)
    ambiguous[rng.permutation(n)[: math.floor(cfg.ambiguous_frac * n)]] = True
    task = np.empty((n, cfg.d_v))
    for i in range(n):
        y = labels[i]
        centre = task_protos[y]
        if ambiguous[i]:
            centre = 0.5 * (task_protos[y] + task_protos[(y + 1) % C])
        task[i] = centre + cfg.noise * rng.normals((cfg.d_v,))
    # image retrieval vector: s * prototype + sqrt(1 - s^2) * (unit direction
    # orthogonal to every prototype) + sigma noise. At sigma = 0 its cosine is
    # exactly s with its own prototype and 0 with the others.
    s = cfg.retrieval_similarity
    off = math.sqrt(max(0.0, 1.0 - s * s))
    retr = np.empty((n, cfg.d_r))
    for i in range(n):
        z = rng.normals((cfg.d_r,))
        z = z - retr_protos.T @ (retr_protos @ z)
        z = z / np.linalg.norm(z)
        eps = rng.normals((cfg.d_r,))
        retr[i] = s * retr_protos[labels[i]] + off * z + cfg.noise / math.sqrt(cfg.d_r) * eps
    return SynthSplit(EmbeddingStore(retr, labels), EmbeddingStore(task, labels), ambiguous)


def generate(cfg):
    """Build the benchmark. Bit-identical for identical configs."""
    cfg.validate()
    rng = Xoshiro256pp(cfg.seed)
    C = cfg.n_classes
    task_protos = _prototypes(rng, C, cfg.d_v)
    retr_protos = _prototypes(rng, C, cfg.d_r)

    records, classes, text_retr = [], [], []
    for j in range(cfg.n_reports):
        c = j % C
        words = [f"c{c}kw{rng.below(cfg.vocab_size)}" for _ in range(cfg.keywords_per_report)]
        words += [FILLER[rng.below(len(FILLER))] for _ in range(cfg.filler_per_report)]
        words.append(cfg.organ.lower())
        records.append(Report(f"r{j:05d}", " ".join(words), (cfg.organ.lower(),)))
        classes.append(c)
        text_retr.append(_unit(retr_protos[c] + cfg.noise / math.sqrt(cfg.d_r) * rng.normals((cfg.d_r,))))
    corpus = TextCorpus(records)
    text_store = EmbeddingStore(np.stack(text_retr), np.asarray(classes), [r.id for r in records])

    train = _split(cfg, rng, cfg.n_samples, task_protos, retr_protos)
    test = _split(cfg, rng, cfg.n_test, task_protos, retr_protos) if cfg.n_test else None
    return SynthDataset(cfg, train, test, corpus, text_store, classes)


def oracle_eval(manifest, pairs, split="samples"):
    """Fraction of images paired with a report of their own class."""
    samples = manifest[split]
    report_class = {r["id"]: r["class"] for r in manifest["reports"]}
    if len(samples) != len(pairs):
        raise InstanceMismatch(f"{len(pairs)} pairs for {len(samples)} samples")
    if len(pairs) == 0:
        raise InstanceMismatch("empty pairing")
    hits = 0
    for rec in pairs:
        if rec.text_id not in report_class:
            raise InstanceMismatch(f"report {rec.text_id!r} not in manifest")
        hits += report_class[rec.text_id] == samples[rec.image_index]["class"]
    return hits / len(pairs)
