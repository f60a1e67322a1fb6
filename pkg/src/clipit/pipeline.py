"""End-to-end run: pair, fine-tune text, distil, extract the unimodal model, evaluate."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import save_pairs
from .errors import InputError
from .model import count_cost, forward_joint, predict_unimodal, save_checkpoint, text_head_logits
from .pairing import PairingRequest, pair_modalities, pair_random, similarity_histogram
from .rng import derive_seed
from .stats import PredictionSet, accuracy, fisher_combined, mcnemar_exact, omega
from .text import HashedEncoderConfig, corrupt_text, encode_text
from .train import SEED_DROPOUT, SEED_RANDOM_PAIR, train_variant, train_vision_only, vision_only_predict

log = logging.getLogger(__name__)


@dataclass
class PairingOptions:
    keywords: list | None = None
    rank: int = 1
    random: bool = False
    bins: int = 20
    workers: int = 1


@dataclass
class PipelineResult:
    model: object
    full_model: object
    pairs: object
    test_pairs: object
    histogram: object
    logs: dict
    metrics: dict
    baseline: object = None
    predictions: dict = field(default_factory=dict)

    def save(self, outdir):
        """Write every artifact; returns ``{name: path}``."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        files["pairs"] = out / "pairs.jsonl"
        save_pairs(self.pairs, files["pairs"])
        if self.test_pairs is not None:
            files["test_pairs"] = out / "test_pairs.jsonl"
            save_pairs(self.test_pairs, files["test_pairs"])
        files["histogram"] = out / "histogram.csv"
        self.histogram.to_csv(files["histogram"])
        for stage, tlog in self.logs.items():
            files[f"log_{stage}"] = out / f"trainlog_{stage}.csv"
            write_trainlog(tlog, files[f"log_{stage}"])
        files["summary"] = out / "train_summary.json"
        files["summary"].write_text(json.dumps(
            {stage: {"epochs": len(t.ce_loss), "final_ce": t.ce_loss[-1] if t.ce_loss else None,
                     "final_kd": t.kd_loss[-1] if t.kd_loss else None,
                     "final_train_acc": t.train_acc[-1] if t.train_acc else None,
                     "seconds": t.seconds}
             for stage, t in self.logs.items()}, indent=1, sort_keys=True) + "\n")
        files["checkpoint"] = out / "unimodal.cipm"
        save_checkpoint(self.model, files["checkpoint"])
        files["predictions"] = out / "predictions.csv"
        write_predictions(self.predictions["classes"], self.predictions["logits"], files["predictions"])
        files["metrics"] = out / "metrics.json"
        write_metrics(self.metrics, files["metrics"])
        files["manifest"] = out / "manifest.json"
        manifest = {k: str(v.name) for k, v in files.items()}
        files["manifest"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return files


def write_trainlog(tlog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "ce_loss", "kd_loss", "train_acc"])
        for row in tlog.rows():
            w.writerow([row["epoch"], repr(float(row["ce_loss"])), repr(float(row["kd_loss"])),
                        repr(float(row["train_acc"]))])


def write_predictions(classes, logits, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "predicted_class", "max_logit"])
        for i, (c, z) in enumerate(zip(classes, logits)):
            w.writerow([i, int(c), repr(float(np.max(z)))])


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "predicted_class" not in rows[0]:
        raise InputError(f"{path}: not a predictions CSV")
    rows.sort(key=lambda r: int(r["index"]))
    return np.array([int(r["predicted_class"]) for r in rows], dtype=np.int64)


def write_metrics(metrics, path):
    def clean(v):
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    Path(path).write_text(json.dumps({k: clean(v) for k, v in metrics.items()}, indent=1, sort_keys=True) + "\n")


def text_matrix(pairs, corpus, encoder, dropout=0.0, seed=0, text_store=None):
    """Per-image task-space text embeddings of the paired reports.

    With a precomputed ``text_store`` (ids required) rows are looked up by
    report id and no dropout is possible. Otherwise each image's report is
    corrupted independently (seed ``seed + SEED_DROPOUT + image_index``)
    and hashed.
    """
    if text_store is not None:
        if text_store.ids is None:
            raise InputError("precomputed text embeddings need ids")
        if dropout:
            raise InputError("word dropout needs raw text, not precomputed embeddings")
        row = {tid: k for k, tid in enumerate(text_store.ids)}
        try:
            return text_store.vectors[[row[t] for t in pairs.text_ids]]
        except KeyError as exc:
            raise InputError(f"no text embedding for report {exc.args[0]!r}") from None
    if not dropout:
        cache = {}
        rows = []
        for tid in pairs.text_ids:
            if tid not in cache:
                cache[tid] = encode_text(corpus.get(tid).text, encoder)
            rows.append(cache[tid])
        return np.stack(rows)
    rows = []
    for rec in pairs:
        noisy = corrupt_text(corpus.get(rec.text_id).text, dropout,
                             derive_seed(seed, SEED_DROPOUT + rec.image_index))
        rows.append(encode_text(noisy, encoder))
    return np.stack(rows)


def _pair(images, text_retrieval, corpus, opts, seed):
    req = PairingRequest(images, text_retrieval, corpus, opts.keywords)
    if opts.random:
        return pair_random(req, derive_seed(seed, SEED_RANDOM_PAIR))
    return pair_modalities(req, opts.rank, workers=opts.workers)


def run_pipeline(image_retrieval, task, corpus, text_retrieval, cfg, pairing=None,
                 encoder=None, text_store=None, test_task=None, test_retrieval=None,
                 baseline=True):
    """Pairing, both training stages, unimodal extraction and evaluation.

    Evaluation runs on ``test_task`` when given, otherwise on the training
    images. ``test_retrieval`` lets held-out images be paired too, which is
    needed for the text-branch predictions behind omega and for the
    distillation-fidelity cosine.
    """
    pairing = pairing or PairingOptions()
    encoder = encoder or HashedEncoderConfig()
    if task.labels is None:
        raise InputError("task-space store needs labels")
    if len(image_retrieval) != len(task):
        raise InputError("retrieval and task stores differ in length")
    n_classes = int(task.labels.max()) + 1
    if test_task is not None and test_task.labels is not None:
        n_classes = max(n_classes, int(test_task.labels.max()) + 1)

    pairs = _pair(image_retrieval, text_retrieval, corpus, pairing, cfg.seed)
    hist = similarity_histogram(pairs, pairing.bins)
    X_t = text_matrix(pairs, corpus, encoder, cfg.word_dropout, cfg.seed, text_store)
    full, logs = train_variant(task.vectors, X_t, task.labels, n_classes, cfg)
    model = full.unimodal()

    eval_task = test_task if test_task is not None else task
    if eval_task.labels is None:
        raise InputError("evaluation store needs labels")
    classes, logits = predict_unimodal(model, eval_task.vectors)
    y = eval_task.labels
    cost = count_cost(full)
    metrics = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "n_eval": int(len(y)),
        "accuracy_mean": accuracy(classes, y),
        "accuracy_std": 0.0,
        "pairing_similarity_mean": hist.mean,
        "pairing_similarity_std": hist.std,
        "param_total": cost.param_total,
        "param_trainable": cost.param_trainable,
        "flops_per_sample": cost.flops_unimodal,
        "flops_text_branch": cost.flops_text_branch,
        "omega_count": None,
        "omega_pct": None,
        "accuracy_vision_only": None,
        "distill_cosine_mean": None,
        "mcnemar_p": None,
        "fisher_stat": None,
        "fisher_dof": None,
        "fisher_p": None,
    }

    test_pairs = None
    eval_pairs = pairs
    if test_task is not None and test_retrieval is not None:
        test_pairs = _pair(test_retrieval, text_retrieval, corpus, pairing, derive_seed(cfg.seed, 1))
        eval_pairs = test_pairs
    if test_task is None or test_retrieval is not None:
        X_eval_t = text_matrix(eval_pairs, corpus, encoder, text_store=text_store)
        _, t, t_hat = forward_joint(full, eval_task.vectors, X_eval_t, cfg.early_fusion_text)
        cos = (t * t_hat).sum(1) / (np.linalg.norm(t, axis=1) * np.linalg.norm(t_hat, axis=1))
        metrics["distill_cosine_mean"] = float(np.mean(cos))
        text_pred = None
        if "ht.W" in full.params:
            text_pred = np.argmax(text_head_logits(full, X_eval_t), axis=1)
    else:
        text_pred = None

    base_model = None
    if baseline:
        base_model, blog = train_vision_only(task.vectors, task.labels, n_classes, cfg, d_t=X_t.shape[1])
        logs["vision"] = blog
        vis_pred, _ = vision_only_predict(base_model, eval_task.vectors)
        metrics["accuracy_vision_only"] = accuracy(vis_pred, y)
        p = mcnemar_exact(classes == y, vis_pred == y)
        stat, dof, fp = fisher_combined([p])
        metrics.update(mcnemar_p=p, fisher_stat=stat, fisher_dof=dof, fisher_p=fp)
        if text_pred is not None:
            count, frac = omega(PredictionSet(y, vis_pred, text_pred, classes))
            metrics["omega_count"] = count
            metrics["omega_pct"] = 100.0 * frac

    return PipelineResult(model, full, pairs, test_pairs, hist, logs, metrics, base_model,
                          {"classes": classes, "logits": logits})
