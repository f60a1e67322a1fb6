"""Command-line entry point: ``clipit <subcommand> ...``.

Settings come from an optional TOML file (``--config``) whose top-level keys
mirror :class:`~clipit.train.TrainConfig`, with optional ``[synth]``,
``[encoder]`` and ``[pairing]`` tables. Command-line flags override the file.
``CLIPIT_OUT`` overrides the output directory.

Exit status: 0 ok, 2 usage error, 3 bad input, 4 runtime failure. Failures
print one line ``error[<category>]: <message>`` to stderr.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import tomli

from . import __version__
from .data import filter_corpus, load_corpus, load_embeddings, load_pairs, save_embeddings, save_pairs
from .errors import ClipItError, InputError
from .model import count_cost, load_checkpoint, predict_unimodal, save_checkpoint
from .pairing import PairingRequest, pair_modalities, pair_random, similarity_histogram
from .pipeline import (
    PairingOptions,
    read_predictions,
    run_pipeline,
    text_matrix,
    write_metrics,
    write_predictions,
    write_trainlog,
)
from .rng import derive_seed
from .stats import PredictionSet, accuracy, fisher_combined, omega
from .synth import SynthConfig, generate
from .text import HashedEncoderConfig, corrupt_text, encode_texts
from .train import SEED_RANDOM_PAIR, TrainConfig, train_variant

log = logging.getLogger("clipit")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config handling


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise InputError(f"config file {path}: {exc}") from None


def _section(cls, table, overrides):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise InputError(f"unknown {cls.__name__} keys in config: {sorted(unknown)}")
    merged = dict(table)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


_TRAIN_FLAGS = {
    "variant": "variant", "lam": "lam", "lora_r": "lora_r", "lora_alpha": "lora_alpha",
    "seed": "seed", "epochs": "epochs", "text_epochs": "text_epochs", "batch": "batch_size",
    "lr": "lr", "weight_decay": "weight_decay", "dropout": "word_dropout",
    "early_fusion_text": "early_fusion_text", "hidden": "hidden",
}


def _train_config(args, conf):
    table = {k: v for k, v in conf.items() if not isinstance(v, dict)}
    overrides = {dest: getattr(args, flag, None) for flag, dest in _TRAIN_FLAGS.items()}
    if getattr(args, "freeze_text", False):
        overrides["freeze_text"] = True
    return _section(TrainConfig, table, overrides)


def _encoder(args, conf):
    table = dict(conf.get("encoder", {}))
    if "hash_seed" in table:
        table["seed"] = table.pop("hash_seed")
    return _section(HashedEncoderConfig, table, {"dim": getattr(args, "dim", None),
                                                 "seed": getattr(args, "hash_seed", None)})


def _pairing(args, conf):
    table = dict(conf.get("pairing", {}))
    overrides = {
        "keywords": _keywords(getattr(args, "keywords", None)),
        "rank": getattr(args, "rank", None),
        "random": True if getattr(args, "random", False) else None,
        "bins": getattr(args, "bins", None),
        "workers": getattr(args, "workers", None),
    }
    return _section(PairingOptions, table, overrides)


def _keywords(raw):
    if raw is None:
        return None
    return [k.strip() for k in raw.split(",") if k.strip()]


def _outdir(args):
    out = Path(os.environ.get("CLIPIT_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _texts_for_training(args, pairs, enc, cfg):
    if args.text_embeddings:
        return text_matrix(pairs, None, enc, cfg.word_dropout, cfg.seed, load_embeddings(args.text_embeddings))
    if not args.corpus:
        raise InputError("need --corpus or --text-embeddings")
    return text_matrix(pairs, load_corpus(args.corpus), enc, cfg.word_dropout, cfg.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, conf):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(SynthConfig)}
    cfg = _section(SynthConfig, conf.get("synth", {}), overrides)
    files = generate(cfg).save(_outdir(args))
    print(json.dumps({k: str(v) for k, v in files.items()}, sort_keys=True))


def cmd_encode_text(args, conf):
    enc = _encoder(args, conf)
    corpus = load_corpus(args.corpus)
    p = args.dropout or 0.0
    texts = [corrupt_text(r.text, p, derive_seed(args.seed, k)) if p else r.text
             for k, r in enumerate(corpus)]
    store = encode_texts(texts, enc, ids=corpus.ids)
    out = _outdir(args) / "text_embeddings.cipe"
    save_embeddings(store, out)
    print(out)


def cmd_pair(args, conf):
    opts = _pairing(args, conf)
    images = load_embeddings(args.images)
    texts = load_embeddings(args.texts)
    corpus = load_corpus(args.corpus) if args.corpus else None
    req = PairingRequest(images, texts, corpus, opts.keywords)
    seed = args.seed if args.seed is not None else 0
    if opts.random:
        pairs = pair_random(req, derive_seed(seed, SEED_RANDOM_PAIR))
    else:
        pairs = pair_modalities(req, opts.rank, workers=opts.workers)
    out = _outdir(args)
    save_pairs(pairs, out / "pairs.jsonl")
    similarity_histogram(pairs, opts.bins).to_csv(out / "histogram.csv")
    print(out / "pairs.jsonl")


def cmd_train(args, conf):
    cfg = _train_config(args, conf)
    enc = _encoder(args, conf)
    task = load_embeddings(args.task)
    if task.labels is None:
        raise InputError(f"{args.task}: task store needs labels")
    pairs = load_pairs(args.pairs)
    if len(pairs) != len(task):
        raise InputError(f"{len(pairs)} pairs for {len(task)} images")
    X_t = _texts_for_training(args, pairs, enc, cfg)
    n_classes = args.classes or int(task.labels.max()) + 1
    model, logs = train_variant(task.vectors, X_t, task.labels, n_classes, cfg)
    out = _outdir(args)
    save_checkpoint(model, out / "checkpoint.cipm")
    save_checkpoint(model.unimodal(), out / "unimodal.cipm")
    for stage, tlog in logs.items():
        write_trainlog(tlog, out / f"trainlog_{stage}.csv")
    summary = {"config": asdict(cfg), "stages": {s: {"seconds": t.seconds, "epochs": len(t.ce_loss)}
                                                 for s, t in logs.items()}}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(out / "checkpoint.cipm")


def cmd_infer(args, conf):
    model = load_checkpoint(args.checkpoint)
    images = load_embeddings(args.images)
    classes, logits = predict_unimodal(model, images.vectors)
    out = _outdir(args) / "predictions.csv"
    write_predictions(classes, logits, out)
    print(out)


def cmd_eval(args, conf):
    labels_store = load_embeddings(args.labels)
    if labels_store.labels is None:
        raise InputError(f"{args.labels}: store has no labels")
    y = labels_store.labels
    preds = read_predictions(args.predictions)
    metrics = {"accuracy_mean": accuracy(preds, y), "accuracy_std": 0.0,
               "omega_count": None, "omega_pct": None,
               "fisher_stat": None, "fisher_dof": None, "fisher_p": None,
               "param_total": None, "param_trainable": None, "flops_per_sample": None}
    if args.text_predictions:
        vision = read_predictions(args.vision_predictions) if args.vision_predictions else preds
        count, frac = omega(PredictionSet(y, vision, read_predictions(args.text_predictions)))
        metrics.update(omega_count=count, omega_pct=100.0 * frac)
    if args.p_values:
        try:
            ps = [float(p) for p in args.p_values.split(",")]
        except ValueError:
            raise InputError("--p-values must be comma-separated numbers") from None
        stat, dof, p = fisher_combined(ps)
        metrics.update(fisher_stat=stat, fisher_dof=dof, fisher_p=p)
    if args.checkpoint:
        cost = count_cost(load_checkpoint(args.checkpoint))
        metrics.update(param_total=cost.param_total, param_trainable=cost.param_trainable,
                       flops_per_sample=cost.flops_unimodal)
    out = _outdir(args) / "metrics.json"
    write_metrics(metrics, out)
    print(out)


def cmd_pipeline(args, conf):
    cfg = _train_config(args, conf)
    enc = _encoder(args, conf)
    opts = _pairing(args, conf)
    corpus = load_corpus(args.corpus)
    if opts.keywords:
        # fail early with EmptyFilterResult before any heavy work
        filter_corpus(corpus, opts.keywords)
    result = run_pipeline(
        load_embeddings(args.image_retrieval),
        load_embeddings(args.task),
        corpus,
        load_embeddings(args.text_retrieval),
        cfg,
        pairing=opts,
        encoder=enc,
        text_store=load_embeddings(args.text_embeddings) if args.text_embeddings else None,
        test_task=load_embeddings(args.test_task) if args.test_task else None,
        test_retrieval=load_embeddings(args.test_retrieval) if args.test_retrieval else None,
        baseline=not args.no_baseline,
    )
    files = result.save(_outdir(args))
    print(files["metrics"])


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--variant", choices=["standard", "no_lora", "early_fusion", "direct_distill", "arch_only"],
                   help=f"training variant (default: {d.variant})")
    p.add_argument("--lambda", dest="lam", type=float, help=f"distillation weight (default: {d.lam})")
    p.add_argument("--lora-r", type=int, help=f"LoRA rank (default: {d.lora_r})")
    p.add_argument("--lora-alpha", type=float, help=f"LoRA scale (default: {d.lora_alpha})")
    p.add_argument("--seed", type=int, help=f"master seed (default: {d.seed})")
    p.add_argument("--epochs", type=int,
                   help="joint-stage epochs (default: 1 if N >= 10000 else 25)")
    p.add_argument("--text-epochs", type=int,
                   help="text-stage epochs (default: 1 if N >= 10000 else 25)")
    p.add_argument("--batch", type=int, help=f"batch size (default: {d.batch_size})")
    p.add_argument("--lr", type=float, help=f"Adam learning rate (default: {d.lr})")
    p.add_argument("--weight-decay", type=float, help=f"decoupled weight decay (default: {d.weight_decay})")
    p.add_argument("--dropout", type=float, help=f"training-time word dropout (default: {d.word_dropout})")
    p.add_argument("--freeze-text", action="store_true",
                   help="keep text adapter and text head fixed in the joint stage (default: off)")
    p.add_argument("--early-fusion-text", choices=["distilled", "real"],
                   help=f"early-fusion text input (default: {d.early_fusion_text})")
    p.add_argument("--hidden", type=int, help="text-predictor hidden width (default: max(d_v, d_t))")


def _add_encoder_flags(p):
    d = HashedEncoderConfig()
    p.add_argument("--dim", type=int, help=f"hashed text dimension (default: {d.dim})")
    p.add_argument("--hash-seed", type=int, help=f"hash seed (default: {d.seed})")


def _add_pairing_flags(p):
    d = PairingOptions()
    p.add_argument("--keywords", help="comma-separated organ terms to filter reports (default: no filter)")
    p.add_argument("--rank", type=int, help=f"pair with the k-th most similar report (default: {d.rank})")
    p.add_argument("--random", action="store_true", help="random pairing instead of retrieval (default: off)")
    p.add_argument("--bins", type=int, help=f"similarity histogram bins (default: {d.bins})")
    p.add_argument("--workers", type=int, help=f"threads for similarity blocks (default: {d.workers})")


def build_parser():
    parser = _Parser(prog="clipit", description="Pseudo-paired text distillation for image classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML configuration file (default: none)")
        p.add_argument("--out", default=".", help="output directory (default: %(default)s; env CLIPIT_OUT wins)")

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(p)
    d = SynthConfig()
    p.add_argument("--n-classes", dest="n_classes", type=int, help=f"classes (default: {d.n_classes})")
    p.add_argument("--n-samples", dest="n_samples", type=int, help=f"training images (default: {d.n_samples})")
    p.add_argument("--n-test", dest="n_test", type=int, help=f"held-out images (default: {d.n_test})")
    p.add_argument("--n-reports", dest="n_reports", type=int, help=f"reports (default: {d.n_reports})")
    p.add_argument("--d-r", dest="d_r", type=int, help=f"retrieval dimension (default: {d.d_r})")
    p.add_argument("--d-v", dest="d_v", type=int, help=f"vision task dimension (default: {d.d_v})")
    p.add_argument("--d-t", dest="d_t", type=int, help=f"text dimension (default: {d.d_t})")
    p.add_argument("--ambiguous-frac", dest="ambiguous_frac", type=float,
                   help=f"vision-ambiguous fraction (default: {d.ambiguous_frac})")
    p.add_argument("--noise", type=float, help=f"noise scale sigma (default: {d.noise})")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, help=f"keywords per class (default: {d.vocab_size})")
    p.add_argument("--retrieval-similarity", dest="retrieval_similarity", type=float,
                   help=f"planted image-report cosine (default: {d.retrieval_similarity})")
    p.add_argument("--organ", help=f"organ term tagged on reports (default: {d.organ})")
    p.add_argument("--seed", type=int, help=f"generator seed (default: {d.seed})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("encode-text", help="hash a report corpus into a text embedding store")
    common(p)
    p.add_argument("--corpus", required=True, help="report corpus JSONL")
    _add_encoder_flags(p)
    p.add_argument("--dropout", type=float, help="word dropout probability (default: 0)")
    p.add_argument("--seed", type=int, default=0, help="dropout seed (default: %(default)s)")
    p.set_defaults(func=cmd_encode_text)

    p = sub.add_parser("pair", help="pseudo-pair images with reports")
    common(p)
    p.add_argument("--images", required=True, help="image retrieval store")
    p.add_argument("--texts", required=True, help="report retrieval store (with ids)")
    p.add_argument("--corpus", help="report corpus JSONL (needed for --keywords); default: none")
    _add_pairing_flags(p)
    p.add_argument("--seed", type=int, help="seed for --random (default: 0)")
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("train", help="train a model from a pairing")
    common(p)
    p.add_argument("--task", required=True, help="labelled image task-space store")
    p.add_argument("--pairs", required=True, help="pairing JSONL")
    p.add_argument("--corpus", help="report corpus JSONL (hashed text); default: none")
    p.add_argument("--text-embeddings", help="precomputed report embeddings with ids (skips hashing); default: none")
    p.add_argument("--classes", type=int, help="class count (default: max label + 1)")
    _add_train_flags(p)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="unimodal predictions from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--images", required=True, help="image task-space store")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics from predictions")
    common(p)
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--labels", required=True, help="store carrying the true labels")
    p.add_argument("--text-predictions", help="text-branch predictions CSV (enables omega); default: none")
    p.add_argument("--vision-predictions",
                   help="vision-branch predictions CSV for omega (default: --predictions)")
    p.add_argument("--p-values", help="comma-separated p-values for Fisher's test; default: none")
    p.add_argument("--checkpoint", help="checkpoint for parameter and FLOP counts; default: none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="pair, train, extract and evaluate in one run")
    common(p)
    p.add_argument("--image-retrieval", required=True, help="image retrieval store")
    p.add_argument("--task", required=True, help="labelled image task-space store")
    p.add_argument("--text-retrieval", required=True, help="report retrieval store (with ids)")
    p.add_argument("--corpus", required=True, help="report corpus JSONL")
    p.add_argument("--text-embeddings", help="precomputed report task-space embeddings (skips hashing); default: none")
    p.add_argument("--test-task", help="held-out labelled task-space store (default: evaluate on the training images)")
    p.add_argument("--test-retrieval", help="held-out image retrieval store (default: none; needed for omega on held-out data)")
    p.add_argument("--no-baseline", action="store_true", help="skip the vision-only baseline (default: off)")
    _add_train_flags(p)
    _add_encoder_flags(p)
    _add_pairing_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _load_config(args.config))
    except ClipItError as exc:
        print(f"error[{exc.category}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT if exc.category == "input" else EXIT_RUNTIME
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error[input]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TypeError, ValueError) as exc:
        # bad config values surface here (e.g. wrong types in TOML)
        print(f"error[input]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
