"""Two-stage training: text-head fine-tuning, then joint distillation.

Seed offsets (all derived from ``TrainConfig.seed``):

* model initialisation: ``seed + 1``
* shuffle of epoch ``e`` (both stages): ``seed + e``
* word dropout for sample ``i``: ``seed + 1_000_003 + i``
* random pairing: ``seed + 2_000_003``
"""

import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, EmptyDataset, NonFiniteLoss
from .model import VARIANTS, ClipItModel
from .numeric import AdamState, Tape, adam_step, as_matrix
from .rng import Xoshiro256pp, derive_seed

log = logging.getLogger(__name__)

SEED_INIT = 1
SEED_DROPOUT = 1_000_003
SEED_RANDOM_PAIR = 2_000_003
LARGE_DATASET = 10_000


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int | None = None
    text_epochs: int | None = None
    lam: float = 1.0
    lora_r: int = 8
    lora_alpha: float = 8.0
    hidden: int | None = None
    seed: int = 0
    variant: str = "standard"
    word_dropout: float = 0.0
    freeze_text: bool = False
    early_fusion_text: str = "distilled"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigInvalid("lr must be positive")
        if self.batch_size < 1:
            raise ConfigInvalid("batch size must be >= 1")
        if self.lam < 0:
            raise ConfigInvalid("lambda must be nonnegative")
        if not 0.0 <= self.word_dropout <= 1.0:
            raise ConfigInvalid("word dropout must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ConfigInvalid(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.early_fusion_text not in ("distilled", "real"):
            raise ConfigInvalid("early_fusion_text is 'distilled' or 'real'")
        for name in ("epochs", "text_epochs"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ConfigInvalid(f"{name} must be nonnegative")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def resolved_epochs(self, n):
        """Explicit epochs, else 1 for large datasets and 25 for small ones."""
        default = 1 if n >= LARGE_DATASET else 25
        return (self.epochs if self.epochs is not None else default,
                self.text_epochs if self.text_epochs is not None else default)

    def effective_lam(self):
        return 0.0 if self.variant == "arch_only" else self.lam


@dataclass
class TrainLog:
    ce_loss: list = field(default_factory=list)
    kd_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    seconds: float = 0.0
    stage: str = ""

    def rows(self):
        return [
            {"epoch": e + 1, "ce_loss": ce, "kd_loss": kd, "train_acc": acc}
            for e, (ce, kd, acc) in enumerate(zip(self.ce_loss, self.kd_loss, self.train_acc))
        ]


def _check_data(X, y):
    X = as_matrix(X, ndim=2)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDataset("no training samples")
    if y.shape != (X.shape[0],):
        raise DimensionMismatch(f"{y.size} labels for {X.shape[0]} samples")
    return X, y


def _batches(n, batch_size, seed):
    perm = Xoshiro256pp(seed).permutation(n)
    for s in range(0, n, batch_size):
        yield np.sort(perm[s:s + batch_size])


def _fit(model, trainable, loss_fn, n, epochs, cfg, stage):
    """Generic minibatch Adam loop.

    ``loss_fn(tape, nodes, idx) -> (loss_node, ce_per_sample, kd_per_sample, preds)``.
    """
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    trainable = sorted(trainable)
    tlog = TrainLog(stage=stage)
    start = time.perf_counter()
    params = model.params
    for epoch in range(epochs):
        ce_sum, kd_sum, correct = 0.0, 0.0, 0
        for idx in _batches(n, cfg.batch_size, derive_seed(cfg.seed, epoch)):
            tape = Tape()
            nodes = {k: (tape.param(k, v) if k in trainable else tape.const(v)) for k, v in params.items()}
            loss, ce, kd, correct_b = loss_fn(tape, nodes, idx)
            grads = tape.backward(loss)
            params = adam_step(state, params, {k: grads[k] for k in trainable})
            if not all(np.all(np.isfinite(params[k])) for k in trainable):
                raise NonFiniteLoss(f"{stage} epoch {epoch + 1}: parameters diverged")
            for v in ce:
                ce_sum += v
            for v in kd:
                kd_sum += v
            correct += correct_b
        tlog.ce_loss.append(ce_sum / n)
        tlog.kd_loss.append(kd_sum / n)
        tlog.train_acc.append(correct / n)
        log.debug("%s epoch %d: ce %.4f kd %.4f acc %.4f", stage, epoch + 1,
                  tlog.ce_loss[-1], tlog.kd_loss[-1], tlog.train_acc[-1])
    model.params = params
    tlog.seconds = time.perf_counter() - start
    return tlog


def _n_correct(logits, y):
    return int(np.count_nonzero(np.argmax(logits, axis=1) == y))


def new_model(d_v, d_t, n_classes, cfg):
    return ClipItModel.init(d_v, d_t, n_classes, rank=cfg.lora_r, alpha=cfg.lora_alpha,
                            hidden=cfg.hidden, lam=cfg.effective_lam(), variant=cfg.variant,
                            seed=derive_seed(cfg.seed, SEED_INIT))


def finetune_text_stage(model, X_t, y, cfg):
    """Fit the text adapter and text head with cross-entropy on paired report embeddings."""
    X_t, y = _check_data(X_t, y)
    if X_t.shape[1] != model.d_t:
        raise DimensionMismatch(f"text dim {X_t.shape[1]}, model expects {model.d_t}")
    if "ht.W" not in model.params:
        raise ConfigInvalid(f"variant {model.variant!r} has no text head")
    model = model.copy()
    trainable = {k for k in model.params if k.startswith(("ft.", "ht."))} - model.frozen
    _, epochs = cfg.resolved_epochs(len(y))

    def loss_fn(tape, nodes, idx):
        t = model._lora(tape, nodes, "ft", tape.const(X_t[idx]))
        logits = tape.bias_add(tape.matmul(t, nodes["ht.W"]), nodes["ht.b"])
        loss = tape.softmax_ce(logits, y[idx])
        return loss, loss.per_sample, np.zeros(len(idx)), _n_correct(logits.value, y[idx])

    tlog = _fit(model, trainable, loss_fn, len(y), epochs, cfg, "text")
    return model, tlog


def stage2_trainable(model, cfg):
    names = set(model.params) - model.frozen
    if cfg.freeze_text:
        names -= {k for k in names if k.startswith(("ft.", "ht."))}
    return names


def train_multimodal(model, X_v, X_t, y, cfg):
    """Joint step on ``CE(y, fused logits) + lambda * KD(t, t_hat)``, batch-averaged."""
    X_v, y = _check_data(X_v, y)
    X_t, _ = _check_data(X_t, y)
    if X_v.shape[1] != model.d_v or X_t.shape[1] != model.d_t:
        raise DimensionMismatch("input dims do not match the model")
    model = model.copy()
    lam = cfg.effective_lam()
    epochs, _ = cfg.resolved_epochs(len(y))

    def loss_fn(tape, nodes, idx):
        out = model.build(tape, nodes, tape.const(X_v[idx]), tape.const(X_t[idx]), cfg.early_fusion_text)
        ce = tape.softmax_ce(out["logits"], y[idx])
        if model.variant == "direct_distill":
            kd = tape.cosine_distill(out["v"], out["t_proj"], weight=lam)
        else:
            kd = tape.cosine_distill(out["t"], out["t_hat"], weight=lam)
        return tape.add(ce, kd), ce.per_sample, kd.per_sample, _n_correct(out["logits"].value, y[idx])

    tlog = _fit(model, stage2_trainable(model, cfg), loss_fn, len(y), epochs, cfg, "joint")
    return model, tlog


def train_vision_only(X_v, y, n_classes, cfg, d_t=None):
    """Baseline: vision adapter + vision head trained with cross-entropy alone.

    Uses the same initialisation, optimiser and schedule as the full model.
    Predict with :func:`vision_only_predict`.
    """
    X_v, y = _check_data(X_v, y)
    base = replace(cfg, variant="standard")
    model = new_model(X_v.shape[1], d_t or X_v.shape[1], n_classes, base)
    trainable = {k for k in model.params if k.startswith(("fv.", "hv."))} - model.frozen
    epochs, _ = cfg.resolved_epochs(len(y))

    def loss_fn(tape, nodes, idx):
        v = model._lora(tape, nodes, "fv", tape.const(X_v[idx]))
        logits = tape.bias_add(tape.matmul(v, nodes["hv.W"]), nodes["hv.b"])
        loss = tape.softmax_ce(logits, y[idx])
        return loss, loss.per_sample, np.zeros(len(idx)), _n_correct(logits.value, y[idx])

    tlog = _fit(model, trainable, loss_fn, len(y), epochs, cfg, "vision")
    return model, tlog


def vision_only_predict(model, X_v):
    tape = Tape()
    nodes = model._const_nodes(tape)
    v = model._lora(tape, nodes, "fv", tape.const(np.atleast_2d(as_matrix(X_v))))
    logits = tape.bias_add(tape.matmul(v, nodes["hv.W"]), nodes["hv.b"]).value
    return np.argmax(logits, axis=1), logits


def train_variant(X_v, X_t, y, n_classes, cfg):
    """Full training for any variant. Returns ``(model, {stage: TrainLog})``.

    ``arch_only`` skips the text stage and trains with lambda forced to 0;
    ``early_fusion`` and ``direct_distill`` have no text head, so they skip
    it too.
    """
    X_v, y = _check_data(X_v, y)
    X_t, _ = _check_data(X_t, y)
    if cfg.variant == "arch_only" and cfg.lam != 0:
        log.warning("arch_only trains without distillation; lambda %.3g ignored", cfg.lam)
    model = new_model(X_v.shape[1], X_t.shape[1], n_classes, cfg)
    logs = {}
    if cfg.variant in ("standard", "no_lora"):
        model, logs["text"] = finetune_text_stage(model, X_t, y, cfg)
    model, logs["joint"] = train_multimodal(model, X_v, X_t, y, cfg)
    return model, logs
