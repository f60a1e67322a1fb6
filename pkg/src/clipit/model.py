"""The dual-branch model: LoRA adapters, class heads, text predictor, logit fusion.

Parameter names (also the checkpoint order)::

    fv.W fv.A fv.B          vision adapter  (W frozen identity)
    ft.W ft.A ft.B          text adapter    (W frozen identity; dropped for inference)
    hv.W hv.b               vision head     d_v -> C
    ht.W ht.b               text head       d_t -> C
    hd.W1 hd.b1 hd.W2 hd.b2 text predictor  d_v -> h -> d_t, tanh hidden
    g.W g.b                 fusion          2C -> C over [text logits | vision logits]

Variant-specific blocks replace some of these: ``early_fusion`` uses
``ef.W ef.b`` (C x (d_v + d_t)) instead of the heads and fusion;
``direct_distill`` keeps ``hv`` and uses ``dd.P dd.b`` (d_t -> d_v) instead
of ``hd``, ``ht`` and ``g``. ``no_lora`` carries no ``A``/``B`` factors.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, ConfigInvalid, DimensionMismatch, InputError, TruncatedFile, UnsupportedVersion
from .numeric import Tape, as_matrix
from .rng import Xoshiro256pp

VARIANTS = ("standard", "no_lora", "early_fusion", "direct_distill", "arch_only")

CKPT_MAGIC = b"CIPM"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIBBIIIIIdd")


class LoraLinear:
    """``W x + (alpha / r) B (A x) + bias`` with W frozen."""

    def __init__(self, W, A, B, alpha, bias=None):
        self.W = as_matrix(W, ndim=2)
        self.A = as_matrix(A, ndim=2)
        self.B = as_matrix(B, ndim=2)
        self.alpha = float(alpha)
        self.bias = None if bias is None else as_matrix(bias, ndim=1)
        d_out, d_in = self.W.shape
        r = self.A.shape[0]
        if r < 1 or self.A.shape != (r, d_in) or self.B.shape != (d_out, r):
            raise DimensionMismatch(f"W {self.W.shape}, A {self.A.shape}, B {self.B.shape}")
        if self.alpha <= 0:
            raise ConfigInvalid("LoRA alpha must be positive")

    @property
    def rank(self):
        return self.A.shape[0]

    @classmethod
    def init(cls, W, rank, alpha, rng, bias=False):
        d_out, d_in = W.shape
        A = rng.normals((rank, d_in)) / np.sqrt(d_in)
        B = np.zeros((d_out, rank))
        return cls(W, A, B, alpha, np.zeros(d_out) if bias else None)

    def forward(self, x):
        x = as_matrix(x)
        single = x.ndim == 1
        if x.shape[-1] != self.W.shape[1]:
            raise DimensionMismatch(f"input dim {x.shape[-1]}, layer expects {self.W.shape[1]}")
        tape = Tape()
        out = lora_apply(tape, tape.const(np.atleast_2d(x)), tape.const(self.W),
                         tape.const(self.A), tape.const(self.B), self.alpha / self.rank,
                         None if self.bias is None else tape.const(self.bias)).value
        return out[0] if single else out


def lora_forward(layer, x):
    return layer.forward(x)


def lora_apply(tape, x, W, A, B, scale, bias=None):
    y = tape.matmul(x, W)
    if A is not None:
        delta = tape.scale(tape.matmul(tape.matmul(x, A), B), scale)
        y = tape.add(y, delta)
    if bias is not None:
        y = tape.bias_add(y, bias)
    return y


def _affine(tape, x, W, b):
    return tape.bias_add(tape.matmul(x, W), b)


@dataclass
class ClipItModel:
    d_v: int
    d_t: int
    hidden: int
    n_classes: int
    rank: int
    alpha: float
    lam: float = 1.0
    variant: str = "standard"
    params: dict = field(default_factory=dict)

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, d_v, d_t, n_classes, rank=8, alpha=8.0, hidden=None, lam=1.0,
             variant="standard", seed=0):
        """Fresh model: LoRA ``B = 0``, heads Gaussian(0, 1/d_in), fusion = averaging."""
        if variant not in VARIANTS:
            raise ConfigInvalid(f"unknown variant {variant!r}")
        if min(d_v, d_t) < 1 or n_classes < 2:
            raise ConfigInvalid("dimensions must be positive and C >= 2")
        hidden = hidden or max(d_v, d_t)
        if variant == "no_lora":
            rank = 0
        elif rank < 1:
            raise ConfigInvalid("LoRA rank must be >= 1")
        if alpha <= 0:
            raise ConfigInvalid("LoRA alpha must be positive")
        rng = Xoshiro256pp(seed)
        C = n_classes
        p = {}

        def gauss(rows, cols):
            return rng.normals((rows, cols)) / np.sqrt(cols)

        for pre, d in (("fv", d_v), ("ft", d_t)):
            p[f"{pre}.W"] = np.eye(d)
            if rank:
                p[f"{pre}.A"] = gauss(rank, d)
                p[f"{pre}.B"] = np.zeros((d, rank))
        if variant == "early_fusion":
            p["ef.W"] = gauss(C, d_v + d_t)
            p["ef.b"] = np.zeros(C)
        else:
            p["hv.W"] = gauss(C, d_v)
            p["hv.b"] = np.zeros(C)
        if variant == "direct_distill":
            p["dd.P"] = gauss(d_v, d_t)
            p["dd.b"] = np.zeros(d_v)
        else:
            p["hd.W1"] = gauss(hidden, d_v)
            p["hd.b1"] = np.zeros(hidden)
            p["hd.W2"] = gauss(d_t, hidden)
            p["hd.b2"] = np.zeros(d_t)
        if variant not in ("early_fusion", "direct_distill"):
            p["ht.W"] = gauss(C, d_t)
            p["ht.b"] = np.zeros(C)
            p["g.W"] = np.hstack([0.5 * np.eye(C), 0.5 * np.eye(C)])
            p["g.b"] = np.zeros(C)
        return cls(d_v, d_t, hidden, C, rank, float(alpha), float(lam), variant, p)

    def copy(self):
        return ClipItModel(self.d_v, self.d_t, self.hidden, self.n_classes, self.rank,
                           self.alpha, self.lam, self.variant,
                           {k: v.copy() for k, v in self.params.items()})

    @property
    def has_text_branch(self):
        return "ft.W" in self.params

    @property
    def frozen(self):
        return {k for k in self.params if k.endswith(".W") and k[:2] in ("fv", "ft")}

    def unimodal(self):
        """Copy without the text side (adapter ``ft``, projection ``dd``); everything inference needs."""
        m = self.copy()
        m.params = {k: v for k, v in m.params.items() if not k.startswith(("ft.", "dd."))}
        return m

    def param_order(self):
        return [k for k in _ORDER if k in self.params]

    # -- forward passes ----------------------------------------------------

    def _lora(self, tape, nodes, pre, x):
        A = nodes.get(f"{pre}.A")
        B = nodes.get(f"{pre}.B")
        scale = self.alpha / self.rank if self.rank else 0.0
        return lora_apply(tape, x, nodes[f"{pre}.W"], A, B, scale)

    def build(self, tape, nodes, x_v, x_t=None, early_text="distilled"):
        """Record the forward pass on ``tape``.

        ``nodes`` maps parameter names to tape nodes. Returns a dict with
        ``logits``, ``v``, ``t_hat`` and, when ``x_t`` is given, ``t``. The
        logits never depend on ``x_t`` except for early fusion on real text.
        """
        if x_v.value.shape[-1] != self.d_v:
            raise DimensionMismatch(f"vision input dim {x_v.value.shape[-1]}, model expects {self.d_v}")
        out = {}
        v = self._lora(tape, nodes, "fv", x_v)
        out["v"] = v
        if x_t is not None:
            if x_t.value.shape[-1] != self.d_t:
                raise DimensionMismatch(f"text input dim {x_t.value.shape[-1]}, model expects {self.d_t}")
            out["t"] = self._lora(tape, nodes, "ft", x_t)
        if self.variant == "direct_distill":
            out["logits"] = _affine(tape, v, nodes["hv.W"], nodes["hv.b"])
            if x_t is not None:
                out["t_proj"] = _affine(tape, out["t"], nodes["dd.P"], nodes["dd.b"])
            return out
        hid = tape.tanh(_affine(tape, v, nodes["hd.W1"], nodes["hd.b1"]))
        t_hat = _affine(tape, hid, nodes["hd.W2"], nodes["hd.b2"])
        out["t_hat"] = t_hat
        if self.variant == "early_fusion":
            if early_text == "real":
                if x_t is None:
                    raise InputError("early fusion on real text needs text input")
                feat = tape.concat(v, out["t"])
            else:
                feat = tape.concat(v, t_hat)
            out["logits"] = _affine(tape, feat, nodes["ef.W"], nodes["ef.b"])
            return out
        lt = _affine(tape, t_hat, nodes["ht.W"], nodes["ht.b"])
        lv = _affine(tape, v, nodes["hv.W"], nodes["hv.b"])
        out["text_logits"] = lt
        out["vision_logits"] = lv
        out["logits"] = _affine(tape, tape.concat(lt, lv), nodes["g.W"], nodes["g.b"])
        return out

    def _const_nodes(self, tape):
        return {k: tape.const(v) for k, v in self.params.items()}


_ORDER = [
    "fv.W", "fv.A", "fv.B",
    "ft.W", "ft.A", "ft.B",
    "hv.W", "hv.b",
    "ht.W", "ht.b",
    "hd.W1", "hd.b1", "hd.W2", "hd.b2",
    "g.W", "g.b",
    "ef.W", "ef.b",
    "dd.P", "dd.b",
]


def _batch(x):
    x = as_matrix(x)
    return x.ndim == 1, np.atleast_2d(x)


def forward_joint(model, x_v, x_t, early_text="distilled"):
    """Fused logits plus the ``(t, t_hat)`` pair for the distillation loss.

    Works on a single vector or a row batch. For ``direct_distill`` the
    second element of the pair is the projected text ``P t`` and the first
    is the vision feature it is distilled into.
    """
    single, xv = _batch(x_v)
    _, xt = _batch(x_t)
    tape = Tape()
    out = model.build(tape, model._const_nodes(tape), tape.const(xv), tape.const(xt), early_text)
    if model.variant == "direct_distill":
        res = (out["logits"].value, out["v"].value, out["t_proj"].value)
    else:
        res = (out["logits"].value, out["t"].value, out["t_hat"].value)
    return tuple(r[0] for r in res) if single else res


def unimodal_logits(model, x_v):
    single, xv = _batch(x_v)
    tape = Tape()
    out = model.build(tape, model._const_nodes(tape), tape.const(xv))
    logits = out["logits"].value
    return logits[0] if single else logits


def predict_unimodal(model, x_v):
    """``(class, logits)`` from vision input alone; the text adapter is never run.

    Ties in the argmax go to the lowest class index.
    """
    logits = unimodal_logits(model, x_v)
    return np.argmax(logits, axis=-1), logits


def branch_logits(model, x_v):
    """Vision-head and text-head logits of the unimodal path (standard family only)."""
    _, xv = _batch(x_v)
    tape = Tape()
    out = model.build(tape, model._const_nodes(tape), tape.const(xv))
    return out["vision_logits"].value, out["text_logits"].value


def text_head_logits(model, x_t):
    """``h_t(f_t(x_t))`` on real text embeddings."""
    _, xt = _batch(x_t)
    tape = Tape()
    nodes = model._const_nodes(tape)
    t = model._lora(tape, nodes, "ft", tape.const(xt))
    return _affine(tape, t, nodes["ht.W"], nodes["ht.b"]).value


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class CostReport:
    param_total: int
    param_trainable: int
    flops_unimodal: int
    flops_text_branch: int

    @property
    def flops_per_sample(self):
        return self.flops_unimodal


def _affine_flops(d_in, d_out):
    return 2 * d_in * d_out


def count_cost(model, trainable=None):
    """Exact parameter counts and per-sample FLOPs.

    FLOPs count ``2 * d_in * d_out`` per affine map (bias included) and one
    per element of a nonlinearity. The LoRA delta is two affine maps. The
    unimodal path covers everything except the text adapter, which is
    reported as the text branch.
    """
    if trainable is None:
        trainable = set(model.params) - model.frozen
    total = sum(int(np.size(v)) for v in model.params.values())
    train = sum(int(np.size(v)) for k, v in model.params.items() if k in trainable)

    def lora_flops(d):
        f = _affine_flops(d, d)
        if model.rank:
            f += _affine_flops(d, model.rank) + _affine_flops(model.rank, d)
        return f

    C, h = model.n_classes, model.hidden
    uni = lora_flops(model.d_v)
    if model.variant == "direct_distill":
        uni += _affine_flops(model.d_v, C)
    else:
        uni += _affine_flops(model.d_v, h) + h + _affine_flops(h, model.d_t)
        if model.variant == "early_fusion":
            uni += _affine_flops(model.d_v + model.d_t, C)
        else:
            uni += _affine_flops(model.d_t, C) + _affine_flops(model.d_v, C) + _affine_flops(2 * C, C)
    text = lora_flops(model.d_t) if model.has_text_branch else 0
    if "dd.P" in model.params:
        text += _affine_flops(model.d_t, model.d_v)
    return CostReport(total, train, uni, text)


# ---------------------------------------------------------------------------
# checkpoints

_VARIANT_CODE = {v: k for k, v in enumerate(VARIANTS)}


def save_checkpoint(model, path):
    """Binary checkpoint, little-endian.

    Header: magic ``CIPM``, version u32, variant u8, flags u8 (bit0 = text
    adapter present), d_v, d_t, h, C, r as u32, alpha and lambda as f64,
    parameter count u32. Then each parameter in canonical order: name
    (u16 length + UTF-8), ndim u8, dims u32 each, values f64.
    """
    names = model.param_order()
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, _VARIANT_CODE[model.variant],
                               1 if model.has_text_branch else 0, model.d_v, model.d_t,
                               model.hidden, model.n_classes, model.rank, model.alpha, model.lam),
             struct.pack("<I", len(names))]
    for name in names:
        arr = np.asarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a CIPM checkpoint")
    if len(buf) < _CKPT_HEADER.size + 4:
        raise TruncatedFile(f"{path}: header cut short")
    _, version, vcode, flags, d_v, d_t, h, C, r, alpha, lam = _CKPT_HEADER.unpack_from(buf, 0)
    if version != CKPT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    if vcode >= len(VARIANTS):
        raise InputError(f"{path}: unknown variant code {vcode}")
    off = _CKPT_HEADER.size
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            if len(buf) < off + 8 * n:
                raise TruncatedFile(f"{path}: parameter {name} cut short")
            params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error:
        raise TruncatedFile(f"{path}: parameter table cut short") from None
    model = ClipItModel(d_v, d_t, h, C, r, alpha, lam, VARIANTS[vcode], params)
    want = param_shapes(d_v, d_t, h, C, r, VARIANTS[vcode], text_branch=bool(flags & 1))
    if {k: v.shape for k, v in params.items()} != want:
        raise InputError(f"{path}: parameter shapes inconsistent with header dims")
    return model


def param_shapes(d_v, d_t, hidden, n_classes, rank, variant, text_branch=True):
    """Expected shape of every parameter for a given configuration."""
    C = n_classes
    shapes = {}
    adapters = (("fv", d_v), ("ft", d_t)) if text_branch else (("fv", d_v),)
    for pre, d in adapters:
        shapes[f"{pre}.W"] = (d, d)
        if rank:
            shapes[f"{pre}.A"] = (rank, d)
            shapes[f"{pre}.B"] = (d, rank)
    if variant == "early_fusion":
        shapes.update({"ef.W": (C, d_v + d_t), "ef.b": (C,)})
    else:
        shapes.update({"hv.W": (C, d_v), "hv.b": (C,)})
    if variant == "direct_distill":
        if text_branch:
            shapes.update({"dd.P": (d_v, d_t), "dd.b": (d_v,)})
    else:
        shapes.update({"hd.W1": (hidden, d_v), "hd.b1": (hidden,),
                       "hd.W2": (d_t, hidden), "hd.b2": (d_t,)})
    if variant not in ("early_fusion", "direct_distill"):
        shapes.update({"ht.W": (C, d_t), "ht.b": (C,), "g.W": (C, 2 * C), "g.b": (C,)})
    return shapes
