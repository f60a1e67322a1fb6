"""End-to-end acceptance criteria, each at its stated tolerance.

Every test prints one line ``ACCEPTANCE <n> PASS|FAIL: <detail>`` to the
terminal (even when output capture is on) and then asserts. The synthetic
trend runs (criteria 5 to 10) share one cached sweep over three seeds.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from clipit.cli import main
from clipit.data import EmbeddingStore
from clipit.model import ClipItModel, LoraLinear, forward_joint, predict_unimodal
from clipit.numeric import Tape, grad_check, rowdot
from clipit.pairing import PairingRequest, pair_modalities
from clipit.pipeline import PairingOptions, run_pipeline
from clipit.rng import Xoshiro256pp
from clipit.stats import PredictionSet, aggregate_runs, fisher_combined, omega
from clipit.synth import SynthConfig, generate
from clipit.train import TrainConfig

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
BENCH = dict(n_classes=2, n_samples=4000, n_test=2000, n_reports=40, ambiguous_frac=0.3, noise=0.1)


def report(request, number, ok, detail):
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. retrieval oracle


def _oracle_choice(images, texts, k):
    def unit(v):
        sq = 0.0
        for a in v:
            sq += a * a
        n = math.sqrt(sq)
        return [a / n for a in v]

    texts_u = [unit(t) for t in texts]
    out = []
    for x in images:
        ux = unit(x)
        scored = []
        for j, ut in enumerate(texts_u):
            c = 0.0
            for a, b in zip(ux, ut):
                c += a * b
            scored.append((-max(-1.0, min(1.0, c)), j))
        scored.sort()
        out.append([scored[r][1] for r in range(k)])
    return out


def test_c01_retrieval_oracle(request):
    rs = np.random.default_rng(2024)
    mismatches, spent, n_ties = 0, 0.0, 0
    for _ in range(50):
        n, m, d = int(rs.integers(1, 257)), int(rs.integers(5, 513)), int(rs.integers(1, 65))
        images = rs.normal(size=(n, d))
        texts = rs.normal(size=(m, d))
        # plant exact ties: duplicated rows
        dup = rs.integers(0, m, size=max(1, m // 8))
        texts[rs.integers(0, m, size=dup.size)] = texts[dup]
        n_ties += dup.size
        req = PairingRequest(EmbeddingStore(images), EmbeddingStore(texts, ids=[str(j) for j in range(m)]))
        oracle = _oracle_choice(images.tolist(), texts.tolist(), 5)
        for k in range(1, 6):
            t0 = time.perf_counter()
            got = pair_modalities(req, k=k).text_ids
            spent += time.perf_counter() - t0
            mismatches += sum(g != str(o[k - 1]) for g, o in zip(got, oracle))
    ok = mismatches == 0 and spent < 30.0
    report(request, 1, ok, f"{mismatches} mismatches over 50 instances x k=1..5 "
                           f"({n_ties} planted duplicate texts), pairing time {spent:.1f}s < 30s")


# ---------------------------------------------------------------------------
# 2. gradient correctness


def test_c02_gradient_check(request):
    rs = np.random.default_rng(7)
    worst, configs = 0.0, []
    t0 = time.perf_counter()
    for trial in range(12):
        d_v, d_t = int(rs.choice([8, 16, 32])), int(rs.choice([8, 16, 32]))
        C = int(rs.choice([2, 4]))
        model = ClipItModel.init(d_v, d_t, C, rank=int(rs.choice([1, 2, 4])), alpha=float(rs.uniform(1, 8)),
                                 lam=float(rs.uniform(0.1, 2.0)), seed=trial)
        for k in ("fv.B", "ft.B"):
            model.params[k] = rs.normal(size=model.params[k].shape) * 0.2
        xv, xt = rs.normal(size=(5, d_v)), rs.normal(size=(5, d_t))
        y = rs.integers(0, C, 5)
        frozen = {k: model.params[k] for k in model.frozen}
        trainable = {k: v for k, v in model.params.items() if k not in frozen}

        def fn(p):
            tape = Tape()
            nodes = {**{k: tape.param(k, v) for k, v in p.items()}, **{k: tape.const(v) for k, v in frozen.items()}}
            out = model.build(tape, nodes, tape.const(xv), tape.const(xt))
            loss = tape.add(tape.softmax_ce(out["logits"], y),
                            tape.cosine_distill(out["t"], out["t_hat"], weight=model.lam))
            return float(loss.value), tape.backward(loss)

        # the tape graph is the one forward_joint evaluates
        logits, _, _ = forward_joint(model, xv, xt)
        tape = Tape()
        assert np.array_equal(model.build(tape, model._const_nodes(tape), tape.const(xv), tape.const(xt))["logits"].value,
                              logits)
        err = grad_check(fn, trainable)
        worst = max(worst, err)
        configs.append((d_v, d_t, C))
    spent = time.perf_counter() - t0
    ok = worst < 1e-4 and len(configs) >= 10 and spent < 60.0
    report(request, 2, ok, f"max relative error {worst:.2e} < 1e-4 over {len(configs)} configs in {spent:.1f}s")


# ---------------------------------------------------------------------------
# 3. LoRA identity at init


def test_c03_lora_identity(request):
    rng = Xoshiro256pp(3)
    worst = 0.0
    shapes = [(8, 8, 2), (16, 8, 4), (8, 32, 8), (64, 64, 8), (5, 3, 1)]
    for d_in, d_out, r in shapes:
        W = rng.normals((d_out, d_in))
        bias = rng.normals((d_out,))
        layer = LoraLinear.init(W, r, 8.0, rng, bias=True)
        layer.bias = bias
        x = rng.normals((100, d_in))
        worst = max(worst, float(np.max(np.abs(layer.forward(x) - (rowdot(x, W) + bias)))))
    report(request, 3, worst == 0.0, f"max |adapted - base| = {worst} over 100 inputs x {len(shapes)} shapes")


# ---------------------------------------------------------------------------
# 4. train / inference consistency


def test_c04_train_inference_consistency(request):
    rs = np.random.default_rng(4)
    variants = ("standard", "no_lora", "early_fusion", "direct_distill", "arch_only")
    bad = 0
    for trial in range(100):
        d_v, d_t, C = int(rs.integers(2, 20)), int(rs.integers(2, 20)), int(rs.integers(2, 5))
        model = ClipItModel.init(d_v, d_t, C, rank=int(rs.integers(1, 4)), variant=variants[trial % 5], seed=trial)
        for k, v in model.params.items():
            if k not in model.frozen:
                model.params[k] = rs.normal(size=v.shape)
        xv, xt = rs.normal(size=(int(rs.integers(1, 9)), d_v)), None
        xt = rs.normal(size=(xv.shape[0], d_t))
        joint, _, _ = forward_joint(model, xv, xt)
        _, uni = predict_unimodal(model.unimodal(), xv)
        bad += not np.array_equal(joint, uni)
    report(request, 4, bad == 0, f"{bad} of 100 (model, input) pairs differ bitwise")


# ---------------------------------------------------------------------------
# synthetic sweep shared by 5 to 10


class Sweep:
    def __init__(self):
        self._data = {}
        self._runs = {}

    def data(self, seed):
        if seed not in self._data:
            self._data[seed] = generate(SynthConfig(seed=seed, **BENCH))
        return self._data[seed]

    def run(self, seed, mode):
        key = (seed, mode)
        if key not in self._runs:
            ds = self.data(seed)
            cfg = TrainConfig(seed=seed)
            pairing = PairingOptions()
            if mode == "random":
                pairing = PairingOptions(random=True)
            elif mode == "arch_only":
                cfg = TrainConfig(seed=seed, variant="arch_only", lam=0.0)
            elif mode.startswith("dropout"):
                cfg = TrainConfig(seed=seed, word_dropout=float(mode[len("dropout"):]))
            t0 = time.perf_counter()
            res = run_pipeline(ds.train.retrieval, ds.train.task, ds.corpus, ds.text_retrieval, cfg,
                               pairing=pairing, test_task=ds.test.task, test_retrieval=ds.test.retrieval,
                               baseline=(mode == "standard"))
            res.metrics["wall_seconds"] = time.perf_counter() - t0
            self._runs[key] = res.metrics
        return self._runs[key]

    def mean(self, mode, key):
        return aggregate_runs([self.run(s, mode)[key] for s in SEEDS])[0]


@pytest.fixture(scope="module")
def sweep():
    return Sweep()


def test_c05_complementarity_trend(request, sweep):
    t0 = time.perf_counter()
    clip = sweep.mean("standard", "accuracy_mean")
    vis = sweep.mean("standard", "accuracy_vision_only")
    per_seed = (time.perf_counter() - t0) / len(SEEDS)
    accs = [sweep.run(s, "standard")["accuracy_mean"] for s in SEEDS]
    base = [sweep.run(s, "standard")["accuracy_vision_only"] for s in SEEDS]
    ok = clip >= vis + 0.05 and per_seed * len(SEEDS) < 300
    report(request, 5, ok, f"CLIP-IT {clip:.4f} vs vision-only {vis:.4f} (gap {100 * (clip - vis):+.2f} pts, "
                           f"need >= +5); per seed CLIP-IT {accs} vision {base}")


def test_c06_random_pairing(request, sweep):
    rnd = sweep.mean("random", "accuracy_mean")
    vis = sweep.mean("standard", "accuracy_vision_only")
    ok = abs(rnd - vis) <= 0.02
    report(request, 6, ok, f"random-pairing {rnd:.4f} vs vision-only {vis:.4f} "
                           f"(|gap| {100 * abs(rnd - vis):.2f} pts <= 2)")


def test_c07_distillation_fidelity(request, sweep):
    cos = sweep.mean("standard", "distill_cosine_mean")
    report(request, 7, cos >= 0.9, f"held-out mean cos(t_hat, t) {cos:.4f} >= 0.9")


def test_c08_arch_only(request, sweep):
    arch = sweep.mean("arch_only", "accuracy_mean")
    vis = sweep.mean("standard", "accuracy_vision_only")
    ok = abs(arch - vis) <= 0.02
    report(request, 8, ok, f"arch_only {arch:.4f} vs vision-only {vis:.4f} (|gap| {100 * abs(arch - vis):.2f} pts <= 2)")


def test_c09_word_dropout(request, sweep):
    a0 = sweep.mean("standard", "accuracy_mean")
    a3 = sweep.mean("dropout0.3", "accuracy_mean")
    a5 = sweep.mean("dropout0.5", "accuracy_mean")
    ok = a3 >= a0 - 0.02 and a5 <= a0
    report(request, 9, ok, f"acc p=0 {a0:.4f}, p=0.3 {a3:.4f} (>= p0 - 2 pts), p=0.5 {a5:.4f} (<= p0)")


def test_c10_omega(request, sweep):
    rs = np.random.default_rng(10)
    bad = 0
    for _ in range(1000):
        n, C = int(rs.integers(1, 40)), int(rs.integers(2, 6))
        y, v, t = (rs.integers(0, C, n) for _ in range(3))
        count = 0
        for i in range(n):
            if t[i] == y[i] and v[i] != y[i]:
                count += 1
        bad += omega(PredictionSet(y, v, t)) != (count, count / n)
    frac = sweep.mean("standard", "omega_pct") / 100.0
    ok = bad == 0 and frac >= 0.05
    report(request, 10, ok, f"{bad} of 1000 brute-force mismatches; vision-only omega fraction {frac:.4f} >= 0.05")


# ---------------------------------------------------------------------------
# 11. Fisher


def _fisher_closed_form(ps):
    x = -2.0 * math.fsum(math.log(p) for p in ps)
    k = len(ps)
    return math.exp(-x / 2) * math.fsum((x / 2) ** i / math.factorial(i) for i in range(k))


def test_c11_fisher(request):
    rs = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        ps = rs.uniform(1e-6, 1.0, size=int(rs.integers(1, 20))).tolist()
        worst = max(worst, abs(fisher_combined(ps)[2] - _fisher_closed_form(ps)))
    ex = fisher_combined([math.exp(-1), math.exp(-1)])[2]
    ok = worst < 1e-10 and abs(ex - 3 * math.exp(-2)) < 1e-10
    report(request, 11, ok, f"max deviation {worst:.1e} < 1e-10; p=[e^-1, e^-1] -> {ex:.12f} vs 3e^-2 {3 * math.exp(-2):.12f}")


# ---------------------------------------------------------------------------
# 12. determinism of the command-line pipeline


def test_c12_pipeline_determinism(request, tmp_path):
    assert main(["synth", "--n-samples", "600", "--n-test", "300", "--seed", "12", "--out", str(tmp_path / "d")]) == 0
    d = tmp_path / "d"
    digests = []
    for out in ("a", "b"):
        rc = main(["pipeline", "--image-retrieval", str(d / "image_retrieval.cipe"), "--task", str(d / "image_task.cipe"),
                   "--text-retrieval", str(d / "text_retrieval.cipe"), "--corpus", str(d / "corpus.jsonl"),
                   "--test-task", str(d / "test_task.cipe"), "--test-retrieval", str(d / "test_retrieval.cipe"),
                   "--keywords", "breast", "--seed", "12", "--workers", "4", "--out", str(tmp_path / out)])
        assert rc == 0
        digests.append({f: hashlib.sha256((tmp_path / out / f).read_bytes()).hexdigest()
                        for f in ("unimodal.cipm", "metrics.json")})
    ok = digests[0] == digests[1]
    report(request, 12, ok, f"checkpoint and metrics sha256 identical on rerun: {ok}")
