"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly:

    python3 tests/test_acceptance.py [--skip-training]
"""
import os
import subprocess
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from viptr.backbone import REGISTRY, VariantConfig, build_model, count_params, variant  # noqa: E402
from viptr.bench import bench_variants  # noqa: E402
from viptr.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from viptr.ctc import CTCInfeasible, ctc_brute_force, ctc_loss  # noqa: E402
from viptr.flops import count_flops  # noqa: E402
from viptr.nn import make_rng  # noqa: E402
from viptr.optim import OptimHyper  # noqa: E402
from viptr.synth import SynthSpec  # noqa: E402
from viptr.tensor import Tensor, finite_diff_check, no_grad  # noqa: E402
from viptr.train import TrainOptions, train  # noqa: E402

RESULTS = {}

PUBLISHED_PARAMS = {"sviptr-v1-t": 4.0e6, "sviptr-v2-t": 3.2e6, "sviptr-v1-l": 37.7e6, "sviptr-v2-b": 20.2e6}
PUBLISHED_FLOPS = {"sviptr-v1-t": 0.26e9, "sviptr-v2-t": 0.19e9, "sviptr-v1-l": 2.31e9, "sviptr-v2-b": 1.18e9}
TRAIN_BUDGET_S = 30 * 60


def report(number, title, ok, detail):
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[number] = line
    print(line, flush=True)
    return ok


def _cli_seconds(*argv):
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "viptr", *argv], capture_output=True, text=True, check=True)
    return time.perf_counter() - t0, dict(ln.split("=", 1) for ln in out.stdout.split())


# ---------------------------------------------------------------------------

def check_parameter_counts():
    parts, ok = [], True
    for name, ref in PUBLISHED_PARAMS.items():
        secs, out = _cli_seconds("count", "--variant", name)
        n = int(out["backbone_params"])
        dev = n / ref - 1
        ok &= abs(dev) <= 0.05 and secs < 1.0
        parts.append(f"{name} {n / 1e6:.2f}M ({dev:+.1%}, {secs:.2f}s)")
    return report(1, "parameter counts", ok, "; ".join(parts))


def check_flops():
    parts, ok = [], True
    totals = {}
    for name, ref in PUBLISHED_FLOPS.items():
        secs, out = _cli_seconds("flops", "--variant", name, "--width", "96")
        totals[name] = int(out["total_macs"])
        dev = totals[name] / ref - 1
        ok &= abs(dev) <= 0.20 and secs < 1.0
        parts.append(f"{name} {totals[name] / 1e9:.3f}G ({dev:+.1%}, {secs:.2f}s)")
    order = totals["sviptr-v2-t"] < totals["sviptr-v1-t"] < totals["sviptr-v2-b"] < totals["sviptr-v1-l"]
    base = variant("sviptr-v1-t").to_dict()
    par_ok = []
    for loc in ("L1", "L2"):
        for glb in ("G1", "G2"):
            s = count_flops(VariantConfig(**{**base, "permutation": f"[{loc}][{loc}{glb}][G1]"})).total
            p = count_flops(VariantConfig(**{**base, "permutation": f"[{loc}][{loc}//{glb}][G1]"})).total
            par_ok.append(p < s)
            if (loc, glb) == ("L2", "G2"):
                parts.append(f"L2/G2 parallel {p / 1e9:.3f}G < series {s / 1e9:.3f}G")
    ok &= order and all(par_ok)
    parts.append(f"ordering {'holds' if order else 'broken'}")
    return report(2, "FLOPs", ok, "; ".join(parts))


def check_gradients():
    import test_attention
    import test_backbone
    import test_tensor_core
    from conftest import GRAD_SEEDS, input_grad_error, param_grad_error, randomize

    worst, names = {}, []
    for name in test_tensor_core._prims(np.random.default_rng(0)):
        w = 0.0
        for seed in GRAD_SEEDS:
            rng = np.random.default_rng(seed)
            shape, fn = test_tensor_core._prims(rng)[name]
            w = max(w, input_grad_error(fn, rng.normal(size=shape), rng))
        worst[name] = w
    for name, make in test_attention.BLOCKS.items():
        w = 0.0
        for seed in GRAD_SEEDS:
            rng = np.random.default_rng(seed)
            blk = randomize(make(make_rng(seed)), rng)
            x = rng.normal(size=(1, 3, 4, 4))
            w = max(w, input_grad_error(blk, x, rng), param_grad_error(blk, blk, x, rng, per_param=2))
        worst[name] = w
    for name, (make, shape, fwd) in test_backbone.STEMS.items():
        w = 0.0
        for seed in GRAD_SEEDS:
            rng = np.random.default_rng(seed)
            m = randomize(make(make_rng(seed)), rng)
            f = fwd(m)
            x = rng.normal(size=shape)
            w = max(w, input_grad_error(f, x, rng), param_grad_error(m, f, x, rng, per_param=3))
        worst[name] = w
    top = max(worst, key=worst.get)
    ok = worst[top] <= 1e-4
    return report(3, "gradient soundness", ok,
                  f"{len(worst)} ops/blocks x {len(GRAD_SEEDS)} seeds, worst {top} {worst[top]:.1e}")


def check_ctc():
    rng = np.random.default_rng(7)
    worst, n = 0.0, 0
    while n < 200:
        T, N, L = int(rng.integers(1, 7)), int(rng.integers(2, 6)), int(rng.integers(0, 4))
        lp = rng.normal(size=(T, N))
        lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
        target = list(rng.integers(1, N, L))
        ref = ctc_brute_force(lp, target)
        if not np.isfinite(ref):
            continue
        worst = max(worst, abs(ctc_loss(lp, target)[0] - ref))
        n += 1
    gworst = 0.0
    for _ in range(30):
        T, N = int(rng.integers(2, 8)), int(rng.integers(2, 6))
        target = list(rng.integers(1, N, int(rng.integers(0, 4))))
        lp = rng.normal(size=(T, N))
        try:
            _, g = ctc_loss(lp, target)
        except CTCInfeasible:
            continue
        gworst = max(gworst, finite_diff_check(lambda t: ctc_loss(t.data, target)[0], lp, 1e-5, analytic=g))
    ok = worst < 1e-6 and gworst <= 1e-5
    return report(4, "CTC oracle", ok, f"{n} instances, max |DP - brute| {worst:.1e}, grad rel err {gworst:.1e}")


def check_length_insensitivity():
    model = build_model("sviptr-v1-t", seed=0)
    model.eval()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    lengths = []
    with no_grad():
        for w in (64, 96, 320, 640):
            x = make_rng(w).uniform(-1, 1, (1, 3, 32, w)).astype(np.float32)
            lengths.append(model.logits(x).shape[1])
    unchanged = all(np.array_equal(v, before[k]) for k, v in model.state_dict().items())
    ok = lengths == [16, 24, 80, 160] and unchanged
    return report(5, "length insensitivity", ok, f"widths 64/96/320/640 -> T {lengths}, weights unchanged")


def acceptance_training_setup():
    cfg = variant("sviptr-v2-t", channels=[32, 64, 128, 96], depths=[2, 2, 2, 2], num_classes=11)
    spec = SynthSpec(alphabet=SynthSpec().alphabet, width=96)
    hyper = OptimHyper(lr_base=2e-3, total_epochs=10, warmup_epochs=1)
    return cfg, spec, hyper


def check_training():
    cfg, spec, hyper = acceptance_training_setup()
    with tempfile.TemporaryDirectory() as tmp:
        log_a = os.path.join(tmp, "a.csv")
        t0 = time.perf_counter()
        hist, _ = train(cfg, spec, hyper, seed=0,
                        options=TrainOptions(n_train=5000, n_eval=500, stop_at_acc=0.9, log_path=log_a,
                                             ckpt_dir=os.path.join(tmp, "ck")))
        elapsed = time.perf_counter() - t0
        best = max(m.word_acc for m in hist)
        replay_epochs = min(2, len(hist))
        log_b = os.path.join(tmp, "b.csv")
        train(cfg, spec, hyper, seed=0,
              options=TrainOptions(n_train=5000, n_eval=500, max_epochs=replay_epochs, log_path=log_b))
        with open(log_a) as fa, open(log_b) as fb:
            same = fa.read().splitlines()[:replay_epochs] == fb.read().splitlines()
        ck_ok = load_checkpoint(os.path.join(tmp, "ck")).extra["word_acc"] == best
    ok = best >= 0.9 and elapsed < TRAIN_BUDGET_S and same and ck_ok
    return report(6, "desk-scale training", ok,
                  f"word acc {best:.3f} after {len(hist)} epochs in {elapsed / 60:.1f} min on "
                  f"{os.cpu_count()} core(s); replay of {replay_epochs} epochs "
                  f"{'identical' if same else 'DIFFERS'}")


def check_structure():
    from viptr.attention import CSWin, ParallelBlock
    from conftest import randomize, toy_config

    notes, ok = [], True
    m = build_model(toy_config())
    chain = [s[:2] for s in m.shape_chain(np.zeros((1, 3, 32, 96), np.float32))]
    ok &= chain == [(8, 24), (4, 24), (2, 24), (1, 24)]
    notes.append(f"heights {'->'.join(str(h) for h, _ in chain)} at T=24")

    rng = np.random.default_rng(0)
    cs = randomize(CSWin(8, 2, make_rng(0), split_window=2, lepe=False), rng)
    x = rng.normal(size=(1, 6, 10, 8))
    base = cs.attend(Tensor(x)).data[0]
    x2 = x.copy()
    x2[0, 1, 3] += 1.0
    moved = cs.attend(Tensor(x2)).data[0]
    other_cols = [0, 1, 4, 5, 6, 7, 8, 9]
    stripe_ok = np.array_equal(moved[2:, :, :4], base[2:, :, :4])
    col_ok = np.array_equal(moved[:, other_cols, 4:], base[:, other_cols, 4:])
    ok &= bool(stripe_ok and col_ok)
    notes.append(f"stripe locality {'ok' if stripe_ok and col_ok else 'broken'}")

    blk = randomize(ParallelBlock(8, 4, "L2", "G2", make_rng(1)), rng)
    xb = Tensor(rng.normal(size=(1, 4, 6, 8)))
    lo, gl = (t.data.copy() for t in blk.branches(xb))
    for p in blk.local.parameters():
        p.data = p.data + 1.0
    lo2, gl2 = (t.data for t in blk.branches(xb))
    iso = np.array_equal(gl, gl2) and not np.allclose(lo, lo2)
    ok &= iso
    notes.append(f"branch isolation {'ok' if iso else 'broken'}")

    from viptr import ops
    from viptr.attention import MaSA
    masa = MaSA(8, 4, make_rng(0))
    rows = 0.0
    for L in (1, 3, 24, 160):
        q, k, v = (rng.normal(0, 4, size=(1, 4, L, 2)) for _ in range(3))
        _, a = ops.attention(Tensor(q), Tensor(k), Tensor(v), 0.7, decay=masa.decay(L, np.float64),
                             return_weights=True)
        rows = max(rows, float(a.sum(axis=-1).max()))
    ok &= rows <= 1.0 + 1e-12
    notes.append(f"D-MaSA max row sum {rows:.4f}")

    model = build_model("sviptr-v2-t", seed=2)
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(model, tmp)
        loaded = load_checkpoint(tmp).model
        bitwise = all(np.array_equal(v, loaded.state_dict()[k]) for k, v in model.state_dict().items())
        x = make_rng(0).uniform(-1, 1, (1, 3, 32, 96)).astype(np.float32)
        model.eval()
        with no_grad():
            bitwise &= np.array_equal(model.logits(x).data, loaded.logits(x).data)
    ok &= bitwise
    notes.append(f"checkpoint round trip {'bitwise' if bitwise else 'MISMATCH'}")
    return report(7, "structural invariants", ok, "; ".join(notes))


def check_latency_ordering():
    stats = bench_variants(list(REGISTRY), width=96, iters=10, warmup=5, batch=4)
    order = [s.name for s in stats]
    ok = order[0] == "sviptr-v2-t" and order[-1] == "sviptr-v1-l"
    times = ", ".join(f"{s.name} {s.median_ms:.1f}ms" for s in stats)
    return report(8, "latency ordering", ok, f"median per image at batch 4: {times}")


CHECKS = [check_parameter_counts, check_flops, check_gradients, check_ctc, check_length_insensitivity,
          check_training, check_structure, check_latency_ordering]


# pytest entry points ---------------------------------------------------------

def test_criterion_1_parameter_counts():
    assert check_parameter_counts()


def test_criterion_2_flops():
    assert check_flops()


def test_criterion_3_gradient_soundness():
    assert check_gradients()


def test_criterion_4_ctc_oracle():
    assert check_ctc()


def test_criterion_5_length_insensitivity():
    assert check_length_insensitivity()


@pytest.mark.slow
def test_criterion_6_desk_scale_training():
    assert check_training()


def test_criterion_7_structural_invariants():
    assert check_structure()


def test_criterion_8_latency_ordering():
    assert check_latency_ordering()


if __name__ == "__main__":
    skip = "--skip-training" in sys.argv
    results = [c() for c in CHECKS if not (skip and c is check_training)]
    sys.exit(0 if all(results) else 1)
