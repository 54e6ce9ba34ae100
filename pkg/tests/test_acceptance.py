"""Acceptance criteria, one test class per criterion.

Every check records a PASS/FAIL line; ``conftest.py`` prints them in the
terminal summary, one line per criterion. Criteria 5 and 6 train on a
reduced jittered set (about six minutes on one core). Criterion 7 trains
at full scale and runs only with ``GLIMPSE_FULL_SCALE=1`` and
``GLIMPSE_MNIST_DIR`` pointing at the MNIST IDX files.
"""

import os
import time
from collections import OrderedDict

import numpy as np
import pytest

from glimpse.cli import main
from glimpse.data import JitterSpec, LabeledSet, make_jittered, write_idx
from glimpse.desk import DeskSpec, base_digits, desk_sets, load_mnist, mnist_dir
from glimpse.evaluation import evaluate, evaluate_cascade, geometry_speedup
from glimpse.model import GlimpseModel, ModelConfig, aggregate, run_flops
from glimpse.nn import softmax
from glimpse.training import TrainHyper, e_step, fine_tune, predicted_location_loss, train_full

from test_model import SMALL, randomized
from test_training import brute_force_e_step

RESULTS = OrderedDict()
TITLES = {
    1: "FLOP-model speed-ups",
    2: "gradient check",
    3: "E-step oracle",
    4: "aggregation identity",
    5: "desk-scale learning signal",
    6: "desk-scale cascade",
    7: "full-scale reproduction",
    8: "determinism",
}


def record(criterion, name, ok, detail=""):
    """``ok=None`` marks a check that did not run."""
    RESULTS.setdefault(criterion, []).append((name, ok if ok is None else bool(ok), detail))
    return ok


def summary_lines():
    lines = []
    for c in sorted(TITLES):
        checks = RESULTS.get(c)
        if not checks:
            lines.append(f"criterion {c} ({TITLES[c]}): NOT RUN")
            continue
        if all(passed is None for _, passed, _ in checks):
            status = "SKIPPED"
        else:
            status = "PASS" if all(p is not False for _, p, _ in checks) else "FAIL"
        word = {True: "ok", False: "FAILED", None: "skipped"}
        parts = "; ".join(f"{n} {word[p]}" + (f" [{d}]" if d else "") for n, p, d in checks)
        lines.append(f"criterion {c} ({TITLES[c]}): {status} - {parts}")
    return lines


# ------------------------------------------------------------------ 1

class TestFlopSpeedups:
    @pytest.mark.parametrize("name, geometry, glimpses, expected, digits", [
        ("MNIST down-sampled", (28, 10, 10, 1), 0, 7.2, 1),
        ("MNIST 1 glimpse", (28, 10, 10, 1), 1, 3.6, 1),
        ("jittered 1 glimpse", (48, 12, 12, 2), 1, 5, 0),
        ("jittered 2 glimpses", (48, 12, 12, 2), 2, 3, 0),
        ("jittered single-resolution 1 glimpse", (48, 12, 12, 1), 1, 7, 0),
    ])
    def test_speedup(self, name, geometry, glimpses, expected, digits):
        s = geometry_speedup(*geometry, glimpses=glimpses)
        ok = round(s, digits) == expected
        record(1, name, ok, f"{s:.3f} vs {expected}")
        assert ok

    def test_model_flops_agree(self):
        cfg = ModelConfig()
        ok = [run_flops(cfg, g) for g in range(3)] == [77_000, 227_020, 377_040]
        record(1, "model flop accounting", ok)
        assert ok


# ------------------------------------------------------------------ 2

class TestGradcheck:
    def test_cli_gradcheck(self, capsys):
        t = time.perf_counter()
        rc = main(["gradcheck"])
        out = capsys.readouterr().out
        worst = max(float(line.split("max_rel_error=")[1].split()[0])
                    for line in out.splitlines() if "max_rel_error=" in line)
        elapsed = time.perf_counter() - t
        ok = rc == 0 and worst <= 1e-4 and elapsed < 60
        record(2, "all loss components", ok, f"worst {worst:.1e}, {elapsed:.1f}s")
        assert ok


# ------------------------------------------------------------------ 3

class TestEStepOracle:
    def test_thousand_pairs(self):
        t = time.perf_counter()
        rng = np.random.default_rng(2024)
        hyper = TrainHyper()
        mismatches = 0
        for i in range(1000):
            k = int(rng.integers(1, 3))
            model = randomized(SMALL, seed=int(rng.integers(0, 2 ** 31)), scale=0.8)
            img = rng.random((16, 16))
            label = int(rng.integers(0, SMALL.classes))
            h = hyper.replace(diversity_enabled=bool(rng.integers(0, 2)),
                              lam=float(rng.choice([0.0, 1.0, 100.0])))
            res = e_step(model, k, img, label, h)
            cands, best, wrong = brute_force_e_step(model, k, img, label, h)
            same = (res.z_star_index == best[1] and res.z_minus_index == wrong[1]
                    and res.offending_class == wrong[2]
                    and np.array_equal(res.z_star, cands[best[1]])
                    and np.array_equal(res.z_minus, cands[wrong[1]]))
            mismatches += not same
        elapsed = time.perf_counter() - t
        ok = mismatches == 0 and elapsed < 60
        record(3, "1000 random pairs", ok, f"{mismatches} mismatches, {elapsed:.1f}s")
        assert ok


# ------------------------------------------------------------------ 4

class TestAggregation:
    def test_identity(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(2000):
            n = int(rng.integers(1, 4))
            oL = rng.normal(size=10) * 5
            oH = [rng.normal(size=10) * 5 for _ in range(n)]
            prod = softmax(oL) * np.prod([softmax(o) ** (1.0 / n) for o in oH], axis=0)
            worst = max(worst, float(np.abs(aggregate(oL, oH) - prod / prod.sum()).max()))
        ok = worst <= 1e-9
        record(4, "n in 1..3", ok, f"max abs diff {worst:.1e}")
        assert ok


# ------------------------------------------------------------- 5 and 6

def _error(model, data, g):
    return evaluate(model, data, g).error_rate


def _train_loss(model, k, data, chunk=5000):
    total = 0.0
    for i in range(0, len(data), chunk):
        idx = np.arange(i, min(i + chunk, len(data)))
        total += predicted_location_loss(model, k, data.pixels(idx), data.labels[idx]) * len(idx)
    return total / len(data)


@pytest.fixture(scope="session")
def desk():
    t = time.perf_counter()
    train, test, source = desk_sets(DeskSpec())
    hyper = TrainHyper(epochs=10)
    logs = []
    model = GlimpseModel.init(ModelConfig(), 0)
    train_full(model, train, hyper, log=logs.append, fine_tune_last=False)
    tuned = model.copy()
    before = _train_loss(tuned, 2, train)
    fine_tune(tuned, 2, train, hyper)
    after = _train_loss(tuned, 2, train)

    ablation = {}
    for contrastive in (True, False):
        m = GlimpseModel.init(ModelConfig(scales=1, num_glimpses=1), 0)
        train_full(m, train, hyper.replace(contrastive=contrastive), fine_tune_last=False)
        ablation[contrastive] = _error(m, test, 1)
    return dict(model=model, test=test, source=source, logs=logs, ablation=ablation,
                fine_tune=(before, after), minutes=(time.perf_counter() - t) / 60)


def _stage1_losses(logs):
    return [float(line.split("loss=")[1].split()[0]) for line in logs
            if line.startswith("stage=1 ")]


class TestDeskScale:
    def test_pipeline_improves(self, desk):
        m, test = desk["model"], desk["test"]
        e0, e1, e2 = (_error(m, test, g) for g in range(3))
        record(5, "data", True, f"{desk['source']}, {desk['minutes']:.1f} min total")
        a = record(5, "N0 > 1 glimpse", e0 > e1, f"{100 * e0:.2f}% vs {100 * e1:.2f}%")
        b = record(5, "2 glimpses <= 1 glimpse + 0.3pp", e2 <= e1 + 0.003,
                   f"{100 * e2:.2f}% vs {100 * e1:.2f}%")
        assert a and b

    def test_contrastive_term_helps(self, desk):
        with_term, without = desk["ablation"][True], desk["ablation"][False]
        ok = record(5, "no contrastive term is worse (single resolution, 1 glimpse)",
                    without > with_term, f"{100 * without:.2f}% vs {100 * with_term:.2f}%")
        assert ok

    def test_stage1_loss_decreases(self, desk):
        losses = _stage1_losses(desk["logs"])
        ok = record(5, "stage-1 loss epoch 5 < epoch 1", losses[4] < losses[0],
                    f"{losses[0]:.4f} -> {losses[4]:.4f}")
        assert ok

    def test_fine_tune_does_not_increase_loss(self, desk):
        before, after = desk["fine_tune"]
        ok = record(5, "fine-tune final <= initial loss", after <= before,
                    f"{before:.4f} -> {after:.4f}")
        assert ok


class TestDeskCascade:
    def test_cascade(self, desk):
        m, test = desk["model"], desk["test"]
        t = time.perf_counter()
        full = evaluate(m, test, 2)
        forced = evaluate_cascade(m, test, 0.95, force_final=True)
        rejecting = evaluate_cascade(m, test, 0.95, force_final=False)
        elapsed = time.perf_counter() - t
        a = record(6, "mean flops below full run", forced.mean_flops < run_flops(m.config, 2),
                   f"{forced.mean_flops:.0f} vs {run_flops(m.config, 2)}, "
                   f"speed-up {forced.speedup:.1f}")
        b = record(6, "force-final error <= full + 0.7pp",
                   forced.error_rate <= full.error_rate + 0.007,
                   f"{100 * forced.error_rate:.2f}% vs {100 * full.error_rate:.2f}%")
        c = record(6, "N0 decides >= 50%", forced.per_stage_classified[0] >= 0.5,
                   f"{100 * forced.per_stage_classified[0]:.1f}%, rejection mode "
                   f"rejects {100 * rejecting.rejection_rate:.1f}%")
        d = record(6, "under 5 minutes", elapsed < 300, f"{elapsed:.1f}s")
        assert a and b and c and d


# ------------------------------------------------------------------ 7

FULL_SCALE = os.environ.get("GLIMPSE_FULL_SCALE") == "1"


def _full_reason():
    if not FULL_SCALE:
        return "set GLIMPSE_FULL_SCALE=1 to run (takes many hours)"
    if mnist_dir() is None:
        return "GLIMPSE_MNIST_DIR must hold the four MNIST IDX files"
    return None


def _pad(ds, side):
    p = (side - ds.side) // 2
    q = side - ds.side - p
    return LabeledSet(np.pad(ds.images, ((0, 0), (p, q), (p, q))), ds.labels)


class TestFullScale:
    def test_reproduction(self):
        reason = _full_reason()
        if reason:
            record(7, "full-scale runs", None, reason)
            pytest.skip(reason)
        train_src, test_src = load_mnist("train"), load_mnist("test")
        train = make_jittered(train_src, JitterSpec(48, 10, 1))
        test = make_jittered(test_src, JitterSpec(48, 3, 2))
        hyper = TrainHyper()
        ok = True

        one = GlimpseModel.init(ModelConfig(num_glimpses=1), 0)
        train_full(one, train, hyper, fine_tune_last=False)
        e = _error(one, test, 1)
        ok &= record(7, "jittered 1 glimpse <= 3.0%", e <= 0.03, f"{100 * e:.2f}%")

        two = GlimpseModel.init(ModelConfig(), 0)
        train_full(two, train, hyper, fine_tune_last=True)
        e = _error(two, test, 2)
        ok &= record(7, "jittered 2 glimpses fine-tuned <= 2.0%", e <= 0.02, f"{100 * e:.2f}%")
        cas = evaluate_cascade(two, test, 0.95, force_final=True)
        ok &= record(7, "cascade speed-up >= 8", cas.speedup >= 8, f"{cas.speedup:.1f}")

        nodiv = GlimpseModel.init(ModelConfig(), 0)
        train_full(nodiv, train, hyper.replace(diversity_enabled=False), fine_tune_last=True)
        e = _error(nodiv, test, 2)
        ok &= record(7, "no diversity fine-tuned <= 1.8%", e <= 0.018, f"{100 * e:.2f}%")

        # 28 is not a multiple of 10: pad to 30 so N0 still sees 10x10
        mn = GlimpseModel.init(ModelConfig(30, 10, 10, 1, 10, 500, 1), 0)
        train_full(mn, _pad(train_src, 30), hyper.replace(lr=0.01), fine_tune_last=False)
        e = _error(mn, _pad(test_src, 30), 1)
        ok &= record(7, "MNIST 1 glimpse <= 1.7%", e <= 0.017, f"{100 * e:.2f}%")
        assert ok


# ------------------------------------------------------------------ 8

def _pipeline(workdir, train_src, test_src):
    write_idx(train_src, workdir / "src-train-i", workdir / "src-train-l")
    write_idx(test_src, workdir / "src-test-i", workdir / "src-test-l")
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        rcs = [
            main(["gen-jittered", "--train-images", "src-train-i", "--train-labels",
                  "src-train-l", "--test-images", "src-test-i", "--test-labels", "src-test-l",
                  "--copies", "2", "--test-copies", "2", "--seed", "5"]),
            main(["train", "--epochs", "1", "--set", "fine_tune_epochs=1", "--fine-tune",
                  "--out-dir", "run"]),
            main(["eval", "--checkpoint", "run/final.glm", "--report", "run/eval.txt"]),
            main(["eval", "--checkpoint", "run/final.glm", "--cascade", "--report",
                  "run/cascade.txt"]),
            main(["dump", "traces", "--checkpoint", "run/final.glm", "--out", "run/traces.pgm"]),
            main(["dump", "filters-n1", "--checkpoint", "run/final.glm",
                  "--out", "run/filters.pgm"]),
        ]
    finally:
        os.chdir(cwd)
    files = sorted(p for p in workdir.rglob("*") if p.is_file())
    return rcs, {str(p.relative_to(workdir)): p.read_bytes() for p in files}


class TestDeterminism:
    def test_cli_pipeline_bit_identical(self, tmp_path, capsys):
        train, test, _ = base_digits(300, 100)
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        rc_a, files_a = _pipeline(tmp_path / "a", train, test)
        rc_b, files_b = _pipeline(tmp_path / "b", train, test)
        capsys.readouterr()
        same = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
        ok = rc_a == rc_b == [0] * 6 and same and "run/final.glm" in files_a
        record(8, "gen-jittered/train/eval/dump twice", ok, f"{len(files_a)} files compared")
        assert ok
