import numpy as np
import pytest

from glimpse.cli import RunConfig, main, parse_config, tile_shape
from glimpse.data import LabeledSet, read_idx, write_idx
from glimpse.evaluation import parse_trace_sidecar, read_pgm
from glimpse.model import load

TINY = ["full_side = 16", "low_side = 4", "patch_side = 4", "classes = 3", "hidden = 6",
        "epochs = 1", "fine_tune_epochs = 1", "batch = 10"]


@pytest.fixture
def source(tmp_path):
    rng = np.random.default_rng(0)
    src = LabeledSet(rng.integers(0, 256, (12, 8, 8)).astype(np.uint8), rng.integers(0, 3, 12))
    write_idx(src, tmp_path / "src-i", tmp_path / "src-l")
    return src


def gen(tmp_path, out="data", *extra):
    return main(["gen-jittered", "--train-images", str(tmp_path / "src-i"),
                 "--train-labels", str(tmp_path / "src-l"),
                 "--test-images", str(tmp_path / "src-i"), "--test-labels", str(tmp_path / "src-l"),
                 "--out-dir", str(tmp_path / out), "--canvas", "16", "--copies", "3", *extra])


@pytest.fixture
def config_file(tmp_path, source):
    assert gen(tmp_path) == 0
    d = tmp_path / "data"
    lines = TINY + [f"train_images = {d / 'train-images.idx'}",
                    f"train_labels = {d / 'train-labels.idx'}",
                    f"test_images = {d / 'test-images.idx'}",
                    f"test_labels = {d / 'test-labels.idx'}",
                    f"out_dir = {tmp_path / 'run'}"]
    path = tmp_path / "run.cfg"
    path.write_text("# tiny run\n" + "\n".join(lines) + "\n")
    return path


@pytest.fixture
def trained(tmp_path, config_file):
    assert main(["train", "--config", str(config_file)]) == 0
    return tmp_path / "run"


class TestConfig:
    def test_defaults_match_jittered_setup(self):
        c = RunConfig()
        assert (c.full_side, c.low_side, c.patch_side, c.scales, c.hidden) == (48, 12, 12, 2, 500)
        assert (c.lr, c.momentum, c.batch, c.epochs, c.lam) == (0.05, 0.9, 50, 50, 100.0)

    def test_round_trip(self):
        c = parse_config("lr = 0.01\nfine_tune = true\nout_dir = x/y\nsigma_sq = 0.0021")
        assert parse_config(c.to_text()) == c
        assert parse_config(RunConfig().to_text()) == RunConfig()

    def test_unknown_key(self, capsys):
        assert main(["train", "--dry-run", "--set", "learning_rate=0.1"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_bad_value(self):
        assert main(["train", "--dry-run", "--set", "batch=fifty"]) == 1

    def test_invariant_checked_before_work(self):
        assert main(["train", "--dry-run", "--set", "low_side=5"]) == 1

    def test_flags_win(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text("glimpses = 1\ndiversity = true\n")
        assert main(["train", "--dry-run", "--config", str(p), "--glimpses", "2",
                     "--no-diversity"]) == 0
        out = capsys.readouterr().out
        assert "glimpses = 2" in out and "diversity = false" in out

    def test_dry_run_budget(self, capsys):
        assert main(["train", "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "glimpses=1 flops=227020 speedup=5.10" in out
        assert "glimpses=2 flops=377040 speedup=3.07" in out

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope")]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--set", f"train_images={tmp_path / 'x'}"]) == 1


class TestGenJittered:
    def test_counts_and_determinism(self, tmp_path, source):
        assert gen(tmp_path, "a") == 0 and gen(tmp_path, "b") == 0
        for name in ("train-images.idx", "train-labels.idx", "test-images.idx"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        ds = read_idx(tmp_path / "a" / "train-images.idx", tmp_path / "a" / "train-labels.idx")
        assert ds.images.shape == (36, 16, 16)

    def test_degenerate_is_identity(self, tmp_path, source):
        rc = main(["gen-jittered", "--train-images", str(tmp_path / "src-i"),
                   "--train-labels", str(tmp_path / "src-l"), "--out-dir", str(tmp_path / "o"),
                   "--canvas", "8", "--copies", "1"])
        assert rc == 0
        ds = read_idx(tmp_path / "o" / "train-images.idx", tmp_path / "o" / "train-labels.idx")
        assert np.array_equal(ds.images, source.images)

    def test_bad_source(self, tmp_path, source):
        (tmp_path / "src-l").write_bytes(b"\x00\x00\x08\x03\x00\x00\x00\x0c")
        assert gen(tmp_path) == 1

    def test_canvas_too_small(self, tmp_path, source):
        assert gen(tmp_path, "o", "--canvas", "4") == 1


class TestTrain:
    def test_outputs(self, trained):
        names = {p.name for p in trained.iterdir()}
        assert {"config.txt", "train.log", "stage1.glm", "stage2.glm", "final.glm"} <= names
        cfg = parse_config((trained / "config.txt").read_text())
        assert load(trained / "final.glm").config == cfg.model_config()
        log = (trained / "train.log").read_text()
        assert "stage=1 epoch=1 loss=" in log and "heldout_error=" in log

    def test_fine_tune_flag(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--fine-tune"]) == 0
        assert "stage=2-finetune epoch=1" in (tmp_path / "run" / "train.log").read_text()

    def test_zero_glimpses(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--glimpses", "0"]) == 0
        assert load(tmp_path / "run" / "final.glm").config.num_glimpses == 0
        assert "stage=0 epoch=1" in (tmp_path / "run" / "train.log").read_text()

    def test_reproducible(self, tmp_path, config_file):
        a, b = tmp_path / "ra", tmp_path / "rb"
        assert main(["train", "--config", str(config_file), "--out-dir", str(a)]) == 0
        assert main(["train", "--config", str(config_file), "--out-dir", str(b)]) == 0
        for name in ("stage1.glm", "final.glm"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--set", "lr=1e300",
                     "--set", "epochs=3"]) == 2

    def test_image_size_mismatch(self, tmp_path, config_file):
        assert main(["train", "--config", str(config_file), "--set", "full_side=32"]) == 1


class TestEval:
    def run_eval(self, trained, config_file, *extra):
        return main(["eval", "--checkpoint", str(trained / "final.glm"),
                     "--config", str(config_file), *extra])

    def test_report(self, trained, config_file, capsys):
        assert self.run_eval(trained, config_file, "--glimpses", "1") == 0
        out = capsys.readouterr().out
        assert "1 glimpse" in out and "error_rate=" in out and "speedup=" in out

    def test_cascade_modes(self, trained, config_file, capsys):
        assert self.run_eval(trained, config_file, "--cascade", "--threshold", "0.5") == 0
        rej = capsys.readouterr().out
        assert self.run_eval(trained, config_file, "--cascade", "--force-final") == 0
        forced = capsys.readouterr().out
        assert "rejection_rate=0.0\n" in forced and "per_stage_classified=" in rej

    def test_report_file_deterministic(self, tmp_path, trained, config_file):
        for name in ("r1", "r2"):
            assert self.run_eval(trained, config_file, "--report", str(tmp_path / name)) == 0
        assert (tmp_path / "r1").read_bytes() == (tmp_path / "r2").read_bytes()

    def test_config_mismatch(self, trained, config_file, capsys):
        assert self.run_eval(trained, config_file, "--set", "hidden=7") == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_bad_glimpses(self, trained, config_file):
        assert self.run_eval(trained, config_file, "--glimpses", "3") == 1

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.glm")]) == 1


class TestDump:
    def test_filters(self, tmp_path, trained):
        ck = str(trained / "final.glm")
        assert main(["dump", "filters-n0", "--checkpoint", ck, "--out", str(tmp_path / "f.pgm")]) == 0
        rows, cols = tile_shape(6)
        assert read_pgm(tmp_path / "f.pgm").shape == (rows * 5 - 1, cols * 5 - 1)
        assert main(["dump", "filters-n1", "--checkpoint", ck, "--out", str(tmp_path / "g.pgm")]) == 0
        assert (tmp_path / "g-scale1.pgm").exists()

    def test_traces(self, tmp_path, trained, config_file):
        assert main(["dump", "traces", "--checkpoint", str(trained / "final.glm"), "--config",
                     str(config_file), "--out", str(tmp_path / "t.pgm"), "-n", "5"]) == 0
        assert len(parse_trace_sidecar(tmp_path / "t.txt")) == 5
        assert read_pgm(tmp_path / "t.pgm").shape[0] == 5 * 17 - 1

    def test_unknown_what(self, tmp_path, trained):
        assert main(["dump", "filters-n9", "--checkpoint", str(trained / "final.glm"),
                     "--out", str(tmp_path / "x.pgm")]) == 1


def test_tile_shape():
    assert tile_shape(500) == (20, 25)
    assert tile_shape(7) == (1, 7)


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "gradcheck passed" in capsys.readouterr().out

    def test_loose_epsilon(self):
        assert main(["gradcheck", "--epsilon", "1e-3"]) == 0

    def test_injected_fault(self, capsys):
        assert main(["gradcheck", "--inject-fault", "1.01"]) == 2
        assert "FAIL" in capsys.readouterr().out
