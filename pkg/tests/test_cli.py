import os

import numpy as np
import pytest

from cascrf.cli import main, parse_messages
from cascrf.cascade import init_cascade_model, load_checkpoint, save_checkpoint
from cascrf.core import load_mask, load_saliency_uint8, save_image, write_tensor
from cascrf.metrics import dataset_metrics, format_eval_csv


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny dataset plus stage-1 and stage-2 checkpoints shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--count", "6", "--val-count", "3",
                 "--height", "16", "--width", "16", "--seed", "5"]) == 0
    ck1 = root / "ck1"
    assert main(["train", "--stage", "1", "--data", str(data / "train"),
                 "--out", str(ck1), "--channels", "4", "--max-iter", "30",
                 "--seed", "3"]) == 0
    ck2 = root / "ck2"
    assert main(["train", "--stage", "2", "--data", str(data / "train"),
                 "--init", str(ck1), "--out", str(ck2), "--epochs", "2",
                 "--seed", "3"]) == 0
    return root


class TestSynth:
    def test_writes_both_splits(self, workdir):
        for split, count in (("train", 6), ("val", 3)):
            img_dir = workdir / "data" / split / "img"
            gt_dir = workdir / "data" / split / "gt"
            assert sorted(os.listdir(img_dir)) == [f"{i:04d}.png" for i in range(count)]
            assert sorted(os.listdir(gt_dir)) == [f"{i:04d}.png" for i in range(count)]

    def test_splits_differ(self, workdir):
        a = (workdir / "data" / "train" / "img" / "0000.png").read_bytes()
        b = (workdir / "data" / "val" / "img" / "0000.png").read_bytes()
        assert a != b

    def test_count_must_be_positive(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "x"), "--count", "0"]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and err.count("\n") == 1


class TestTrain:
    def test_checkpoint_and_log(self, workdir):
        model = load_checkpoint(workdir / "ck1")
        assert model.channels == 4
        log = (workdir / "ck1" / "train_log.csv").read_text().splitlines()
        assert log[0] == "iter,stage,loss,lr"
        assert len(log) == 31

    def test_stage2_resumes_from_init(self, workdir):
        m1 = load_checkpoint(workdir / "ck1")
        m2 = load_checkpoint(workdir / "ck2")
        assert set(m2.params) == set(m1.params)
        assert not np.array_equal(m2.params["head5"], m1.params["head5"])

    def test_custom_log_path(self, workdir, tmp_path):
        log = tmp_path / "here.csv"
        assert main(["train", "--stage", "1", "--data", str(workdir / "data" / "train"),
                     "--out", str(tmp_path / "ck"), "--channels", "4",
                     "--max-iter", "4", "--log", str(log)]) == 0
        assert log.read_text().startswith("iter,stage,loss,lr")

    def test_bad_stage(self, capsys):
        assert main(["train", "--stage", "3", "--data", "d", "--out", "o"]) == 2
        assert "stage" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert main(["train", "--stage", "1"]) == 2
        assert "--data is required" in capsys.readouterr().err


class TestRefine:
    def test_batch_writes_all_maps(self, workdir, tmp_path):
        out = tmp_path / "pred"
        assert main(["refine", "--data", str(workdir / "data" / "val"),
                     "--checkpoint", str(workdir / "ck2"), "--out", str(out)]) == 0
        names = sorted(os.listdir(out))
        assert names == ["0000.png", "0001.png", "0002.png"]
        sal = load_saliency_uint8(out / "0000.png")
        assert sal.shape == (16, 16) and sal.dtype == np.uint8

    def test_messages_none_differs(self, workdir, tmp_path):
        # freshly trained checkpoints predict near-constant maps where
        # messaging is a no-op, so wake the heads and weights by hand
        rng = np.random.default_rng(4)
        model = init_cascade_model(channels=4, seed=4)
        for level in range(1, 6):
            model.params[f"head{level}"] += (rng.standard_normal(4) * 0.5).astype(np.float32)
        for level in range(2, 6):
            model.params[f"block{level}_sim"] += np.float32(1.5)
            model.params[f"block{level}_scale"] += (
                rng.standard_normal(4) * 0.3
            ).astype(np.float32)
        ck = tmp_path / "ck_live"
        save_checkpoint(model, ck)

        base = tmp_path / "base"
        off = tmp_path / "off"
        args = ["refine", "--data", str(workdir / "data" / "val"),
                "--checkpoint", str(ck)]
        assert main(args + ["--out", str(base)]) == 0
        assert main(args + ["--out", str(off), "--messages", "none"]) == 0
        a = load_saliency_uint8(base / "0000.png").astype(int)
        b = load_saliency_uint8(off / "0000.png").astype(int)
        assert np.abs(a - b).max() > 0

    def test_sideouts_single_image(self, workdir, tmp_path):
        rng = np.random.default_rng(0)
        exp = tmp_path / "export"
        exp.mkdir()
        save_image(exp / "image.png", rng.random((16, 16, 3)))
        sizes = {5: (8, 8), 4: (4, 4), 3: (2, 2), 2: (1, 1), 1: (1, 1)}
        for level, (h, w) in sizes.items():
            write_tensor(exp / f"f{level}.ucrf", rng.standard_normal((4, h, w)))
            write_tensor(exp / f"s{level}.ucrf", rng.standard_normal((16, 16)))
        out = tmp_path / "single.png"
        assert main(["refine", "--sideouts", str(exp),
                     "--checkpoint", str(workdir / "ck2"), "--out", str(out)]) == 0
        assert load_saliency_uint8(out).shape == (16, 16)

        # explicit --image overrides the bundled image.png
        alt = tmp_path / "alt.png"
        save_image(alt, rng.random((16, 16, 3)))
        out2 = tmp_path / "single2.png"
        assert main(["refine", "--sideouts", str(exp), "--image", str(alt),
                     "--checkpoint", str(workdir / "ck2"), "--out", str(out2)]) == 0

    def test_needs_a_mode(self, capsys):
        assert main(["refine", "--checkpoint", "x", "--out", "y"]) == 2
        assert "--sideouts" in capsys.readouterr().err

    def test_bad_message_name(self, workdir, capsys):
        assert main(["refine", "--data", str(workdir / "data" / "val"),
                     "--checkpoint", str(workdir / "ck2"), "--out", "/tmp/x",
                     "--messages", "ff,zz"]) == 2
        assert "zz" in capsys.readouterr().err


class TestEval:
    def test_csv_matches_library_aggregation(self, workdir, tmp_path):
        pred = tmp_path / "pred"
        assert main(["refine", "--data", str(workdir / "data" / "val"),
                     "--checkpoint", str(workdir / "ck2"), "--out", str(pred)]) == 0
        gt = workdir / "data" / "val" / "gt"
        out = tmp_path / "eval.csv"
        assert main(["eval", "--pred", str(pred), "--gt", str(gt),
                     "--out", str(out)]) == 0

        names = sorted(os.listdir(pred))
        sals = [load_saliency_uint8(pred / n) for n in names]
        gts = [load_mask(gt / n) for n in names]
        want = format_eval_csv(names, dataset_metrics(sals, gts))
        assert out.read_text() == want

    def test_pr_curve_output(self, workdir, tmp_path):
        pred = tmp_path / "pred"
        assert main(["refine", "--data", str(workdir / "data" / "val"),
                     "--checkpoint", str(workdir / "ck2"), "--out", str(pred)]) == 0
        pr = tmp_path / "pr.csv"
        assert main(["eval", "--pred", str(pred),
                     "--gt", str(workdir / "data" / "val" / "gt"),
                     "--out", str(tmp_path / "e.csv"), "--pr-curve", str(pr)]) == 0
        lines = pr.read_text().splitlines()
        assert lines[0] == "threshold,precision,recall"
        assert len(lines) == 257

    def test_missing_ground_truth(self, workdir, tmp_path, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        (pred / "lonely.png").write_bytes(b"x")
        assert main(["eval", "--pred", str(pred),
                     "--gt", str(tmp_path), "--out", str(tmp_path / "e.csv")]) == 2
        assert "lonely.png" in capsys.readouterr().err


class TestFilterDemo:
    def test_reports_all_kernels(self, capsys):
        assert main(["filter-demo", "--size", "10"]) == 0
        out = capsys.readouterr().out
        assert "bilateral 60,5" in out and "spatial 10" in out
        assert "worst relative error" in out

    def test_size_cap(self, capsys):
        assert main(["filter-demo", "--size", "200"]) == 2
        assert "brute-force" in capsys.readouterr().err


class TestGradcheck:
    def test_passes_and_reports(self, capsys):
        assert main(["gradcheck", "--size", "8", "--channels", "2", "--iters", "1"]) == 0
        out = capsys.readouterr().out
        assert "block:" in out and "backbone:" in out and "full:" in out
        assert "OK: within tolerance" in out


class TestAblate:
    def test_grid_runs_and_reports(self, workdir, tmp_path, capsys):
        out = tmp_path / "abl"
        assert main(["ablate", "--data", str(workdir / "data"), "--out", str(out),
                     "--channels", "4", "--stage1-iters", "8", "--epochs", "1",
                     "--seed", "1"]) == 0
        table = capsys.readouterr().out
        for name in ("baseline", "ff", "ss", "full"):
            assert f"eval_{name}.csv" in os.listdir(out)
            assert name in table
        assert (out / "stage1").is_dir()
        assert (out / "stage2_full").is_dir()


class TestConfigFile:
    def test_file_supplies_defaults_and_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("# comment\nsize = 6\nseed = 9\n")
        assert main(["filter-demo", "--config", str(cfg)]) == 0
        assert "6x6" in capsys.readouterr().out
        assert main(["filter-demo", "--config", str(cfg), "--size", "5"]) == 0
        assert "5x5" in capsys.readouterr().out

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("bogus = 1\n")
        assert main(["filter-demo", "--config", str(cfg)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_malformed_line(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("just words\n")
        assert main(["filter-demo", "--config", str(cfg)]) == 2
        assert "key=value" in capsys.readouterr().err

    def test_non_numeric_value(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("size = huge\n")
        assert main(["filter-demo", "--config", str(cfg)]) == 2
        assert "size" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        assert main(["filter-demo", "--config", "/no/such/file.cfg"]) == 2
        assert "cannot read config" in capsys.readouterr().err


class TestDispatch:
    def test_no_subcommand(self, capsys):
        assert main([]) == 2
        assert "missing subcommand" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["nope"]) == 2

    def test_unknown_flag(self, capsys):
        assert main(["synth", "--out", "x", "--bogus", "1"]) == 2

    def test_single_line_errors(self, capsys):
        main(["refine", "--checkpoint", "x", "--out", "y"])
        err = capsys.readouterr().err
        assert err.startswith("error: ") and err.endswith("\n")
        assert err.count("\n") == 1


def test_parse_messages():
    assert parse_messages(None) is None
    assert parse_messages("none") == frozenset()
    assert parse_messages("ff,ss") == frozenset({"ff", "ss"})
    assert parse_messages("ff, ss ,fs") == frozenset({"ff", "fs", "ss"})
