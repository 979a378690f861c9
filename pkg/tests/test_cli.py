import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from leafnet import checkpoint, cli, imaging, nn, synthetic

GOLDEN = Path(__file__).parent / "golden"
HEADER = "image_id,healthy,multiple_diseases,rust,scab"
PALETTE4 = ((0.85, 0.15, 0.15), (0.15, 0.75, 0.2), (0.2, 0.3, 0.9), (0.9, 0.85, 0.1))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """24 synthetic leaves written as PPM files, with labels and a split manifest."""
    root = tmp_path_factory.mktemp("corpus")
    images = root / "images"
    images.mkdir()
    ds = synthetic.color_shapes(24, PALETTE4, size=16, seed=0)
    rows = [HEADER]
    for i in range(len(ds)):
        img, label = ds.get(i)
        imaging.write_ppm(images / f"{ds.ids[i]}.ppm", img.transpose(1, 2, 0))
        rows.append(ds.ids[i] + "," + ",".join("1" if c == label else "0" for c in range(4)))
    (root / "labels.csv").write_text("\n".join(rows) + "\n")
    assert cli.main(["-q", "split", "--labels", str(root / "labels.csv"), "--seed", "1",
                     "--out", str(root / "split.txt")]) == 0
    return root


def train_args(corpus, out, *extra):
    return ["-q", "train", "--images", str(corpus / "images"), "--labels", str(corpus / "labels.csv"),
            "--manifest", str(corpus / "split.txt"), "--out-checkpoint", str(out / "model.lfnt"),
            "--report", str(out / "report.csv"), "--arch", "toy", "--resolution", "16",
            "--batch-size", "8", "--prefetch", "0", *extra]


class TestSplit:
    def test_default_fraction_recorded(self, corpus, tmp_path, capsys):
        assert cli.main(["-q", "split", "--labels", str(corpus / "labels.csv"), "--out", str(tmp_path / "m.txt")]) == 0
        text = (tmp_path / "m.txt").read_text()
        assert "# test_fraction 0.2\n" in text
        assert "train" in capsys.readouterr().out

    def test_byte_identical_reruns(self, corpus, tmp_path):
        for name in ("a.txt", "b.txt"):
            cli.main(["-q", "split", "--labels", str(corpus / "labels.csv"), "--seed", "7", "--out", str(tmp_path / name)])
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_two_hot_row(self, tmp_path, capsys):
        (tmp_path / "labels.csv").write_text(f"{HEADER}\na,1,0,0,0\nb,0,1,0,0\nc,0,1,1,0\n")
        code = cli.main(["-q", "split", "--labels", str(tmp_path / "labels.csv"), "--out", str(tmp_path / "m.txt")])
        assert code == cli.EXIT_DATA
        assert "row 4" in capsys.readouterr().err
        assert not (tmp_path / "m.txt").exists()

    def test_missing_labels_file(self, tmp_path, capsys):
        code = cli.main(["-q", "split", "--labels", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.txt")])
        assert code == cli.EXIT_DATA
        assert "nope.csv" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["split"])
        assert exc.value.code == cli.EXIT_USAGE


class TestTrain:
    def test_zero_epochs_writes_initial_model(self, corpus, tmp_path):
        assert cli.main(train_args(corpus, tmp_path, "--from-scratch", "--seed", "3",
                                   "--phase1-epochs", "0", "--phase2-epochs", "0")) == 0
        saved = checkpoint.read_entries(tmp_path / "model.lfnt")
        fresh = nn.build_toy_resnet(4, seed=3).state_dict()
        assert list(saved) == list(fresh)
        assert all(saved[k].tobytes() == fresh[k].tobytes() for k in fresh)
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,test_loss,test_accuracy" and len(lines) == 2

    def test_fine_tune_from_pretrained_is_reproducible(self, corpus, tmp_path):
        pre = tmp_path / "pre.lfnt"
        checkpoint.save(nn.build_toy_resnet(4, seed=11), pre)
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            out.mkdir()
            assert cli.main(train_args(corpus, out, "--pretrained", str(pre),
                                       "--phase1-epochs", "1", "--phase2-epochs", "1")) == 0
            outs.append(out)
        assert (outs[0] / "model.lfnt").read_bytes() == (outs[1] / "model.lfnt").read_bytes()
        assert (outs[0] / "report.csv").read_bytes() == (outs[1] / "report.csv").read_bytes()
        assert len((outs[0] / "report.csv").read_text().splitlines()) == 4

    def test_mode_flags_exclusive(self, corpus, tmp_path):
        assert cli.main(train_args(corpus, tmp_path)) == cli.EXIT_USAGE

    def test_config_file(self, corpus, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"phase1_epochs": 0, "phase2_epochs": 0, "from_scratch": True}))
        assert cli.main(train_args(corpus, tmp_path, "--config", str(tmp_path / "cfg.json"))) == 0
        (tmp_path / "bad.json").write_text(json.dumps({"epochs": 3}))
        assert cli.main(train_args(corpus, tmp_path, "--config", str(tmp_path / "bad.json"))) == cli.EXIT_USAGE

    def test_divergence_exit_code(self, corpus, tmp_path, capsys):
        with np.errstate(all="ignore"):
            code = cli.main(train_args(corpus, tmp_path, "--from-scratch", "--max-lr", "1e30",
                                       "--phase1-epochs", "0", "--phase2-epochs", "2"))
        assert code == cli.EXIT_RUNTIME
        assert "epoch 1" in capsys.readouterr().err
        assert not (tmp_path / "model.lfnt").exists()


class TestEvaluate:
    def test_perfect_scores(self, tmp_path, capsys):
        rows = ["image_id,label,healthy,multiple_diseases,rust,scab"]
        names = ["healthy", "multiple_diseases", "rust", "scab"]
        for i in range(8):
            c = i % 4
            rows.append(f"s{i},{names[c]}," + ",".join("1.0" if j == c else "0.0" for j in range(4)))
        (tmp_path / "scores.csv").write_text("\n".join(rows) + "\n")
        assert cli.main(["-q", "evaluate", "--scores", str(tmp_path / "scores.csv"), "--out-dir", str(tmp_path / "out")]) == 0
        printed = capsys.readouterr().out
        assert "accuracy 1.000" in printed
        for name in names:
            assert f"auc[{name}] 1.000" in printed
            assert (tmp_path / "out" / f"roc_{name}.csv").read_text().startswith("threshold,fpr,tpr\n")
        assert (tmp_path / "out" / "metrics.txt").read_text() == printed

    def test_from_checkpoint_is_reproducible(self, corpus, tmp_path, capsys):
        checkpoint.save(nn.build_toy_resnet(4, seed=2), tmp_path / "m.lfnt")
        args = ["-q", "evaluate", "--checkpoint", str(tmp_path / "m.lfnt"), "--images", str(corpus / "images"),
                "--labels", str(corpus / "labels.csv"), "--manifest", str(corpus / "split.txt"),
                "--resolution", "16"]
        assert cli.main(args + ["--out-dir", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out-dir", str(tmp_path / "b")]) == 0
        for name in ("metrics.txt", "metrics.csv", "scores.csv", "roc_rust.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_needs_inputs(self, tmp_path):
        assert cli.main(["-q", "evaluate", "--out-dir", str(tmp_path)]) == cli.EXIT_USAGE


class TestPredict:
    def test_golden_red_leaf(self, tmp_path, capsys):
        red = tmp_path / "red.ppm"
        shutil.copy(GOLDEN / "red.ppm", red)
        assert cli.main(["-q", "predict", "--checkpoint", str(GOLDEN / "toy4_seed0.lfnt"),
                         "--resolution", "32", str(red)]) == 0
        path, rest = capsys.readouterr().out.strip().split("\t", 1)
        assert path == str(red)
        assert rest == (GOLDEN / "predict_red.txt").read_text().strip()
        scores = [float(v) for v in rest.split("\t")[1:]]
        assert len(scores) == 4 and abs(sum(scores) - 1) < 1e-5

    def test_corrupted_checkpoint(self, tmp_path, capsys):
        blob = (GOLDEN / "toy4_seed0.lfnt").read_bytes()
        (tmp_path / "bad.lfnt").write_bytes(blob[:-100])
        code = cli.main(["-q", "predict", "--checkpoint", str(tmp_path / "bad.lfnt"), str(GOLDEN / "red.ppm")])
        assert code == cli.EXIT_DATA
        assert "checksum" in capsys.readouterr().err

    def test_missing_image(self, tmp_path, capsys):
        code = cli.main(["-q", "predict", "--checkpoint", str(GOLDEN / "toy4_seed0.lfnt"), str(tmp_path / "x.ppm")])
        assert code == cli.EXIT_DATA
        assert "x.ppm" in capsys.readouterr().err


class TestImportWeights:
    def test_with_namemap(self, tmp_path, capsys):
        src = nn.build_toy_resnet(4, seed=5)
        entries = {"ext." + k: v for k, v in src.state_dict().items()}
        checkpoint.write_entries(tmp_path / "dump.lfnt", entries)
        (tmp_path / "map.txt").write_text(checkpoint.NameMap([(k, k[4:]) for k in entries]).to_text())
        assert cli.main(["-q", "import-weights", "--arch", "toy", "--dump", str(tmp_path / "dump.lfnt"),
                         "--namemap", str(tmp_path / "map.txt"), "--out", str(tmp_path / "out.lfnt")]) == 0
        assert "unmatched 0" in capsys.readouterr().out
        out = checkpoint.read_entries(tmp_path / "out.lfnt")
        assert out["stem.conv.weight"].tobytes() == src.stem.conv.weight.data.tobytes()
        assert out["head.weight"].tobytes() == nn.build_toy_resnet(4, seed=0).head.weight.data.tobytes()

    def test_strict_failure_then_relaxed(self, tmp_path, capsys):
        entries = nn.build_toy_resnet(4, seed=5).state_dict()
        del entries["stage1.block1.bn1.running_var"]
        checkpoint.write_entries(tmp_path / "dump.lfnt", entries)
        base = ["-q", "import-weights", "--arch", "toy", "--dump", str(tmp_path / "dump.lfnt"),
                "--out", str(tmp_path / "out.lfnt")]
        assert cli.main(base) == cli.EXIT_DATA
        assert "stage1.block1.bn1.running_var" in capsys.readouterr().err
        assert cli.main(base + ["--relaxed"]) == 0
        assert "unmatched: stage1.block1.bn1.running_var" in capsys.readouterr().out


def test_console_entry_point():
    exe = shutil.which("leafnet")
    cmd = [exe] if exe else [sys.executable, "-m", "leafnet"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("split", "train", "evaluate", "predict", "import-weights"):
        assert sub in proc.stdout
