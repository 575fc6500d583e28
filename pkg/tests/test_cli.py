import subprocess
import sys
from pathlib import Path

import pytest

from relrank import tensor
from relrank.checkpoint import load_checkpoint
from relrank.cli import EXIT_EMPTY, EXIT_INPUT, EXIT_OK, RunConfig, main, read_config_file
from relrank.data import build_pairs, load_manifest, load_pairs, pair_images
from relrank.gradcheck import CHECKS


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "80", "--seed", "7", "--out", str(root / "corpus")]) == EXIT_OK
    assert main(["build-pairs", "--manifest", str(root / "corpus" / "manifest.csv"), "--out", str(root / "pairs")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "train"
    argv = ["train", "--manifest", str(corpus / "corpus" / "manifest.csv"), "--pairs", str(corpus / "pairs" / "pairs.csv"),
            "--max-epochs", "2", "--seed", "3", "--out", str(out)]
    assert main(argv) == EXIT_OK
    return out, argv


class TestSynth:
    def test_outputs(self, corpus):
        root = corpus / "corpus"
        assert len(load_manifest(root / "manifest.csv")) == 80
        assert len(list((root / "images").glob("*.ppm"))) == 80
        assert (root / "ground_truth.csv").is_file()
        assert (root / "config_synth.txt").is_file()

    def test_rerun_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--n", "12", "--seed", "5", "--out", str(tmp_path / name)]) == EXIT_OK
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    @pytest.mark.parametrize("n", ["1", "0"])
    def test_too_few(self, tmp_path, n):
        assert main(["synth", "--n", n, "--out", str(tmp_path)]) == EXIT_INPUT


class TestBuildPairs:
    def test_defaults_match_oracle(self, corpus):
        cfg = (corpus / "pairs" / "config_build-pairs.txt").read_text()
        assert "min_gap=1.0\n" in cfg and "max_variance=2.6\n" in cfg and "same_category=true\n" in cfg
        records = load_manifest(corpus / "corpus" / "manifest.csv")
        got = load_pairs(corpus / "pairs" / "pairs.csv")
        assert {p.key for p in got} == {p.key for p in build_pairs(records).pairs}
        rejections = (corpus / "pairs" / "pair_rejections.csv").read_text().splitlines()
        assert rejections[0] == "constraint,rejected" and len(rejections) == 4

    def test_min_gap(self, corpus, tmp_path):
        assert main(["build-pairs", "--manifest", str(corpus / "corpus" / "manifest.csv"), "--min-gap", "2.0",
                     "--out", str(tmp_path)]) == EXIT_OK
        pairs = load_pairs(tmp_path / "pairs.csv")
        assert pairs and all(p.gap >= 2.0 for p in pairs)

    def test_zero_pairs(self, corpus, tmp_path):
        assert main(["build-pairs", "--manifest", str(corpus / "corpus" / "manifest.csv"), "--min-gap", "20",
                     "--out", str(tmp_path)]) == EXIT_EMPTY

    def test_malformed_manifest(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("image_id,path,category,ratings\na,a.ppm,x,5\na,b.ppm,x,6\n")
        assert main(["build-pairs", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path)]) == EXIT_INPUT
        assert "m.csv:3" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["build-pairs", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == EXIT_INPUT


class TestTrain:
    def test_outputs(self, trained):
        out, _ = trained
        for name in ("checkpoint.rrnk", "train_report.csv", "val_accuracy.svg", "config_train.txt",
                     "split_train.csv", "split_val.csv", "split_test.csv"):
            assert (out / name).is_file(), name
        splits = [pair_images(load_pairs(out / f"split_{s}.csv")) for s in ("train", "val", "test")]
        assert not (splits[0] & splits[1] or splits[0] & splits[2] or splits[1] & splits[2])
        ranker, header = load_checkpoint(out / "checkpoint.rrnk")
        assert header["train"]["delta"] == 3.0
        assert len((out / "train_report.csv").read_text().splitlines()) == 3

    def test_same_seed_identical(self, trained, tmp_path):
        out, argv = trained
        again = tmp_path / "again"
        assert main([*argv[:-1], str(again)]) == EXIT_OK
        assert tree_bytes(out) == tree_bytes(again)

    def test_infeasible_split(self, corpus, tmp_path):
        argv = ["train", "--manifest", str(corpus / "corpus" / "manifest.csv"), "--pairs", str(corpus / "pairs" / "pairs.csv"),
                "--set", "split_train=100000", "--set", "split_val=1", "--set", "split_test=1", "--out", str(tmp_path)]
        assert main(argv) == EXIT_EMPTY

    def test_pair_count_split(self, corpus, tmp_path):
        argv = ["train", "--manifest", str(corpus / "corpus" / "manifest.csv"), "--pairs", str(corpus / "pairs" / "pairs.csv"),
                "--set", "split_train=20", "--set", "split_val=5", "--set", "split_test=5", "--max-epochs", "1",
                "--out", str(tmp_path)]
        assert main(argv) == EXIT_OK
        assert [len(load_pairs(tmp_path / f"split_{s}.csv")) for s in ("train", "val", "test")] == [20, 5, 5]


class TestEval:
    def test_rank(self, corpus, trained, tmp_path, capsys):
        out, _ = trained
        assert main(["eval", "--checkpoint", str(out / "checkpoint.rrnk"), "--manifest",
                     str(corpus / "corpus" / "manifest.csv"), "--out", str(tmp_path)]) == EXIT_OK
        assert "ranking accuracy" in capsys.readouterr().out
        rows = (tmp_path / "rank_report.csv").read_text().splitlines()
        assert rows[0] == "model,total,correct,undecided,accuracy" and rows[1].startswith("ranker,")

    def test_classify_default_threshold(self, corpus, trained, tmp_path):
        out, _ = trained
        assert main(["eval", "--checkpoint", str(out / "checkpoint.rrnk"), "--manifest",
                     str(corpus / "corpus" / "manifest.csv"), "--mode", "classify", "--out", str(tmp_path)]) == EXIT_OK
        rows = (tmp_path / "classify_report.csv").read_text().splitlines()
        assert rows[1].startswith("adapted_ranker,") and rows[1].endswith(",5.500000")

    def test_baseline(self, corpus, trained, tmp_path):
        out, _ = trained
        assert main(["eval", "--checkpoint", str(out / "checkpoint.rrnk"), "--manifest",
                     str(corpus / "corpus" / "manifest.csv"), "--mode", "baseline", "--max-epochs", "1",
                     "--out", str(tmp_path)]) == EXIT_OK
        rows = (tmp_path / "comparison.csv").read_text().splitlines()
        assert rows[0] == "model,ranking_accuracy_pct,classification_accuracy_pct"
        assert [r.split(",")[0] for r in rows[1:]] == ["ranker", "binary_baseline", "adapted_ranker"]

    def test_corrupt_checkpoint(self, corpus, tmp_path):
        (tmp_path / "bad.rrnk").write_bytes(b"NOPE" + bytes(20))
        assert main(["eval", "--checkpoint", str(tmp_path / "bad.rrnk"), "--manifest",
                     str(corpus / "corpus" / "manifest.csv"), "--out", str(tmp_path)]) == EXIT_INPUT


class TestGradcheck:
    def test_passes_and_lists_each_op_once(self, tmp_path, capsys):
        assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == EXIT_OK
        lines = [l for l in capsys.readouterr().out.splitlines() if "max_rel_err=" in l]
        assert [l.split()[0] for l in lines] == list(CHECKS)
        assert all(l.endswith("PASS") for l in lines)

    def test_fault_detected(self, tmp_path, capsys):
        assert main(["gradcheck", "--seeds", "1", "--fault-conv-backward", "0.01", "--out", str(tmp_path)]) == EXIT_INPUT
        out = capsys.readouterr().out
        assert "conv2d" in out and "FAIL" in out
        assert tensor._CONV_BACKWARD_FAULT == 0.0


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        (tmp_path / "run.cfg").write_text("# tiny run\ncolumn=tiny\nmin_gap=1.5\nmax_epochs=7  # short\nseed=4\n")
        out = tmp_path / "out"
        main(["synth", "--n", "2", "--config", str(tmp_path / "run.cfg"), "--set", "max_epochs=9", "--seed", "11",
              "--out", str(out)])
        resolved = read_config_file(out / "config_synth.txt")
        assert resolved["min_gap"] == "1.5"
        assert resolved["max_epochs"] == "9"
        assert resolved["seed"] == "11"
        assert set(resolved) == set(vars(RunConfig()))

    def test_flag_position(self, tmp_path):
        assert main(["--seed", "2", "synth", "--n", "3", "--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(["synth", "--n", "3", "--seed", "2", "--out", str(tmp_path / "b")]) == EXIT_OK
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    @pytest.mark.parametrize(
        "argv",
        [
            ["synth", "--config", "nonexistent-preset"],
            ["synth", "--set", "no_such_key=1"],
            ["synth", "--set", "max_epochs=abc"],
            ["synth", "--set", "novalue"],
            ["frobnicate"],
            ["synth", "--n", "notanint"],
        ],
    )
    def test_bad_usage(self, tmp_path, argv):
        with pytest.raises(SystemExit) as info:
            code = main([*argv, "--out", str(tmp_path)])
            raise SystemExit(code)
        assert info.value.code == EXIT_INPUT


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "relrank", "synth", "--n", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.csv").is_file()
