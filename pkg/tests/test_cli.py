import csv
import json

import numpy as np
import pytest

from woundstage import cli
from woundstage import datapipe as D
from woundstage import network as N
from woundstage.config import RunConfig, load_config
from woundstage.errors import NumericError, UsageError

CORPUS_COUNTS = {"Control": 72, "Day0": 12, "Day3": 15, "Day7": 31, "Day10": 110, "DelayDay10": 66}
REFERENCE_SPLIT = {"Control": (44, 15, 13), "Day0": (8, 2, 2), "Day3": (10, 3, 2),
                   "Day7": (19, 6, 6), "Day10": (66, 22, 22), "DelayDay10": (40, 13, 13)}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> prepare -> train -> eval -> explain -> coherency -> stats at toy scale."""
    root = tmp_path_factory.mktemp("pipeline")
    codes = {
        "synth": run("synth", "--kind", "target", "--n-per-class", 5, "--size", 32, "--out", root / "data"),
        "prepare": run("prepare", "--manifest", root / "data" / "manifest.csv", "--input-size", 16,
                       "--out", root / "prep"),
        "train": run("train", "--train", root / "prep" / "balanced_train.csv", "--val", root / "prep" / "validation.csv",
                     "--input-size", 16, "--epochs", 2, "--out", root / "run"),
        "eval": run("eval", "--checkpoint", root / "run" / "model.ckpt", "--manifest", root / "prep" / "test.csv",
                    "--out", root / "run"),
        "explain": run("explain", "--checkpoint", root / "run" / "model.ckpt", "--manifest", root / "prep" / "test.csv",
                       "--limit", 2, "--out", root / "run"),
        "coherency": run("coherency", "--manifest", root / "data" / "manifest.csv", "--out", root / "fq"),
        "stats": run("stats", "--coherency", root / "fq" / "coherency.csv", "--out", root / "fq"),
    }
    return root, codes


class TestPipeline:
    def test_all_exit_zero(self, pipeline):
        _, codes = pipeline
        assert codes == dict.fromkeys(codes, 0)

    @pytest.mark.parametrize("rel", [
        "data/manifest.csv", "prep/train.csv", "prep/validation.csv", "prep/test.csv", "prep/split_summary.json",
        "prep/balanced_train.csv", "run/model.ckpt", "run/history.csv", "run/config.ini", "run/curves.png",
        "run/eval_report.json", "run/confusion_matrix.png", "fq/coherency.csv", "fq/group_stats.csv",
        "fq/pvalues.csv", "fq/boxplot.json", "fq/boxplot.png",
    ])
    def test_declared_outputs(self, pipeline, rel):
        root, _ = pipeline
        assert (root / rel).is_file()

    def test_explain_outputs(self, pipeline):
        root, _ = pipeline
        names = sorted(p.name for p in (root / "run" / "explain").iterdir())
        assert len(names) == 8
        assert sum(n.endswith("_overlay.png") for n in names) == 2

    def test_history_rows(self, pipeline):
        root, _ = pipeline
        rows = list(csv.DictReader((root / "run" / "history.csv").open()))
        assert [r["epoch"] for r in rows] == ["1", "2"]

    def test_eval_report(self, pipeline):
        root, _ = pipeline
        report = json.loads((root / "run" / "eval_report.json").read_text())
        assert np.sum(report["confusion_matrix"]) == 6
        assert report["class_names"] == list(D.CLASSES)

    def test_saved_config_reloads(self, pipeline):
        root, _ = pipeline
        cfg = load_config(root / "run" / "config.ini")
        assert cfg.train.epochs == 2 and cfg.model.input_size == 16

    def test_coherency_idempotent(self, pipeline, tmp_path):
        root, _ = pipeline
        assert run("coherency", "--manifest", root / "data" / "manifest.csv", "--out", tmp_path) == 0
        assert (tmp_path / "coherency.csv").read_bytes() == (root / "fq" / "coherency.csv").read_bytes()

    def test_stats_idempotent(self, pipeline, tmp_path):
        root, _ = pipeline
        assert run("stats", "--coherency", root / "fq" / "coherency.csv", "--out", tmp_path) == 0
        for name in ("group_stats.csv", "pvalues.csv", "boxplot.json", "boxplot.png"):
            assert (tmp_path / name).read_bytes() == (root / "fq" / name).read_bytes()


class TestPrepare:
    def test_reference_corpus_split(self, tmp_path, capsys):
        img = np.full((8, 8, 3), 128, np.uint8)
        samples = []
        for name, n in CORPUS_COUNTS.items():
            for i in range(n):
                rel = f"img/{name}_{i:03d}.png"
                D.write_png(img, tmp_path / rel)
                samples.append(D.Sample(rel, name, 1))
        manifest = D.write_manifest(D.Manifest(samples, root=tmp_path), tmp_path / "m.csv")
        before = manifest.read_bytes()
        assert run("prepare", "--manifest", manifest, "--input-size", 16, "--out", tmp_path / "out") == 0
        assert manifest.read_bytes() == before
        rows = {r["class"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
        assert {r["balanced_train"] for r in rows.values()} == {"792"}
        got = {k: tuple(int(rows[k][c]) for c in ("train", "validation", "test")) for k in CORPUS_COUNTS}
        assert got == REFERENCE_SPLIT


class TestTrain:
    def test_zero_epochs_keeps_initialisation(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = []
        for i, name in enumerate(D.CLASSES):
            D.write_png(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), tmp_path / f"{i}.png")
            samples.append(D.Sample(f"{i}.png", name, 1))
        manifest = D.write_manifest(D.Manifest(samples, root=tmp_path), tmp_path / "m.csv")
        assert run("train", "--train", manifest, "--input-size", 16, "--epochs", 0, "--seed", 5,
                   "--out", tmp_path / "run") == 0
        expected = N.checkpoint_bytes(N.build_model(N.ModelConfig("vgg_tiny", 16), seed=5))
        assert (tmp_path / "run" / "model.ckpt").read_bytes() == expected


class TestErrors:
    def test_missing_manifest_named(self, tmp_path, capsys):
        assert run("prepare", "--manifest", tmp_path / "nope.csv", "--out", tmp_path) == 2
        assert "nope.csv" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("path,label,dataset_id\n")
        assert run("eval", "--checkpoint", tmp_path / "x.ckpt", "--manifest", tmp_path / "m.csv",
                   "--out", tmp_path) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_bad_flag_is_usage(self, capsys):
        assert run("synth", "--kind", "nonsense") == 1
        assert run() == 1

    def test_unknown_config_key_named(self, tmp_path, capsys):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nlearning_rat = 0.1\n")
        assert run("synth", "--kind", "target", "--config", path, "--out", tmp_path) == 1
        assert "train.learning_rat" in capsys.readouterr().err

    def test_unparseable_value_named(self, tmp_path, capsys):
        path = tmp_path / "c.ini"
        path.write_text("[train]\nepochs = many\n")
        assert run("synth", "--kind", "target", "--config", path, "--out", tmp_path) == 1
        assert "train.epochs" in capsys.readouterr().err

    def test_numeric_failure_code(self, monkeypatch, tmp_path):
        def boom(args, cfg):
            raise NumericError("loss is NaN")
        monkeypatch.setitem(cli.COMMANDS, "synth", boom)
        assert run("synth", "--kind", "target", "--out", tmp_path) == 3

    def test_empty_mask_names_image(self, tmp_path, capsys):
        D.write_png(np.full((8, 8, 3), [255, 0, 0], np.uint8), tmp_path / "red.png")
        (tmp_path / "m.csv").write_text("path,label,dataset_id\nred.png,Control,1\n")
        assert run("coherency", "--manifest", tmp_path / "m.csv", "--out", tmp_path) == 2
        assert "red.png" in capsys.readouterr().err


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(seed=9)
        cfg.train.freeze_blocks = 2
        cfg.fiberquant.sigma = 1.5
        again = load_config(cfg.to_ini(tmp_path / "c.ini"))
        assert again == cfg

    def test_flags_override_file(self, tmp_path):
        path = RunConfig(seed=1).to_ini(tmp_path / "c.ini")
        args = cli.build_parser().parse_args(["train", "--train", "x", "--config", str(path), "--epochs", "3"])
        cfg = cli._config(args)
        assert cfg.train.epochs == 3 and cfg.seed == 1

    def test_override_unknown_key(self):
        with pytest.raises(UsageError, match="train.nope"):
            RunConfig().override({"train.nope": 1})
