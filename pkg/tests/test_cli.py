import csv
import json
from pathlib import Path

import numpy as np
import pytest

from kinemod.cli import main
from kinemod.dataio import read_modality_blob
from kinemod.modality import ALL_MODALITIES

TOY = str(Path(__file__).parents[1] / "configs" / "toy.ini")
THREE = ["--set", "data.samples_per_class=1"]
TINY = ["--config", TOY, "--set", "pretrain.stage1_epochs=1", "--set", "pretrain.stage2_epochs=1",
        "--set", "pretrain.cz=8", "--set", "pretrain.hidden=8", "--set", "pretrain.feature_dim=8",
        "--set", "pretrain.head_hidden=8", "--set", "probe.epochs=5", "--set", "distill.epochs=1"]


def run(*argv):
    return main([str(a) for a in argv])


class TestDerive:
    def test_three_samples(self, tmp_path):
        assert run("derive", *THREE, "--out", tmp_path) == 0
        blobs = sorted((tmp_path / "modalities").glob("*.kmod"))
        assert len(blobs) == 3
        rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert len(rows) == 18 and {r["modality"] for r in rows} == {k.value for k in ALL_MODALITIES}
        first = read_modality_blob(blobs[0].read_bytes())
        row = next(r for r in rows if r["id"] == blobs[0].stem and r["modality"] == "bone")
        assert float(row["max"]) == float(first[ALL_MODALITIES[2]].max())
        assert (tmp_path / "config.ini").read_text().startswith("# config-hash ")

    def test_rerun_is_byte_identical(self, tmp_path):
        run("derive", *THREE, "--out", tmp_path / "a")
        run("derive", *THREE, "--out", tmp_path / "b", "--workers", 3)
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes(), f

    def test_from_generated_manifest(self, tmp_path):
        assert run("generate", *THREE, "--out", tmp_path / "g") == 0
        assert len(list((tmp_path / "g" / "skeletons").glob("*.skeleton"))) == 3
        assert run("derive", "--data", tmp_path / "g" / "dataset.csv", "--out", tmp_path / "d") == 0
        assert len(list((tmp_path / "d" / "modalities").glob("*.kmod"))) == 3

    def test_corrupt_file_lists_each_failure(self, tmp_path, capsys):
        run("generate", *THREE, "--out", tmp_path)
        files = sorted((tmp_path / "skeletons").glob("*.skeleton"))
        files[0].write_text("12\n1\n")
        files[2].write_text("garbage\n")
        assert run("derive", "--data", tmp_path / "dataset.csv", "--out", tmp_path / "d") == 1
        err = capsys.readouterr().err
        assert "2 input file(s) failed" in err and files[0].name in err and files[2].name in err


class TestErrors:
    def test_eval_without_checkpoint_file(self, tmp_path, capsys):
        missing = tmp_path / "absent.ckpt"
        assert run("eval", "--checkpoint", missing, "--out", tmp_path) == 2
        assert str(missing) in capsys.readouterr().err

    def test_eval_without_checkpoint_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("eval", "--out", tmp_path)
        assert exc.value.code == 2

    def test_config_errors(self, tmp_path, capsys):
        assert run("derive", "--config", tmp_path / "none.ini", "--out", tmp_path) == 2
        assert "none.ini" in capsys.readouterr().err
        assert run("derive", "--set", "pretrain.bogus=1", "--out", tmp_path) == 2
        assert run("derive", "--workers", 0, "--out", tmp_path) == 2
        assert run("derive", "--data", tmp_path / "nothing.csv", "--out", tmp_path) == 2

    def test_corrupt_checkpoint_is_data_error(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"junk")
        assert run("eval", "--checkpoint", tmp_path / "x.ckpt", "--out", tmp_path) == 1


def test_gradcheck_passes(tmp_path):
    assert run("gradcheck", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
    assert [r["loss"] for r in rows] == ["info_nce", "ikem", "ekem", "distill"]
    assert all(r["passed"] == "1" and int(r["checked"]) >= 200 for r in rows)


def test_small_pipeline_artifacts_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert run("pretrain", *TINY, "--seed", 1, "--out", tmp_path / d) == 0
    for name in ("metrics.csv", "model.ckpt", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    ckpt = tmp_path / "a" / "model.ckpt"
    assert run("distill", *TINY, "--teacher", ckpt, "--out", tmp_path / "s") == 0
    assert (tmp_path / "s" / "distill_metrics.csv").read_text().startswith("epoch,loss,mean_cos_t_s\n")
    assert run("eval", *TINY, "--checkpoint", tmp_path / "s" / "student.ckpt", "--out", tmp_path / "e") == 0
    doc = json.loads((tmp_path / "e" / "report.json").read_text())
    assert doc["checkpoint_kind"] == "student" and set(doc["top1"]) == {"joint", "motion", "bone"}
    hash_line = (tmp_path / "e" / "config.ini").read_text().splitlines()[0]
    assert hash_line == f"# config-hash {doc['config_hash']}"


def test_toy_pipeline_generate_pretrain_eval(tmp_path):
    assert run("generate", "--config", TOY, "--out", tmp_path / "g") == 0
    data = ["--config", TOY, "--data", tmp_path / "g" / "dataset.csv"]
    assert run("pretrain", *data, "--set", "pretrain.stage1_epochs=15", "--set", "pretrain.stage2_epochs=15",
               "--out", tmp_path / "p") == 0
    metrics = list(csv.DictReader(open(tmp_path / "p" / "metrics.csv")))
    assert len(metrics) == 30 * 7 and all(np.isfinite(float(r["loss"])) for r in metrics)
    assert run("eval", *data, "--checkpoint", tmp_path / "p" / "model.ckpt", "--out", tmp_path / "e") == 0
    doc = json.loads((tmp_path / "e" / "report.json").read_text())
    assert 0.0 <= doc["fused_top1"] <= 1.0 and doc["count"] == 18
    assert sum(map(sum, doc["confusion"]["fused"])) == 18
