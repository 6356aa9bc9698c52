"""Subcommand wiring, exit codes, run configs, and rerun determinism."""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from slideqc import collage, compare, imgops, learning, slide, synth
from slideqc.cli import main

torch.set_num_threads(1)


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _rigged_checkpoint(task: str, class_count: int, favored: int, path: Path):
    model = learning.init_model(learning.SegModelConfig(
        class_count=class_count, base_width=2, depth=2, seed=0, task=task))
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        model.head.bias[favored] = 10.0
    learning.save_checkpoint(model, path)


@pytest.fixture(scope="module")
def slides_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "slides"
    rc = main(["synth-slides", "--out", str(out), "--profile", "tissue",
               "--seed", "7", "--count", "2", "--truth"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, slides_dir):
    out = tmp_path_factory.mktemp("cli") / "ds"
    rc = main(["synth-dataset", "--task", "tissue", "--slides", str(slides_dir),
               "--out", str(out), "--count", "5", "--seed", "3",
               "--val-fraction", "0.2"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("cli") / "train"
    rc = main(["train", "--dataset", str(dataset_dir), "--out", str(out),
               "--steps", "2", "--batch-size", "2", "--base-width", "2",
               "--depth", "2", "--crop", "128", "--val-every", "1",
               "--seed", "0"])
    assert rc == 0
    return out


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_version_exits_zero(self, capsys):
        assert main(["--version"]) == 0
        capsys.readouterr()

    def test_runtime_error_is_two(self, tmp_path, capsys):
        rc = main(["qc-report", "--bundle", str(tmp_path / "nothing"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestSynthSlides:
    def test_bundles_and_run_config(self, slides_dir):
        pool = synth.load_pool(slides_dir)
        assert [p.slide_id for p, _ in pool] == ["tissue-00", "tissue-01"]
        truths = synth.load_truths(slides_dir)
        assert set(truths) == {"tissue-00", "tissue-01"}
        rc = json.loads((slides_dir / "run_config.json").read_text())
        assert rc["command"] == "synth-slides"
        assert rc["seed"] == 7 and rc["count"] == 2
        assert "version" in rc and "func" not in rc

    def test_rerun_byte_identical(self, slides_dir, tmp_path):
        out2 = tmp_path / "again"
        assert main(["synth-slides", "--out", str(out2), "--profile", "tissue",
                     "--seed", "7", "--count", "2", "--truth"]) == 0
        a = _tree_bytes(slides_dir)
        b = _tree_bytes(out2)
        a.pop("run_config.json")
        b.pop("run_config.json")  # differs in the out path
        assert a == b


class TestSynthDataset:
    def test_split_layout(self, dataset_dir):
        train_ds = collage.load_dataset(dataset_dir / "train")
        val_ds = collage.load_dataset(dataset_dir / "val")
        assert len(train_ds) == 4 and len(val_ds) == 1
        assert train_ds.task == val_ds.task == "tissue"
        train_slides = {c["slide_id"] for prov in train_ds.provenance
                        for c in prov["cells"]}
        val_slides = {c["slide_id"] for prov in val_ds.provenance
                      for c in prov["cells"]}
        assert not train_slides & val_slides

    def test_rerun_byte_identical(self, dataset_dir, slides_dir, tmp_path):
        out2 = tmp_path / "ds2"
        assert main(["synth-dataset", "--task", "tissue", "--slides", str(slides_dir),
                     "--out", str(out2), "--count", "5", "--seed", "3",
                     "--val-fraction", "0.2"]) == 0
        a = _tree_bytes(dataset_dir)
        b = _tree_bytes(out2)
        a.pop("run_config.json")
        b.pop("run_config.json")
        assert a == b

    def test_no_val_split(self, slides_dir, tmp_path):
        out = tmp_path / "flat"
        assert main(["synth-dataset", "--task", "tissue", "--slides", str(slides_dir),
                     "--out", str(out), "--count", "2", "--val-fraction", "0"]) == 0
        assert (out / "train").is_dir() and not (out / "val").exists()


class TestTrain:
    def test_artifacts(self, train_dir):
        model = learning.load_checkpoint(train_dir / "model.ckpt", task="tissue")
        assert model.step == 2
        hist = json.loads((train_dir / "history.json").read_text())
        assert len(hist["loss"]) == 2
        lines = (train_dir / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2  # val at every step for steps=2
        rc = json.loads((train_dir / "run_config.json").read_text())
        assert rc["command"] == "train" and rc["steps"] == 2

    def test_rerun_reproduces_checkpoint(self, dataset_dir, train_dir, tmp_path):
        out2 = tmp_path / "train2"
        assert main(["train", "--dataset", str(dataset_dir), "--out", str(out2),
                     "--steps", "2", "--batch-size", "2", "--base-width", "2",
                     "--depth", "2", "--crop", "128", "--val-every", "1",
                     "--seed", "0"]) == 0
        assert (out2 / "model.ckpt").read_bytes() == (train_dir / "model.ckpt").read_bytes()


@pytest.fixture(scope="module")
def models_dir(tmp_path_factory, train_dir):
    out = tmp_path_factory.mktemp("cli") / "models"
    out.mkdir()
    shutil.copy(train_dir / "model.ckpt", out / "tissue.ckpt")
    _rigged_checkpoint("blur", 8, 0, out / "blur.ckpt")
    _rigged_checkpoint("fold", 2, 0, out / "fold.ckpt")
    _rigged_checkpoint("pen", 2, 0, out / "pen.ckpt")
    return out


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory, slides_dir, models_dir):
    out = tmp_path_factory.mktemp("cli") / "bundle"
    rc = main(["infer", "--slide", str(slides_dir / "tissue-00"),
               "--models", str(models_dir), "--out", str(out)])
    assert rc == 0
    return out


class TestInfer:
    def test_full_bundle(self, bundle_dir):
        meta = json.loads((bundle_dir / "bundle.json").read_text())
        assert meta["slide_id"] == "tissue-00"
        assert not meta["partial"]
        for task in ("tissue", "blur", "fold", "pen"):
            assert (bundle_dir / f"{task}.png").is_file()
        assert (bundle_dir / "foreground.png").is_file()

    def test_task_subset_has_no_foreground(self, slides_dir, models_dir, tmp_path):
        out = tmp_path / "sub"
        rc = main(["infer", "--slide", str(slides_dir / "tissue-00"),
                   "--models", str(models_dir), "--out", str(out),
                   "--tasks", "tissue"])
        assert rc == 0
        meta = json.loads((out / "bundle.json").read_text())
        assert not meta["partial"]
        assert (out / "tissue.png").is_file()
        assert not (out / "foreground.png").exists()

    def test_missing_checkpoint_partial(self, slides_dir, models_dir, tmp_path, capsys):
        lean = tmp_path / "lean_models"
        lean.mkdir()
        shutil.copy(models_dir / "tissue.ckpt", lean / "tissue.ckpt")
        out = tmp_path / "partial"
        rc = main(["infer", "--slide", str(slides_dir / "tissue-00"),
                   "--models", str(lean), "--out", str(out)])
        assert rc == 0
        err = capsys.readouterr().err
        assert "no checkpoint" in err
        meta = json.loads((out / "bundle.json").read_text())
        assert meta["partial"] and set(meta["errors"]) == {"blur", "fold", "pen"}

    def test_rerun_byte_identical(self, bundle_dir, slides_dir, models_dir, tmp_path):
        out2 = tmp_path / "bundle2"
        assert main(["infer", "--slide", str(slides_dir / "tissue-00"),
                     "--models", str(models_dir), "--out", str(out2)]) == 0
        a = _tree_bytes(bundle_dir)
        b = _tree_bytes(out2)
        a.pop("run_config.json")
        b.pop("run_config.json")
        assert a == b


class TestQcReport:
    def test_report(self, bundle_dir, tmp_path):
        out = tmp_path / "report"
        rc = main(["qc-report", "--bundle", str(bundle_dir), "--out", str(out)])
        assert rc == 0
        report = json.loads((out / "report.json").read_text())
        assert report["slide_id"] == "tissue-00"
        assert sum(report["fractions"].values()) == pytest.approx(1.0)
        assert 0.0 <= report["usable_fraction"] <= report["fractions"]["tissue"] + 1e-12

    def test_partial_bundle_fails(self, slides_dir, models_dir, tmp_path, capsys):
        lean = tmp_path / "lm"
        lean.mkdir()
        shutil.copy(models_dir / "tissue.ckpt", lean / "tissue.ckpt")
        bun = tmp_path / "pb"
        main(["infer", "--slide", str(slides_dir / "tissue-00"),
              "--models", str(lean), "--out", str(bun)])
        capsys.readouterr()
        rc = main(["qc-report", "--bundle", str(bun), "--out", str(tmp_path / "rep")])
        assert rc == 2
        assert "no blur mask" in capsys.readouterr().err


def _mask_dirs(tmp_path, ids, shape=(64, 64), flip=0):
    ours = tmp_path / "ours"
    ext = tmp_path / "external"
    rng = np.random.default_rng(17)
    for sid in ids:
        m = (rng.random(shape) < 0.4).astype(np.uint8)
        compare.save_mask_file(m, ours / f"{sid}.png", sid, 2.5, "ours")
        m2 = m.copy()
        if flip:
            idx = rng.integers(0, m.size, size=flip)
            m2.flat[idx] ^= 1
        compare.save_mask_file(m2, ext / f"{sid}.png", sid, 2.5, "external")
    return ours, ext


class TestCompare:
    def test_agreement_outputs(self, tmp_path):
        ours, ext = _mask_dirs(tmp_path, [f"s{i}" for i in range(4)], flip=40)
        out = tmp_path / "cmp"
        rc = main(["compare", "--ours", str(ours), "--external", str(ext),
                   "--out", str(out), "--per-bucket", "2", "--seed", "1"])
        assert rc == 0
        hist = json.loads((out / "histogram.json").read_text())
        assert sum(hist["counts"]) == 4
        csv_lines = (out / "agreement.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 5

    def test_no_shared_ids_is_runtime_error(self, tmp_path, capsys):
        ours, _ = _mask_dirs(tmp_path / "a", ["x"])
        _, ext = _mask_dirs(tmp_path / "b", ["y"])
        rc = main(["compare", "--ours", str(ours), "--external", str(ext),
                   "--out", str(tmp_path / "cmp")])
        assert rc == 2
        assert "no slide ids shared" in capsys.readouterr().err

    def test_rerun_byte_identical(self, tmp_path):
        ours, ext = _mask_dirs(tmp_path, ["s0", "s1"], flip=10)
        outs = []
        for name in ("c1", "c2"):
            out = tmp_path / name
            assert main(["compare", "--ours", str(ours), "--external", str(ext),
                         "--out", str(out), "--seed", "5"]) == 0
            tree = _tree_bytes(out)
            tree.pop("run_config.json")
            outs.append(tree)
        assert outs[0] == outs[1]


class TestMineSets:
    def test_items_and_overlays(self, slides_dir, tmp_path):
        pyramid = slide.open_slide(slides_dir / "tissue-00")
        ew, eh = pyramid.extent_at(2.5)
        rng = np.random.default_rng(23)
        a = (rng.random((eh, ew)) < 0.5).astype(np.uint8)
        b = (rng.random((eh, ew)) < 0.5).astype(np.uint8)
        ours = tmp_path / "ours"
        ext = tmp_path / "external"
        compare.save_mask_file(a, ours / "tissue-00.png", "tissue-00", 2.5, "ours")
        compare.save_mask_file(b, ext / "tissue-00.png", "tissue-00", 2.5, "external")
        out = tmp_path / "sets"
        rc = main(["mine-sets", "--slides", str(slides_dir), "--ours", str(ours),
                   "--external", str(ext), "--out", str(out),
                   "--per-set", "2", "--seed", "0"])
        assert rc == 0
        items = json.loads((out / "items.json").read_text())
        assert items, "no disagreement items mined"
        for it in items:
            d = out / Path(it["image"]).parent
            assert (d / "image.png").is_file()
            ov = imgops.load_png(out / it["overlay_a"])
            assert ov.ndim == 3 and set(np.unique(ov)) <= {0, 80, 220, 120}
            assert it["source_a"] == "ours" and it["source_b"] == "external"


class TestStats:
    def test_tally_from_export(self, tmp_path):
        export = tmp_path / "export.csv"
        export.write_text(
            "item_id,stratum,source_left,source_right,verdict\n"
            "i0,SET1,ours,external,ours\n"
            "i1,SET1,external,ours,ours\n"
            "i2,SET1,ours,external,external\n"
            "i3,SET2,ours,external,inconclusive\n"
            "i4,SET2,external,ours,pending\n")
        out = tmp_path / "stats"
        rc = main(["stats", "--export", str(export), "--out", str(out)])
        assert rc == 0
        stats = json.loads((out / "stats.json").read_text())
        assert stats["strata"]["SET1"]["counts"] == {"external": 1, "ours": 2}
        assert stats["strata"]["SET2"]["counts"] == {"inconclusive": 1}
        assert stats["pending"] == 1
        assert stats["total"]["total"] == 4
