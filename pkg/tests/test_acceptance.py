"""Shipping gate: the numbered end-to-end criteria this artifact must meet.

One test per criterion. Heavy shared state (synthetic slide pools, trained
models) is built once in module-scoped fixtures; each test times the work the
criterion claims and appends a PASS/FAIL line that the terminal summary
prints after the run. Budgets assume a single CPU core.
"""

import csv
import io
import json
import shutil
import socket
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from slideqc import collage, compare, imgops, inference, learning, review, synth
from slideqc.cli import main

torch.set_num_threads(1)

REPORT: list[str] = []

# Frozen pool seeds: mining and training results are calibrated against these
# exact synthetic pools, so the thresholds below are meaningful margins.
TISSUE_POOL_SEED = 101
BLUR_POOL_SEED = 102
FOLD_POOL_SEED = 103
PEN_POOL_SEED = 104
EVAL_POOL_SEED = 105


def _record(num: int, elapsed: float, budget: float, ok: bool, detail: str) -> None:
    verdict = "PASS" if (ok and elapsed <= budget) else "FAIL"
    REPORT.append(f"criterion {num:2d} {verdict} [{elapsed:7.1f}s / {budget:4.0f}s] {detail}")
    assert ok, f"criterion {num}: {detail}"
    assert elapsed <= budget, f"criterion {num} over budget: {elapsed:.1f}s > {budget:.0f}s"


# -- shared heavy fixtures ----------------------------------------------------------


@pytest.fixture(scope="module")
def tissue_pool():
    t0 = time.perf_counter()
    triples = [synth.synth_slide(s) for s in synth.pool_profile("tissue", TISSUE_POOL_SEED)]
    return triples, time.perf_counter() - t0


@pytest.fixture(scope="module")
def blur_pool():
    # Widened to 12 slides so the 80/20 source split holds out two full
    # slides; a single validation slide makes the metric hostage to one draw.
    t0 = time.perf_counter()
    triples = [synth.synth_slide(s)
               for s in synth.pool_profile("blur", BLUR_POOL_SEED, count=12)]
    return triples, time.perf_counter() - t0


def _split_pairs(triples):
    pairs = [(p, g) for p, g, _ in triples]
    train_ids, val_ids = learning.split_pool_ids([p.slide_id for p, _ in pairs], 0.2, 0)
    return ([x for x in pairs if x[0].slide_id in train_ids],
            [x for x in pairs if x[0].slide_id in val_ids])


@pytest.fixture(scope="module")
def tissue_run(tissue_pool):
    triples, pool_s = tissue_pool
    t0 = time.perf_counter()
    train_pool, val_pool = _split_pairs(triples)
    train_ds = collage.build_dataset("tissue", train_pool, 160, 1)
    val_ds = collage.build_dataset("tissue", val_pool, 50, 2)
    model = learning.init_model(
        learning.SegModelConfig(3, base_width=16, depth=3, seed=0, task="tissue"))
    tcfg = learning.TrainConfig(steps=1200, batch_size=4, lr=0.05, crop=256, seed=0)
    learning.train(model, train_ds, tcfg)
    metrics = learning.evaluate(model, val_ds, "tissue")
    return {"model": model, "metrics": metrics, "steps": tcfg.steps,
            "seconds": pool_s + time.perf_counter() - t0}


@pytest.fixture(scope="module")
def blur_run(blur_pool):
    triples, pool_s = blur_pool
    t0 = time.perf_counter()
    train_pool, val_pool = _split_pairs(triples)
    train_ds = collage.build_dataset("blur", train_pool, 128, 3)
    val_ds = collage.build_dataset("blur", val_pool, 50, 4)
    model = learning.init_model(
        learning.SegModelConfig(8, base_width=8, depth=3, seed=0, task="blur"))
    tcfg = learning.TrainConfig(steps=1200, batch_size=4, lr=0.05, crop=256, seed=0)
    learning.train(model, train_ds, tcfg)
    metrics = learning.evaluate(model, val_ds, "blur")
    return {"model": model, "metrics": metrics, "steps": tcfg.steps,
            "seconds": pool_s + time.perf_counter() - t0}


def _train_artifact_model(task: str, pool_seed: int, seeds: tuple[int, int]):
    triples = [synth.synth_slide(s) for s in synth.pool_profile(task, pool_seed)]
    pairs = [(p, g) for p, g, _ in triples]
    truths = {p.slide_id: t for p, _, t in triples}
    train_ids, val_ids = learning.split_pool_ids([p.slide_id for p, _ in pairs], 0.2, 0)
    train_pool = [x for x in pairs if x[0].slide_id in train_ids]
    val_pool = [x for x in pairs if x[0].slide_id in val_ids]
    train_ds = collage.build_dataset(task, train_pool, 80, seeds[0], truths)
    val_ds = collage.build_dataset(task, val_pool, 20, seeds[1], truths)
    model = learning.init_model(
        learning.SegModelConfig(2, base_width=8, depth=3, seed=0, task=task))
    tcfg = learning.TrainConfig(steps=300, batch_size=4, lr=0.05, crop=256, seed=0)
    learning.train(model, train_ds, tcfg)
    # Slide-level QC quality is judged by the end-to-end criterion, not here.
    assert learning.evaluate(model, val_ds, task).per_class_dice[1] > 0.0
    return model


@pytest.fixture(scope="module")
def fold_model():
    return _train_artifact_model("fold", FOLD_POOL_SEED, (5, 6))


@pytest.fixture(scope="module")
def pen_model():
    return _train_artifact_model("pen", PEN_POOL_SEED, (7, 8))


# -- criterion 1: collage validity ----------------------------------------------------


def _cells_uniform(mask: np.ndarray, spec: collage.GridSpec) -> bool:
    g, c = spec.grid, spec.cell
    blocks = mask.reshape(g, c, g, c).swapaxes(1, 2).reshape(g * g, c * c)
    return bool((blocks == blocks[:, :1]).all())


def _collage_valid(sample, spec, pool) -> bool:
    if not _cells_uniform(sample.mask, spec):
        return False
    if int(sample.mask.max()) >= len(spec.class_set):
        return False
    cells = sample.provenance["cells"]
    if len(cells) != spec.grid * spec.grid:
        return False
    if any(cell["class"] not in spec.class_set for cell in cells):
        return False
    return collage.verify_provenance(sample, pool)


def test_criterion_01_collage_validity(tissue_pool, blur_pool):
    tissue_pairs = [(p, g) for p, g, _ in tissue_pool[0]]
    blur_pairs = [(p, g) for p, g, _ in blur_pool[0]]
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    n_ok = 0
    for _ in range(200):
        s = collage.assemble_tissue_collage(tissue_pairs, int(rng.integers(2**63)))
        n_ok += _collage_valid(s, collage.TISSUE_GRID, tissue_pairs)
    for _ in range(200):
        s = collage.assemble_blur_collage(blur_pairs, int(rng.integers(2**63)))
        n_ok += _collage_valid(s, collage.BLUR_GRID, blur_pairs)
    elapsed = time.perf_counter() - t0
    _record(1, elapsed, 120.0, n_ok == 400,
            f"{n_ok}/400 collages cell-uniform with sound provenance")


# -- criterion 2: blur ladder monotonicity --------------------------------------------


def _variance_of_laplacian(img: np.ndarray) -> float:
    g = img.astype(np.float64).mean(axis=2)
    lap = -4 * g
    lap[:-1] += g[1:]
    lap[1:] += g[:-1]
    lap[:, :-1] += g[:, 1:]
    lap[:, 1:] += g[:, :-1]
    return float(lap[1:-1, 1:-1].var())


def test_criterion_02_blur_ladder_monotonicity(blur_pool):
    pairs = [(p, g) for p, g, _ in blur_pool[0]]
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    n_patches, ok = 50, True
    for _ in range(n_patches):
        patch = collage.mine_patch(pairs, "tissue", 40.0, 1024, rng=rng)
        vols = [_variance_of_laplacian(e) for e in collage.build_blur_ladder(patch.image).rasters]
        ok &= all(vols[k + 1] <= vols[k] + 1e-9 for k in range(7))
        ok &= all(vols[k + 2] < vols[k] for k in range(6))
    elapsed = time.perf_counter() - t0
    _record(2, elapsed, 60.0, ok,
            f"sharpness non-increasing and 2-step strict on {n_patches} patches")


# -- criterion 3: gradient correctness -------------------------------------------------


def test_criterion_03_gradient_correctness():
    t0 = time.perf_counter()
    configs = [(2, 2, 0), (3, 3, 1), (5, 2, 2), (8, 3, 3), (4, 2, 4)]
    eps, tol = 1e-6, 1e-4
    n_probes, worst = 0, 0.0
    for classes, depth, seed in configs:
        model = learning.init_model(learning.SegModelConfig(
            class_count=classes, base_width=4, depth=depth, seed=seed)).double()
        gen = torch.Generator().manual_seed(seed)
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=gen)
        t = torch.randint(0, classes, (1, 32, 32), generator=gen)
        learning.segmentation_loss(model(x), t).backward()
        rng = np.random.default_rng(seed)
        for name, p in model.named_parameters():
            for flat_idx in rng.integers(0, p.numel(), size=min(2, p.numel())):
                idx = int(flat_idx)
                analytic = float(p.grad.flatten()[idx])
                with torch.no_grad():
                    orig = float(p.flatten()[idx])
                    p.flatten()[idx] = orig + eps
                    lp = float(learning.segmentation_loss(model(x), t))
                    p.flatten()[idx] = orig - eps
                    lm = float(learning.segmentation_loss(model(x), t))
                    p.flatten()[idx] = orig
                fd = (lp - lm) / (2 * eps)
                # Pre-norm biases are cancelled by GroupNorm mean subtraction;
                # their true gradient is 0 and central differences only resolve
                # down to ~1e-10, so tiny gradients get an absolute bound.
                if max(abs(analytic), abs(fd)) <= 1e-7:
                    assert abs(analytic - fd) <= 1e-9, (name, idx, analytic, fd)
                else:
                    rel = abs(analytic - fd) / max(abs(analytic), abs(fd))
                    worst = max(worst, rel)
                    assert rel <= tol, (name, idx, analytic, fd)
                n_probes += 1
    elapsed = time.perf_counter() - t0
    _record(3, elapsed, 120.0, worst <= tol,
            f"{n_probes} weight probes over {len(configs)} configs, worst rel err {worst:.2e}")


# -- criterion 4: desk-scale training --------------------------------------------------


def test_criterion_04_desk_scale_training(tissue_run, blur_run):
    tm, bm = tissue_run["metrics"], blur_run["metrics"]
    ok = (tm.mean_dice >= 0.85 and bm.within_one >= 0.80
          and tissue_run["steps"] <= 2000 and blur_run["steps"] <= 2000)
    _record(4, max(tissue_run["seconds"], blur_run["seconds"]), 1800.0, ok,
            f"tissue mean dice {tm.mean_dice:.4f} (>=0.85) in {tissue_run['seconds']:.0f}s; "
            f"blur within-one {bm.within_one:.4f} (>=0.80) in {blur_run['seconds']:.0f}s")


# -- criterion 5: end-to-end slide QC --------------------------------------------------


def test_criterion_05_slide_qc_end_to_end(tissue_run, fold_model, pen_model):
    models = {"tissue": tissue_run["model"], "fold": fold_model, "pen": pen_model}
    specs = {k: inference.DEFAULT_TASKS[k] for k in ("tissue", "fold", "pen")}
    t0 = time.perf_counter()
    fg_dices, pen_dices = [], []
    for spec in synth.pool_profile("eval", EVAL_POOL_SEED):
        pyramid, _, truth = synth.synth_slide(spec)
        bundle = inference.run_qc(pyramid, models, tasks=specs)
        assert not bundle.partial, bundle.errors
        fg_dices.append(compare.dice(inference.foreground_mask(bundle),
                                     truth.foreground_at(2.5)))
        pen_dices.append(compare.dice(bundle.pen_mask, truth.pen_at(0.625)))
    elapsed = time.perf_counter() - t0
    fg, pen = float(np.mean(fg_dices)), float(np.mean(pen_dices))
    _record(5, elapsed, 600.0, fg >= 0.85 and pen >= 0.7,
            f"6 slides: foreground dice {fg:.4f} (>=0.85, min {min(fg_dices):.3f}); "
            f"pen dice {pen:.4f} (>=0.70, min {min(pen_dices):.3f})")


# -- criterion 6: dice/bucket oracle equivalence ---------------------------------------


def _dice_brute(a: np.ndarray, b: np.ndarray) -> float:
    inter = sa = sb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            pa, pb = int(a[i, j] > 0), int(b[i, j] > 0)
            inter += pa & pb
            sa += pa
            sb += pb
    if sa + sb == 0:
        return 1.0
    return 2.0 * inter / (sa + sb)


def _bucket_brute(d: float) -> int:
    edges = compare.BIN_EDGES
    for j in range(len(edges) - 2):
        if edges[j] <= d < edges[j + 1]:
            return j
    return len(edges) - 2


def test_criterion_06_dice_bucket_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    z = np.zeros((32, 32), dtype=np.uint8)
    full = np.ones((32, 32), dtype=np.uint8)
    pairs = [(z, z.copy()), (full, full.copy())]  # both-empty and exact top-bin cases
    while len(pairs) < 1000:
        pa, pb = rng.choice([0.0, 0.05, 0.3, 0.7, 1.0], size=2)
        pairs.append(((rng.random((32, 32)) < pa).astype(np.uint8),
                      (rng.random((32, 32)) < pb).astype(np.uint8)))
    records, ok = [], True
    for i, (a, b) in enumerate(pairs):
        d = compare.dice(a, b)
        ok &= d == _dice_brute(a, b)
        ok &= compare.bucket_of(d) == _bucket_brute(d)
        records.append((f"s{i:04d}", d))
    h = compare.bucketize(records)
    expect = [0] * 5
    for _, d in records:
        expect[_bucket_brute(d)] += 1
    ok &= h.counts == expect and sum(h.counts) == 1000
    elapsed = time.perf_counter() - t0
    _record(6, elapsed, 30.0, ok, f"1000 pairs, bin counts {h.counts}")


# -- criterion 7: disagreement miner invariants ----------------------------------------


def test_criterion_07_disagreement_miner_invariants():
    spec = synth.SyntheticSlideSpec(seed=77, slide_id="mine-00", base_magnification=2.5,
                                    extent=(1536, 1536), level_downsamples=(1,))
    pyramid, _, _ = synth.synth_slide(spec)
    t0 = time.perf_counter()
    rng = np.random.default_rng(710)
    n_patches, ok = 0, True
    for trial in range(100):
        pa, pb = rng.choice([0.0, 0.002, 0.02, 0.2, 0.6], size=2)
        a = (rng.random((1536, 1536)) < pa).astype(np.uint8)
        b = (rng.random((1536, 1536)) < pb).astype(np.uint8)
        sets = compare.mine_disagreements(pyramid, compare.MaskPair("mine-00", a, b),
                                          2.5, n=5, seed=trial)
        for got, cond in ((sets.set1, (b > 0) & (a == 0)), (sets.set2, (a > 0) & (b == 0))):
            ok &= len(got) <= 5
            centers = [p.center for p in got]
            ok &= all(cond[y, x] for x, y in centers)
            ok &= all((x1 - x2) ** 2 + (y1 - y2) ** 2 >= 256**2
                      for i, (x1, y1) in enumerate(centers)
                      for x2, y2 in centers[i + 1:])
            n_patches += len(got)
    elapsed = time.perf_counter() - t0
    _record(7, elapsed, 60.0, ok,
            f"100 pairs, {n_patches} patches re-verified (centers, size, spacing)")


# -- criterion 8: stitch determinism ---------------------------------------------------


def test_criterion_08_stitch_determinism():
    t0 = time.perf_counter()
    rng = np.random.default_rng(88)
    tiles = [(rng.random((32, 32, 3)), (x, y))
             for x in (0, 24, 48, 64) for y in (0, 24, 48)]
    ref = inference.stitch(tiles, (96, 80), 3)
    ok = True
    for _ in range(10):
        perm = [tiles[i] for i in rng.permutation(len(tiles))]
        ok &= np.array_equal(inference.stitch(perm, (96, 80), 3), ref)
    # Constructed tie: the overlap column averages to (0.5, 0.5) and must
    # resolve to the lowest class id.
    t1 = np.tile(np.array([0.75, 0.25]), (4, 3, 1))
    t2 = np.tile(np.array([0.25, 0.75]), (4, 3, 1))
    m = inference.stitch([(t1, (0, 0)), (t2, (2, 0))], (5, 4), 2)
    ok &= (m[:, :3] == 0).all() and (m[:, 3:] == 1).all()
    elapsed = time.perf_counter() - t0
    _record(8, elapsed, 30.0, ok, "10 permutations bit-identical; tie resolves to class 0")


# -- criterion 9: CLI rerun reproducibility --------------------------------------------


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(root: Path) -> None:
    slides, ds = root / "slides", root / "ds"
    assert main(["synth-slides", "--out", str(slides), "--profile", "tissue",
                 "--seed", "7", "--count", "2", "--truth"]) == 0
    assert main(["synth-dataset", "--task", "tissue", "--slides", str(slides),
                 "--out", str(ds), "--count", "6", "--seed", "3",
                 "--val-fraction", "0.2"]) == 0
    assert main(["train", "--dataset", str(ds), "--out", str(root / "train"),
                 "--steps", "8", "--batch-size", "2", "--base-width", "4",
                 "--depth", "2", "--crop", "128", "--val-every", "4",
                 "--seed", "0"]) == 0
    models = root / "models"
    models.mkdir()
    shutil.copy(root / "train" / "model.ckpt", models / "tissue.ckpt")
    assert main(["infer", "--slide", str(slides / "tissue-00"),
                 "--models", str(models), "--out", str(root / "bundle"),
                 "--tasks", "tissue"]) == 0
    ours, ext = root / "ours", root / "external"
    for sid, truth in sorted(synth.load_truths(slides).items()):
        fg = truth.foreground_at(2.5)
        compare.save_mask_file(fg, ours / f"{sid}.png", sid, 2.5, "ours")
        compare.save_mask_file(np.roll(fg, 9, axis=1), ext / f"{sid}.png",
                               sid, 2.5, "external")
    assert main(["compare", "--ours", str(ours), "--external", str(ext),
                 "--out", str(root / "cmp"), "--seed", "0"]) == 0


def test_criterion_09_cli_rerun_reproducibility(tmp_path):
    t0 = time.perf_counter()
    trees = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        _pipeline(root)
        tree = _tree_bytes(root)
        # run_config.json embeds the absolute output path, which differs by design.
        trees.append({k: v for k, v in tree.items() if not k.endswith("run_config.json")})
    elapsed = time.perf_counter() - t0
    same_keys = set(trees[0]) == set(trees[1])
    diff = [k for k in trees[0] if same_keys and trees[0][k] != trees[1][k]]
    _record(9, elapsed, 300.0, same_keys and not diff,
            f"synth/train/infer/compare reruns byte-identical over {len(trees[0])} files")


# -- criterion 10: blind review round trip (HTTP API portion) --------------------------


SERVE_SCRIPT = "import sys; from slideqc.cli import main; sys.exit(main(sys.argv[1:]))"


def _start_server(state: Path, assets: Path, port: int, log: Path):
    proc = subprocess.Popen(
        [sys.executable, "-c", SERVE_SCRIPT, "review-serve", "--state", str(state),
         "--assets", str(assets), "--port", str(port)],
        stdout=open(log, "ab"), stderr=subprocess.STDOUT)
    return proc


def _wait_ready(client, base: str, deadline: float = 30.0) -> None:
    t0 = time.perf_counter()
    while time.perf_counter() - t0 < deadline:
        try:
            if client.get(f"{base}/sessions/none/next").status_code == 404:
                return
        except Exception:
            time.sleep(0.2)
    raise RuntimeError("review server did not come up")


def test_criterion_10_blind_review_round_trip(tmp_path):
    httpx = pytest.importorskip("httpx")
    t0 = time.perf_counter()
    assets, state = tmp_path / "assets", tmp_path / "state"
    assets.mkdir()
    items = []
    for i in range(20):
        for j, stem in enumerate(("image", "ov_a", "ov_b")):
            arr = np.full((8, 8, 3), (i * 3 + j) % 256, dtype=np.uint8)
            arr[0, 0] = i
            imgops.save_png(arr, assets / f"{stem}_{i:02d}.png")
        items.append({"item_id": f"it{i:02d}", "stratum": f"s{i % 4}",
                      "image": f"image_{i:02d}.png", "overlay_a": f"ov_a_{i:02d}.png",
                      "overlay_b": f"ov_b_{i:02d}.png",
                      "source_a": "ours", "source_b": "external"})
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    base = f"http://127.0.0.1:{port}"
    seed = 5
    cycle = ["left", "right", "inconclusive"]
    sent: dict[str, str] = {}
    proc = _start_server(state, assets, port, tmp_path / "server.log")
    try:
        with httpx.Client(timeout=10.0) as client:
            _wait_ready(client, base)
            r = client.post(f"{base}/sessions",
                            json={"items": items, "seed": seed, "reviewer": "gate"})
            assert r.status_code == 200 and r.json()["total"] == 20
            sid = r.json()["session_id"]
            for k in range(20):
                payload = client.get(f"{base}/sessions/{sid}/next").json()
                blob = json.dumps(payload)
                assert "ours" not in blob and "external" not in blob, "payload leaks a source"
                for ref in (payload["image"], payload["overlay_left"], payload["overlay_right"]):
                    body = client.get(f"{base}/assets/{ref}").content
                    assert b"ours" not in body and b"external" not in body
                verdict = cycle[k % 3]
                sent[payload["item_id"]] = verdict
                assert client.post(f"{base}/sessions/{sid}/verdicts",
                                   json={"item_id": payload["item_id"],
                                         "verdict": verdict}).status_code == 200
                if k == 7:
                    proc.kill()
                    proc.wait()
                    proc = _start_server(state, assets, port, tmp_path / "server.log")
                    _wait_ready(client, base)
                    resumed = client.get(f"{base}/sessions/{sid}/next").json()
                    assert resumed["progress"]["done"] == 8, "verdicts lost across restart"
                    again = client.post(f"{base}/sessions/{sid}/verdicts",
                                        json={"item_id": payload["item_id"],
                                              "verdict": verdict})
                    assert again.status_code == 200, "idempotent re-ack failed after restart"
            assert client.get(f"{base}/sessions/{sid}/next").json()["complete"] is True
            export = client.get(f"{base}/sessions/{sid}/export.csv").text
    finally:
        proc.kill()
        proc.wait()
    rows = list(csv.DictReader(io.StringIO(export)))
    assert len(rows) == 20
    _, bits = review._permutations(seed, 20)
    ok = True
    for i, row in enumerate(rows):
        left, right = ("ours", "external") if bits[i] == 0 else ("external", "ours")
        ok &= row["source_left"] == left and row["source_right"] == right
        v = sent[row["item_id"]]
        expect = {"left": left, "right": right, "inconclusive": "inconclusive"}[v]
        ok &= row["verdict"] == expect
    elapsed = time.perf_counter() - t0
    _record(10, elapsed, 120.0, ok,
            "20 verdicts unblind exactly; no source leak; survived mid-session kill")
