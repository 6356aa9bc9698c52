"""Command-line entry point.

Every subcommand resolves its arguments into a run config that is written
next to the outputs (run_config.json, including the tool version), so any
run can be reproduced byte-exactly from its output directory in
single-threaded mode. Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__


def _write_run_config(out_dir, command: str, ns: argparse.Namespace) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(ns).items() if k != "func"}
    resolved["command"] = command
    resolved["version"] = __version__
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))


def _set_threads(n: int) -> None:
    if n > 0:
        import torch
        torch.set_num_threads(n)


# -- subcommand handlers -------------------------------------------------------------


def cmd_synth_slides(ns) -> int:
    from . import synth

    specs = synth.pool_profile(ns.profile, ns.seed, count=ns.count)
    out = Path(ns.out)
    for spec in specs:
        pyramid, grid, truth = synth.synth_slide(spec)
        synth.write_slide_bundle(out / spec.name, pyramid, grid,
                                 truth if ns.truth else None)
        print(f"wrote {spec.name}")
    _write_run_config(out, "synth-slides", ns)
    return 0


def cmd_synth_dataset(ns) -> int:
    from . import collage, learning, synth

    pool = synth.load_pool(ns.slides)
    truths = synth.load_truths(ns.slides) if ns.task in ("fold", "pen") else None
    out = Path(ns.out)
    n_val = round(ns.count * ns.val_fraction)
    n_train = ns.count - n_val
    if n_val > 0:
        train_ids, val_ids = learning.split_pool_ids(
            [p.slide_id for p, _ in pool], ns.val_fraction, ns.seed)
        train_pool = [pg for pg in pool if pg[0].slide_id in train_ids]
        val_pool = [pg for pg in pool if pg[0].slide_id in val_ids]
        collage.export_dataset(out / "train",
                               collage.build_dataset(ns.task, train_pool, n_train, ns.seed, truths))
        collage.export_dataset(out / "val",
                               collage.build_dataset(ns.task, val_pool, n_val, ns.seed + 1, truths))
        print(f"wrote {n_train} train + {n_val} val samples "
              f"({len(train_pool)}/{len(val_pool)} source slides)")
    else:
        collage.export_dataset(out / "train",
                               collage.build_dataset(ns.task, pool, n_train, ns.seed, truths))
        print(f"wrote {n_train} train samples")
    _write_run_config(out, "synth-dataset", ns)
    return 0


def cmd_train(ns) -> int:
    from . import collage, learning

    _set_threads(ns.threads)
    train_ds = collage.load_dataset(Path(ns.dataset) / "train")
    val_dir = Path(ns.dataset) / "val"
    val_ds = collage.load_dataset(val_dir) if val_dir.is_dir() else None
    task = train_ds.task
    cfg = learning.SegModelConfig(
        class_count=learning.TASK_CLASS_COUNTS[task], base_width=ns.base_width,
        depth=ns.depth, seed=ns.seed, task=task)
    tcfg = learning.TrainConfig(
        steps=ns.steps, batch_size=ns.batch_size, lr=ns.lr,
        dice_weight=ns.dice_weight, crop=ns.crop, augment=not ns.no_augment,
        val_every=ns.val_every, seed=ns.seed)
    model = learning.init_model(cfg)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    history = learning.train(model, train_ds, tcfg, val_ds, out / "metrics.jsonl")
    learning.save_checkpoint(model, out / "model.ckpt")
    (out / "history.json").write_text(json.dumps(history, sort_keys=True))
    final = history["loss"][-1] if history["loss"] else None
    print(f"trained {task} for {tcfg.steps} steps, final loss {final:.4f}"
          if final is not None else "trained 0 steps")
    if val_ds is not None:
        m = learning.evaluate(model, val_ds, task)
        print(f"val mean dice {m.mean_dice:.4f}" +
              (f", within-1 {m.within_one:.4f}" if m.within_one is not None else ""))
    _write_run_config(out, "train", ns)
    return 0


def cmd_infer(ns) -> int:
    from . import inference, learning, slide

    _set_threads(ns.threads)
    pyramid = slide.open_slide(ns.slide)
    tasks = {t: inference.DEFAULT_TASKS[t] for t in ns.tasks.split(",")}
    models = {}
    for t in tasks:
        ck = Path(ns.models) / f"{t}.ckpt"
        if ck.is_file():
            models[t] = learning.load_checkpoint(
                ck, task=t, class_count=inference.DEFAULT_TASKS[t].class_count)
    bundle = inference.run_qc(pyramid, models, tasks)
    out = Path(ns.out)
    inference.save_bundle(bundle, out)
    for t, e in bundle.errors.items():
        print(f"task {t} failed: {e}", file=sys.stderr)
    print(f"wrote bundle for {bundle.slide_id}" + (" (partial)" if bundle.partial else ""))
    _write_run_config(out, "infer", ns)
    return 0


def cmd_qc_report(ns) -> int:
    from . import inference

    bundle = inference.load_bundle(ns.bundle)
    report = inference.make_report(bundle, blur_threshold=ns.blur_threshold)
    out = Path(ns.out)
    inference.save_report(report, out / "report.json")
    print(f"{report.slide_id}: tissue {report.fractions['tissue']:.3f} "
          f"usable {report.usable_fraction:.3f} flags {report.flags}")
    _write_run_config(out, "qc-report", ns)
    return 0


def cmd_compare(ns) -> int:
    from . import compare

    ours = compare.load_mask_dir(ns.ours)
    external = compare.load_mask_dir(ns.external)
    shared = sorted(set(ours) & set(external))
    if not shared:
        raise RuntimeError("no slide ids shared between the two mask directories")
    records = []
    for sid in shared:
        a, meta_a = ours[sid]
        b, meta_b = external[sid]
        if meta_a["magnification"] != meta_b["magnification"]:
            raise RuntimeError(f"{sid}: masks at different magnifications")
        records.append((sid, compare.dice(a, b)))
    hist = compare.bucketize(records)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    compare.write_agreement_csv(hist, out / "agreement.csv")
    sampled = compare.sample_bucket_slides(hist, ns.per_bucket, ns.seed)
    (out / "histogram.json").write_text(json.dumps({
        "edges": list(hist.edges), "counts": hist.counts, "sampled": sampled,
    }, indent=2, sort_keys=True))
    print(f"{len(records)} slides, bucket counts {hist.counts}")
    _write_run_config(out, "compare", ns)
    return 0


def cmd_mine_sets(ns) -> int:
    import numpy as np

    from . import collage, compare, imgops, slide

    ours = compare.load_mask_dir(ns.ours)
    external = compare.load_mask_dir(ns.external)
    out = Path(ns.out)
    items = []
    for d in sorted(Path(ns.slides).iterdir()):
        if not (d / "manifest.json").is_file():
            continue
        pyramid = slide.open_slide(d)
        sid = pyramid.slide_id
        if sid not in ours or sid not in external:
            continue
        a, meta_a = ours[sid]
        b, _ = external[sid]
        mag = float(meta_a["magnification"])
        pair = compare.MaskPair(sid, a, b)
        sets = compare.mine_disagreements(pyramid, pair, mag, n=ns.per_set, seed=ns.seed)
        compare.save_sets(sets, out / sid)
        for name, patches in (("SET1", sets.set1), ("SET2", sets.set2)):
            for i, p in enumerate(patches):
                rel = f"{sid}/{name}/patch_{i:03d}"
                # Overlay renditions: mask tinted over black, blended by the UI.
                for suffix, crop, color in (("a", p.crop_a, (80, 220, 120)),
                                            ("b", p.crop_b, (235, 120, 60))):
                    ov = np.zeros(crop.shape + (3,), dtype=np.uint8)
                    ov[crop > 0] = color
                    imgops.save_png(ov, out / rel / f"overlay_{suffix}.png")
                items.append({
                    "item_id": f"{sid}-{name}-{i:03d}", "stratum": name,
                    "image": f"{rel}/image.png",
                    "overlay_a": f"{rel}/overlay_a.png",
                    "overlay_b": f"{rel}/overlay_b.png",
                    "source_a": "ours", "source_b": "external",
                })
        print(f"{sid}: SET1 {len(sets.set1)} SET2 {len(sets.set2)}")
    (out / "items.json").write_text(json.dumps(items, indent=2, sort_keys=True))
    _write_run_config(out, "mine-sets", ns)
    return 0


def cmd_review_serve(ns) -> int:
    import uvicorn

    from .review import ReviewStore, create_app

    store = ReviewStore(ns.state, ns.assets)
    app = create_app(store, ui_dir=ns.ui)
    uvicorn.run(app, host=ns.host, port=ns.port, log_level="warning")
    return 0


def cmd_stats(ns) -> int:
    from . import compare

    with open(ns.export, newline="") as f:
        rows = list(csv.DictReader(f))
    stratum_of = {r["item_id"]: r["stratum"] for r in rows}
    verdicts = [(r["item_id"], r["verdict"]) for r in rows if r["verdict"] != "pending"]
    stats = compare.agreement_stats(verdicts, stratum_of)
    stats["pending"] = sum(1 for r in rows if r["verdict"] == "pending")
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    print(json.dumps(stats["total"], sort_keys=True))
    _write_run_config(out, "stats", ns)
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slideqc",
                                description="Slide QC toolkit: synthesize, train, infer, "
                                            "compare, review.")
    p.add_argument("--version", action="version", version=f"slideqc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-slides", help="generate synthetic slide bundles")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--profile", choices=("tissue", "blur", "fold", "pen", "eval"),
                    required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=None, help="override profile slide count")
    sp.add_argument("--truth", action="store_true", help="also write artifact truth masks")
    sp.set_defaults(func=cmd_synth_slides)

    sp = sub.add_parser("synth-dataset", help="build a training dataset from slide bundles")
    sp.add_argument("--task", choices=("tissue", "blur", "fold", "pen"), required=True)
    sp.add_argument("--slides", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--count", type=int, required=True, help="total samples")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--val-fraction", type=float, default=0.2,
                    help="val share; source slides are split before sampling")
    sp.set_defaults(func=cmd_synth_dataset)

    sp = sub.add_parser("train", help="train a segmentation model on a dataset")
    sp.add_argument("--dataset", type=Path, required=True, help="dir with train/ and val/")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=600)
    sp.add_argument("--batch-size", type=int, default=4)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--dice-weight", type=float, default=0.5)
    sp.add_argument("--crop", type=int, default=256)
    sp.add_argument("--base-width", type=int, default=16)
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--val-every", type=int, default=200)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="run QC models over a slide")
    sp.add_argument("--slide", type=Path, required=True)
    sp.add_argument("--models", type=Path, required=True, help="dir with <task>.ckpt files")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--tasks", default="tissue,blur,fold,pen")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("qc-report", help="reduce a QC bundle to a report")
    sp.add_argument("--bundle", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--blur-threshold", type=int, default=4)
    sp.set_defaults(func=cmd_qc_report)

    sp = sub.add_parser("compare", help="dice agreement between two mask directories")
    sp.add_argument("--ours", type=Path, required=True)
    sp.add_argument("--external", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--per-bucket", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("mine-sets", help="mine center-pixel disagreement patches")
    sp.add_argument("--slides", type=Path, required=True)
    sp.add_argument("--ours", type=Path, required=True)
    sp.add_argument("--external", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--per-set", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_mine_sets)

    sp = sub.add_parser("review-serve", help="serve blind review sessions over HTTP")
    sp.add_argument("--assets", type=Path, required=True)
    sp.add_argument("--state", type=Path, required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8008)
    sp.add_argument("--ui", type=Path, default=None, help="static UI bundle to serve at /")
    sp.set_defaults(func=cmd_review_serve)

    sp = sub.add_parser("stats", help="tally an unblinded review export")
    sp.add_argument("--export", type=Path, required=True, help="export.csv from a session")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_stats)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return ns.func(ns)
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
