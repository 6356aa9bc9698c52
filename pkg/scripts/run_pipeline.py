"""End-to-end desk-scale demo: synthesize slides, train all four QC models,
run slide inference, reduce to a report, compare against a reference mask set,
and mine disagreement patches into a blind-review session.

Everything goes through the CLI entry points so the run is reproducible from
the shell; rerunning with the same --out and flags yields byte-identical
artifacts (modulo run_config.json paths). Default scale is a few minutes on
one CPU core; --quick cuts it to a smoke run.
"""

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from slideqc import compare, synth
from slideqc.cli import main

T0 = time.time()


def log(msg: str) -> None:
    print(f"[{time.time() - T0:6.1f}s] {msg}", file=sys.stderr, flush=True)


def run(args: list[str]) -> None:
    log("slideqc " + " ".join(args))
    rc = main(args)
    if rc != 0:
        raise SystemExit(f"command failed with exit code {rc}: {args}")


def build_models(out: Path, quick: bool, seed: int) -> Path:
    """Per-task pools -> datasets -> checkpoints under out/models."""
    plans = {
        # task: (slide count, collage count, train steps)
        "tissue": (4, 24, 240),
        "blur": (2, 12, 240),
        "fold": (2, 12, 120),
        "pen": (2, 12, 120),
    }
    models = out / "models"
    models.mkdir(parents=True, exist_ok=True)
    for i, (task, (n_slides, n_collages, steps)) in enumerate(plans.items()):
        if quick:
            n_slides, n_collages, steps = max(2, n_slides // 2), n_collages // 2, steps // 6
        slides = out / "slides" / task
        run(["synth-slides", "--out", str(slides), "--profile", task,
             "--seed", str(seed + i), "--count", str(n_slides), "--truth"])
        ds = out / "datasets" / task
        run(["synth-dataset", "--task", task, "--slides", str(slides),
             "--out", str(ds), "--count", str(n_collages), "--seed", str(seed + 20 + i)])
        tr = out / "train" / task
        run(["train", "--dataset", str(ds), "--out", str(tr),
             "--steps", str(steps), "--base-width", "8", "--depth", "3",
             "--seed", "0"])
        shutil.copy(tr / "model.ckpt", models / f"{task}.ckpt")
        last = json.loads((tr / "history.json").read_text())["loss"][-1]
        log(f"{task}: {steps} steps, final loss {last:.4f}")
    return models


def main_script() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--quick", action="store_true", help="smoke-run scale")
    ns = ap.parse_args()
    out = ns.out
    out.mkdir(parents=True, exist_ok=True)

    models = build_models(out, ns.quick, ns.seed)

    # One held-out slide carrying every artifact kind, with ground truth.
    eval_slides = out / "slides" / "eval"
    run(["synth-slides", "--out", str(eval_slides), "--profile", "eval",
         "--seed", str(ns.seed + 100), "--count", "1", "--truth"])
    slide_dir = next(d for d in sorted(eval_slides.iterdir()) if (d / "manifest.json").is_file())

    bundle = out / "bundle" / slide_dir.name
    run(["infer", "--slide", str(slide_dir), "--models", str(models), "--out", str(bundle)])
    run(["qc-report", "--bundle", str(bundle), "--out", str(bundle)])
    report = json.loads((bundle / "report.json").read_text())
    log(f"report: fractions {report['fractions']} flags {report['flags']}")

    # Agreement study: our foreground vs the synthetic truth as the reference.
    ours, external = out / "masks" / "ours", out / "masks" / "external"
    sid = slide_dir.name
    ours.mkdir(parents=True, exist_ok=True)
    shutil.copy(bundle / "foreground.png", ours / f"{sid}.png")
    shutil.copy(bundle / "foreground.json", ours / f"{sid}.json")
    truth = synth.load_truths(eval_slides)[sid]
    compare.save_mask_file(truth.foreground_at(2.5), external / f"{sid}.png",
                           sid, 2.5, "external")
    run(["compare", "--ours", str(ours), "--external", str(external),
         "--out", str(out / "agreement"), "--seed", "0"])

    mined = out / "review-items"
    run(["mine-sets", "--slides", str(eval_slides), "--ours", str(ours),
         "--external", str(external), "--out", str(mined), "--seed", "0"])
    n_items = len(json.loads((mined / "items.json").read_text()))

    log(f"done: {n_items} review items under {mined}")
    print("\nnext: serve a blind review session over the mined patches:")
    print(f"  slideqc review-serve --assets {mined} --state {out / 'review-state'}")
    print("  curl -X POST localhost:8008/sessions -H 'Content-Type: application/json' \\")
    print(f"       -d \"{{\\\"items\\\": $(cat {mined}/items.json), \\\"seed\\\": 7}}\"")
    return 0


if __name__ == "__main__":
    raise SystemExit(main_script())
