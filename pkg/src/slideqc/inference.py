"""Whole-slide mask production.

Tiles a slide at each task's working magnification, runs the segmentation
network per tile, and stitches per-pixel class probabilities into one label
mask per task. Stitching averages probabilities where tiles overlap and
accumulates in a fixed order (sorted tile origins), so results never depend
on tile processing order. A QC bundle gathers the four task masks; the
report reduces them to area fractions on the 2.5x grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgops
from .collage import TASK_PALETTES
from .compare import save_mask_file
from .learning import SegModel, predict_probs
from .slide import SlidePyramid, plan_tiles


@dataclass(frozen=True)
class TaskSpec:
    task: str
    magnification: float
    class_count: int
    tile: int = 512
    overlap: int = 64

    def __post_init__(self):
        if not 0 <= self.overlap < self.tile:
            raise ValueError(f"need 0 <= overlap < tile, got {self.overlap}/{self.tile}")


DEFAULT_TASKS = {
    "tissue": TaskSpec("tissue", 2.5, 3),
    "blur": TaskSpec("blur", 5.0, 8),
    "fold": TaskSpec("fold", 2.5, 2),
    "pen": TaskSpec("pen", 0.625, 2),
}

BLUR_UNUSABLE_CLASS = 4  # blur class >= this makes tissue unusable


def stitch(tiles: list[tuple[np.ndarray, tuple[int, int]]], extent: tuple[int, int],
           class_count: int) -> np.ndarray:
    """Average per-pixel probability vectors over contributing tiles, then
    argmax with ties resolved toward the lowest class id.

    Accumulation order is fixed by sorting on tile origin, so any input
    permutation produces bit-identical output. Raises if any pixel receives
    no tile.
    """
    ew, eh = extent
    acc = np.zeros((eh, ew, class_count), dtype=np.float64)
    cnt = np.zeros((eh, ew), dtype=np.uint16)
    for probs, (x, y) in sorted(tiles, key=lambda t: (t[1][1], t[1][0])):
        h, w, c = probs.shape
        if c != class_count:
            raise ValueError(f"tile has {c} classes, expected {class_count}")
        if x < 0 or y < 0 or x + w > ew or y + h > eh:
            raise ValueError(f"tile at {(x, y)} size {(w, h)} exceeds extent {extent}")
        acc[y : y + h, x : x + w] += probs.astype(np.float64)
        cnt[y : y + h, x : x + w] += 1
    if (cnt == 0).any():
        gaps = int((cnt == 0).sum())
        raise ValueError(f"coverage gap: {gaps} px received no tile")
    acc /= cnt[:, :, None]
    # np.argmax returns the first maximum, which is the lowest class id.
    return acc.argmax(axis=2).astype(np.uint8)


def _pad_to_multiple(img: np.ndarray, div: int) -> tuple[np.ndarray, int, int]:
    h, w = img.shape[:2]
    ph = (-h) % div
    pw = (-w) % div
    if ph == 0 and pw == 0:
        return img, 0, 0
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge"), ph, pw


def segment_slide(model: SegModel, p: SlidePyramid, t: TaskSpec) -> np.ndarray:
    """Label mask covering the slide extent at the task magnification."""
    if model.config.class_count != t.class_count:
        raise ValueError(f"model has {model.config.class_count} classes, "
                         f"task {t.task} needs {t.class_count}")
    if model.config.task and model.config.task != t.task:
        raise ValueError(f"model trained for {model.config.task!r}, task is {t.task!r}")
    grid = plan_tiles(p, t.magnification, t.tile, t.overlap)
    div = 2 ** model.config.depth
    tiles = []
    for x, y, w, h in grid.tiles:
        region = p.read_region(t.magnification, x, y, w, h)
        padded, ph, pw = _pad_to_multiple(region, div)
        probs = predict_probs(model, padded)
        if ph or pw:
            probs = probs[: probs.shape[0] - ph, : probs.shape[1] - pw]
        tiles.append((probs, (x, y)))
    return stitch(tiles, grid.extent, t.class_count)


# -- multi-task bundle ---------------------------------------------------------------


@dataclass
class QCBundle:
    slide_id: str
    tissue_mask: np.ndarray | None = None   # {0 bg, 1 tissue, 2 adipose} @2.5x
    blur_mask: np.ndarray | None = None     # 0..7 @5x
    fold_mask: np.ndarray | None = None     # binary @2.5x
    pen_mask: np.ndarray | None = None      # binary @0.625x
    magnifications: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.errors)

    def mask(self, task: str) -> np.ndarray | None:
        return getattr(self, f"{task}_mask")


def run_qc(p: SlidePyramid, models: dict[str, SegModel],
           tasks: dict[str, TaskSpec] | None = None) -> QCBundle:
    """One mask per task; a task failure is recorded per-task and leaves the
    bundle partial instead of aborting the others."""
    from .learning import model_fingerprint

    tasks = DEFAULT_TASKS if tasks is None else tasks
    bundle = QCBundle(p.slide_id)
    for name in ("tissue", "blur", "fold", "pen"):
        t = tasks.get(name)
        if t is None:
            continue
        try:
            model = models[name]
        except KeyError:
            bundle.errors[name] = f"no checkpoint for task {name!r}"
            continue
        try:
            setattr(bundle, f"{name}_mask", segment_slide(model, p, t))
            bundle.magnifications[name] = t.magnification
            bundle.fingerprints[name] = model_fingerprint(model)
        except Exception as e:  # per-task isolation is the contract
            bundle.errors[name] = str(e)
    return bundle


def foreground_mask(b: QCBundle, grid_mag: float = 2.5,
                    extent: tuple[int, int] | None = None) -> np.ndarray:
    """tissue AND NOT fold AND NOT pen, all resampled to the grid_mag grid."""
    for need in ("tissue", "fold", "pen"):
        if b.mask(need) is None:
            raise ValueError(f"bundle lacks a {need} mask")
    if extent is None:
        eh, ew = b.tissue_mask.shape
    else:
        ew, eh = extent
    tissue = _resampled(b.tissue_mask, b.magnifications["tissue"], grid_mag, (ew, eh))
    fold = _resampled(b.fold_mask, b.magnifications["fold"], grid_mag, (ew, eh))
    pen = _resampled(b.pen_mask, b.magnifications["pen"], grid_mag, (ew, eh))
    return ((tissue == 1) & (fold == 0) & (pen == 0)).astype(np.uint8)


def _resampled(mask: np.ndarray, src_mag: float, dst_mag: float,
               extent: tuple[int, int]) -> np.ndarray:
    ew, eh = extent
    out = imgops.resize_nearest_labels(mask, ew, eh)
    expect_w = round(mask.shape[1] * dst_mag / src_mag)
    if abs(expect_w - ew) > 1:
        raise ValueError(f"mask at {src_mag}x (width {mask.shape[1]}) does not cover the "
                         f"{dst_mag}x grid width {ew}")
    return out


# -- report ---------------------------------------------------------------------------


@dataclass
class QCReport:
    slide_id: str
    grid_magnification: float
    fractions: dict            # background / tissue / adipose, exact pixel ratios
    foreground_fraction: float
    usable_fraction: float
    blur_histogram: dict       # blur class -> fraction of tissue pixels
    flags: dict
    thresholds: dict


def make_report(b: QCBundle, blur_threshold: int = BLUR_UNUSABLE_CLASS,
                flag_fraction: float = 0.005) -> QCReport:
    """All masks on the 2.5x grid; usable tissue excludes folds, pen, and
    blur classes >= blur_threshold. Fractions are exact pixel ratios."""
    for need in ("tissue", "blur", "fold", "pen"):
        if b.mask(need) is None:
            raise ValueError(f"bundle is partial: no {need} mask "
                             f"({b.errors.get(need, 'not run')})")
    eh, ew = b.tissue_mask.shape
    grid_mag = b.magnifications.get("tissue", 2.5)
    blur = _resampled(b.blur_mask, b.magnifications["blur"], grid_mag, (ew, eh))
    fold = _resampled(b.fold_mask, b.magnifications["fold"], grid_mag, (ew, eh))
    pen = _resampled(b.pen_mask, b.magnifications["pen"], grid_mag, (ew, eh))
    if not (blur.shape == fold.shape == pen.shape == (eh, ew)):
        raise ValueError("resampled mask dims disagree")
    area = ew * eh
    fractions = {name: int((b.tissue_mask == i).sum()) / area
                 for i, name in enumerate(("background", "tissue", "adipose"))}
    tissue = b.tissue_mask == 1
    foreground = tissue & (fold == 0) & (pen == 0)
    usable = foreground & (blur < blur_threshold)
    n_tissue = int(tissue.sum())
    hist = {int(k): int(((blur == k) & tissue).sum()) / n_tissue if n_tissue else 0.0
            for k in range(8)}
    flags = {
        "pen_present": bool((pen == 1).mean() > flag_fraction),
        "fold_present": bool((fold == 1).mean() > flag_fraction),
        "blur_present": bool(n_tissue and (((blur >= blur_threshold) & tissue).sum() / n_tissue
                                           > flag_fraction)),
    }
    return QCReport(
        slide_id=b.slide_id,
        grid_magnification=grid_mag,
        fractions=fractions,
        foreground_fraction=int(foreground.sum()) / area,
        usable_fraction=int(usable.sum()) / area,
        blur_histogram=hist,
        flags=flags,
        thresholds={"blur_unusable_class": blur_threshold, "flag_fraction": flag_fraction},
    )


# -- file interchange ------------------------------------------------------------------


def save_bundle(b: QCBundle, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    dims = {}
    for task in ("tissue", "blur", "fold", "pen"):
        m = b.mask(task)
        if m is None:
            continue
        imgops.save_png(m, root / f"{task}.png", palette=TASK_PALETTES[task])
        dims[task] = [m.shape[1], m.shape[0]]
    meta = {
        "slide_id": b.slide_id,
        "magnifications": b.magnifications,
        "dims": dims,
        "fingerprints": b.fingerprints,
        "errors": b.errors,
        "partial": b.partial,
        "palette_legend": {
            "tissue": ["background", "tissue", "adipose"],
            "blur": [f"blur_{k}" for k in range(8)],
            "fold": ["background", "fold"],
            "pen": ["background", "pen"],
        },
    }
    (root / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    # Foreground needs all three constituent masks; a task-subset run is
    # complete without them.
    if not b.partial and all(b.mask(t) is not None for t in ("tissue", "fold", "pen")):
        fg = foreground_mask(b)
        save_mask_file(fg, root / "foreground.png", b.slide_id,
                       b.magnifications["tissue"], "ours")
    return root


def load_bundle(path) -> QCBundle:
    root = Path(path)
    meta = json.loads((root / "bundle.json").read_text())
    b = QCBundle(meta["slide_id"], magnifications=meta["magnifications"],
                 fingerprints=meta.get("fingerprints", {}), errors=meta.get("errors", {}))
    for task in ("tissue", "blur", "fold", "pen"):
        f = root / f"{task}.png"
        if f.is_file():
            setattr(b, f"{task}_mask", imgops.load_png(f))
    return b


def save_report(r: QCReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(r.__dict__, indent=2, sort_keys=True))
    return path


def load_report(path) -> QCReport:
    return QCReport(**json.loads(Path(path).read_text()))
