"""Collage training-data synthesis.

Pastes oracle-labeled patches mined from a pool of slides into grid
canvases whose annotation masks are known by construction: random label
grids, class-guided patch mining, tissue and blur collage assembly, the
box-blur ladder, positive-pixel-centered sampling for fold/pen tasks, and
color-jitter augmentation. All generators are pure functions of their
inputs and a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgops
from .oracle import FOREGROUND_ROI_CLASSES, PatchLabelGrid, RoiClass
from .slide import SlidePyramid


class NoEligiblePatchError(Exception):
    """No slide in the pool holds any patch of the requested class."""


# Mask ids are indices into these tuples.
TISSUE_CLASS_SET = ("background", "tissue", "adipose")
BLUR_CLASS_SET = tuple(f"blur_{k}" for k in range(8))

# Collage class per oracle class; Artifact cells are never mined.
COLLAGE_CLASS_FROM_ROI = {
    RoiClass.Epithelium: "tissue",
    RoiClass.Stroma: "tissue",
    RoiClass.Lymphocytes: "tissue",
    RoiClass.Miscellaneous: "tissue",
    RoiClass.Adipose: "adipose",
    RoiClass.Background: "background",
    RoiClass.Artifact: None,
}
assert FOREGROUND_ROI_CLASSES == {c for c, v in COLLAGE_CLASS_FROM_ROI.items() if v == "tissue"}

# Box-blur radius per blur class, in px at 40x. The blur ladder is validated
# by the sharpness monotonicity property rather than fixed by any reference.
BLUR_RADII = (0, 1, 2, 4, 6, 9, 13, 18)

TISSUE_MAGNIFICATION = 2.5
BLUR_SOURCE_MAGNIFICATION = 40.0
BLUR_SOURCE_SIZE = 1024
BLUR_POOL_FACTOR = 8


@dataclass(frozen=True)
class GridSpec:
    cell: int
    grid: int
    class_set: tuple[str, ...]
    canvas: int = 512

    def __post_init__(self):
        if self.cell * self.grid != self.canvas:
            raise ValueError(f"cell {self.cell} x grid {self.grid} != canvas {self.canvas}")
        if not self.class_set:
            raise ValueError("class_set must be non-empty")


TISSUE_GRID = GridSpec(cell=64, grid=8, class_set=TISSUE_CLASS_SET)
BLUR_GRID = GridSpec(cell=128, grid=4, class_set=BLUR_CLASS_SET)


@dataclass
class CollageSample:
    image: np.ndarray  # canvas x canvas x 3 uint8
    mask: np.ndarray   # canvas x canvas uint8, ids index into class_set
    provenance: dict


@dataclass(frozen=True)
class JitterParams:
    gain_range: tuple[float, float] = (0.9, 1.1)
    offset_range: tuple[float, float] = (-10.0, 10.0)
    saturation_range: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not (self.gain_range[0] <= 1.0 <= self.gain_range[1]):
            raise ValueError(f"gain range {self.gain_range} must contain 1.0")
        if not (self.offset_range[0] <= 0.0 <= self.offset_range[1]):
            raise ValueError(f"offset range {self.offset_range} must contain 0")
        if not (self.saturation_range[0] <= 1.0 <= self.saturation_range[1]):
            raise ValueError(f"saturation range {self.saturation_range} must contain 1.0")


def random_label_grid(spec: GridSpec, seed) -> np.ndarray:
    """Uniform i.i.d. class id per cell; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, len(spec.class_set), size=(spec.grid, spec.grid), dtype=np.int64).astype(np.uint8)


# -- patch mining ---------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray
    slide_id: str
    x: int
    y: int
    magnification: float
    size: int
    collage_class: str


def _eligible_anchors(grid: PatchLabelGrid, collage_class: str, mag: float, size: int,
                      extent: tuple[int, int]) -> tuple[list[tuple[int, int]], int]:
    """Cell-aligned window anchors whose covered cells majority-map to the class.

    Returns (anchors, span) where span is the oracle cell size in px at `mag`.
    """
    span_f = grid.patch_size * mag / grid.grid_magnification
    span = round(span_f)
    if abs(span_f - span) > 1e-6 or span < 1:
        raise ValueError(f"oracle cell is not integral at {mag}x (cell span {span_f})")
    k = max(1, -(-size // span))  # ceil(size / span)
    mapped = np.full(grid.labels.shape, -1, dtype=np.int64)
    for roi, name in COLLAGE_CLASS_FROM_ROI.items():
        if name == collage_class:
            mapped[grid.labels == int(roi)] = 1
        elif name is not None:
            mapped[grid.labels == int(roi)] = 0
    ew, eh = extent
    anchors = []
    rows, cols = grid.labels.shape
    for r in range(rows - k + 1):
        for c in range(cols - k + 1):
            if c * span + size > ew or r * span + size > eh:
                continue
            block = mapped[r : r + k, c : c + k]
            if (block == 1).sum() * 2 > k * k:
                anchors.append((r, c))
    return anchors, span


def mine_patch(pool: list[tuple[SlidePyramid, PatchLabelGrid]], collage_class: str,
               mag: float, size: int, seed=None, *, rng: np.random.Generator | None = None) -> Patch:
    """Mine one size x size patch at `mag` whose oracle cells majority-match the class.

    The slide is chosen uniformly among pool slides holding at least one
    eligible patch, then the cell uniformly within that slide.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if not pool:
        raise ValueError("empty slide pool")
    per_slide = []
    for pyramid, grid in pool:
        anchors, span = _eligible_anchors(grid, collage_class, mag, size, pyramid.extent_at(mag))
        if anchors:
            per_slide.append((pyramid, anchors, span))
    if not per_slide:
        raise NoEligiblePatchError(
            f"no patch of class {collage_class!r} at {mag}x in a pool of {len(pool)} slides"
        )
    pyramid, anchors, span = per_slide[rng.integers(0, len(per_slide))]
    r, c = anchors[rng.integers(0, len(anchors))]
    x, y = c * span, r * span
    image = pyramid.read_region(mag, x, y, size, size)
    return Patch(image, pyramid.slide_id, x, y, mag, size, collage_class)


# -- tissue collages -------------------------------------------------------------


def assemble_tissue_collage(pool, seed) -> CollageSample:
    """8x8 grid of 64 px cells at 2.5x, one mined patch per cell."""
    rng = np.random.default_rng(seed)
    spec = TISSUE_GRID
    ids = random_label_grid(spec, rng.integers(0, 2**63))
    image = np.zeros((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    mask = np.zeros((spec.canvas, spec.canvas), dtype=np.uint8)
    cells = []
    for r in range(spec.grid):
        for c in range(spec.grid):
            cls = spec.class_set[ids[r, c]]
            patch = mine_patch(pool, cls, TISSUE_MAGNIFICATION, spec.cell, rng=rng)
            y0, x0 = r * spec.cell, c * spec.cell
            image[y0 : y0 + spec.cell, x0 : x0 + spec.cell] = patch.image
            mask[y0 : y0 + spec.cell, x0 : x0 + spec.cell] = ids[r, c]
            cells.append({
                "row": r, "col": c, "class": cls,
                "slide_id": patch.slide_id, "x": patch.x, "y": patch.y,
                "magnification": patch.magnification, "size": patch.size,
            })
    provenance = {
        "task": "tissue", "class_set": list(spec.class_set), "cell": spec.cell,
        "magnification": TISSUE_MAGNIFICATION, "seed": int(seed), "cells": cells,
    }
    return CollageSample(image, mask, provenance)


# -- blur ladder and collages -----------------------------------------------------


@dataclass
class BlurLadder:
    rasters: tuple[np.ndarray, ...]  # 8 entries, 128x128x3 uint8
    radii: tuple[int, ...] = BLUR_RADII


def ladder_entry(patch40x: np.ndarray, k: int) -> np.ndarray:
    """One blur-class rendition: box blur at 40x, then 8x mean-pool to 128 px."""
    if patch40x.shape != (BLUR_SOURCE_SIZE, BLUR_SOURCE_SIZE, 3):
        raise ValueError(f"expected {BLUR_SOURCE_SIZE}x{BLUR_SOURCE_SIZE} RGB input, got {patch40x.shape}")
    if not 0 <= k < len(BLUR_RADII):
        raise ValueError(f"blur class {k} out of range")
    pooled = imgops.box_pool(patch40x, BLUR_RADII[k], BLUR_POOL_FACTOR)
    return np.clip(np.rint(pooled), 0, 255).astype(np.uint8)


def build_blur_ladder(patch40x: np.ndarray) -> BlurLadder:
    return BlurLadder(tuple(ladder_entry(patch40x, k) for k in range(len(BLUR_RADII))))


def assemble_blur_collage(pool, seed) -> CollageSample:
    """4x4 grid of 128 px cells; each cell is an independently mined foreground
    patch rendered at its randomly assigned blur class."""
    rng = np.random.default_rng(seed)
    spec = BLUR_GRID
    ids = random_label_grid(spec, rng.integers(0, 2**63))
    image = np.zeros((spec.canvas, spec.canvas, 3), dtype=np.uint8)
    mask = np.zeros((spec.canvas, spec.canvas), dtype=np.uint8)
    cells = []
    for r in range(spec.grid):
        for c in range(spec.grid):
            k = int(ids[r, c])
            patch = mine_patch(pool, "tissue", BLUR_SOURCE_MAGNIFICATION, BLUR_SOURCE_SIZE, rng=rng)
            y0, x0 = r * spec.cell, c * spec.cell
            image[y0 : y0 + spec.cell, x0 : x0 + spec.cell] = ladder_entry(patch.image, k)
            mask[y0 : y0 + spec.cell, x0 : x0 + spec.cell] = k
            cells.append({
                "row": r, "col": c, "class": spec.class_set[k], "blur_class": k,
                "slide_id": patch.slide_id, "x": patch.x, "y": patch.y,
                "magnification": patch.magnification, "size": patch.size,
            })
    provenance = {
        "task": "blur", "class_set": list(spec.class_set), "cell": spec.cell,
        "magnification": BLUR_SOURCE_MAGNIFICATION / (BLUR_SOURCE_SIZE // spec.cell),
        "seed": int(seed), "cells": cells,
    }
    return CollageSample(image, mask, provenance)


def verify_provenance(sample: CollageSample, pool) -> bool:
    """Re-read every provenance region from its source slide and check the
    pasted cell reproduces bit-exactly (blur cells re-apply their ladder entry)."""
    by_id = {p.slide_id: p for p, _ in pool}
    cell = sample.provenance["cell"]
    for rec in sample.provenance["cells"]:
        pyramid = by_id[rec["slide_id"]]
        region = pyramid.read_region(rec["magnification"], rec["x"], rec["y"], rec["size"], rec["size"])
        if "blur_class" in rec:
            region = ladder_entry(region, rec["blur_class"])
        y0, x0 = rec["row"] * cell, rec["col"] * cell
        pasted = sample.image[y0 : y0 + cell, x0 : x0 + cell]
        if not np.array_equal(region, pasted):
            return False
    return True


# -- annotated-mask sampling (fold / pen) ----------------------------------------


def sample_annotated_patch(slide: SlidePyramid, mask: np.ndarray, mag: float, seed=None,
                           size: int = 512, *, rng: np.random.Generator | None = None):
    """Pick a uniformly random positive pixel and extract the surrounding
    size x size patch, clamped so the window stays in bounds.

    `mask` must cover the full slide extent at `mag`. Returns
    (image, mask_crop, center_xy).
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    ew, eh = slide.extent_at(mag)
    if mask.shape != (eh, ew):
        raise ValueError(f"mask {mask.shape} does not cover extent {(eh, ew)} at {mag}x")
    if ew < size or eh < size:
        raise ValueError(f"extent {ew}x{eh} at {mag}x smaller than {size} px window")
    positives = np.flatnonzero(mask)
    if positives.size == 0:
        raise ValueError("annotation mask has no positive pixel")
    idx = int(positives[rng.integers(0, positives.size)])
    py, px = divmod(idx, ew)
    x0 = min(max(px - size // 2, 0), ew - size)
    y0 = min(max(py - size // 2, 0), eh - size)
    image = slide.read_region(mag, x0, y0, size, size)
    crop = np.ascontiguousarray(mask[y0 : y0 + size, x0 : x0 + size])
    return image, crop, (px, py)


# -- augmentation -----------------------------------------------------------------


def color_jitter(img: np.ndarray, p: JitterParams) -> np.ndarray:
    """Per-image random channel gains, brightness offset, and saturation scale.

    out = clamp(gain_c * sat(in)_c + offset); draws are deterministic per
    p.seed.
    """
    rng = np.random.default_rng(p.seed)
    gains = rng.uniform(p.gain_range[0], p.gain_range[1], size=3)
    offset = rng.uniform(p.offset_range[0], p.offset_range[1])
    sat = rng.uniform(p.saturation_range[0], p.saturation_range[1])
    out = img.astype(np.float64)
    if sat != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + sat * (out - gray)
    out = out * gains[None, None, :] + offset
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- dataset IO --------------------------------------------------------------------

TISSUE_PALETTE = [(24, 24, 24), (200, 162, 200), (128, 128, 128)]  # bg, tissue lilac, adipose gray
BINARY_PALETTES = {"fold": [(24, 24, 24), (128, 64, 160)], "pen": [(24, 24, 24), (220, 40, 40)]}
BLUR_PALETTE = [(int(255 * k / 7),) * 3 for k in range(8)]  # brighter = more blur

TASK_PALETTES = {
    "tissue": TISSUE_PALETTE,
    "blur": BLUR_PALETTE,
    "fold": BINARY_PALETTES["fold"],
    "pen": BINARY_PALETTES["pen"],
}


@dataclass
class Dataset:
    task: str
    class_set: tuple[str, ...]
    magnification: float
    images: list = field(repr=False)
    masks: list = field(repr=False)
    provenance: list = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i], self.masks[i]


def export_dataset(path, ds: Dataset) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    palette = TASK_PALETTES.get(ds.task)
    for i, (img, mask, prov) in enumerate(zip(ds.images, ds.masks, ds.provenance)):
        imgops.save_png(img, root / f"image_{i:04d}.png")
        imgops.save_png(mask, root / f"mask_{i:04d}.png", palette=palette)
        (root / f"provenance_{i:04d}.json").write_text(json.dumps(prov, sort_keys=True))
    manifest = {
        "task": ds.task,
        "class_set": list(ds.class_set),
        "magnification": ds.magnification,
        "count": len(ds),
        **ds.meta,
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "dataset.json").read_text())
    n = manifest["count"]
    images, masks, prov = [], [], []
    for i in range(n):
        images.append(imgops.load_png(root / f"image_{i:04d}.png"))
        masks.append(imgops.load_png(root / f"mask_{i:04d}.png"))
        pfile = root / f"provenance_{i:04d}.json"
        prov.append(json.loads(pfile.read_text()) if pfile.is_file() else {})
    meta = {k: v for k, v in manifest.items() if k not in ("task", "class_set", "magnification", "count")}
    return Dataset(manifest["task"], tuple(manifest["class_set"]), manifest["magnification"],
                   images, masks, prov, meta)


def build_dataset(task: str, pool, count: int, seed: int, truths: dict | None = None) -> Dataset:
    """Generate `count` training samples for one task.

    tissue/blur draw collages from the oracle-labeled pool; fold/pen sample
    positive-centered windows from slides with artifact truth masks
    (`truths`: slide_id -> ArtifactTruth).
    """
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]
    images, masks, prov = [], [], []
    if task == "tissue":
        for s in seeds:
            smp = assemble_tissue_collage(pool, s)
            images.append(smp.image); masks.append(smp.mask); prov.append(smp.provenance)
        return Dataset(task, TISSUE_CLASS_SET, TISSUE_MAGNIFICATION, images, masks, prov,
                       {"seed": seed, "sample_seeds": seeds})
    if task == "blur":
        for s in seeds:
            smp = assemble_blur_collage(pool, s)
            images.append(smp.image); masks.append(smp.mask); prov.append(smp.provenance)
        mag = BLUR_SOURCE_MAGNIFICATION / BLUR_POOL_FACTOR
        return Dataset(task, BLUR_CLASS_SET, mag, images, masks, prov,
                       {"seed": seed, "sample_seeds": seeds})
    if task in ("fold", "pen"):
        if truths is None:
            raise ValueError(f"{task} dataset needs artifact truth masks")
        mag = 2.5 if task == "fold" else 0.625
        eligible = []
        for pyramid, _grid in pool:
            truth = truths[pyramid.slide_id]
            m = truth.fold_at(mag) if task == "fold" else truth.pen_at(mag)
            if m.any():
                eligible.append((pyramid, m))
        if not eligible:
            raise NoEligiblePatchError(f"no slide in pool has any {task} pixels")
        rng = np.random.default_rng(seed)
        for s in seeds:
            pyramid, m = eligible[rng.integers(0, len(eligible))]
            img, crop, center = sample_annotated_patch(pyramid, m, mag, s)
            images.append(img); masks.append(crop); prov.append(
                {"task": task, "slide_id": pyramid.slide_id, "center": list(center),
                 "magnification": mag, "seed": int(s)})
        return Dataset(task, ("background", task), mag, images, masks, prov,
                       {"seed": seed, "sample_seeds": seeds})
    raise ValueError(f"unknown task {task!r}")
