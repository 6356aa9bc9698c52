"""Procedural synthetic slides with pixel-exact artifact ground truth.

Generates multi-level pyramids whose region classes are procedurally
textured (nuclei-like speckle for epithelium/lymphocytes, fibrous texture
for stroma, near-white webbed blobs for adipose, flat glass background),
with optional pen strokes, tissue-fold ribbons, and out-of-focus spots.
Every overlay is recorded as a binary truth mask, and the patch-class
oracle grid is derived from the layout, so the whole pipeline runs with
zero external data.

Realism is not a goal; class separability and exact ground truth are.
Texture statistics are fixed constants below. All randomness flows from a
single seeded generator, so output is byte-identical per seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import imgops
from .collage import BLUR_RADII
from .oracle import FOREGROUND_ROI_CLASSES, PatchLabelGrid, RoiClass, save_patch_labels, load_patch_labels
from .slide import SlidePyramid, open_slide, pyramid_from_base, write_slide

PEN_PALETTE = (
    (35, 55, 200),   # blue
    (25, 130, 60),   # green
    (200, 35, 45),   # red
    (40, 35, 40),    # black
)

DEFAULT_CLASS_FRACTIONS = {
    RoiClass.Epithelium: 0.18,
    RoiClass.Stroma: 0.16,
    RoiClass.Lymphocytes: 0.08,
    RoiClass.Adipose: 0.12,
    RoiClass.Miscellaneous: 0.05,
}


@dataclass(frozen=True)
class SyntheticSlideSpec:
    seed: int
    slide_id: str | None = None
    base_magnification: float = 10.0
    extent: tuple[int, int] = (2048, 2048)
    level_downsamples: tuple[int, ...] = (1, 4, 16)
    class_fractions: dict[RoiClass, float] = field(
        default_factory=lambda: dict(DEFAULT_CLASS_FRACTIONS)
    )
    blob_radius_frac: tuple[float, float] = (0.07, 0.16)
    pen_stroke_count: int = 0
    pen_width_range: tuple[int, int] = (16, 34)  # px at 2.5x equivalent
    fold_count: int = 0
    fold_width_range: tuple[int, int] = (12, 26)  # px at 2.5x equivalent
    blur_spot_count: int = 0
    oracle_patch_size: int = 64
    oracle_magnification: float = 2.5

    def __post_init__(self):
        w, h = self.extent
        if min(w, h) < 1024:
            raise ValueError(f"extent must be >= 1024 px at base mag, got {self.extent}")
        if self.pen_stroke_count < 0 or self.fold_count < 0 or self.blur_spot_count < 0:
            raise ValueError("artifact counts must be >= 0")
        cell = self.oracle_cell_base
        if cell < 1 or abs(cell - round(cell)) > 1e-9:
            raise ValueError(
                f"oracle cell ({self.oracle_patch_size} px at {self.oracle_magnification}x) "
                f"is not an integer at base {self.base_magnification}x"
            )
        for d in (round(cell), max(self.level_downsamples)):
            if w % d or h % d:
                raise ValueError(f"extent {self.extent} must be divisible by {d}")
        if sum(self.class_fractions.values()) > 0.85:
            raise ValueError("class fractions leave no room for background (sum > 0.85)")

    @property
    def oracle_cell_base(self) -> float:
        return self.oracle_patch_size * self.base_magnification / self.oracle_magnification

    @property
    def name(self) -> str:
        return self.slide_id or f"synth-{self.seed:05d}"


@dataclass
class ArtifactTruth:
    """Ground truth at base magnification: class layout plus per-artifact masks."""

    magnification: float
    class_map: np.ndarray  # HxW uint8 of RoiClass values
    pen_mask: np.ndarray   # HxW uint8 {0,1}
    fold_mask: np.ndarray  # HxW uint8 {0,1}
    blur_map: np.ndarray   # HxW uint8, blur class 0..7

    def _pool_binary(self, mask: np.ndarray, mag: float) -> np.ndarray:
        ratio = self.magnification / mag
        k = round(ratio)
        if abs(ratio - k) > 1e-9:
            raise ValueError(f"truth at {self.magnification}x cannot pool to {mag}x")
        if k == 1:
            return mask.astype(np.uint8)
        return (imgops.mean_pool(mask, k) >= 0.5).astype(np.uint8)

    def pen_at(self, mag: float) -> np.ndarray:
        return self._pool_binary(self.pen_mask, mag)

    def fold_at(self, mag: float) -> np.ndarray:
        return self._pool_binary(self.fold_mask, mag)

    def tissue_at(self, mag: float) -> np.ndarray:
        tissue = np.isin(self.class_map, [int(c) for c in FOREGROUND_ROI_CLASSES])
        return self._pool_binary(tissue, mag)

    def adipose_at(self, mag: float) -> np.ndarray:
        return self._pool_binary(self.class_map == int(RoiClass.Adipose), mag)

    def foreground_at(self, mag: float) -> np.ndarray:
        """Usable foreground: tissue classes minus folds and pen ink."""
        tissue = np.isin(self.class_map, [int(c) for c in FOREGROUND_ROI_CLASSES])
        fg = tissue & (self.fold_mask == 0) & (self.pen_mask == 0)
        return self._pool_binary(fg, mag)


# -- layout -------------------------------------------------------------------


def _blob_mask(h, w, cx, cy, rx, ry, phi, wobble_amp, wobble_k, wobble_phase):
    """Wobbly rotated ellipse, rasterized over its bounding box only."""
    r = max(rx, ry) * (1 + wobble_amp)
    x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
    y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
    if x0 >= x1 or y0 >= y1:
        return None, (0, 0)
    ys = np.arange(y0, y1, dtype=np.float32)[:, None] - cy
    xs = np.arange(x0, x1, dtype=np.float32)[None, :] - cx
    u = xs * np.cos(phi) + ys * np.sin(phi)
    v = -xs * np.sin(phi) + ys * np.cos(phi)
    theta = np.arctan2(v, u)
    rad = 1.0 + wobble_amp * np.sin(wobble_k * theta + wobble_phase)
    inside = (u / rx) ** 2 + (v / ry) ** 2 <= rad**2
    return inside, (y0, x0)


def _layout_classes(spec: SyntheticSlideSpec, rng: np.random.Generator) -> np.ndarray:
    w, h = spec.extent
    # Blobs are rasterized on a coarse grid (about 1024 px on the short side)
    # and block-expanded; oracle cells are far larger than the block size, so
    # the blocky edges are immaterial.
    s = max(1, min(w, h) // 1024)
    gw, gh = w // s, h // s
    class_map = np.full((gh, gw), int(RoiClass.Background), dtype=np.uint8)
    area = float(gw * gh)
    rmin = spec.blob_radius_frac[0] * min(gw, gh)
    rmax = spec.blob_radius_frac[1] * min(gw, gh)
    free_left = area
    # Larger targets first so they can still find free space.
    targets = sorted(spec.class_fractions.items(), key=lambda kv: -kv[1])
    for cls, frac in targets:
        if frac <= 0:
            continue
        covered = 0
        attempts = 0
        while covered < frac * area and attempts < 120 and free_left > 0.01 * area:
            attempts += 1
            cx = rng.uniform(0, gw)
            cy = rng.uniform(0, gh)
            rx = rng.uniform(rmin, rmax)
            ry = rx * rng.uniform(0.6, 1.4)
            blob, (y0, x0) = _blob_mask(
                gh, gw, cx, cy, rx, ry,
                rng.uniform(0, np.pi),
                rng.uniform(0.05, 0.22),
                rng.integers(3, 8),
                rng.uniform(0, 2 * np.pi),
            )
            if blob is None:
                continue
            view = class_map[y0 : y0 + blob.shape[0], x0 : x0 + blob.shape[1]]
            free = blob & (view == int(RoiClass.Background))
            n = int(np.count_nonzero(free))
            if n == 0:
                continue
            view[free] = int(cls)
            covered += n
            free_left -= n
    if s == 1:
        return class_map
    return np.kron(class_map, np.ones((s, s), dtype=np.uint8))


# -- textures -----------------------------------------------------------------


def _speckle_texture(shape, rng, scale, base_rgb, dot_rgb, density, dot_cell, noise_amp):
    """Nuclei-like speckle: dark dots from thresholded noise over a tinted base."""
    h, w = shape
    cell = max(2, round(dot_cell * scale))
    dots = imgops.value_noise(h, w, cell, rng) > (1.0 - density)
    fine = imgops.value_noise(h, w, max(2, round(2 * scale)), rng) - 0.5
    grain = rng.standard_normal((h, w), dtype=np.float32)
    tex = np.empty((h, w, 3), dtype=np.uint8)
    for c in range(3):
        ch = np.full((h, w), float(base_rgb[c]), dtype=np.float32)
        ch[dots] = dot_rgb[c]
        ch += noise_amp * fine + 4.0 * grain
        np.clip(ch, 0, 255, out=ch)
        tex[:, :, c] = ch.astype(np.uint8)
    return tex


def _stroma_texture(shape, rng, scale):
    h, w = shape
    coarse = imgops.value_noise(h, w, max(8, round(28 * scale)), rng) - 0.5
    fine = imgops.value_noise(h, w, max(2, round(6 * scale)), rng) - 0.5
    grain = rng.standard_normal((h, w), dtype=np.float32)
    base = (226, 172, 198)
    tex = np.empty((h, w, 3), dtype=np.uint8)
    for c in range(3):
        ch = base[c] + 26 * coarse + 12 * fine + 3.0 * grain
        np.clip(ch, 0, 255, out=ch)
        tex[:, :, c] = ch.astype(np.uint8)
    return tex


def _adipose_texture(shape, rng, scale):
    """Near-white cells separated by thin gray membranes (banded smooth noise)."""
    h, w = shape
    n1 = imgops.value_noise(h, w, max(8, round(26 * scale)), rng)
    n2 = imgops.value_noise(h, w, max(6, round(17 * scale)), rng)
    membrane = (np.abs(n1 - 0.5) < 0.035) | (np.abs(n2 - 0.5) < 0.028)
    grain = rng.standard_normal((h, w), dtype=np.float32)
    tex = np.empty((h, w, 3), dtype=np.uint8)
    base = (241, 238, 240)
    for c in range(3):
        ch = np.full((h, w), float(base[c]), dtype=np.float32)
        ch[membrane] = 196.0
        ch += 2.5 * grain
        np.clip(ch, 0, 255, out=ch)
        tex[:, :, c] = ch.astype(np.uint8)
    return tex


def _background_texture(shape, rng):
    h, w = shape
    grain = rng.standard_normal((h, w), dtype=np.float32)
    tex = np.empty((h, w, 3), dtype=np.uint8)
    for c, base in enumerate((246, 245, 246)):
        ch = base + 2.0 * grain
        np.clip(ch, 0, 255, out=ch)
        tex[:, :, c] = ch.astype(np.uint8)
    return tex


def _render_classes(class_map, spec, rng):
    scale = spec.base_magnification / 10.0
    shape = class_map.shape
    img = _background_texture(shape, rng)
    makers = {
        RoiClass.Epithelium: lambda: _speckle_texture(
            shape, rng, scale, (172, 116, 168), (74, 38, 112), 0.34, 5, 14
        ),
        RoiClass.Stroma: lambda: _stroma_texture(shape, rng, scale),
        RoiClass.Lymphocytes: lambda: _speckle_texture(
            shape, rng, scale, (136, 96, 164), (46, 26, 92), 0.52, 3.5, 10
        ),
        RoiClass.Adipose: lambda: _adipose_texture(shape, rng, scale),
        RoiClass.Miscellaneous: lambda: _speckle_texture(
            shape, rng, scale, (192, 172, 158), (120, 98, 88), 0.22, 9, 20
        ),
    }
    # Texture draws consume rng even for absent classes: keeps the stream
    # aligned across specs that differ only in layout luck.
    for cls, make in makers.items():
        tex = make()
        m = class_map == int(cls)
        if m.any():
            img[m] = tex[m]
    return img


# -- artifacts ----------------------------------------------------------------


def _bezier_points(rng, w, h, n=400):
    pts = rng.uniform([0, 0], [w, h], size=(4, 2))
    t = np.linspace(0.0, 1.0, n)[:, None]
    p = (
        (1 - t) ** 3 * pts[0]
        + 3 * (1 - t) ** 2 * t * pts[1]
        + 3 * (1 - t) * t**2 * pts[2]
        + t**3 * pts[3]
    )
    return [(float(x), float(y)) for x, y in p]


def _draw_path_mask(shape, points, width):
    h, w = shape
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    draw.line(points, fill=255, width=max(1, int(width)), joint="curve")
    r = width / 2
    for x, y in (points[0], points[-1]):
        draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    return np.asarray(img) > 0


def _apply_pen(img, spec, rng):
    h, w = img.shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    width_scale = spec.base_magnification / 2.5
    for _ in range(spec.pen_stroke_count):
        color = PEN_PALETTE[rng.integers(0, len(PEN_PALETTE))]
        width = rng.uniform(*spec.pen_width_range) * width_scale
        stroke = _draw_path_mask((h, w), _bezier_points(rng, w, h), width)
        for c in range(3):
            ch = img[:, :, c]
            ch[stroke] = np.clip(0.12 * ch[stroke] + 0.88 * color[c], 0, 255).astype(np.uint8)
        mask |= stroke
    return mask.astype(np.uint8)


def _apply_folds(img, class_map, spec, rng):
    h, w = img.shape[:2]
    tissue = class_map != int(RoiClass.Background)
    mask = np.zeros((h, w), dtype=bool)
    width_scale = spec.base_magnification / 2.5
    for _ in range(spec.fold_count):
        start = None
        for _ in range(100):
            x, y = rng.uniform(0, w), rng.uniform(0, h)
            if tissue[int(y), int(x)]:
                start = np.array([x, y])
                break
        if start is None:
            break  # no tissue anywhere; nothing to fold
        theta = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.25, 0.55) * min(w, h)
        end = start + length * np.array([np.cos(theta), np.sin(theta)])
        perp = np.array([-np.sin(theta), np.cos(theta)])
        mid = (start + end) / 2 + perp * length * rng.uniform(-0.2, 0.2)
        t = np.linspace(0.0, 1.0, 300)[:, None]
        path = (1 - t) ** 2 * start + 2 * (1 - t) * t * mid + t**2 * end
        width = rng.uniform(*spec.fold_width_range) * width_scale
        ribbon = _draw_path_mask((h, w), [(float(x), float(y)) for x, y in path], width)
        ribbon &= tissue
        if not ribbon.any():
            continue
        shift = max(2, int(width * 0.5))
        dup = np.roll(img, (shift, -shift), axis=(0, 1))
        tint = np.array([0.72, 0.66, 0.84], dtype=np.float32)
        blend = (0.55 * img[ribbon].astype(np.float32) + 0.45 * dup[ribbon]) * tint
        img[ribbon] = np.clip(blend, 0, 255).astype(np.uint8)
        mask |= ribbon
    return mask.astype(np.uint8)


def _apply_blur_spots(img, spec, rng):
    h, w = img.shape[:2]
    blur_map = np.zeros((h, w), dtype=np.uint8)
    for _ in range(spec.blur_spot_count):
        k = int(rng.integers(1, 8))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        rx = rng.uniform(0.08, 0.2) * min(w, h)
        ry = rx * rng.uniform(0.6, 1.4)
        blob, (y0, x0) = _blob_mask(h, w, cx, cy, rx, ry, rng.uniform(0, np.pi), 0.1, 4, 0.0)
        if blob is None or not blob.any():
            continue
        radius = max(1, round(BLUR_RADII[k] * spec.base_magnification / 40.0))
        bh, bw = blob.shape
        ey0, ey1 = max(0, y0 - radius), min(h, y0 + bh + radius)
        ex0, ex1 = max(0, x0 - radius), min(w, x0 + bw + radius)
        region = imgops.box_blur(img[ey0:ey1, ex0:ex1], radius)
        sub = region[y0 - ey0 : y0 - ey0 + bh, x0 - ex0 : x0 - ex0 + bw]
        view = img[y0 : y0 + bh, x0 : x0 + bw]
        view[blob] = np.clip(np.rint(sub[blob]), 0, 255).astype(np.uint8)
        blur_map[y0 : y0 + bh, x0 : x0 + bw][blob] = k
    return blur_map


# -- oracle grid ---------------------------------------------------------------


def _majority_pool_classes(class_map: np.ndarray, cell: int, n_classes: int) -> np.ndarray:
    h, w = class_map.shape
    rows, cols = h // cell, w // cell
    counts = np.zeros((n_classes, rows, cols), dtype=np.float32)
    for c in range(n_classes):
        counts[c] = imgops.mean_pool(class_map == c, cell)
    return counts.argmax(axis=0).astype(np.uint8)


def _derive_label_grid(truth: ArtifactTruth, spec: SyntheticSlideSpec) -> PatchLabelGrid:
    cell = round(spec.oracle_cell_base)
    eff = truth.class_map.copy()
    artifacts = (truth.pen_mask | truth.fold_mask) > 0
    eff[artifacts] = int(RoiClass.Artifact)
    labels = _majority_pool_classes(eff, cell, len(RoiClass))
    return PatchLabelGrid(spec.name, spec.oracle_patch_size, spec.oracle_magnification, labels)


# -- entry point ----------------------------------------------------------------


def synth_slide(spec: SyntheticSlideSpec) -> tuple[SlidePyramid, PatchLabelGrid, ArtifactTruth]:
    """Generate a deterministic synthetic slide, its oracle grid, and truth masks."""
    rng = np.random.default_rng(spec.seed)
    class_map = _layout_classes(spec, rng)
    img = _render_classes(class_map, spec, rng)
    fold_mask = _apply_folds(img, class_map, spec, rng)
    pen_mask = _apply_pen(img, spec, rng)
    blur_map = _apply_blur_spots(img, spec, rng)
    truth = ArtifactTruth(spec.base_magnification, class_map, pen_mask, fold_mask, blur_map)
    grid = _derive_label_grid(truth, spec)
    mags = [spec.base_magnification / d for d in spec.level_downsamples]
    pyramid = pyramid_from_base(spec.name, spec.base_magnification, img, mags)
    return pyramid, grid, truth


# -- truth IO -------------------------------------------------------------------

BLUR_GRAY_PALETTE = [(int(255 * k / 7),) * 3 for k in range(8)]
ROI_PALETTE = [
    (170, 80, 160),   # Epithelium
    (230, 150, 190),  # Stroma
    (90, 60, 170),    # Lymphocytes
    (250, 240, 200),  # Adipose
    (140, 170, 120),  # Miscellaneous
    (60, 60, 60),     # Artifact
    (245, 245, 245),  # Background
]


def save_truth(truth: ArtifactTruth, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    imgops.save_png(truth.class_map, root / "classes.png", palette=ROI_PALETTE)
    imgops.save_png(truth.pen_mask * 255, root / "pen.png")
    imgops.save_png(truth.fold_mask * 255, root / "fold.png")
    imgops.save_png(truth.blur_map, root / "blur.png", palette=BLUR_GRAY_PALETTE)
    (root / "truth.json").write_text(
        json.dumps({"magnification": truth.magnification}, sort_keys=True)
    )


def load_truth(path) -> ArtifactTruth:
    root = Path(path)
    meta = json.loads((root / "truth.json").read_text())
    return ArtifactTruth(
        magnification=float(meta["magnification"]),
        class_map=imgops.load_png(root / "classes.png"),
        pen_mask=(imgops.load_png(root / "pen.png") > 0).astype(np.uint8),
        fold_mask=(imgops.load_png(root / "fold.png") > 0).astype(np.uint8),
        blur_map=imgops.load_png(root / "blur.png"),
    )


# -- slide bundles (container + oracle labels + optional truth) -------------------


def write_slide_bundle(path, pyramid: SlidePyramid, grid: PatchLabelGrid,
                       truth: ArtifactTruth | None = None) -> Path:
    root = Path(path)
    write_slide(pyramid, root)
    save_patch_labels(grid, root / "labels.csv")
    if truth is not None:
        save_truth(truth, root / "truth")
    return root


def load_pool(root) -> list[tuple[SlidePyramid, PatchLabelGrid]]:
    """All slide bundles under `root`, sorted by directory name."""
    pool = []
    for d in sorted(Path(root).iterdir()):
        if not (d / "manifest.json").is_file():
            continue
        pyramid = open_slide(d)
        grid = load_patch_labels(d / "labels.csv")
        pool.append((pyramid, grid))
    if not pool:
        raise FileNotFoundError(f"no slide bundles under {root}")
    return pool


def load_truths(root) -> dict[str, ArtifactTruth]:
    truths = {}
    for d in sorted(Path(root).iterdir()):
        if (d / "truth" / "truth.json").is_file() and (d / "manifest.json").is_file():
            slide_id = json.loads((d / "manifest.json").read_text())["slide_id"]
            truths[slide_id] = load_truth(d / "truth")
    return truths


# -- per-task pool profiles --------------------------------------------------------

# Artifact-free pools for mined-collage tasks, artifact-bearing pools for
# positive-centered tasks, and mixed-artifact slides for end-to-end QC eval.
# Geometry is chosen so each task's working magnification is a stored level.
_BLUR_POOL_FRACTIONS = {
    RoiClass.Epithelium: 0.30,
    RoiClass.Stroma: 0.25,
    RoiClass.Lymphocytes: 0.10,
    RoiClass.Adipose: 0.08,
    RoiClass.Miscellaneous: 0.05,
}

_POOL_COUNTS = {"tissue": 12, "blur": 6, "fold": 6, "pen": 6, "eval": 6}


def pool_profile(task: str, seed: int, count: int | None = None) -> list[SyntheticSlideSpec]:
    """Slide specs for one task's synthetic pool; deterministic per seed."""
    if task not in _POOL_COUNTS:
        raise ValueError(f"unknown pool profile {task!r}")
    n = _POOL_COUNTS[task] if count is None else count
    child_seeds = np.random.SeedSequence(seed).generate_state(n)
    specs = []
    for i, s in enumerate(child_seeds):
        kw = dict(seed=int(s), slide_id=f"{task}-{i:02d}")
        if task == "tissue":
            kw.update(base_magnification=10.0, extent=(2048, 2048), level_downsamples=(1, 4, 16))
        elif task == "blur":
            kw.update(base_magnification=40.0, extent=(4096, 4096), level_downsamples=(1, 16),
                      class_fractions=dict(_BLUR_POOL_FRACTIONS), blob_radius_frac=(0.2, 0.35))
        elif task == "fold":
            kw.update(base_magnification=10.0, extent=(3072, 3072), level_downsamples=(1, 4, 16),
                      fold_count=3)
        elif task == "pen":
            kw.update(base_magnification=2.5, extent=(3072, 3072), level_downsamples=(1, 4),
                      pen_stroke_count=3)
        else:  # eval: every artifact kind on a modest slide
            kw.update(base_magnification=10.0, extent=(2048, 2048), level_downsamples=(1, 4, 16),
                      pen_stroke_count=2, fold_count=2, blur_spot_count=2)
        specs.append(SyntheticSlideSpec(**kw))
    return specs
