"""Multi-resolution slide access: container IO, magnification arithmetic, tile planning.

A slide container is a directory holding ``manifest.json`` plus one lossless
PNG per pyramid level. Region reads are addressed by magnification; requests
at a non-stored magnification are resampled from the nearest stored level
with magnification >= the request (mean-pooling for integer ratios, bilinear
otherwise). Pyramids are read-only after open and safe for concurrent reads.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import imgops


class SlideError(Exception):
    """Malformed container, bad level declaration, or out-of-range request."""


@dataclass(frozen=True)
class LevelDesc:
    magnification: float
    width: int
    height: int
    file: str = ""  # PNG path relative to container dir; empty for in-memory levels


@dataclass
class SlidePyramid:
    """Multi-resolution 8-bit RGB raster with a declared base magnification.

    Level pixel data loads lazily on first read and is cached. ``_arrays``
    may be pre-populated for in-memory (synthetic) pyramids.
    """

    slide_id: str
    base_magnification: float
    levels: list[LevelDesc]
    root: Path | None = None
    _arrays: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not self.levels:
            raise SlideError(f"slide {self.slide_id!r}: no levels declared")
        mags = [lv.magnification for lv in self.levels]
        if any(b >= a for a, b in zip(mags, mags[1:])):
            raise SlideError(f"slide {self.slide_id!r}: non-monotone levels {mags}")
        if abs(mags[0] - self.base_magnification) > 1e-9:
            raise SlideError(
                f"slide {self.slide_id!r}: first level mag {mags[0]} != base {self.base_magnification}"
            )
        base = self.levels[0]
        for lv in self.levels:
            scale = lv.magnification / self.base_magnification
            for got, full in ((lv.width, base.width), (lv.height, base.height)):
                want = int(full * scale)
                if abs(got - want) > 1:
                    raise SlideError(
                        f"slide {self.slide_id!r}: level {lv.magnification}x dims {got} "
                        f"inconsistent with base (expected ~{want})"
                    )

    # -- level arithmetic ---------------------------------------------------

    def stored_level(self, mag: float) -> int | None:
        for i, lv in enumerate(self.levels):
            if abs(lv.magnification - mag) < 1e-9:
                return i
        return None

    def source_level(self, mag: float) -> int:
        """Index of the lowest-magnification stored level with mag >= request."""
        if mag > self.base_magnification + 1e-9:
            raise SlideError(
                f"slide {self.slide_id!r}: requested {mag}x exceeds base {self.base_magnification}x"
            )
        best = 0
        for i, lv in enumerate(self.levels):
            if lv.magnification >= mag - 1e-9:
                best = i
        return best

    def extent_at(self, mag: float) -> tuple[int, int]:
        """(width, height) of the virtual raster at `mag`."""
        idx = self.stored_level(mag)
        if idx is not None:
            lv = self.levels[idx]
            return lv.width, lv.height
        src = self.levels[self.source_level(mag)]
        ratio = src.magnification / mag
        return int(src.width / ratio), int(src.height / ratio)

    def level_array(self, idx: int) -> np.ndarray:
        with self._lock:
            arr = self._arrays.get(idx)
            if arr is None:
                lv = self.levels[idx]
                if not lv.file or self.root is None:
                    raise SlideError(f"slide {self.slide_id!r}: level {idx} has no pixel source")
                arr = imgops.load_png(self.root / lv.file)
                if arr.ndim != 3 or arr.shape[:2] != (lv.height, lv.width):
                    raise SlideError(
                        f"slide {self.slide_id!r}: level file {lv.file} does not match manifest dims"
                    )
                self._arrays[idx] = arr
        return arr

    # -- region reads -------------------------------------------------------

    def read_region(self, mag: float, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Read a w x h RGB region at `mag`; (x, y) in the virtual raster at `mag`."""
        if w <= 0 or h <= 0:
            raise ValueError(f"region size must be positive, got {w}x{h}")
        ew, eh = self.extent_at(mag)  # raises on mag > base
        if x < 0 or y < 0 or x + w > ew or y + h > eh:
            raise SlideError(
                f"slide {self.slide_id!r}: region ({x},{y},{w},{h}) out of bounds "
                f"for {ew}x{eh} extent at {mag}x"
            )
        idx = self.stored_level(mag)
        if idx is not None:
            arr = self.level_array(idx)
            return arr[y : y + h, x : x + w].copy()
        src_idx = self.source_level(mag)
        src = self.levels[src_idx]
        ratio = src.magnification / mag
        k = round(ratio)
        arr = self.level_array(src_idx)
        if abs(ratio - k) < 1e-9:
            sx, sy = x * k, y * k
            block = arr[sy : sy + h * k, sx : sx + w * k]
            return imgops.mean_pool_u8(block, k)
        sx = int(x * ratio)
        sy = int(y * ratio)
        sw = max(1, int(round(w * ratio)))
        sh = max(1, int(round(h * ratio)))
        sw = min(sw, src.width - sx)
        sh = min(sh, src.height - sy)
        return imgops.resize_bilinear(arr[sy : sy + sh, sx : sx + sw], w, h)


@dataclass(frozen=True)
class TileGridSpec:
    magnification: float
    tile_size: int
    overlap: int
    extent: tuple[int, int]  # (width, height) at `magnification`
    tiles: tuple[tuple[int, int, int, int], ...]  # (x, y, w, h), row-major


def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    xs = list(range(0, extent - tile + 1, stride))
    if xs[-1] + tile < extent:
        xs.append(extent - tile)
    return xs


def plan_tiles(p: SlidePyramid, mag: float, tile: int, overlap: int = 0) -> TileGridSpec:
    """Deterministic row-major tile grid covering the full extent at `mag`.

    Interior tiles share exactly `overlap` px; the final tile per axis is
    clamped so it ends at the extent (border tiles are smaller only when the
    whole extent is smaller than one tile).
    """
    if overlap < 0 or tile <= overlap:
        raise ValueError(f"need tile > overlap >= 0, got tile={tile} overlap={overlap}")
    ew, eh = p.extent_at(mag)
    stride = tile - overlap
    tiles = []
    for y in _axis_origins(eh, tile, stride):
        for x in _axis_origins(ew, tile, stride):
            tiles.append((x, y, min(tile, ew - x), min(tile, eh - y)))
    return TileGridSpec(mag, tile, overlap, (ew, eh), tuple(tiles))


# -- container IO -----------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def open_slide(path) -> SlidePyramid:
    """Open a slide container directory. Headers only; no pixel data is decoded."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
        slide_id = manifest["slide_id"]
        base_mag = float(manifest["base_magnification"])
        levels = [
            LevelDesc(float(lv["magnification"]), int(lv["width"]), int(lv["height"]), lv["file"])
            for lv in manifest["levels"]
        ]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
        raise SlideError(f"malformed manifest {manifest_path}: {e}") from e
    pyramid = SlidePyramid(slide_id, base_mag, levels, root=root)
    for lv in levels:
        f = root / lv.file
        if not f.is_file():
            raise FileNotFoundError(f"level file missing: {f}")
        with Image.open(f) as img:  # header read only
            if img.size != (lv.width, lv.height):
                raise SlideError(f"{f}: PNG header {img.size} != manifest {(lv.width, lv.height)}")
    return pyramid


def write_slide(p: SlidePyramid, path) -> Path:
    """Write a pyramid (all levels loaded/loadable) as a slide container directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    levels = []
    for i, lv in enumerate(p.levels):
        fname = lv.file or f"level_{lv.magnification:g}x.png"
        imgops.save_png(p.level_array(i), root / fname)
        levels.append(
            {"magnification": lv.magnification, "width": lv.width, "height": lv.height, "file": fname}
        )
    manifest = {
        "slide_id": p.slide_id,
        "base_magnification": p.base_magnification,
        "levels": levels,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def pyramid_from_base(slide_id: str, base_mag: float, base: np.ndarray, level_mags: list[float]) -> SlidePyramid:
    """Build an in-memory pyramid from a base raster; lower levels are mean-pooled.

    `level_mags` must start at base_mag and decrease by integer factors.
    """
    if abs(level_mags[0] - base_mag) > 1e-9:
        raise ValueError("first level magnification must equal base")
    levels = []
    arrays = {}
    cur = base
    cur_mag = base_mag
    for i, mag in enumerate(level_mags):
        ratio = cur_mag / mag
        k = round(ratio)
        if abs(ratio - k) > 1e-9:
            raise ValueError(f"level mag {mag} is not an integer factor below {cur_mag}")
        if k > 1:
            cur = imgops.mean_pool_u8(cur, k)
            cur_mag = mag
        levels.append(LevelDesc(mag, cur.shape[1], cur.shape[0], f"level_{mag:g}x.png"))
        arrays[i] = cur
    p = SlidePyramid(slide_id, base_mag, levels)
    p._arrays.update(arrays)
    return p
