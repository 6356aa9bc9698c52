"""Per-patch region-class labels: the patch-class oracle.

Label grids arrive either from a CSV export of a patch classifier or from
the synthetic slide generator (see ``slideqc.synth``). Grids are immutable
after load and safe for concurrent use.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np


class RoiClass(IntEnum):
    """Region classes assigned by the patch oracle.

    Background is an extension beyond the six classifier classes so that
    empty glass is addressable when mining collage background cells.
    """

    Epithelium = 0
    Stroma = 1
    Lymphocytes = 2
    Adipose = 3
    Miscellaneous = 4
    Artifact = 5
    Background = 6


ROI_CLASS_NAMES = {c.name: c for c in RoiClass}

# Classes counted as diagnostically useful tissue when building foreground
# masks and when mining "foreground tissue" collage cells.
FOREGROUND_ROI_CLASSES = frozenset(
    {RoiClass.Epithelium, RoiClass.Stroma, RoiClass.Lymphocytes, RoiClass.Miscellaneous}
)


@dataclass(frozen=True)
class PatchLabelGrid:
    """2-D RoiClass labels covering a slide extent at a fixed magnification."""

    slide_id: str
    patch_size: int  # px at grid_magnification
    grid_magnification: float
    labels: np.ndarray  # 2-D uint8 of RoiClass values, [rows, cols]
    _by_class: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        bad = set(np.unique(self.labels)) - {int(c) for c in RoiClass}
        if bad:
            raise ValueError(f"labels contain invalid class values {sorted(bad)}")

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def cells_of(self, cls: RoiClass) -> list[tuple[int, int]]:
        """Row-major (row, col) cells labeled `cls`; cached, grids are immutable."""
        cached = self._by_class.get(int(cls))
        if cached is None:
            rr, cc = np.nonzero(self.labels == int(cls))
            cached = list(zip(rr.tolist(), cc.tolist()))
            self._by_class[int(cls)] = cached
        return cached


def index_by_class(g: PatchLabelGrid) -> dict[RoiClass, list[tuple[int, int]]]:
    """Partition grid cells by class; every cell appears in exactly one list."""
    return {cls: g.cells_of(cls) for cls in RoiClass}


def expected_grid_shape(extent_wh: tuple[int, int], patch_size: int) -> tuple[int, int]:
    w, h = extent_wh
    return math.ceil(h / patch_size), math.ceil(w / patch_size)


def load_patch_labels(path, expected_extent: tuple[int, int] | None = None) -> PatchLabelGrid:
    """Load a label grid: CSV with header row,col,label + JSON sidecar.

    The sidecar (same stem, .json) declares slide_id, patch_size and
    grid_magnification. When `expected_extent` (width, height px at the grid
    magnification) is given, grid dimensions are validated against
    ceil(extent / patch_size).
    """
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.is_file():
        raise FileNotFoundError(f"label sidecar missing: {sidecar}")
    meta = json.loads(sidecar.read_text())
    slide_id = meta["slide_id"]
    patch_size = int(meta["patch_size"])
    grid_mag = float(meta["grid_magnification"])

    entries = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["row", "col", "label"]:
            raise ValueError(f"{path}: expected header row,col,label, got {reader.fieldnames}")
        for rec in reader:
            cls = ROI_CLASS_NAMES.get(rec["label"])
            if cls is None:
                raise ValueError(f"{path}: unknown label token {rec['label']!r}")
            entries[(int(rec["row"]), int(rec["col"]))] = cls
    if not entries:
        raise ValueError(f"{path}: empty label file")
    rows = max(r for r, _ in entries) + 1
    cols = max(c for _, c in entries) + 1
    if len(entries) != rows * cols:
        raise ValueError(f"{path}: sparse grid, {len(entries)} cells for {rows}x{cols}")
    labels = np.zeros((rows, cols), dtype=np.uint8)
    for (r, c), cls in entries.items():
        labels[r, c] = int(cls)

    if expected_extent is not None:
        want = expected_grid_shape(expected_extent, patch_size)
        if (rows, cols) != want:
            raise ValueError(
                f"{path}: grid {rows}x{cols} does not match extent {expected_extent} "
                f"at patch size {patch_size} (expected {want[0]}x{want[1]})"
            )
    return PatchLabelGrid(slide_id, patch_size, grid_mag, labels)


def save_patch_labels(grid: PatchLabelGrid, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col", "label"])
        for r in range(grid.rows):
            for c in range(grid.cols):
                writer.writerow([r, c, RoiClass(grid.labels[r, c]).name])
    sidecar = {
        "slide_id": grid.slide_id,
        "patch_size": grid.patch_size,
        "grid_magnification": grid.grid_magnification,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
