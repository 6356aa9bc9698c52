"""Foreground-mask agreement evaluation between two QC pipelines.

Per-slide Dice between binary masks on a common grid, a five-bucket
agreement histogram, per-bucket slide sampling for review rounds, and
center-pixel disagreement patch mining (SET-1: external says foreground
where ours says background; SET-2: the converse). External masks are
ingested from files; this module never runs the external tool.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgops
from .slide import SlidePyramid

BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
MIN_CENTER_SPACING = 256  # px between disagreement patch centers
PATCH_SIZE = 512


def _check_binary(name: str, m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and int(m.max(initial=0)) > 1:
        raise ValueError(f"{name} must be binary {{0,1}}")


@dataclass(frozen=True)
class MaskPair:
    slide_id: str
    mask_a: np.ndarray
    mask_b: np.ndarray
    source_a: str = "ours"
    source_b: str = "external"

    def __post_init__(self):
        _check_binary("mask_a", self.mask_a)
        _check_binary("mask_b", self.mask_b)
        if self.mask_a.shape != self.mask_b.shape:
            raise ValueError(f"mask dims differ: {self.mask_a.shape} vs {self.mask_b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a AND b| / (|a| + |b|); 1.0 when both masks are empty, 0.0 when
    exactly one is."""
    _check_binary("a", a)
    _check_binary("b", b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    sa = int(np.count_nonzero(a))
    sb = int(np.count_nonzero(b))
    if sa + sb == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(a, b)))
    return 2.0 * inter / (sa + sb)


def bucket_of(d: float) -> int:
    """Half-open bins over BIN_EDGES; the top bin [0.8, 1.0] is closed."""
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"dice {d} outside [0, 1]")
    return min(int(np.searchsorted(BIN_EDGES, d, side="right")) - 1, len(BIN_EDGES) - 2)


@dataclass
class AgreementHistogram:
    edges: tuple = BIN_EDGES
    counts: list = field(default_factory=lambda: [0] * (len(BIN_EDGES) - 1))
    records: list = field(default_factory=list)  # (slide_id, dice, bin), sorted by slide_id


def bucketize(records: list[tuple[str, float]]) -> AgreementHistogram:
    """Assign each (slide_id, dice) record to a bin; assembly is a
    deterministic fold over slide ids in sorted order."""
    h = AgreementHistogram()
    for slide_id, d in sorted(records, key=lambda r: r[0]):
        b = bucket_of(d)
        h.counts[b] += 1
        h.records.append((slide_id, float(d), b))
    return h


def sample_bucket_slides(h: AgreementHistogram, k: int = 20, seed=None) -> list[str]:
    """min(k, bin size) slide ids per bin, uniform without replacement,
    deterministic per seed. Empty bins contribute nothing."""
    if not h.records:
        raise ValueError("empty histogram")
    rng = np.random.default_rng(seed)
    chosen: list[str] = []
    for b in range(len(h.edges) - 1):
        ids = [sid for sid, _d, bb in h.records if bb == b]
        take = min(k, len(ids))
        if take:
            idx = rng.permutation(len(ids))[:take]
            chosen.extend(ids[i] for i in sorted(idx))
    return chosen


# -- disagreement patch mining -----------------------------------------------------


@dataclass
class DisagreementPatch:
    center: tuple[int, int]  # (x, y) at the mining magnification
    image: np.ndarray
    crop_a: np.ndarray
    crop_b: np.ndarray


@dataclass
class DisagreementSets:
    slide_id: str
    magnification: float
    set1: list[DisagreementPatch] = field(default_factory=list)
    set2: list[DisagreementPatch] = field(default_factory=list)


def _pick_spaced(cands: np.ndarray, n: int, rng: np.random.Generator, width: int) -> list[tuple[int, int]]:
    """Randomly ordered greedy pick of up to n centers with pairwise
    Euclidean spacing >= MIN_CENTER_SPACING."""
    centers: list[tuple[int, int]] = []
    if cands.size == 0:
        return centers
    order = rng.permutation(cands.size)
    for idx in order:
        flat = int(cands[idx])
        y, x = divmod(flat, width)
        if all((x - cx) ** 2 + (y - cy) ** 2 >= MIN_CENTER_SPACING**2 for cx, cy in centers):
            centers.append((x, y))
            if len(centers) == n:
                break
    return centers


def mine_disagreements(p: SlidePyramid, pair: MaskPair, mag: float, n: int = 5,
                       seed=None) -> DisagreementSets:
    """Up to n patches per direction whose CENTER pixel disagrees:
    SET-1 where mask_b=1 and mask_a=0, SET-2 the converse. Patch windows are
    border-clamped 512 px crops of the image and both masks."""
    ew, eh = p.extent_at(mag)
    if pair.mask_a.shape != (eh, ew):
        raise ValueError(f"masks {pair.mask_a.shape} are not registered to {mag}x extent {(eh, ew)}")
    rng = np.random.default_rng(seed)
    a = pair.mask_a.astype(bool)
    b = pair.mask_b.astype(bool)
    out = DisagreementSets(pair.slide_id, mag)
    for name, cand_mask in (("set1", b & ~a), ("set2", a & ~b)):
        patches = []
        for x, y in _pick_spaced(np.flatnonzero(cand_mask), n, rng, ew):
            x0 = min(max(x - PATCH_SIZE // 2, 0), max(ew - PATCH_SIZE, 0))
            y0 = min(max(y - PATCH_SIZE // 2, 0), max(eh - PATCH_SIZE, 0))
            w = min(PATCH_SIZE, ew)
            h = min(PATCH_SIZE, eh)
            img = p.read_region(mag, x0, y0, w, h)
            patches.append(DisagreementPatch(
                (x, y), img,
                np.ascontiguousarray(pair.mask_a[y0 : y0 + h, x0 : x0 + w]),
                np.ascontiguousarray(pair.mask_b[y0 : y0 + h, x0 : x0 + w]),
            ))
        setattr(out, name, patches)
    return out


# -- verdict tallies ---------------------------------------------------------------


def agreement_stats(verdicts: list[tuple[str, str]], stratum_of: dict[str, str]) -> dict:
    """Counts and fractions per (stratum, verdict token).

    Every item id must be present in stratum_of.
    """
    strata: dict[str, dict[str, int]] = {}
    for item_id, verdict in verdicts:
        if item_id not in stratum_of:
            raise KeyError(f"unknown item id {item_id!r}")
        strata.setdefault(stratum_of[item_id], {}).setdefault(verdict, 0)
        strata[stratum_of[item_id]][verdict] += 1
    out: dict = {"strata": {}, "total": {}}
    totals: dict[str, int] = {}
    for s in sorted(strata):
        counts = dict(sorted(strata[s].items()))
        n = sum(counts.values())
        out["strata"][s] = {
            "counts": counts,
            "total": n,
            "fractions": {v: c / n for v, c in counts.items()},
        }
        for v, c in counts.items():
            totals[v] = totals.get(v, 0) + c
    n = sum(totals.values())
    out["total"] = {
        "counts": dict(sorted(totals.items())),
        "total": n,
        "fractions": {v: c / n for v, c in sorted(totals.items())} if n else {},
    }
    return out


# -- file interchange ---------------------------------------------------------------


def save_mask_file(mask: np.ndarray, png_path, slide_id: str, magnification: float,
                   source: str) -> None:
    """Binary mask PNG plus JSON sidecar (same stem, .json)."""
    _check_binary("mask", mask)
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    imgops.save_png((mask > 0).astype(np.uint8) * 255, png_path)
    png_path.with_suffix(".json").write_text(json.dumps(
        {"slide_id": slide_id, "magnification": magnification, "source": source},
        sort_keys=True))


def load_mask_file(png_path) -> tuple[np.ndarray, dict]:
    png_path = Path(png_path)
    mask = (imgops.load_png(png_path) > 0).astype(np.uint8)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    meta = json.loads(png_path.with_suffix(".json").read_text())
    return mask, meta


def load_mask_dir(root) -> dict[str, tuple[np.ndarray, dict]]:
    """All mask files under root, keyed by sidecar slide_id."""
    out = {}
    for png in sorted(Path(root).glob("*.png")):
        if not png.with_suffix(".json").is_file():
            continue
        mask, meta = load_mask_file(png)
        out[meta["slide_id"]] = (mask, meta)
    if not out:
        raise FileNotFoundError(f"no mask files under {root}")
    return out


def write_agreement_csv(h: AgreementHistogram, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slide_id", "dice", "bin"])
        for sid, d, b in h.records:
            w.writerow([sid, f"{d:.6f}", b])


def read_agreement_csv(path) -> AgreementHistogram:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return bucketize([(r["slide_id"], float(r["dice"])) for r in rows])


def save_sets(sets: DisagreementSets, root) -> Path:
    root = Path(root)
    for name, patches in (("SET1", sets.set1), ("SET2", sets.set2)):
        for i, p in enumerate(patches):
            d = root / name / f"patch_{i:03d}"
            d.mkdir(parents=True, exist_ok=True)
            imgops.save_png(p.image, d / "image.png")
            imgops.save_png(p.crop_a * 255, d / "mask_a.png")
            imgops.save_png(p.crop_b * 255, d / "mask_b.png")
            (d / "meta.json").write_text(json.dumps({
                "slide_id": sets.slide_id, "magnification": sets.magnification,
                "center": list(p.center), "set": name,
            }, sort_keys=True))
    (root / "sets.json").write_text(json.dumps({
        "slide_id": sets.slide_id, "magnification": sets.magnification,
        "set1_count": len(sets.set1), "set2_count": len(sets.set2),
    }, sort_keys=True))
    return root
