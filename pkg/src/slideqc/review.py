"""Blind A/B adjudication backend.

Builds randomized review sessions over mask pairs or disagreement patches,
serves items over HTTP, records verdicts, and exports unblinded results.
Item order and the left/right placement of the two sources are fixed by the
session seed. No UI-facing payload ever carries a source tag; assets are
addressed by opaque content-hash refs. State is an append-only JSON-lines
event log per session, fsynced before every ack and replayed on start, so
acked verdicts survive a crash.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VERDICTS = ("side1", "side2", "inconclusive")


class ReviewError(Exception):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


@dataclass
class ReviewItem:
    item_id: str
    stratum: str
    image_ref: str
    overlay_a_ref: str
    overlay_b_ref: str
    side_bit: int = 0        # 0: source A left (side1); 1: source A right
    source_a: str = "A"
    source_b: str = "B"
    verdict: str = "pending"


@dataclass
class ReviewSession:
    session_id: str
    reviewer: str
    seed: int
    items: list[ReviewItem]
    order: list[int]
    audit: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def done_count(self) -> int:
        return sum(1 for it in self.items if it.verdict != "pending")


def _permutations(seed: int, n: int) -> tuple[list[int], list[int]]:
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(n)]
    bits = [int(b) for b in rng.integers(0, 2, size=n)]
    return order, bits


class ReviewStore:
    """Session registry backed by one JSONL event log per session."""

    def __init__(self, state_dir, assets_dir):
        self.state_dir = Path(state_dir)
        self.assets_dir = Path(assets_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, ReviewSession] = {}
        self._assets: dict[str, Path] = {}
        self._lock = threading.Lock()
        self._replay()

    # -- assets ---------------------------------------------------------------

    def register_asset(self, rel_path: str) -> str:
        """Opaque content-hash ref for a file under the assets root."""
        path = (self.assets_dir / rel_path).resolve()
        if not str(path).startswith(str(self.assets_dir.resolve()) + os.sep):
            raise ReviewError(f"asset path {rel_path!r} escapes the assets root")
        if not path.is_file():
            raise ReviewError(f"asset not found: {rel_path!r}", status=400)
        ref = hashlib.sha256(path.read_bytes()).hexdigest()[:24]
        self._assets[ref] = path
        return ref

    def asset_path(self, ref: str) -> Path:
        try:
            return self._assets[ref]
        except KeyError:
            raise ReviewError(f"unknown asset ref {ref!r}", status=404) from None

    # -- event log ------------------------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.state_dir / f"{session_id}.jsonl"

    def _append(self, session_id: str, event: dict) -> None:
        event = {**event, "ts": time.time()}
        with open(self._log_path(session_id), "a") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def _replay(self) -> None:
        for log in sorted(self.state_dir.glob("*.jsonl")):
            lines = log.read_text().split("\n")
            for i, line in enumerate(lines):
                line = line.strip()
                if not line:
                    continue
                try:
                    ev = json.loads(line)
                except json.JSONDecodeError:
                    # A torn final line is an unacked write (fsync precedes
                    # every ack), so dropping it loses nothing. Torn earlier
                    # lines mean real corruption.
                    if any(l.strip() for l in lines[i + 1 :]):
                        raise ReviewError(f"{log}: corrupt event at line {i + 1}")
                    break
                self._apply(ev, replay=True)

    def _apply(self, ev: dict, replay: bool = False) -> None:
        kind = ev["type"]
        if kind == "create":
            items = [ReviewItem(**rec) for rec in ev["items"]]
            s = ReviewSession(ev["session_id"], ev["reviewer"], ev["seed"], items, ev["order"])
            self.sessions[s.session_id] = s
            if replay:
                for ref, rel in ev.get("asset_paths", {}).items():
                    path = (self.assets_dir / rel).resolve()
                    if path.is_file():
                        self._assets[ref] = path
        elif kind == "verdict":
            s = self.sessions[ev["session_id"]]
            self._item(s, ev["item_id"]).verdict = ev["verdict"]
        elif kind == "amend":
            s = self.sessions[ev["session_id"]]
            s.audit.append({k: ev[k] for k in ("item_id", "verdict", "reason", "ts") if k in ev})

    # -- operations -------------------------------------------------------------

    def create_session(self, items: list[dict], seed: int, reviewer: str = "") -> ReviewSession:
        """items: dicts with item_id, stratum, image, overlay_a, overlay_b
        (paths relative to the assets root) and optional source_a/source_b tags."""
        if not items:
            raise ReviewError("a session needs at least one item")
        order, bits = _permutations(seed, len(items))
        records = []
        seen = set()
        for rec, bit in zip(items, bits):
            for k in ("item_id", "image", "overlay_a", "overlay_b"):
                if k not in rec:
                    raise ReviewError(f"item missing field {k!r}")
            if rec["item_id"] in seen:
                raise ReviewError(f"duplicate item id {rec['item_id']!r}")
            seen.add(rec["item_id"])
            records.append({
                "item_id": rec["item_id"],
                "stratum": rec.get("stratum", ""),
                "image_ref": self.register_asset(rec["image"]),
                "overlay_a_ref": self.register_asset(rec["overlay_a"]),
                "overlay_b_ref": self.register_asset(rec["overlay_b"]),
                "side_bit": bit,
                "source_a": rec.get("source_a", "A"),
                "source_b": rec.get("source_b", "B"),
            })
        session_id = uuid.uuid4().hex[:12]
        # Server-side ref -> relative path map so replay can re-register assets.
        paths = {}
        for rec, it in zip(items, records):
            paths[it["image_ref"]] = rec["image"]
            paths[it["overlay_a_ref"]] = rec["overlay_a"]
            paths[it["overlay_b_ref"]] = rec["overlay_b"]
        with self._lock:
            event = {
                "type": "create", "session_id": session_id, "reviewer": reviewer,
                "seed": int(seed), "order": order, "items": records,
                "asset_paths": paths,
            }
            self._append(session_id, event)
            self._apply(event)
        return self.sessions[session_id]

    def get(self, session_id: str) -> ReviewSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise ReviewError(f"unknown session {session_id!r}", status=404) from None

    @staticmethod
    def _item(s: ReviewSession, item_id: str) -> ReviewItem:
        for it in s.items:
            if it.item_id == item_id:
                return it
        raise ReviewError(f"unknown item {item_id!r}", status=404)

    @staticmethod
    def _sides(it: ReviewItem) -> tuple[str, str]:
        """(left ref, right ref): side1 is the left panel."""
        if it.side_bit == 0:
            return it.overlay_a_ref, it.overlay_b_ref
        return it.overlay_b_ref, it.overlay_a_ref

    def next_item(self, session_id: str) -> dict:
        """UI payload for the first pending item in session order; carries
        refs and stratum only, never source tags."""
        s = self.get(session_id)
        with s.lock:
            total = len(s.items)
            for pos in s.order:
                it = s.items[pos]
                if it.verdict == "pending":
                    left, right = self._sides(it)
                    return {
                        "item_id": it.item_id,
                        "stratum": it.stratum,
                        "image": it.image_ref,
                        "overlay_left": left,
                        "overlay_right": right,
                        "progress": {"done": s.done_count(), "total": total},
                    }
            return {"complete": True,
                    "progress": {"done": s.done_count(), "total": total}}

    def record_verdict(self, session_id: str, item_id: str, verdict: str) -> dict:
        if verdict not in VERDICTS:
            raise ReviewError(f"invalid verdict {verdict!r}; expected one of {VERDICTS}")
        s = self.get(session_id)
        with s.lock:
            it = self._item(s, item_id)
            if it.verdict != "pending":
                if it.verdict == verdict:
                    return {"ok": True, "item_id": item_id, "verdict": verdict,
                            "progress": {"done": s.done_count(), "total": len(s.items)}}
                raise ReviewError(
                    f"item {item_id!r} already finalized as {it.verdict!r}", status=409)
            self._append(session_id, {"type": "verdict", "session_id": session_id,
                                      "item_id": item_id, "verdict": verdict})
            it.verdict = verdict
            return {"ok": True, "item_id": item_id, "verdict": verdict,
                    "progress": {"done": s.done_count(), "total": len(s.items)}}

    def amend_verdict(self, session_id: str, item_id: str, verdict: str,
                      reason: str = "") -> dict:
        """Audit-trail correction: the original verdict stays authoritative in
        exports; the amendment is recorded as its own event."""
        if verdict not in VERDICTS:
            raise ReviewError(f"invalid verdict {verdict!r}")
        s = self.get(session_id)
        with s.lock:
            it = self._item(s, item_id)
            if it.verdict == "pending":
                raise ReviewError(f"item {item_id!r} has no verdict to amend", status=409)
            ev = {"type": "amend", "session_id": session_id, "item_id": item_id,
                  "verdict": verdict, "reason": reason}
            self._append(session_id, ev)
            s.audit.append({"item_id": item_id, "verdict": verdict, "reason": reason})
            return {"ok": True, "amended": item_id}

    def export_csv(self, session_id: str) -> str:
        """Unblinded rows in original item order; pending rows flagged."""
        s = self.get(session_id)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["item_id", "stratum", "source_left", "source_right", "verdict"])
        for it in s.items:
            left, right = (it.source_a, it.source_b) if it.side_bit == 0 else (it.source_b, it.source_a)
            if it.verdict == "side1":
                verdict = left
            elif it.verdict == "side2":
                verdict = right
            else:
                verdict = it.verdict  # inconclusive or pending
            w.writerow([it.item_id, it.stratum, left, right, verdict])
        return buf.getvalue()


# -- HTTP API ----------------------------------------------------------------------


def create_app(store: ReviewStore, ui_dir=None):
    from fastapi import FastAPI, Request
    from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse

    app = FastAPI(title="slideqc review", docs_url=None, redoc_url=None)

    @app.exception_handler(ReviewError)
    async def _review_error(_req: Request, exc: ReviewError):
        return JSONResponse({"error": str(exc)}, status_code=exc.status)

    @app.post("/sessions")
    async def create_session(body: dict):
        try:
            items = body["items"]
            seed = int(body["seed"])
        except (KeyError, TypeError, ValueError):
            raise ReviewError("body must carry items and an integer seed")
        s = store.create_session(items, seed, str(body.get("reviewer", "")))
        return {"session_id": s.session_id, "total": len(s.items)}

    @app.get("/sessions/{session_id}/next")
    async def next_item(session_id: str):
        return store.next_item(session_id)

    @app.post("/sessions/{session_id}/verdicts")
    async def record_verdict(session_id: str, body: dict):
        item_id = body.get("item_id")
        verdict = body.get("verdict")
        if verdict == "left":
            verdict = "side1"
        elif verdict == "right":
            verdict = "side2"
        if not item_id or not verdict:
            raise ReviewError("body must carry item_id and verdict")
        return store.record_verdict(session_id, str(item_id), str(verdict))

    @app.post("/sessions/{session_id}/amendments")
    async def amend(session_id: str, body: dict):
        return store.amend_verdict(session_id, str(body.get("item_id", "")),
                                   str(body.get("verdict", "")), str(body.get("reason", "")))

    @app.get("/sessions/{session_id}/export.csv")
    async def export(session_id: str):
        return PlainTextResponse(store.export_csv(session_id), media_type="text/csv")

    @app.get("/assets/{ref}")
    async def asset(ref: str):
        return FileResponse(store.asset_path(ref), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
