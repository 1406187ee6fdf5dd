"""Screen perception: text boxes, keyword matching, state identification.

All matching happens on normalized text (Unicode NFKC, lowercased,
whitespace collapsed). A keyword matches a box either exactly after
normalization or fuzzily via normalized Levenshtein similarity; exact
matches always win over fuzzy ones.
"""

from __future__ import annotations

import json
import socket
import subprocess
import threading
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from .errors import ExtractorUnavailable, ImageUnreadable
from .fsm import KeywordDetector, KeywordSpec, WorkflowFSM

MIN_CONFIDENCE = 0.30
FUZZY_THRESHOLD = 0.85


@dataclass(frozen=True)
class ScreenSnapshot:
    """One captured screen: an image reference plus viewport geometry."""

    image_ref: str
    viewport_px: tuple[int, int]
    captured_at_ms: int = 0


@dataclass(frozen=True)
class TextBox:
    """A recognized text span with its pixel bounding box and confidence."""

    text: str
    bbox_px: tuple[int, int, int, int]  # x, y, w, h
    confidence: float = 1.0

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox_px
        return (x + w / 2.0, y + h / 2.0)


@dataclass(frozen=True)
class StateMatch:
    state_id: str
    score: float
    matched: Mapping[str, TextBox]


def normalize_text(text: str) -> str:
    """NFKC-normalize, lowercase, and collapse runs of whitespace."""
    return " ".join(unicodedata.normalize("NFKC", text).lower().split())


def levenshtein(a: str, b: str) -> int:
    """Classic edit distance over two (already normalized) strings."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """Normalized Levenshtein similarity in [0, 1] on normalized text.

    The length gap lower-bounds the distance, so pairs whose gap alone
    pushes them under the fuzzy threshold short-circuit to that bound
    (an upper bound on the true similarity, still below the threshold).
    """
    na, nb = normalize_text(a), normalize_text(b)
    if na == nb:
        return 1.0
    longest = max(len(na), len(nb))
    if longest == 0:
        return 1.0
    gap = abs(len(na) - len(nb)) / longest
    if gap > (1.0 - FUZZY_THRESHOLD) + 1e-9:
        return 1.0 - gap
    return 1.0 - levenshtein(na, nb) / longest


def _in_region(box: TextBox, hint: tuple[float, float, float, float], viewport_px: tuple[int, int]) -> bool:
    vw, vh = viewport_px
    if vw <= 0 or vh <= 0:
        return True
    cx, cy = box.center
    x0, y0, x1, y1 = hint
    return x0 * vw <= cx <= x1 * vw and y0 * vh <= cy <= y1 * vh


def locate_keyword(
    boxes: Sequence[TextBox],
    spec: KeywordSpec,
    viewport_px: tuple[int, int],
    min_confidence: float = MIN_CONFIDENCE,
    fuzzy_threshold: float = FUZZY_THRESHOLD,
) -> Optional[TextBox]:
    """Best box matching ``spec``, or None.

    Exact (post-normalization) matches beat fuzzy ones regardless of
    similarity; within a tier, the topmost box wins (smallest y, then x).
    """
    want = normalize_text(spec.text)
    exact: list[TextBox] = []
    fuzzy: list[tuple[float, TextBox]] = []
    for box in boxes:
        if box.confidence < min_confidence:
            continue
        if spec.region_hint is not None and not _in_region(box, spec.region_hint, viewport_px):
            continue
        have = normalize_text(box.text)
        if have == want:
            exact.append(box)
            continue
        sim = similarity(have, want)
        if sim >= fuzzy_threshold:
            fuzzy.append((sim, box))
    if exact:
        return min(exact, key=lambda b: (b.bbox_px[1], b.bbox_px[0]))
    if fuzzy:
        best = max(s for s, _ in fuzzy)
        tied = [b for s, b in fuzzy if s == best]
        return min(tied, key=lambda b: (b.bbox_px[1], b.bbox_px[0]))
    return None


def detector_score(
    boxes: Sequence[TextBox],
    detector: KeywordDetector,
    viewport_px: tuple[int, int],
) -> tuple[float, dict[str, TextBox]]:
    """Score a detector against a screen; returns (score, matches by keyword)."""
    matched: dict[str, TextBox] = {}
    n_req = 0
    for spec in detector.required:
        box = locate_keyword(boxes, spec, viewport_px)
        if box is not None:
            matched[spec.text] = box
            n_req += 1
    n_opt = 0
    for spec in detector.optional:
        box = locate_keyword(boxes, spec, viewport_px)
        if box is not None:
            matched.setdefault(spec.text, box)
            n_opt += 1
    score = min(1.0, (n_req + 0.1 * n_opt) / len(detector.required))
    return score, matched


def detector_fires(
    boxes: Sequence[TextBox], detector: KeywordDetector, viewport_px: tuple[int, int]
) -> bool:
    score, _ = detector_score(boxes, detector, viewport_px)
    return score >= detector.min_score


def identify_state(
    fsm: WorkflowFSM, boxes: Sequence[TextBox], viewport_px: tuple[int, int]
) -> Optional[StateMatch]:
    """Evaluate every state's detector; highest score at or above its own
    min_score wins, ties broken by lexicographic state id."""
    best: Optional[StateMatch] = None
    for sid in sorted(fsm.states):
        score, matched = detector_score(boxes, fsm.states[sid].detector, viewport_px)
        if score < fsm.states[sid].detector.min_score:
            continue
        if best is None or score > best.score:
            best = StateMatch(sid, score, matched)
    return best


def anchor_point(
    box: TextBox, offset: tuple[float, float], viewport_px: tuple[int, int]
) -> tuple[int, int]:
    """Pixel point at ``offset`` (in box-size units) from the box center,
    clamped into the viewport."""
    x, y, w, h = box.bbox_px
    px = x + w / 2.0 + offset[0] * w
    py = y + h / 2.0 + offset[1] * h
    vw, vh = viewport_px
    px = min(max(round(px), 0), max(vw - 1, 0))
    py = min(max(round(py), 0), max(vh - 1, 0))
    return int(px), int(py)


# --- text extraction backends ---


class TextExtraction(Protocol):
    """Anything that turns a snapshot image into text boxes."""

    def extract(self, image_path: Path) -> list[TextBox]: ...


def boxes_path_for(image_path: Path) -> Path:
    """Ground-truth boxes live next to the image as <stem>.boxes.json."""
    return image_path.with_suffix(".boxes.json")


def load_boxes_file(path: Path) -> list[TextBox]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    boxes = []
    for item in raw.get("boxes", raw) if isinstance(raw, dict) else raw:
        boxes.append(
            TextBox(
                text=item["text"],
                bbox_px=(int(item["x"]), int(item["y"]), int(item["w"]), int(item["h"])),
                confidence=float(item.get("conf", 1.0)),
            )
        )
    return boxes


class FixtureExtractor:
    """Reads ground-truth boxes written by the mock site renderer."""

    def extract(self, image_path: Path) -> list[TextBox]:
        image_path = Path(image_path)
        if not image_path.exists():
            raise ImageUnreadable(f"snapshot image missing: {image_path}")
        boxes_path = boxes_path_for(image_path)
        if not boxes_path.exists():
            raise ImageUnreadable(f"no ground-truth boxes next to {image_path}")
        try:
            return load_boxes_file(boxes_path)
        except (OSError, ValueError, KeyError) as exc:
            raise ImageUnreadable(f"bad boxes file {boxes_path}: {exc}") from exc


class _LineChannel(Protocol):
    def send_line(self, line: str) -> None: ...
    def recv_line(self) -> str: ...
    def close(self) -> None: ...


class _StdioChannel:
    def __init__(self, argv: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        except OSError as exc:
            raise ExtractorUnavailable(f"cannot start extractor {argv!r}: {exc}") from exc

    def send_line(self, line: str) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExtractorUnavailable(f"extractor process went away: {exc}") from exc

    def recv_line(self) -> str:
        assert self._proc.stdout is not None
        line = self._proc.stdout.readline()
        if not line:
            raise ExtractorUnavailable("extractor process closed its output")
        return line

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class _TcpChannel:
    def __init__(self, host: str, port: int):
        try:
            self._sock = socket.create_connection((host, port), timeout=30)
        except OSError as exc:
            raise ExtractorUnavailable(f"cannot reach extractor at {host}:{port}: {exc}") from exc
        self._reader = self._sock.makefile("r", encoding="utf-8")

    def send_line(self, line: str) -> None:
        try:
            self._sock.sendall((line + "\n").encode("utf-8"))
        except OSError as exc:
            raise ExtractorUnavailable(f"extractor connection lost: {exc}") from exc

    def recv_line(self) -> str:
        line = self._reader.readline()
        if not line:
            raise ExtractorUnavailable("extractor connection closed")
        return line

    def close(self) -> None:
        try:
            self._reader.close()
            self._sock.close()
        except OSError:
            pass


class WireExtractor:
    """Talks line-delimited JSON to an external text recognition service.

    Request:  {"id": <int>, "image_path": <absolute path>}
    Response: {"id": <same int>, "boxes": [{"text","x","y","w","h","conf"}, ...]}
              or {"id": ..., "error": "<reason>"}

    Responses come back in request order on a given connection.
    """

    def __init__(self, channel: _LineChannel):
        self._channel = channel
        self._lock = threading.Lock()
        self._next_id = 1

    @classmethod
    def from_endpoint(cls, endpoint: str) -> "WireExtractor":
        """Build from 'cmd:<argv...>' or 'tcp:<host>:<port>'."""
        if endpoint.startswith("tcp:"):
            _, host, port = endpoint.split(":", 2)
            return cls(_TcpChannel(host, int(port)))
        if endpoint.startswith("cmd:"):
            return cls(_StdioChannel(endpoint[4:].split()))
        raise ValueError(f"unrecognized extractor endpoint: {endpoint!r}")

    def extract(self, image_path: Path) -> list[TextBox]:
        image_path = Path(image_path)
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            self._channel.send_line(
                json.dumps({"id": req_id, "image_path": str(image_path)})
            )
            line = self._channel.recv_line()
        try:
            resp = json.loads(line)
        except ValueError as exc:
            raise ExtractorUnavailable(f"garbled extractor response: {line!r}") from exc
        if resp.get("id") != req_id:
            raise ExtractorUnavailable(
                f"extractor answered request {resp.get('id')!r}, expected {req_id}"
            )
        if resp.get("error"):
            err = resp["error"]
            if err == "not_found":
                raise ImageUnreadable(f"extractor cannot read {image_path}")
            raise ExtractorUnavailable(f"extractor error: {err}")
        return [
            TextBox(
                text=b["text"],
                bbox_px=(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"])),
                confidence=float(b.get("conf", 1.0)),
            )
            for b in resp.get("boxes", [])
        ]

    def close(self) -> None:
        self._channel.close()


def extract_text(snapshot: ScreenSnapshot, extractor: TextExtraction) -> list[TextBox]:
    """Run extraction and sanitize: drop low-confidence and degenerate boxes,
    clip the rest into the viewport, and sort top-to-bottom, left-to-right."""
    raw = extractor.extract(Path(snapshot.image_ref))
    vw, vh = snapshot.viewport_px
    clean: list[TextBox] = []
    for box in raw:
        if box.confidence < MIN_CONFIDENCE:
            continue
        x, y, w, h = box.bbox_px
        if w <= 0 or h <= 0 or not box.text.strip():
            continue
        x2, y2 = min(x + w, vw), min(y + h, vh)
        x, y = max(x, 0), max(y, 0)
        if x2 <= x or y2 <= y:
            continue
        clean.append(TextBox(box.text, (x, y, x2 - x, y2 - y), box.confidence))
    clean.sort(key=lambda b: (b.bbox_px[1], b.bbox_px[0]))
    return clean
