"""Deterministic mock provider sites for development and evaluation.

A site spec is a small JSON document: pages with static texts, labeled
inputs, buttons, an optional plan table, a serviceability oracle keyed
by address id, and branch routing. Rendering a page produces both a PNG
snapshot and a ground-truth ``.boxes.json`` file; identical page content
always renders to identical bytes, which is what makes end-to-end runs
replayable.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from PIL import Image, ImageDraw

from .canonical import canonical_json, digest
from .errors import InvalidMutation, UnknownPage, UnknownPath
from .perception import ScreenSnapshot, TextBox

# Renderer text metrics: every painted string gets a ground-truth box of
# this width per character. Geometry, not pixels, is what detectors see.
CHAR_W = 8
TEXT_PAD = 6
VALUE_H = 16

EPOCH_MS = 1767225600000  # 2026-01-01T00:00:00Z, base for virtual timestamps


def text_width(text: str) -> int:
    return CHAR_W * len(text) + TEXT_PAD


@dataclass(frozen=True)
class StaticText:
    text: str
    x: int
    y: int
    h: int = VALUE_H


@dataclass(frozen=True)
class InputField:
    name: str
    label: str
    label_x: int
    label_y: int
    x: int
    y: int
    w: int
    h: int = 30
    required: bool = True


@dataclass(frozen=True)
class Button:
    label: str
    x: int
    y: int
    w: int
    h: int = 36
    action: Mapping[str, str] = field(default_factory=dict)  # {"kind": "goto"|"branch", ...}


@dataclass(frozen=True)
class EchoField:
    """Renders the typed value of an input back onto a later page."""

    input_name: str
    x: int
    y: int
    h: int = 18


@dataclass(frozen=True)
class PlanTable:
    name_x: int = 40
    down_x: int = 360
    up_x: int = 620
    price_x: int = 880
    header_y: int = 120
    start_y: int = 160
    row_h: int = 48
    cell_h: int = 18


@dataclass(frozen=True)
class PageSpec:
    texts: tuple[StaticText, ...] = ()
    inputs: tuple[InputField, ...] = ()
    buttons: tuple[Button, ...] = ()
    echoes: tuple[EchoField, ...] = ()
    plan_table: Optional[PlanTable] = None


@dataclass(frozen=True)
class PlanOffer:
    name: str
    download_mbps: Optional[float]
    upload_mbps: Optional[float]
    price_text: str
    download_text: Optional[str] = None
    upload_text: Optional[str] = None

    def cell_texts(self) -> tuple[str, str, str, str]:
        down = self.download_text or (
            f"{self.download_mbps:g} Mbps" if self.download_mbps is not None else ""
        )
        up = self.upload_text or (
            f"{self.upload_mbps:g} Mbps" if self.upload_mbps is not None else ""
        )
        return self.name, down, up, self.price_text


@dataclass(frozen=True)
class OracleEntry:
    """Serviceability verdict for one address: yes, no, or address unknown."""

    serviceable: Optional[bool]  # None means the site cannot find the address
    plans: tuple[PlanOffer, ...] = ()


@dataclass(frozen=True)
class MockSiteSpec:
    app_id: str
    viewport: tuple[int, int]
    entry_page: str
    pages: Mapping[str, PageSpec]
    branch: Mapping[str, str]  # serviceable / not_serviceable / unknown -> page id
    oracle: Mapping[str, OracleEntry]  # address_id -> entry; "default" is the fallback


# --- (de)serialization ---


def _page_to_dict(p: PageSpec) -> dict:
    d: dict = {}
    if p.texts:
        d["texts"] = [{"text": t.text, "x": t.x, "y": t.y, "h": t.h} for t in p.texts]
    if p.inputs:
        d["inputs"] = [
            {
                "name": i.name,
                "label": i.label,
                "label_x": i.label_x,
                "label_y": i.label_y,
                "x": i.x,
                "y": i.y,
                "w": i.w,
                "h": i.h,
                "required": i.required,
            }
            for i in p.inputs
        ]
    if p.buttons:
        d["buttons"] = [
            {"label": b.label, "x": b.x, "y": b.y, "w": b.w, "h": b.h, "action": dict(b.action)}
            for b in p.buttons
        ]
    if p.echoes:
        d["echoes"] = [
            {"input": e.input_name, "x": e.x, "y": e.y, "h": e.h} for e in p.echoes
        ]
    if p.plan_table is not None:
        t = p.plan_table
        d["plan_table"] = {
            "name_x": t.name_x,
            "down_x": t.down_x,
            "up_x": t.up_x,
            "price_x": t.price_x,
            "header_y": t.header_y,
            "start_y": t.start_y,
            "row_h": t.row_h,
            "cell_h": t.cell_h,
        }
    return d


def _page_from_dict(d: Mapping) -> PageSpec:
    return PageSpec(
        texts=tuple(
            StaticText(t["text"], t["x"], t["y"], t.get("h", VALUE_H))
            for t in d.get("texts", [])
        ),
        inputs=tuple(
            InputField(
                i["name"],
                i["label"],
                i["label_x"],
                i["label_y"],
                i["x"],
                i["y"],
                i["w"],
                i.get("h", 30),
                i.get("required", True),
            )
            for i in d.get("inputs", [])
        ),
        buttons=tuple(
            Button(b["label"], b["x"], b["y"], b["w"], b.get("h", 36), b.get("action", {}))
            for b in d.get("buttons", [])
        ),
        echoes=tuple(
            EchoField(e["input"], e["x"], e["y"], e.get("h", 18)) for e in d.get("echoes", [])
        ),
        plan_table=PlanTable(**d["plan_table"]) if "plan_table" in d else None,
    )


def _plan_to_dict(p: PlanOffer) -> dict:
    d: dict = {"name": p.name, "download_mbps": p.download_mbps, "upload_mbps": p.upload_mbps,
               "price_text": p.price_text}
    if p.download_text is not None:
        d["download_text"] = p.download_text
    if p.upload_text is not None:
        d["upload_text"] = p.upload_text
    return d


def _plan_from_dict(d: Mapping) -> PlanOffer:
    return PlanOffer(
        name=d["name"],
        download_mbps=d.get("download_mbps"),
        upload_mbps=d.get("upload_mbps"),
        price_text=d.get("price_text", ""),
        download_text=d.get("download_text"),
        upload_text=d.get("upload_text"),
    )


def spec_to_dict(spec: MockSiteSpec) -> dict:
    return {
        "app_id": spec.app_id,
        "viewport": list(spec.viewport),
        "entry_page": spec.entry_page,
        "pages": {pid: _page_to_dict(p) for pid, p in spec.pages.items()},
        "branch": dict(spec.branch),
        "oracle": {
            addr: {
                "serviceable": e.serviceable,
                "plans": [_plan_to_dict(p) for p in e.plans],
            }
            for addr, e in spec.oracle.items()
        },
    }


def spec_from_dict(d: Mapping) -> MockSiteSpec:
    spec = MockSiteSpec(
        app_id=d["app_id"],
        viewport=tuple(d.get("viewport", (1280, 800))),
        entry_page=d["entry_page"],
        pages={pid: _page_from_dict(p) for pid, p in d["pages"].items()},
        branch=dict(d.get("branch", {})),
        oracle={
            addr: OracleEntry(
                serviceable=e.get("serviceable"),
                plans=tuple(_plan_from_dict(p) for p in e.get("plans", [])),
            )
            for addr, e in d.get("oracle", {}).items()
        },
    )
    validate_spec(spec)
    return spec


def validate_spec(spec: MockSiteSpec) -> None:
    if spec.entry_page not in spec.pages:
        raise UnknownPage(f"entry page {spec.entry_page!r} is not defined")
    for pid, page in spec.pages.items():
        for b in page.buttons:
            kind = b.action.get("kind")
            if kind == "goto":
                target = b.action.get("target")
                if target not in spec.pages:
                    raise UnknownPage(f"button {b.label!r} on {pid!r} goes to unknown page {target!r}")
            elif kind != "branch":
                raise UnknownPage(f"button {b.label!r} on {pid!r} has unknown action kind {kind!r}")
    for path, target in spec.branch.items():
        if path not in ("serviceable", "not_serviceable", "unknown"):
            raise UnknownPath(f"branch key {path!r} is not a recognized path")
        if target not in spec.pages:
            raise UnknownPage(f"branch {path!r} routes to unknown page {target!r}")


def load_site_spec(path: str | Path) -> MockSiteSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


def save_site_spec(spec: MockSiteSpec, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(spec_to_dict(spec)) + "\n", encoding="utf-8")


# --- rendering ---


def _page_boxes(
    spec: MockSiteSpec,
    page_id: str,
    typed: Mapping[str, str],
    plans: Sequence[PlanOffer],
) -> list[TextBox]:
    page = spec.pages.get(page_id)
    if page is None:
        raise UnknownPage(f"page {page_id!r} is not defined")
    boxes: list[TextBox] = []

    def add(text: str, x: int, y: int, h: int) -> None:
        if text:
            boxes.append(TextBox(text, (x, y, text_width(text), h), 1.0))

    for t in page.texts:
        add(t.text, t.x, t.y, t.h)
    for i in page.inputs:
        add(i.label, i.label_x, i.label_y, VALUE_H)
        value = typed.get(i.name, "")
        if value:
            add(value, i.x + 10, i.y + (i.h - VALUE_H) // 2, VALUE_H)
    for b in page.buttons:
        lw = text_width(b.label)
        add(b.label, b.x + (b.w - lw) // 2, b.y + (b.h - VALUE_H) // 2, VALUE_H)
    for e in page.echoes:
        add(typed.get(e.input_name, ""), e.x, e.y, e.h)
    if page.plan_table is not None and plans:
        t = page.plan_table
        for row, plan in enumerate(plans):
            name, down, up, price = plan.cell_texts()
            y = t.start_y + row * t.row_h
            add(name, t.name_x, y, t.cell_h)
            add(down, t.down_x, y, t.cell_h)
            add(up, t.up_x, y, t.cell_h)
            add(price, t.price_x, y, t.cell_h)
    boxes.sort(key=lambda b: (b.bbox_px[1], b.bbox_px[0]))
    return boxes


def _paint(spec: MockSiteSpec, page_id: str, boxes: Sequence[TextBox], out: Path) -> None:
    page = spec.pages[page_id]
    img = Image.new("RGB", spec.viewport, "#ffffff")
    draw = ImageDraw.Draw(img)
    for i in page.inputs:
        draw.rectangle((i.x, i.y, i.x + i.w, i.y + i.h), outline="#888888", width=1)
    for b in page.buttons:
        draw.rectangle((b.x, b.y, b.x + b.w, b.y + b.h), fill="#2b6cb0")
    for box in boxes:
        x, y, _, _ = box.bbox_px
        draw.text((x, y), box.text, fill="#111111")
    img.save(out, format="PNG")


def render_page(
    spec: MockSiteSpec,
    page_id: str,
    out_dir: str | Path,
    typed: Mapping[str, str] | None = None,
    plans: Sequence[PlanOffer] = (),
) -> tuple[Path, list[TextBox]]:
    """Render a page to ``<page>-<digest>.png`` plus its boxes file.

    The file name is derived from the page content, so re-rendering the
    same content reuses the existing files byte for byte.
    """
    typed = typed or {}
    boxes = _page_boxes(spec, page_id, typed, plans)
    key = digest(
        {
            "app": spec.app_id,
            "page": page_id,
            "boxes": [[b.text, *b.bbox_px] for b in boxes],
        }
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{page_id}-{key[:16]}.png"
    if not png.exists():
        _paint(spec, page_id, boxes, png)
        payload = {
            "boxes": [
                {
                    "text": b.text,
                    "x": b.bbox_px[0],
                    "y": b.bbox_px[1],
                    "w": b.bbox_px[2],
                    "h": b.bbox_px[3],
                    "conf": b.confidence,
                }
                for b in boxes
            ]
        }
        png.with_suffix(".boxes.json").write_text(
            canonical_json(payload) + "\n", encoding="utf-8"
        )
    return png, boxes


# --- the session backend ---


class MockSession:
    """Drives one mock site for one address with a virtual clock.

    ``sleep`` advances virtual time instead of blocking, so runs are both
    fast and fully reproducible; timestamps derive from a fixed epoch.
    """

    def __init__(self, spec: MockSiteSpec, address_id: str, workdir: str | Path):
        self.backend = "mock"
        self.spec = spec
        self.address_id = address_id
        self.workdir = Path(workdir)
        self.viewport_px = spec.viewport
        self.current_page = spec.entry_page
        self.typed: dict[str, str] = {}
        self._focused: Optional[InputField] = None
        self._clock_ms = 0
        self._plans: tuple[PlanOffer, ...] = ()

    # -- session protocol --

    def snapshot(self) -> ScreenSnapshot:
        self._clock_ms += 5
        png, _ = render_page(
            self.spec, self.current_page, self.workdir, self.typed, self._plans
        )
        return ScreenSnapshot(str(png), self.viewport_px, self.now_ms())

    def click(self, x: int, y: int) -> None:
        self._clock_ms += 5
        page = self.spec.pages[self.current_page]
        for b in page.buttons:
            if b.x <= x <= b.x + b.w and b.y <= y <= b.y + b.h:
                self._press(b, page)
                return
        for i in page.inputs:
            if i.x <= x <= i.x + i.w and i.y <= y <= i.y + i.h:
                self._focused = i
                return
        self._focused = None

    def type_text(self, text: str) -> None:
        self._clock_ms += 2 * len(text)
        if self._focused is not None:
            self.typed[self._focused.name] = self.typed.get(self._focused.name, "") + text

    def scroll(self, dy: int) -> None:
        self._clock_ms += 5

    def sleep(self, ms: int) -> None:
        self._clock_ms += max(ms, 0)

    def now_ms(self) -> int:
        return self._clock_ms

    def pages_current(self) -> PageSpec:
        return self.spec.pages[self.current_page]

    # -- internals --

    def _press(self, button: Button, page: PageSpec) -> None:
        missing = [i.name for i in page.inputs if i.required and not self.typed.get(i.name)]
        if missing:
            return  # form validation swallows the click
        kind = button.action.get("kind")
        if kind == "goto":
            self.current_page = button.action["target"]
        elif kind == "branch":
            self._branch()
        self._focused = None

    def _branch(self) -> None:
        entry = self.spec.oracle.get(self.address_id, self.spec.oracle.get("default"))
        if entry is None or entry.serviceable is None:
            path = "unknown" if "unknown" in self.spec.branch else "not_serviceable"
        elif entry.serviceable:
            path = "serviceable"
            self._plans = entry.plans
        else:
            path = "not_serviceable"
        target = self.spec.branch.get(path)
        if target is None:
            raise UnknownPath(f"site {self.spec.app_id!r} has no branch for {path!r}")
        self.current_page = target


def mock_backend(spec: MockSiteSpec, address_id: str, workdir: str | Path) -> MockSession:
    return MockSession(spec, address_id, workdir)


# --- demonstration generation ---


def _demo_address(spec: MockSiteSpec, path: str, address_id: Optional[str]) -> str:
    if address_id is not None:
        return address_id
    explicit = sorted(spec.oracle)
    if path == "serviceable":
        for addr in explicit:
            if addr != "default" and spec.oracle[addr].serviceable is True:
                return addr
        default = spec.oracle.get("default")
        if default is not None and default.serviceable is True:
            return "demo-serviceable"
    elif path == "not_serviceable":
        for addr in explicit:
            if addr != "default" and spec.oracle[addr].serviceable is False:
                return addr
        default = spec.oracle.get("default")
        if default is not None and default.serviceable is False:
            return "demo-not-serviceable"
    elif path == "unknown":
        for addr in explicit:
            if addr != "default" and spec.oracle[addr].serviceable is None:
                return addr
        if "default" not in spec.oracle:
            return "demo-unknown"
    raise UnknownPath(f"site {spec.app_id!r} has no address taking the {path!r} path")


def generate_demo(
    spec: MockSiteSpec,
    values: Mapping[str, str],
    path: str = "serviceable",
    out_dir: str | Path = ".",
    address_id: Optional[str] = None,
) -> dict:
    """Simulate a human walking the site and record a demonstration.

    Returns a demonstration document (see synthesis.Demonstration):
    events with coordinates and placeholder tags for typed values,
    deduplicated snapshots, and the page ids visited in order.
    """
    if path in ("serviceable", "not_serviceable", "unknown") and path not in spec.branch:
        raise UnknownPath(f"site {spec.app_id!r} has no branch for {path!r}")
    addr = _demo_address(spec, path, address_id)
    out_dir = Path(out_dir)
    session = MockSession(spec, addr, out_dir)

    events: list[dict] = []
    snapshots: dict[str, dict] = {}
    snap_ids: dict[str, str] = {}
    t = 0

    def capture() -> str:
        snap = session.snapshot()
        if snap.image_ref not in snap_ids:
            snap_ids[snap.image_ref] = f"s{len(snap_ids)}"
            snapshots[snap_ids[snap.image_ref]] = {
                "image": Path(snap.image_ref).name,
                "viewport": list(session.viewport_px),
            }
        return snap_ids[snap.image_ref]

    def emit(kind: str, **kw) -> None:
        nonlocal t
        t += 400
        events.append({"t_ms": t, "kind": kind, **kw})

    visited = [session.current_page]
    emit("navigate", snapshot_ref=capture())

    for _ in range(20):  # hard cap; real walks finish in a handful of pages
        page = session.pages_current()
        advanced = False
        for field_ in page.inputs:
            value = values.get(field_.name)
            if value is None or session.typed.get(field_.name):
                continue
            cx, cy = field_.x + 12, field_.y + field_.h // 2
            emit(
                "type",
                x_px=cx,
                y_px=cy,
                text=value,
                placeholder=field_.name,
                snapshot_ref=capture(),
            )
            session.click(cx, cy)
            session.type_text(value)
        for b in page.buttons:
            cx, cy = b.x + b.w // 2, b.y + b.h // 2
            emit("click", x_px=cx, y_px=cy, snapshot_ref=capture())
            before = session.current_page
            session.click(cx, cy)
            if session.current_page == before:
                raise UnknownPath(
                    f"demo walk stalled on page {before!r}; are all required values present?"
                )
            visited.append(session.current_page)
            advanced = True
            break  # one primary button per page
        if not advanced:
            break

    final_ref = capture()
    demo = {
        "app_id": spec.app_id,
        "address_id": addr,
        "events": events,
        "snapshots": snapshots,
        "final_snapshot_ref": final_ref,
        "visited_states": visited,
    }
    return demo


# --- mutations ---


@dataclass(frozen=True)
class Mutation:
    kind: str  # rename_label | move_element | insert_interstitial_page | reorder_plans
    params: Mapping[str, object] = field(default_factory=dict)


def _find_button(page: PageSpec, label: str) -> Optional[int]:
    for idx, b in enumerate(page.buttons):
        if b.label == label:
            return idx
    return None


def apply_mutation(spec: MockSiteSpec, mutation: Mutation) -> MockSiteSpec:
    """Return a new spec with one structural change applied."""
    kind = mutation.kind
    p = mutation.params
    pages = dict(spec.pages)

    if kind == "rename_label":
        pid, old, new = p.get("page"), p.get("old"), p.get("new")
        if pid not in pages:
            raise InvalidMutation(f"rename_label: unknown page {pid!r}")
        page = pages[pid]
        idx = _find_button(page, str(old))
        if idx is not None:
            buttons = list(page.buttons)
            buttons[idx] = replace(buttons[idx], label=str(new))
            pages[pid] = replace(page, buttons=tuple(buttons))
            return replace(spec, pages=pages)
        for i_idx, inp in enumerate(page.inputs):
            if inp.label == old:
                inputs = list(page.inputs)
                inputs[i_idx] = replace(inp, label=str(new))
                pages[pid] = replace(page, inputs=tuple(inputs))
                return replace(spec, pages=pages)
        for t_idx, txt in enumerate(page.texts):
            if txt.text == old:
                texts = list(page.texts)
                texts[t_idx] = replace(txt, text=str(new))
                pages[pid] = replace(page, texts=tuple(texts))
                return replace(spec, pages=pages)
        raise InvalidMutation(f"rename_label: no element labeled {old!r} on {pid!r}")

    if kind == "move_element":
        pid, label = p.get("page"), str(p.get("label"))
        dx, dy = int(p.get("dx", 0)), int(p.get("dy", 0))
        if pid not in pages:
            raise InvalidMutation(f"move_element: unknown page {pid!r}")
        page = pages[pid]
        idx = _find_button(page, label)
        if idx is not None:
            buttons = list(page.buttons)
            b = buttons[idx]
            buttons[idx] = replace(b, x=b.x + dx, y=b.y + dy)
            pages[pid] = replace(page, buttons=tuple(buttons))
            return replace(spec, pages=pages)
        for t_idx, txt in enumerate(page.texts):
            if txt.text == label:
                texts = list(page.texts)
                texts[t_idx] = replace(txt, x=txt.x + dx, y=txt.y + dy)
                pages[pid] = replace(page, texts=tuple(texts))
                return replace(spec, pages=pages)
        raise InvalidMutation(f"move_element: no element labeled {label!r} on {pid!r}")

    if kind == "insert_interstitial_page":
        # an extra notice page that the entry button now routes through
        pid = str(p.get("page", "interstitial"))
        before = p.get("before")
        if pid in pages:
            raise InvalidMutation(f"insert_interstitial_page: page {pid!r} already exists")
        entry = pages.get(spec.entry_page)
        if entry is None or not entry.buttons:
            raise InvalidMutation("insert_interstitial_page: entry page has no button to redirect")
        if before is not None and before not in pages:
            raise InvalidMutation(f"insert_interstitial_page: unknown target {before!r}")
        old_action = dict(entry.buttons[0].action)
        notice = PageSpec(
            texts=(
                StaticText("Before we continue please review this notice", 40, 24, 24),
                StaticText("Service terms may have changed since your last visit", 40, 64, 18),
            ),
            buttons=(Button("Continue to availability check", 40, 254, 300, 36, old_action),),
        )
        buttons = list(entry.buttons)
        buttons[0] = replace(buttons[0], action={"kind": "goto", "target": pid})
        pages[pid] = notice
        pages[spec.entry_page] = replace(entry, buttons=tuple(buttons))
        return replace(spec, pages=pages)

    if kind == "reorder_plans":
        addr = str(p.get("address_id", "default"))
        entry = spec.oracle.get(addr)
        if entry is None:
            raise InvalidMutation(f"reorder_plans: no oracle entry for {addr!r}")
        oracle = dict(spec.oracle)
        oracle[addr] = replace(entry, plans=tuple(reversed(entry.plans)))
        return replace(spec, oracle=oracle)

    raise InvalidMutation(f"unknown mutation kind {kind!r}")


# --- recognition noise ---


_NOISE_ALPHABET = string.ascii_lowercase + string.digits + " "


def apply_noise(
    boxes: Sequence[TextBox],
    rng: random.Random,
    char_error_rate: float = 0.0,
    bbox_jitter_px: int = 0,
    drop_rate: float = 0.0,
) -> list[TextBox]:
    """Corrupt ground-truth boxes the way a sloppy recognizer would.

    Each character independently mutates (substitute/delete/insert) with
    ``char_error_rate``; boxes jitter by up to ``bbox_jitter_px`` in each
    direction; whole boxes vanish with ``drop_rate``.
    """
    noisy: list[TextBox] = []
    for box in boxes:
        if drop_rate and rng.random() < drop_rate:
            continue
        chars: list[str] = []
        for ch in box.text:
            if char_error_rate and rng.random() < char_error_rate:
                op = rng.random()
                if op < 1 / 3:
                    chars.append(rng.choice(_NOISE_ALPHABET))  # substitute
                elif op < 2 / 3:
                    pass  # delete
                else:
                    chars.append(ch)
                    chars.append(rng.choice(_NOISE_ALPHABET))  # insert
            else:
                chars.append(ch)
        text = "".join(chars)
        x, y, w, h = box.bbox_px
        if bbox_jitter_px:
            x += rng.randint(-bbox_jitter_px, bbox_jitter_px)
            y += rng.randint(-bbox_jitter_px, bbox_jitter_px)
        if not text.strip():
            continue
        noisy.append(TextBox(text, (x, y, w, h), box.confidence))
    return noisy
