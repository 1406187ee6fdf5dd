"""Compile abstract states into concrete ones from recorded demonstrations.

Segmentation cuts each demonstration into per-state evidence; the
reference synthesizer then picks stable keywords (texts present in every
demo, never the values the demonstrator typed), anchors the recorded
interactions to nearby text, and emits a detector plus action script.
Synthesized states land in a content-addressed repository so unchanged
states are reused byte for byte across compilations.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

from filelock import FileLock

from .canonical import canonical_json, digest, digest_text
from .errors import (
    AnchorTooFar,
    NoStableKeywords,
    SegmentationMismatch,
    StoreCorrupt,
    UnknownStateRef,
)
from .fsm import (
    AbstractState,
    ActionScript,
    Classify,
    Click,
    ConcreteState,
    ExtractFields,
    ExtractionRule,
    KeywordDetector,
    KeywordSpec,
    Provenance,
    Scroll,
    StateRole,
    TransitionLabel,
    TypeText,
    WorkflowDoc,
    WorkflowFSM,
    build_fsm,
    state_content_hash,
)
from .perception import TextBox, load_boxes_file, normalize_text

logger = logging.getLogger(__name__)

SYNTHESIZER_VERSION = "ref-1"
# Detectors fire on a supermajority of their keywords rather than all of
# them, so one garbled recognition does not flip state identification.
SYNTH_MIN_SCORE = 0.6
MAX_REQUIRED_KEYWORDS = 5
MAX_OPTIONAL_KEYWORDS = 3
ANCHOR_REACH_BOX_HEIGHTS = 3.0
REGION_HINT_PAD = 0.10
OFFSET_CLAMP = 2.0
SEGMENT_SIMILARITY_CUTOFF = 0.5


# --- demonstrations ---


@dataclass(frozen=True)
class DemoEvent:
    t_ms: int
    kind: str  # click | type | scroll | navigate
    snapshot_ref: str
    x_px: Optional[int] = None
    y_px: Optional[int] = None
    text: Optional[str] = None
    placeholder: Optional[str] = None
    dy: Optional[int] = None


@dataclass(frozen=True)
class DemoSnapshot:
    ref: str
    image: str
    viewport: tuple[int, int]


@dataclass
class Demonstration:
    """One recorded walk through a site, with screenshots and interactions."""

    app_id: str
    events: tuple[DemoEvent, ...]
    snapshots: Mapping[str, DemoSnapshot]
    final_snapshot_ref: Optional[str]
    visited_states: tuple[str, ...]
    address_id: str = ""
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path = ".") -> "Demonstration":
        events = tuple(
            DemoEvent(
                t_ms=int(e["t_ms"]),
                kind=e["kind"],
                snapshot_ref=e["snapshot_ref"],
                x_px=e.get("x_px"),
                y_px=e.get("y_px"),
                text=e.get("text"),
                placeholder=e.get("placeholder"),
                dy=e.get("dy"),
            )
            for e in d["events"]
        )
        snapshots = {
            ref: DemoSnapshot(ref, s["image"], tuple(s["viewport"]))
            for ref, s in d["snapshots"].items()
        }
        demo = cls(
            app_id=d["app_id"],
            events=events,
            snapshots=snapshots,
            final_snapshot_ref=d.get("final_snapshot_ref"),
            visited_states=tuple(d.get("visited_states", [])),
            address_id=d.get("address_id", ""),
            base_dir=Path(base_dir),
        )
        demo.validate()
        return demo

    def to_dict(self) -> dict:
        events = []
        for e in self.events:
            ev: dict = {"t_ms": e.t_ms, "kind": e.kind, "snapshot_ref": e.snapshot_ref}
            for key in ("x_px", "y_px", "text", "placeholder", "dy"):
                value = getattr(e, key)
                if value is not None:
                    ev[key] = value
            events.append(ev)
        return {
            "app_id": self.app_id,
            "address_id": self.address_id,
            "events": events,
            "snapshots": {
                ref: {"image": s.image, "viewport": list(s.viewport)}
                for ref, s in self.snapshots.items()
            },
            "final_snapshot_ref": self.final_snapshot_ref,
            "visited_states": list(self.visited_states),
        }

    def validate(self) -> None:
        last = -1
        for e in self.events:
            if e.t_ms < last:
                raise ValueError("demonstration events are not time-ordered")
            last = e.t_ms
            if e.snapshot_ref not in self.snapshots:
                raise ValueError(f"event references unknown snapshot {e.snapshot_ref!r}")
            if e.kind not in ("click", "type", "scroll", "navigate"):
                raise ValueError(f"unknown event kind {e.kind!r}")
            if e.kind == "type" and e.text is None:
                raise ValueError("type event without text")
        if self.final_snapshot_ref is not None and self.final_snapshot_ref not in self.snapshots:
            raise ValueError(f"unknown final snapshot {self.final_snapshot_ref!r}")

    def image_path(self, ref: str) -> Path:
        return self.base_dir / self.snapshots[ref].image

    def boxes(self, ref: str) -> list[TextBox]:
        return load_boxes_file(self.image_path(ref).with_suffix(".boxes.json"))

    def viewport(self, ref: str) -> tuple[int, int]:
        return self.snapshots[ref].viewport

    def typed_values(self) -> list[str]:
        return [e.text for e in self.events if e.kind == "type" and e.text]


def load_demo(path: str | Path) -> Demonstration:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return Demonstration.from_dict(json.load(fh), base_dir=path.parent)


def save_demo(demo_doc: Mapping, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(dict(demo_doc)) + "\n", encoding="utf-8")


# --- segmentation ---


@dataclass(frozen=True)
class Segment:
    """The slice of one demonstration spent in one abstract state."""

    state_id: str
    events: tuple[DemoEvent, ...]
    snapshot_refs: tuple[str, ...]

    @property
    def first_snapshot_ref(self) -> str:
        return self.snapshot_refs[0]


def _text_set(boxes: Iterable[TextBox]) -> set[str]:
    return {normalize_text(b.text) for b in boxes if b.text.strip()}


def _jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def segment_demonstration(
    demo: Demonstration, path_states: Sequence[AbstractState]
) -> list[Segment]:
    """Cut a demonstration into one segment per visited abstract state.

    A new segment opens at every navigate event and whenever the screen
    content shifts hard (Jaccard similarity of normalized text sets drops
    below 0.5); the final snapshot forms a trailing segment when it no
    longer resembles the last interacted screen. The segment count must
    equal the length of the state path.
    """
    text_sets: dict[str, set[str]] = {}

    def texts(ref: str) -> set[str]:
        if ref not in text_sets:
            text_sets[ref] = _text_set(demo.boxes(ref))
        return text_sets[ref]

    groups: list[tuple[list[DemoEvent], list[str]]] = []
    current_events: list[DemoEvent] = []
    current_refs: list[str] = []

    def open_segment() -> None:
        nonlocal current_events, current_refs
        if current_refs or current_events:
            groups.append((current_events, current_refs))
        current_events, current_refs = [], []

    for event in demo.events:
        ref = event.snapshot_ref
        if event.kind == "navigate":
            open_segment()
        elif current_refs and ref != current_refs[-1]:
            if _jaccard(texts(ref), texts(current_refs[-1])) < SEGMENT_SIMILARITY_CUTOFF:
                open_segment()
        current_events.append(event)
        if not current_refs or current_refs[-1] != ref:
            current_refs.append(ref)
    open_segment()

    final_ref = demo.final_snapshot_ref
    if final_ref is not None:
        last_refs = groups[-1][1] if groups else []
        if not last_refs:
            groups.append(([], [final_ref]))
        elif final_ref != last_refs[-1]:
            if _jaccard(texts(final_ref), texts(last_refs[-1])) < SEGMENT_SIMILARITY_CUTOFF:
                groups.append(([], [final_ref]))
            else:
                last_refs.append(final_ref)

    if len(groups) != len(path_states):
        raise SegmentationMismatch(
            f"demonstration for {demo.app_id!r} splits into {len(groups)} segments "
            f"but the state path has {len(path_states)}"
        )
    return [
        Segment(state.state_id, tuple(events), tuple(refs))
        for state, (events, refs) in zip(path_states, groups)
    ]


@dataclass(frozen=True)
class DemoEvidence:
    """One demonstration's contribution to one abstract state."""

    demo: Demonstration
    segment: Segment


# --- the synthesizer ---


class Synthesizer(Protocol):
    """Turns (abstract state, evidence) into a concrete state.

    Implementations must be pure functions of their arguments: the same
    abstract state, evidence, branch successors, and extraction rules
    must produce an identical concrete state (hence an identical content
    hash) on every call.
    """

    version: str

    def synthesize(
        self,
        abstract: AbstractState,
        evidence: Sequence[DemoEvidence],
        app_id: str,
        branches: Sequence[tuple[TransitionLabel, str]] = (),
        extraction: Sequence[ExtractionRule] = (),
    ) -> ConcreteState: ...


def _point_to_box_distance(x: float, y: float, box: TextBox) -> float:
    bx, by, bw, bh = box.bbox_px
    dx = max(bx - x, 0.0, x - (bx + bw))
    dy = max(by - y, 0.0, y - (by + bh))
    return (dx * dx + dy * dy) ** 0.5


class ReferenceSynthesizer:
    """Deterministic keyword/anchor synthesizer used everywhere by default."""

    version = SYNTHESIZER_VERSION

    def synthesize(
        self,
        abstract: AbstractState,
        evidence: Sequence[DemoEvidence],
        app_id: str,
        branches: Sequence[tuple[TransitionLabel, str]] = (),
        extraction: Sequence[ExtractionRule] = (),
    ) -> ConcreteState:
        if not evidence:
            raise ValueError(f"state {abstract.state_id!r}: no evidence to synthesize from")

        stable = self._stable_texts(evidence)
        if not stable:
            raise NoStableKeywords(
                f"state {abstract.state_id!r}: no text is stable across all "
                f"{len(evidence)} demonstrations"
            )

        # geometry comes from the first demonstration; the rest only vote
        # on which texts are stable
        first = evidence[0]
        first_boxes = self._segment_boxes(first)
        viewport = first.demo.viewport(first.segment.first_snapshot_ref)

        anchors: list[str] = []
        steps: list = []
        for event in first.segment.events:
            step, anchor_text = self._event_to_step(
                event, first, stable, viewport
            )
            if step is not None:
                steps.append(step)
            if anchor_text is not None and anchor_text not in anchors:
                anchors.append(anchor_text)

        required_texts = self._pick_keywords(anchors, stable, first_boxes)
        optional_texts = [
            t
            for t, _ in self._rank_by_area(stable, first_boxes)
            if t not in required_texts
        ][:MAX_OPTIONAL_KEYWORDS]

        hints = self._region_hints(evidence)
        detector = KeywordDetector(
            required=tuple(KeywordSpec(t, hints.get(t)) for t in required_texts),
            optional=tuple(KeywordSpec(t, hints.get(t)) for t in optional_texts),
            min_score=SYNTH_MIN_SCORE,
        )

        if extraction:
            steps.append(ExtractFields(tuple(extraction)))
        if branches:
            steps.append(Classify(tuple(branches)))

        provenance = Provenance(
            app_id=app_id,
            abstract_prompt_hash=digest_text(abstract.prompt),
            synthesizer_version=self.version,
        )
        return ConcreteState.create(
            abstract.state_id, detector, ActionScript(tuple(steps)), provenance
        )

    # -- pieces --

    def _segment_boxes(self, ev: DemoEvidence) -> list[TextBox]:
        return ev.demo.boxes(ev.segment.first_snapshot_ref)

    def _typed_texts(self, ev: DemoEvidence) -> set[str]:
        return {normalize_text(t) for t in ev.demo.typed_values()}

    def _stable_texts(self, evidence: Sequence[DemoEvidence]) -> set[str]:
        stable: Optional[set[str]] = None
        for ev in evidence:
            texts = {
                normalize_text(b.text)
                for b in self._segment_boxes(ev)
                if b.text.strip()
            }
            texts -= self._typed_texts(ev)
            stable = texts if stable is None else (stable & texts)
        return stable or set()

    def _rank_by_area(
        self, stable: set[str], boxes: Sequence[TextBox]
    ) -> list[tuple[str, TextBox]]:
        best: dict[str, TextBox] = {}
        for box in boxes:
            key = normalize_text(box.text)
            if key not in stable:
                continue
            if key not in best or _area(box) > _area(best[key]):
                best[key] = box
        return sorted(
            best.items(),
            key=lambda kv: (-_area(kv[1]), kv[1].bbox_px[1], kv[1].bbox_px[0]),
        )

    def _pick_keywords(
        self, anchors: Sequence[str], stable: set[str], boxes: Sequence[TextBox]
    ) -> list[str]:
        picked = [a for a in anchors if a in stable]
        for text, _ in self._rank_by_area(stable, boxes):
            if len(picked) >= MAX_REQUIRED_KEYWORDS:
                break
            if text not in picked:
                picked.append(text)
        return picked[:MAX_REQUIRED_KEYWORDS]

    def _nearest_stable_box(
        self,
        x: float,
        y: float,
        boxes: Sequence[TextBox],
        stable: set[str],
        typed: set[str],
    ) -> TextBox:
        candidates: list[tuple[float, TextBox]] = []
        for box in boxes:
            key = normalize_text(box.text)
            if key not in stable or key in typed:
                continue
            d = _point_to_box_distance(x, y, box)
            if d <= ANCHOR_REACH_BOX_HEIGHTS * box.bbox_px[3]:
                candidates.append((d, box))
        if not candidates:
            raise AnchorTooFar(
                f"no stable text within {ANCHOR_REACH_BOX_HEIGHTS:g} box-heights "
                f"of interaction at ({x:g}, {y:g})"
            )
        candidates.sort(key=lambda db: (db[0], db[1].bbox_px[1], db[1].bbox_px[0]))
        return candidates[0][1]

    def _event_to_step(
        self,
        event: DemoEvent,
        ev: DemoEvidence,
        stable: set[str],
        viewport: tuple[int, int],
    ):
        if event.kind == "navigate":
            return None, None
        if event.kind == "scroll":
            return Scroll(event.dy or 0), None
        if event.x_px is None or event.y_px is None:
            return None, None
        boxes = ev.demo.boxes(event.snapshot_ref)
        anchor = self._nearest_stable_box(
            event.x_px, event.y_px, boxes, stable, self._typed_texts(ev)
        )
        ax, ay = anchor.center
        _, _, aw, ah = anchor.bbox_px
        offset = (
            _clamp(round((event.x_px - ax) / aw, 4), -OFFSET_CLAMP, OFFSET_CLAMP),
            _clamp(round((event.y_px - ay) / ah, 4), -OFFSET_CLAMP, OFFSET_CLAMP),
        )
        anchor_text = normalize_text(anchor.text)
        hint = self._hint_for_box(anchor, viewport)
        spec = KeywordSpec(anchor_text, hint)
        if event.kind == "click":
            return Click(spec, offset), anchor_text
        if event.kind == "type":
            template = "{%s}" % event.placeholder if event.placeholder else (event.text or "")
            return TypeText(spec, template, offset), anchor_text
        return None, None

    def _hint_for_box(
        self, box: TextBox, viewport: tuple[int, int]
    ) -> tuple[float, float, float, float]:
        vw, vh = viewport
        x, y, w, h = box.bbox_px
        return (
            _clamp((x / vw) - REGION_HINT_PAD, 0.0, 1.0),
            _clamp((y / vh) - REGION_HINT_PAD, 0.0, 1.0),
            _clamp(((x + w) / vw) + REGION_HINT_PAD, 0.0, 1.0),
            _clamp(((y + h) / vh) + REGION_HINT_PAD, 0.0, 1.0),
        )

    def _region_hints(
        self, evidence: Sequence[DemoEvidence]
    ) -> dict[str, tuple[float, float, float, float]]:
        """Per-keyword hint: padded union of that text's boxes across demos."""
        spans: dict[str, list[float]] = {}
        viewport: Optional[tuple[int, int]] = None
        for ev in evidence:
            viewport = viewport or ev.demo.viewport(ev.segment.first_snapshot_ref)
            for box in self._segment_boxes(ev):
                key = normalize_text(box.text)
                x, y, w, h = box.bbox_px
                span = spans.setdefault(key, [x, y, x + w, y + h])
                span[0] = min(span[0], x)
                span[1] = min(span[1], y)
                span[2] = max(span[2], x + w)
                span[3] = max(span[3], y + h)
        if viewport is None:
            return {}
        vw, vh = viewport
        return {
            key: (
                _clamp(span[0] / vw - REGION_HINT_PAD, 0.0, 1.0),
                _clamp(span[1] / vh - REGION_HINT_PAD, 0.0, 1.0),
                _clamp(span[2] / vw + REGION_HINT_PAD, 0.0, 1.0),
                _clamp(span[3] / vh + REGION_HINT_PAD, 0.0, 1.0),
            )
            for key, span in spans.items()
        }


def _area(box: TextBox) -> int:
    return box.bbox_px[2] * box.bbox_px[3]


def _clamp(v: float, lo: float, hi: float) -> float:
    return min(max(v, lo), hi)


def synthesize_state(
    abstract: AbstractState,
    evidence: Sequence[DemoEvidence],
    app_id: str,
    branches: Sequence[tuple[TransitionLabel, str]] = (),
    extraction: Sequence[ExtractionRule] = (),
) -> ConcreteState:
    return ReferenceSynthesizer().synthesize(abstract, evidence, app_id, branches, extraction)


# --- the state repository ---


def repo_key(app_id: str, abstract_prompt_hash: str) -> str:
    return digest_text(f"{app_id}\x00{abstract_prompt_hash}")


@dataclass(frozen=True)
class RepoEntry:
    state: ConcreteState
    repo_key: str
    created_at: str
    synthesizer_version: str
    generation: int


class StateRepository:
    """Content-addressed store for compiled states, one directory per app.

    Entries are keyed by digest(app_id, prompt hash); a prompt change
    therefore misses the cache and synthesizes fresh. Hashes are
    rechecked on every read and a mismatch raises StoreCorrupt rather
    than handing back silently altered behavior.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _app_dir(self, app_id: str) -> Path:
        d = self.root / app_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _lock(self, app_id: str) -> FileLock:
        return FileLock(str(self._app_dir(app_id) / ".lock"))

    def _index_path(self, app_id: str) -> Path:
        return self._app_dir(app_id) / "index.json"

    def _read_index(self, app_id: str) -> dict:
        path = self._index_path(app_id)
        if not path.exists():
            return {}
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, app_id: str, state: ConcreteState, now: Optional[str] = None) -> RepoEntry:
        from .fsm import concrete_state_to_dict

        key = repo_key(app_id, state.provenance.abstract_prompt_hash)
        created = now or dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        with self._lock(app_id):
            index = self._read_index(app_id)
            prior = index.get(key)
            generation = (prior["generation"] + 1) if prior else 1
            entry_doc = {
                "repo_key": key,
                "meta": {
                    "created_at": created,
                    "synthesizer_version": state.provenance.synthesizer_version,
                    "generation": generation,
                },
                "state": concrete_state_to_dict(state),
            }
            path = self._app_dir(app_id) / f"{state.state_id}.state.json"
            path.write_text(canonical_json(entry_doc) + "\n", encoding="utf-8")
            index[key] = {"state_id": state.state_id, "generation": generation}
            self._index_path(app_id).write_text(
                canonical_json(index) + "\n", encoding="utf-8"
            )
        logger.debug("stored %s/%s generation %d", app_id, state.state_id, generation)
        return RepoEntry(state, key, created, state.provenance.synthesizer_version, generation)

    def get(self, app_id: str, abstract_prompt_hash: str) -> Optional[RepoEntry]:
        return self.get_by_key(app_id, repo_key(app_id, abstract_prompt_hash))

    def get_by_key(self, app_id: str, key: str) -> Optional[RepoEntry]:
        from .fsm import concrete_state_from_dict

        index = self._read_index(app_id)
        meta = index.get(key)
        if meta is None:
            return None
        path = self._app_dir(app_id) / f"{meta['state_id']}.state.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("repo_key") != key:
            return None  # state id was re-pointed at a newer prompt
        state = concrete_state_from_dict(doc["state"])
        if not state.verify():
            raise StoreCorrupt(
                f"{app_id}/{state.state_id}: stored hash {state.content_hash[:12]} "
                "does not match the payload"
            )
        m = doc["meta"]
        return RepoEntry(state, key, m["created_at"], m["synthesizer_version"], m["generation"])

    def list(self, app_id: str) -> list[RepoEntry]:
        entries = []
        for key in self._read_index(app_id):
            entry = self.get_by_key(app_id, key)
            if entry is not None:
                entries.append(entry)
        return sorted(entries, key=lambda e: e.state.state_id)


# --- compilation and regeneration ---


def _branches_for(
    state_id: str, transitions: Sequence[tuple[str, TransitionLabel, str]]
) -> tuple[tuple[TransitionLabel, str], ...]:
    wanted = (TransitionLabel.ADDRESS_ACCEPTED, TransitionLabel.ADDRESS_REJECTED)
    out = []
    for label in wanted:  # fixed order keeps synthesis deterministic
        for src, lab, dst in transitions:
            if src == state_id and lab == label:
                out.append((label, dst))
    return tuple(out)


def gather_evidence(
    doc_states: Sequence[AbstractState], demos: Sequence[Demonstration]
) -> dict[str, list[DemoEvidence]]:
    """Segment every demo along its visited-state path and bucket by state."""
    by_id = {s.state_id: s for s in doc_states}
    evidence: dict[str, list[DemoEvidence]] = {}
    for demo in demos:
        if not demo.visited_states:
            raise SegmentationMismatch(
                f"demonstration for {demo.app_id!r} does not say which states it visits"
            )
        unknown = [sid for sid in demo.visited_states if sid not in by_id]
        if unknown:
            raise UnknownStateRef(
                f"demonstration visits undeclared states: {unknown}"
            )
        path = [by_id[sid] for sid in demo.visited_states]
        for segment in segment_demonstration(demo, path):
            evidence.setdefault(segment.state_id, []).append(DemoEvidence(demo, segment))
    return evidence


def compile_workflow(
    doc: WorkflowDoc,
    demos: Sequence[Demonstration],
    repo: StateRepository,
    synthesizer: Optional[Synthesizer] = None,
) -> WorkflowFSM:
    """Compile a workflow document against demonstrations and the cache.

    States whose (app, prompt) pair is already in the repository are
    reused without looking at the demos; everything else is synthesized
    and stored. States with neither cache entry nor evidence are left
    abstract and the FSM is built permissively around them.
    """
    synthesizer = synthesizer or ReferenceSynthesizer()
    evidence = gather_evidence(doc.abstract_states, demos)
    concrete: dict[str, ConcreteState] = {}
    for abstract in doc.abstract_states:
        cached = repo.get(doc.app_id, digest_text(abstract.prompt))
        if cached is not None:
            concrete[abstract.state_id] = cached.state
            continue
        ev = evidence.get(abstract.state_id)
        if not ev:
            logger.warning(
                "%s/%s: no cached state and no demonstration evidence",
                doc.app_id,
                abstract.state_id,
            )
            continue
        state = synthesizer.synthesize(
            abstract,
            ev,
            doc.app_id,
            branches=_branches_for(abstract.state_id, doc.transitions),
            extraction=doc.extraction.get(abstract.state_id, ()),
        )
        repo.put(doc.app_id, state)
        concrete[abstract.state_id] = state
    return build_fsm(
        app_id=doc.app_id,
        abstract_states=doc.abstract_states,
        transitions=doc.transitions,
        concrete=concrete,
        input_schema=doc.input_schema,
        entry_url=doc.entry_url,
        permissive=True,
    )


def regenerate(
    fsm: WorkflowFSM,
    failed_state: str,
    demos: Sequence[Demonstration],
    repo: StateRepository,
    synthesizer: Optional[Synthesizer] = None,
) -> WorkflowFSM:
    """Re-synthesize exactly one state from fresh evidence.

    Branch wiring is recovered from the FSM's transitions and extraction
    rules from the previous compiled form, so the regenerated state slots
    into the same graph; every other state is carried over untouched.
    """
    synthesizer = synthesizer or ReferenceSynthesizer()
    if failed_state not in fsm.abstract:
        raise UnknownStateRef(f"cannot regenerate unknown state {failed_state!r}")
    abstract = fsm.abstract[failed_state]

    evidence = gather_evidence(list(fsm.abstract.values()), demos)
    ev = evidence.get(failed_state)
    if not ev:
        raise SegmentationMismatch(
            f"none of the supplied demonstrations pass through {failed_state!r}"
        )

    extraction: tuple[ExtractionRule, ...] = ()
    old = fsm.states.get(failed_state)
    if old is not None:
        for step in old.script.steps:
            if isinstance(step, ExtractFields):
                extraction = step.rules
                break

    transitions = [(t.src, t.label, t.dst) for t in fsm.transitions]
    state = synthesizer.synthesize(
        abstract,
        ev,
        fsm.app_id,
        branches=_branches_for(failed_state, transitions),
        extraction=extraction,
    )
    repo.put(fsm.app_id, state)

    concrete = dict(fsm.states)
    concrete[failed_state] = state
    return build_fsm(
        app_id=fsm.app_id,
        abstract_states=list(fsm.abstract.values()),
        transitions=transitions,
        concrete=concrete,
        input_schema=fsm.input_schema,
        entry_url=fsm.entry_url,
        permissive=True,
    )
