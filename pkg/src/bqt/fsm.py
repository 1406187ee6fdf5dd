"""Workflow finite-state machines.

A provider workflow is a small FSM over page states. Authors declare
abstract states (natural-language prompts plus roles); compilation
attaches a concrete keyword detector and action script to each one.
Transitions are labeled with a closed set of outcomes so the executor
can follow edges without free-form string matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from string import Formatter
from typing import Iterable, Mapping, Optional, Sequence, Union

from .canonical import canonical_json, digest
from .errors import DuplicateTransitionLabel, NoTerminalReachable, UnknownStateRef


class TransitionLabel(str, Enum):
    SCRIPT_DONE = "script_done"
    ADDRESS_ACCEPTED = "address_accepted"
    ADDRESS_REJECTED = "address_rejected"
    DETECTOR_TIMEOUT = "detector_timeout"


class StateRole(str, Enum):
    ENTRY = "entry"
    INTERMEDIATE = "intermediate"
    TERMINAL = "terminal"


class TerminalKind(str, Enum):
    PLANS_FOUND = "plans_found"
    NO_SERVICE = "no_service"
    ERROR = "error"


@dataclass(frozen=True)
class AbstractState:
    """A page state described by intent rather than by pixels."""

    state_id: str
    prompt: str
    role: StateRole = StateRole.INTERMEDIATE
    terminal_kind: Optional[TerminalKind] = None

    def __post_init__(self) -> None:
        if not self.state_id:
            raise ValueError("state_id must be non-empty")
        if not self.prompt:
            raise ValueError(f"state {self.state_id!r}: prompt must be non-empty")
        if (self.role is StateRole.TERMINAL) != (self.terminal_kind is not None):
            raise ValueError(
                f"state {self.state_id!r}: terminal_kind is required exactly when "
                "role is terminal"
            )


@dataclass(frozen=True)
class KeywordSpec:
    """One keyword a detector or action looks for on screen.

    ``region_hint`` is an optional (x0, y0, x1, y1) box in normalized
    viewport coordinates; when set, only boxes whose center falls inside
    it count as matches.
    """

    text: str
    region_hint: Optional[tuple[float, float, float, float]] = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("keyword text must be non-empty")
        if self.region_hint is not None:
            x0, y0, x1, y1 = self.region_hint
            if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
                raise ValueError(f"region_hint out of order or range: {self.region_hint}")


@dataclass(frozen=True)
class KeywordDetector:
    """Recognizes a page state from the text boxes visible on it.

    The score is ``(matched_required + 0.1 * matched_optional) / len(required)``
    capped at 1.0; the detector fires when the score reaches ``min_score``.
    """

    required: tuple[KeywordSpec, ...]
    optional: tuple[KeywordSpec, ...] = ()
    min_score: float = 1.0

    def __post_init__(self) -> None:
        if not self.required:
            raise ValueError("detector needs at least one required keyword")
        if not (0.0 < self.min_score <= 1.0):
            raise ValueError(f"min_score must be in (0, 1]: {self.min_score}")


# --- action script steps ---


@dataclass(frozen=True)
class Click:
    """Click at an offset from a located keyword box."""

    target: KeywordSpec
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class TypeText:
    """Click into a field located via ``target`` and type a rendered template.

    Template placeholders like ``{street}`` are filled from the workflow
    input values at run time.
    """

    target: KeywordSpec
    template: str
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class Scroll:
    dy: int


@dataclass(frozen=True)
class WaitFor:
    """Block until a detector fires or the timeout elapses."""

    detector: KeywordDetector
    timeout_ms: int

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("WaitFor timeout_ms must be positive")


@dataclass(frozen=True)
class ExtractionRule:
    """Capture text relative to an anchor keyword.

    ``region`` is (dx0, dy0, dx1, dy1) measured from the anchor box center
    in units of the anchor box width (x) and height (y). Boxes whose
    centers fall inside the region are joined in reading order; when
    ``pattern`` is set, the first regex match replaces the joined text.
    """

    field_name: str
    anchor: KeywordSpec
    region: tuple[float, float, float, float]
    pattern: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.field_name:
            raise ValueError("extraction rule needs a field name")
        dx0, dy0, dx1, dy1 = self.region
        if dx0 > dx1 or dy0 > dy1:
            raise ValueError(f"extraction region out of order: {self.region}")


@dataclass(frozen=True)
class ExtractFields:
    rules: tuple[ExtractionRule, ...]


@dataclass(frozen=True)
class Classify:
    """Poll the screen until one of the successor states' detectors fires.

    Emits the branch label of the first matching successor, or
    ``detector_timeout`` if none fires before the state deadline.
    """

    branches: tuple[tuple[TransitionLabel, str], ...]

    def __post_init__(self) -> None:
        if not self.branches:
            raise ValueError("Classify needs at least one branch")


ActionStep = Union[Click, TypeText, Scroll, WaitFor, ExtractFields, Classify]


@dataclass(frozen=True)
class ActionScript:
    steps: tuple[ActionStep, ...] = ()


@dataclass(frozen=True)
class Provenance:
    """Where a concrete state came from: which prompt, app, and synthesizer."""

    app_id: str
    abstract_prompt_hash: str
    synthesizer_version: str


@dataclass(frozen=True)
class ConcreteState:
    """A compiled state: detector + script + provenance, content addressed."""

    state_id: str
    detector: KeywordDetector
    script: ActionScript
    provenance: Provenance
    content_hash: str

    @classmethod
    def create(
        cls,
        state_id: str,
        detector: KeywordDetector,
        script: ActionScript,
        provenance: Provenance,
    ) -> "ConcreteState":
        h = state_content_hash(detector, script, provenance)
        return cls(state_id, detector, script, provenance, h)

    def verify(self) -> bool:
        """True when the stored hash matches a recomputation."""
        return self.content_hash == state_content_hash(
            self.detector, self.script, self.provenance
        )


@dataclass(frozen=True)
class Transition:
    src: str
    label: TransitionLabel
    dst: str


@dataclass(frozen=True)
class WorkflowFSM:
    """A validated workflow: abstract + concrete states and labeled edges."""

    app_id: str
    input_schema: tuple[str, ...]
    abstract: Mapping[str, AbstractState]
    states: Mapping[str, ConcreteState]
    transitions: tuple[Transition, ...]
    entry: str
    entry_url: Optional[str] = None
    warnings: tuple[str, ...] = ()
    _edges: Mapping[tuple[str, TransitionLabel], str] = field(
        default_factory=dict, repr=False
    )

    def terminal_kind(self, state_id: str) -> Optional[TerminalKind]:
        st = self.abstract.get(state_id)
        return st.terminal_kind if st else None


# --- serialization of detector / script pieces ---


def _spec_to_dict(spec: KeywordSpec) -> dict:
    d: dict = {"text": spec.text}
    if spec.region_hint is not None:
        d["region_hint"] = list(spec.region_hint)
    return d


def _spec_from_dict(d: Mapping) -> KeywordSpec:
    hint = d.get("region_hint")
    return KeywordSpec(d["text"], tuple(hint) if hint is not None else None)


def _detector_to_dict(det: KeywordDetector) -> dict:
    return {
        "required": [_spec_to_dict(s) for s in det.required],
        "optional": [_spec_to_dict(s) for s in det.optional],
        "min_score": det.min_score,
    }


def _detector_from_dict(d: Mapping) -> KeywordDetector:
    return KeywordDetector(
        required=tuple(_spec_from_dict(s) for s in d["required"]),
        optional=tuple(_spec_from_dict(s) for s in d.get("optional", [])),
        min_score=float(d.get("min_score", 1.0)),
    )


def _rule_to_dict(rule: ExtractionRule) -> dict:
    d: dict = {
        "field_name": rule.field_name,
        "anchor": _spec_to_dict(rule.anchor),
        "region": list(rule.region),
    }
    if rule.pattern is not None:
        d["pattern"] = rule.pattern
    return d


def _rule_from_dict(d: Mapping) -> ExtractionRule:
    return ExtractionRule(
        field_name=d["field_name"],
        anchor=_spec_from_dict(d["anchor"]),
        region=tuple(d["region"]),
        pattern=d.get("pattern"),
    )


def step_to_dict(step: ActionStep) -> dict:
    if isinstance(step, Click):
        return {"kind": "click", "target": _spec_to_dict(step.target), "offset": list(step.offset)}
    if isinstance(step, TypeText):
        return {
            "kind": "type",
            "target": _spec_to_dict(step.target),
            "template": step.template,
            "offset": list(step.offset),
        }
    if isinstance(step, Scroll):
        return {"kind": "scroll", "dy": step.dy}
    if isinstance(step, WaitFor):
        return {
            "kind": "wait_for",
            "detector": _detector_to_dict(step.detector),
            "timeout_ms": step.timeout_ms,
        }
    if isinstance(step, ExtractFields):
        return {"kind": "extract", "rules": [_rule_to_dict(r) for r in step.rules]}
    if isinstance(step, Classify):
        return {
            "kind": "classify",
            "branches": [[label.value, dst] for label, dst in step.branches],
        }
    raise TypeError(f"unknown step type: {type(step).__name__}")


def step_from_dict(d: Mapping) -> ActionStep:
    kind = d.get("kind")
    if kind == "click":
        return Click(_spec_from_dict(d["target"]), tuple(d.get("offset", (0.0, 0.0))))
    if kind == "type":
        return TypeText(
            _spec_from_dict(d["target"]), d["template"], tuple(d.get("offset", (0.0, 0.0)))
        )
    if kind == "scroll":
        return Scroll(int(d["dy"]))
    if kind == "wait_for":
        return WaitFor(_detector_from_dict(d["detector"]), int(d["timeout_ms"]))
    if kind == "extract":
        return ExtractFields(tuple(_rule_from_dict(r) for r in d["rules"]))
    if kind == "classify":
        return Classify(
            tuple((TransitionLabel(label), dst) for label, dst in d["branches"])
        )
    raise ValueError(f"unknown step kind: {kind!r}")


def state_content_hash(
    detector: KeywordDetector, script: ActionScript, provenance: Provenance
) -> str:
    """Content hash over everything that defines a compiled state's behavior."""
    return digest(
        {
            "detector": _detector_to_dict(detector),
            "script": [step_to_dict(s) for s in script.steps],
            "provenance": {
                "app_id": provenance.app_id,
                "abstract_prompt_hash": provenance.abstract_prompt_hash,
                "synthesizer_version": provenance.synthesizer_version,
            },
        }
    )


def concrete_state_to_dict(state: ConcreteState) -> dict:
    return {
        "state_id": state.state_id,
        "detector": _detector_to_dict(state.detector),
        "script": [step_to_dict(s) for s in state.script.steps],
        "provenance": {
            "app_id": state.provenance.app_id,
            "abstract_prompt_hash": state.provenance.abstract_prompt_hash,
            "synthesizer_version": state.provenance.synthesizer_version,
        },
        "content_hash": state.content_hash,
    }


def concrete_state_from_dict(d: Mapping) -> ConcreteState:
    prov = d["provenance"]
    return ConcreteState(
        state_id=d["state_id"],
        detector=_detector_from_dict(d["detector"]),
        script=ActionScript(tuple(step_from_dict(s) for s in d["script"])),
        provenance=Provenance(
            app_id=prov["app_id"],
            abstract_prompt_hash=prov["abstract_prompt_hash"],
            synthesizer_version=prov["synthesizer_version"],
        ),
        content_hash=d["content_hash"],
    )


# --- construction and validation ---


def _template_placeholders(template: str) -> set[str]:
    return {name for _, name, _, _ in Formatter().parse(template) if name}


def build_fsm(
    app_id: str,
    abstract_states: Sequence[AbstractState],
    transitions: Sequence[tuple[str, TransitionLabel, str]],
    concrete: Mapping[str, ConcreteState],
    input_schema: Sequence[str] = (),
    entry_url: Optional[str] = None,
    permissive: bool = False,
) -> WorkflowFSM:
    """Assemble and validate a workflow FSM.

    Strict mode requires a concrete state for every abstract one. With
    ``permissive=True``, states lacking a concrete compilation are kept
    in the abstract map but excluded from ``states``; transitions that
    touch them are dropped with a warning so partially compiled
    workflows still load.
    """
    if not app_id:
        raise ValueError("app_id must be non-empty")

    by_id: dict[str, AbstractState] = {}
    for st in abstract_states:
        if st.state_id in by_id:
            raise ValueError(f"duplicate state id {st.state_id!r}")
        by_id[st.state_id] = st

    entries = [s.state_id for s in abstract_states if s.role is StateRole.ENTRY]
    if len(entries) != 1:
        raise ValueError(f"workflow needs exactly one entry state, found {entries}")
    entry = entries[0]

    warnings: list[str] = []
    missing = [sid for sid in by_id if sid not in concrete]
    extra = [sid for sid in concrete if sid not in by_id]
    if extra:
        raise UnknownStateRef(f"concrete states for undeclared ids: {sorted(extra)}")
    if missing:
        if not permissive:
            raise UnknownStateRef(f"no concrete state for: {sorted(missing)}")
        for sid in sorted(missing):
            warnings.append(f"state {sid!r} has no compiled form; its edges are dropped")
    if entry in missing:
        raise NoTerminalReachable(f"entry state {entry!r} has no compiled form")

    kept: list[Transition] = []
    edges: dict[tuple[str, TransitionLabel], str] = {}
    for src, label, dst in transitions:
        if src not in by_id or dst not in by_id:
            raise UnknownStateRef(f"transition ({src!r}, {label}, {dst!r}) references an undeclared state")
        label = TransitionLabel(label)
        if src in missing or dst in missing:
            continue
        key = (src, label)
        if key in edges:
            raise DuplicateTransitionLabel(f"state {src!r} has two edges labeled {label.value!r}")
        edges[key] = dst
        kept.append(Transition(src, label, dst))

    for sid, state in concrete.items():
        for step in state.script.steps:
            if isinstance(step, TypeText):
                unknown = _template_placeholders(step.template) - set(input_schema)
                if unknown:
                    raise ValueError(
                        f"state {sid!r} types placeholders outside the input schema: {sorted(unknown)}"
                    )

    # at least one terminal must be reachable from the entry
    reachable = {entry}
    frontier = [entry]
    while frontier:
        cur = frontier.pop()
        for (src, _), dst in edges.items():
            if src == cur and dst not in reachable:
                reachable.add(dst)
                frontier.append(dst)
    terminals = {s.state_id for s in abstract_states if s.role is StateRole.TERMINAL}
    if not (reachable & terminals):
        raise NoTerminalReachable(
            f"no terminal state reachable from {entry!r} (reachable: {sorted(reachable)})"
        )

    return WorkflowFSM(
        app_id=app_id,
        input_schema=tuple(input_schema),
        abstract=dict(by_id),
        states=dict(concrete),
        transitions=tuple(kept),
        entry=entry,
        entry_url=entry_url,
        warnings=tuple(warnings),
        _edges=edges,
    )


def next_state(fsm: WorkflowFSM, current: str, label: TransitionLabel) -> Optional[str]:
    """Successor of ``current`` under ``label``, or None when no edge exists."""
    if current not in fsm.abstract:
        raise UnknownStateRef(f"unknown state {current!r}")
    return fsm._edges.get((current, TransitionLabel(label)))


# --- workflow documents (.fsm.json) ---


def _abstract_to_dict(st: AbstractState) -> dict:
    d: dict = {"state_id": st.state_id, "prompt": st.prompt, "role": st.role.value}
    if st.terminal_kind is not None:
        d["terminal_kind"] = st.terminal_kind.value
    return d


def _abstract_from_dict(d: Mapping) -> AbstractState:
    kind = d.get("terminal_kind")
    return AbstractState(
        state_id=d["state_id"],
        prompt=d["prompt"],
        role=StateRole(d.get("role", "intermediate")),
        terminal_kind=TerminalKind(kind) if kind is not None else None,
    )


@dataclass
class WorkflowDoc:
    """Parsed .fsm.json document; concrete states are optional (pre-compile)."""

    app_id: str
    input_schema: tuple[str, ...]
    abstract_states: tuple[AbstractState, ...]
    transitions: tuple[tuple[str, TransitionLabel, str], ...]
    extraction: Mapping[str, tuple[ExtractionRule, ...]]
    entry_url: Optional[str] = None
    concrete: Optional[Mapping[str, ConcreteState]] = None


def workflow_doc_from_dict(d: Mapping) -> WorkflowDoc:
    states = tuple(_abstract_from_dict(s) for s in d["states"])
    transitions = tuple(
        (src, TransitionLabel(label), dst) for src, label, dst in d.get("transitions", [])
    )
    extraction = {
        sid: tuple(_rule_from_dict(r) for r in rules)
        for sid, rules in d.get("extraction", {}).items()
    }
    concrete = None
    if "concrete" in d:
        concrete = {
            sid: concrete_state_from_dict(cd) for sid, cd in d["concrete"].items()
        }
    return WorkflowDoc(
        app_id=d["app_id"],
        input_schema=tuple(d.get("input_schema", [])),
        abstract_states=states,
        transitions=transitions,
        extraction=extraction,
        entry_url=d.get("entry_url"),
        concrete=concrete,
    )


def workflow_doc_to_dict(doc: WorkflowDoc) -> dict:
    d: dict = {
        "app_id": doc.app_id,
        "input_schema": list(doc.input_schema),
        "states": [_abstract_to_dict(s) for s in doc.abstract_states],
        "transitions": [[src, label.value, dst] for src, label, dst in doc.transitions],
    }
    if doc.extraction:
        d["extraction"] = {
            sid: [_rule_to_dict(r) for r in rules] for sid, rules in doc.extraction.items()
        }
    if doc.entry_url is not None:
        d["entry_url"] = doc.entry_url
    if doc.concrete is not None:
        d["concrete"] = {
            sid: concrete_state_to_dict(cs) for sid, cs in sorted(doc.concrete.items())
        }
    return d


def doc_from_fsm(fsm: WorkflowFSM, extraction: Mapping[str, tuple[ExtractionRule, ...]] | None = None) -> WorkflowDoc:
    return WorkflowDoc(
        app_id=fsm.app_id,
        input_schema=fsm.input_schema,
        abstract_states=tuple(fsm.abstract[sid] for sid in fsm.abstract),
        transitions=tuple((t.src, t.label, t.dst) for t in fsm.transitions),
        extraction=dict(extraction or {}),
        entry_url=fsm.entry_url,
        concrete=dict(fsm.states),
    )


def fsm_from_doc(doc: WorkflowDoc, permissive: bool = False) -> WorkflowFSM:
    if doc.concrete is None:
        raise ValueError(f"workflow {doc.app_id!r} has no compiled states yet")
    return build_fsm(
        app_id=doc.app_id,
        abstract_states=doc.abstract_states,
        transitions=doc.transitions,
        concrete=doc.concrete,
        input_schema=doc.input_schema,
        entry_url=doc.entry_url,
        permissive=permissive,
    )


def load_workflow_doc(path: str | Path) -> WorkflowDoc:
    with open(path, encoding="utf-8") as fh:
        return workflow_doc_from_dict(json.load(fh))


def save_workflow_doc(doc: WorkflowDoc, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(workflow_doc_to_dict(doc)) + "\n", encoding="utf-8")


def load_workflow(path: str | Path, permissive: bool = False) -> WorkflowFSM:
    """Load a compiled workflow, re-validating the graph on the way in."""
    return fsm_from_doc(load_workflow_doc(path), permissive=permissive)


def save_workflow(
    fsm: WorkflowFSM,
    path: str | Path,
    extraction: Mapping[str, tuple[ExtractionRule, ...]] | None = None,
) -> None:
    save_workflow_doc(doc_from_fsm(fsm, extraction), path)
