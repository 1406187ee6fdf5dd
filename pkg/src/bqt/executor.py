"""Workflow execution: drive a session through an FSM and record a trace.

The executor never acts blind: every action belongs to the state most
recently identified on screen. Traces hash only behavior-relevant
fields (state, action kind, target text, transition label), so replays
on identical pages produce identical trace hashes regardless of wall
clock or pixel noise.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .canonical import canonical_json, digest
from .errors import BackendError, ExtractorUnavailable, ImageUnreadable
from .fsm import (
    ActionScript,
    Classify,
    Click,
    ExtractFields,
    ExtractionRule,
    KeywordDetector,
    Scroll,
    StateRole,
    TerminalKind,
    TransitionLabel,
    TypeText,
    WaitFor,
    WorkflowFSM,
    next_state,
)
from .perception import (
    FixtureExtractor,
    ScreenSnapshot,
    StateMatch,
    TextBox,
    TextExtraction,
    anchor_point,
    detector_fires,
    detector_score,
    extract_text,
    identify_state,
    locate_keyword,
)

logger = logging.getLogger(__name__)


class Session(Protocol):
    """A driveable page session (mock or live browser)."""

    backend: str
    viewport_px: tuple[int, int]

    def snapshot(self) -> ScreenSnapshot: ...
    def click(self, x: int, y: int) -> None: ...
    def type_text(self, text: str) -> None: ...
    def scroll(self, dy: int) -> None: ...
    def sleep(self, ms: int) -> None: ...
    def now_ms(self) -> int: ...


class Outcome(str, Enum):
    PLANS_FOUND = "plans_found"
    NO_SERVICE = "no_service"
    STATE_DETECTION_FAILURE = "state_detection_failure"
    TIMEOUT = "timeout"
    BACKEND_ERROR = "backend_error"


RETRYABLE_OUTCOMES = frozenset({Outcome.STATE_DETECTION_FAILURE, Outcome.TIMEOUT})
SUCCESS_OUTCOMES = frozenset({Outcome.PLANS_FOUND, Outcome.NO_SERVICE})


@dataclass(frozen=True)
class WorkflowInput:
    """Values available to TypeText templates, keyed per the input schema."""

    address_id: str
    values: Mapping[str, str]


@dataclass(frozen=True)
class Limits:
    per_state_timeout_ms: int = 15000
    max_steps: int = 60
    unknown_retries: int = 3
    retry_delay_ms: int = 1000
    poll_interval_ms: int = 250


@dataclass(frozen=True)
class TraceStep:
    """One recorded event; only (state_id, kind, target, label) are hashed."""

    state_id: str
    kind: str
    target: Optional[str] = None
    label: Optional[str] = None
    at_ms: int = 0
    detail: Optional[str] = None

    def hashed_fields(self) -> list:
        return [self.state_id, self.kind, self.target, self.label]


@dataclass(frozen=True)
class StepTrace:
    steps: tuple[TraceStep, ...]
    trace_hash: str

    def to_dict(self) -> dict:
        return {
            "trace_hash": self.trace_hash,
            "steps": [
                {
                    "state_id": s.state_id,
                    "kind": s.kind,
                    "target": s.target,
                    "label": s.label,
                    "at_ms": s.at_ms,
                    "detail": s.detail,
                }
                for s in self.steps
            ],
        }


def trace_hash_of(steps: Sequence[TraceStep]) -> str:
    return digest([s.hashed_fields() for s in steps])


@dataclass(frozen=True)
class WorkflowResult:
    outcome: Outcome
    raw_fields: tuple[tuple[str, str], ...]
    trace: StepTrace
    failed_state: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "raw_fields": [list(pair) for pair in self.raw_fields],
            "failed_state": self.failed_state,
            "trace": self.trace.to_dict(),
        }


class ActionOutcome(str, Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    TARGET_NOT_FOUND = "target_not_found"


@dataclass(frozen=True)
class ActionResult:
    outcome: ActionOutcome
    fields: tuple[tuple[str, str], ...] = ()
    label: Optional[TransitionLabel] = None
    target_text: Optional[str] = None


_STEP_KIND = {
    "Click": "click",
    "TypeText": "type",
    "Scroll": "scroll",
    "WaitFor": "wait_for",
    "ExtractFields": "extract",
}

_TERMINAL_OUTCOME = {
    TerminalKind.PLANS_FOUND: Outcome.PLANS_FOUND,
    TerminalKind.NO_SERVICE: Outcome.NO_SERVICE,
    # an error terminal still ends the walk; the run is retried like a timeout
    TerminalKind.ERROR: Outcome.TIMEOUT,
}


def render_template(template: str, bindings: Mapping[str, str]) -> str:
    return template.format(**bindings)


def extract_fields(
    boxes: Sequence[TextBox],
    rules: Sequence[ExtractionRule],
    viewport_px: tuple[int, int],
) -> list[tuple[str, str]]:
    """Apply extraction rules to one screen's boxes.

    Each rule anchors on a keyword box, gathers boxes whose centers fall
    in the rule's region (in anchor-box units from the anchor center),
    joins their text in reading order, then optionally keeps only the
    first regex match. Rules whose anchor or region finds nothing yield
    an empty value so downstream code sees every declared field.
    """
    out: list[tuple[str, str]] = []
    for rule in rules:
        anchor = locate_keyword(boxes, rule.anchor, viewport_px)
        if anchor is None:
            out.append((rule.field_name, ""))
            continue
        ax, ay = anchor.center
        _, _, aw, ah = anchor.bbox_px
        dx0, dy0, dx1, dy1 = rule.region
        x0, x1 = ax + dx0 * aw, ax + dx1 * aw
        y0, y1 = ay + dy0 * ah, ay + dy1 * ah
        hits = [
            b
            for b in boxes
            if b is not anchor
            and x0 <= b.center[0] <= x1
            and y0 <= b.center[1] <= y1
        ]
        hits.sort(key=lambda b: (b.bbox_px[1], b.bbox_px[0]))
        text = " ".join(b.text for b in hits).strip()
        if rule.pattern and text:
            m = re.search(rule.pattern, text)
            text = m.group(0) if m else ""
        out.append((rule.field_name, text))
    return out


def _observe(session: Session, extractor: TextExtraction) -> tuple[ScreenSnapshot, list[TextBox]]:
    try:
        snap = session.snapshot()
        boxes = extract_text(snap, extractor)
    except (ExtractorUnavailable, ImageUnreadable) as exc:
        raise BackendError(str(exc)) from exc
    return snap, boxes


def execute_action(
    session: Session,
    step,
    bindings: Mapping[str, str],
    boxes: Sequence[TextBox],
    extractor: Optional[TextExtraction] = None,
    deadline_ms: Optional[int] = None,
    poll_interval_ms: int = 250,
) -> ActionResult:
    """Run one script step against the current screen.

    Click and TypeText resolve their target on the provided boxes and
    report ``target_not_found`` when the keyword is absent, letting the
    caller re-observe rather than acting on a stale page.
    """
    vp = session.viewport_px
    if isinstance(step, Click):
        box = locate_keyword(boxes, step.target, vp)
        if box is None:
            return ActionResult(ActionOutcome.TARGET_NOT_FOUND, target_text=step.target.text)
        x, y = anchor_point(box, step.offset, vp)
        session.click(x, y)
        return ActionResult(ActionOutcome.OK, target_text=step.target.text)
    if isinstance(step, TypeText):
        box = locate_keyword(boxes, step.target, vp)
        if box is None:
            return ActionResult(ActionOutcome.TARGET_NOT_FOUND, target_text=step.target.text)
        x, y = anchor_point(box, step.offset, vp)
        session.click(x, y)
        session.type_text(render_template(step.template, bindings))
        return ActionResult(ActionOutcome.OK, target_text=step.target.text)
    if isinstance(step, Scroll):
        session.scroll(step.dy)
        return ActionResult(ActionOutcome.OK)
    if isinstance(step, WaitFor):
        if extractor is None:
            raise ValueError("WaitFor needs an extractor")
        stop = session.now_ms() + step.timeout_ms
        if deadline_ms is not None:
            stop = min(stop, deadline_ms)
        while True:
            _, fresh = _observe(session, extractor)
            if detector_fires(fresh, step.detector, vp):
                return ActionResult(ActionOutcome.OK)
            if session.now_ms() >= stop:
                return ActionResult(ActionOutcome.TIMEOUT)
            session.sleep(poll_interval_ms)
    if isinstance(step, ExtractFields):
        return ActionResult(
            ActionOutcome.OK, fields=tuple(extract_fields(boxes, step.rules, vp))
        )
    raise TypeError(f"execute_action cannot run {type(step).__name__}")


def _classify(
    session: Session,
    step: Classify,
    fsm: WorkflowFSM,
    extractor: TextExtraction,
    deadline_ms: int,
    poll_interval_ms: int,
) -> TransitionLabel:
    vp = session.viewport_px
    while True:
        _, boxes = _observe(session, extractor)
        for label, successor in step.branches:
            det = fsm.states[successor].detector
            if detector_fires(boxes, det, vp):
                return label
        if session.now_ms() >= deadline_ms:
            return TransitionLabel.DETECTOR_TIMEOUT
        session.sleep(poll_interval_ms)


def run_workflow(
    fsm: WorkflowFSM,
    session: Session,
    workflow_input: WorkflowInput,
    limits: Limits = Limits(),
    extractor: Optional[TextExtraction] = None,
) -> WorkflowResult:
    """Walk the FSM against a live session until a terminal state or failure.

    Outcomes: ``plans_found`` / ``no_service`` mirror the terminal kind;
    ``state_detection_failure`` marks a state whose compiled form no
    longer fits the page, either because no detector fires or because
    the identified state's script targets keep vanishing ("failed_state"
    names the culprit, the signal the regeneration path keys on);
    ``timeout`` covers exhausted budgets, dead-end labels, and error
    terminals; ``backend_error`` covers the session or extractor
    breaking underneath us.
    """
    extractor = extractor or FixtureExtractor()
    bindings = dict(workflow_input.values)
    steps: list[TraceStep] = []
    raw_fields: list[tuple[str, str]] = []
    steps_used = 0
    expected = fsm.entry
    stuck_counts: dict[str, int] = {}

    def record(kind: str, state_id: str, target: Optional[str] = None,
               label: Optional[str] = None, detail: Optional[str] = None) -> None:
        steps.append(TraceStep(state_id, kind, target, label, session.now_ms(), detail))

    def finish(outcome: Outcome, failed_state: Optional[str] = None) -> WorkflowResult:
        trace = StepTrace(tuple(steps), trace_hash_of(steps))
        return WorkflowResult(outcome, tuple(raw_fields), trace, failed_state)

    try:
        while True:
            match: Optional[StateMatch] = None
            for attempt in range(1 + limits.unknown_retries):
                _, boxes = _observe(session, extractor)
                match = identify_state(fsm, boxes, session.viewport_px)
                if match is not None:
                    break
                if attempt < limits.unknown_retries:
                    session.sleep(limits.retry_delay_ms)
            if match is None:
                record("identify", expected, label=None, detail="no detector fired")
                return finish(Outcome.STATE_DETECTION_FAILURE, failed_state=expected)

            sid = match.state_id
            record("identify", sid, detail=f"score={match.score:.2f}")
            steps_used += 1  # each state visit consumes budget, so cycles terminate
            if steps_used > limits.max_steps:
                return finish(Outcome.TIMEOUT, failed_state=None)
            state = fsm.states[sid]
            abstract = fsm.abstract[sid]
            deadline = session.now_ms() + limits.per_state_timeout_ms
            label: Optional[TransitionLabel] = None
            rescan = False

            for step in state.script.steps:
                if steps_used >= limits.max_steps:
                    return finish(Outcome.TIMEOUT, failed_state=None)
                steps_used += 1
                if isinstance(step, Classify):
                    record("classify", sid)
                    label = _classify(
                        session, step, fsm, extractor, deadline, limits.poll_interval_ms
                    )
                    break
                _, boxes = _observe(session, extractor)
                result = execute_action(
                    session, step, bindings, boxes, extractor, deadline,
                    limits.poll_interval_ms,
                )
                kind = _STEP_KIND[type(step).__name__]
                if result.outcome is ActionOutcome.TARGET_NOT_FOUND:
                    # page may have moved under us; go back to identification
                    record(kind, sid, target=result.target_text, detail="target not found")
                    rescan = True
                    break
                record(kind, sid, target=result.target_text)
                if result.fields:
                    raw_fields.extend(result.fields)
                if isinstance(step, WaitFor) and result.outcome is ActionOutcome.TIMEOUT:
                    label = TransitionLabel.DETECTOR_TIMEOUT
                    break

            if rescan:
                # the detector keeps firing but the script's targets are
                # gone: the compiled form no longer fits this page, which
                # is the same failure regeneration exists to fix
                stuck_counts[sid] = stuck_counts.get(sid, 0) + 1
                if stuck_counts[sid] > limits.unknown_retries:
                    return finish(Outcome.STATE_DETECTION_FAILURE, failed_state=sid)
                if session.now_ms() >= deadline:
                    return finish(Outcome.TIMEOUT, failed_state=None)
                continue

            if abstract.role is StateRole.TERMINAL:
                kind = abstract.terminal_kind or TerminalKind.ERROR
                record("terminal", sid, label=kind.value)
                return finish(_TERMINAL_OUTCOME[kind])

            if label is None:
                label = TransitionLabel.SCRIPT_DONE
            successor = next_state(fsm, sid, label)
            record("transition", sid, label=label.value)
            if successor is None:
                logger.debug("state %s emitted %s but has no such edge", sid, label.value)
                return finish(Outcome.TIMEOUT, failed_state=None)
            expected = successor
    except BackendError as exc:
        record("backend_error", expected, detail=str(exc))
        return finish(Outcome.BACKEND_ERROR, failed_state=None)


def save_trace(result: WorkflowResult, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(result.to_dict()) + "\n", encoding="utf-8")


def load_trace(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
