import pytest

from bqt.errors import DuplicateTransitionLabel, NoTerminalReachable, UnknownStateRef
from bqt.fsm import (
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
    TerminalKind,
    TransitionLabel,
    TypeText,
    WaitFor,
    build_fsm,
    next_state,
    state_content_hash,
    step_from_dict,
    step_to_dict,
    workflow_doc_from_dict,
    workflow_doc_to_dict,
)


def det(*words, min_score=1.0):
    return KeywordDetector(tuple(KeywordSpec(w) for w in words), min_score=min_score)


def concrete(sid, script=ActionScript(), keyword=None):
    return ConcreteState.create(
        sid,
        det(keyword or sid),
        script,
        Provenance("test-app", f"prompt-{sid}", "ref-1"),
    )


def abstracts():
    return [
        AbstractState("entry", "fill in the address", StateRole.ENTRY),
        AbstractState("plans", "plans are listed", StateRole.TERMINAL, TerminalKind.PLANS_FOUND),
        AbstractState("sorry", "no service here", StateRole.TERMINAL, TerminalKind.NO_SERVICE),
    ]


def edges():
    return [
        ("entry", TransitionLabel.ADDRESS_ACCEPTED, "plans"),
        ("entry", TransitionLabel.ADDRESS_REJECTED, "sorry"),
    ]


def all_concrete():
    return {s: concrete(s) for s in ("entry", "plans", "sorry")}


class TestAbstractState:
    def test_terminal_needs_kind(self):
        with pytest.raises(ValueError):
            AbstractState("x", "p", StateRole.TERMINAL)

    def test_kind_only_on_terminal(self):
        with pytest.raises(ValueError):
            AbstractState("x", "p", StateRole.ENTRY, TerminalKind.ERROR)

    def test_empty_prompt_rejected(self):
        with pytest.raises(ValueError):
            AbstractState("x", "")


class TestValidation:
    def test_happy_build(self):
        fsm = build_fsm("test-app", abstracts(), edges(), all_concrete())
        assert fsm.entry == "entry"
        assert len(fsm.transitions) == 2
        assert not fsm.warnings

    def test_two_entries_rejected(self):
        states = abstracts() + [AbstractState("entry2", "p", StateRole.ENTRY)]
        conc = all_concrete()
        conc["entry2"] = concrete("entry2")
        with pytest.raises(ValueError, match="exactly one entry"):
            build_fsm("test-app", states, edges(), conc)

    def test_duplicate_label_rejected(self):
        bad = edges() + [("entry", TransitionLabel.ADDRESS_ACCEPTED, "sorry")]
        with pytest.raises(DuplicateTransitionLabel):
            build_fsm("test-app", abstracts(), bad, all_concrete())

    def test_undeclared_state_in_transition(self):
        bad = edges() + [("entry", TransitionLabel.SCRIPT_DONE, "ghost")]
        with pytest.raises(UnknownStateRef):
            build_fsm("test-app", abstracts(), bad, all_concrete())

    def test_undeclared_concrete_state(self):
        conc = all_concrete()
        conc["ghost"] = concrete("ghost")
        with pytest.raises(UnknownStateRef):
            build_fsm("test-app", abstracts(), edges(), conc)

    def test_missing_concrete_strict(self):
        conc = all_concrete()
        del conc["plans"]
        with pytest.raises(UnknownStateRef):
            build_fsm("test-app", abstracts(), edges(), conc)

    def test_missing_concrete_permissive_drops_edges(self):
        conc = all_concrete()
        del conc["sorry"]
        fsm = build_fsm("test-app", abstracts(), edges(), conc, permissive=True)
        assert [t.dst for t in fsm.transitions] == ["plans"]
        assert any("sorry" in w for w in fsm.warnings)
        assert next_state(fsm, "entry", TransitionLabel.ADDRESS_REJECTED) is None

    def test_permissive_entry_must_compile(self):
        conc = all_concrete()
        del conc["entry"]
        with pytest.raises(NoTerminalReachable):
            build_fsm("test-app", abstracts(), edges(), conc, permissive=True)

    def test_unreachable_terminal_rejected(self):
        with pytest.raises(NoTerminalReachable):
            build_fsm("test-app", abstracts(), [], all_concrete())

    def test_permissive_drop_cannot_orphan_all_terminals(self):
        conc = all_concrete()
        del conc["plans"]
        del conc["sorry"]
        with pytest.raises(NoTerminalReachable):
            build_fsm("test-app", abstracts(), edges(), conc, permissive=True)

    def test_template_placeholders_must_be_in_schema(self):
        conc = all_concrete()
        script = ActionScript((TypeText(KeywordSpec("street"), "{street}"),))
        conc["entry"] = concrete("entry", script)
        with pytest.raises(ValueError, match="input schema"):
            build_fsm("test-app", abstracts(), edges(), conc, input_schema=("zip",))
        fsm = build_fsm("test-app", abstracts(), edges(), conc, input_schema=("street",))
        assert fsm.input_schema == ("street",)

    def test_next_state_unknown_current(self):
        fsm = build_fsm("test-app", abstracts(), edges(), all_concrete())
        with pytest.raises(UnknownStateRef):
            next_state(fsm, "ghost", TransitionLabel.SCRIPT_DONE)


class TestContentHash:
    def test_insensitive_to_construction_order(self):
        a = state_content_hash(det("x", "y"), ActionScript(), Provenance("a", "p", "v"))
        b = state_content_hash(det("x", "y"), ActionScript(), Provenance("a", "p", "v"))
        assert a == b

    def test_sensitive_to_every_part(self):
        base = concrete("entry")
        other_detector = ConcreteState.create(
            "entry", det("entry", "extra"), ActionScript(), base.provenance
        )
        other_script = ConcreteState.create(
            "entry", base.detector, ActionScript((Scroll(10),)), base.provenance
        )
        other_prov = ConcreteState.create(
            "entry", base.detector, base.script, Provenance("test-app", "prompt-entry", "ref-2")
        )
        hashes = {base.content_hash, other_detector.content_hash,
                  other_script.content_hash, other_prov.content_hash}
        assert len(hashes) == 4

    def test_verify_detects_tampering(self):
        good = concrete("entry")
        assert good.verify()
        bad = ConcreteState(
            good.state_id, det("changed"), good.script, good.provenance, good.content_hash
        )
        assert not bad.verify()


class TestStepSerialization:
    STEPS = [
        Click(KeywordSpec("go"), (0.5, -1.0)),
        TypeText(KeywordSpec("street", (0.0, 0.1, 0.5, 0.4)), "{street}", (0.0, 1.5)),
        Scroll(-120),
        WaitFor(det("loaded"), 2000),
        ExtractFields((ExtractionRule("plan_1_name", KeywordSpec("Plan"), (-1.0, 0.5, 1.0, 2.5)),)),
        ExtractFields(
            (ExtractionRule("plan_1_price", KeywordSpec("Price"), (0.0, 0.0, 1.0, 1.0), r"\$\d+"),)
        ),
        Classify(((TransitionLabel.ADDRESS_ACCEPTED, "plans"),)),
    ]

    @pytest.mark.parametrize("step", STEPS, ids=lambda s: type(s).__name__)
    def test_round_trip(self, step):
        assert step_from_dict(step_to_dict(step)) == step

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            step_from_dict({"kind": "teleport"})

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            step_from_dict({"kind": "classify", "branches": [["warp", "x"]]})


class TestWorkflowDoc:
    def doc_dict(self):
        return {
            "app_id": "test-app",
            "input_schema": ["street"],
            "states": [
                {"state_id": "entry", "prompt": "fill in the address", "role": "entry"},
                {
                    "state_id": "plans",
                    "prompt": "plans are listed",
                    "role": "terminal",
                    "terminal_kind": "plans_found",
                },
            ],
            "transitions": [["entry", "address_accepted", "plans"]],
            "extraction": {
                "plans": [
                    {
                        "field_name": "plan_1_name",
                        "anchor": {"text": "Plan"},
                        "region": [-1.0, 0.5, 1.0, 2.5],
                    }
                ]
            },
            "entry_url": "https://example.test/check",
        }

    def test_round_trip(self):
        doc = workflow_doc_from_dict(self.doc_dict())
        assert workflow_doc_to_dict(doc) == self.doc_dict()

    def test_round_trip_with_concrete(self):
        doc = workflow_doc_from_dict(self.doc_dict())
        doc.concrete = {"entry": concrete("entry"), "plans": concrete("plans")}
        again = workflow_doc_from_dict(workflow_doc_to_dict(doc))
        assert again.concrete == doc.concrete

    def test_detector_region_hint_validation(self):
        with pytest.raises(ValueError):
            KeywordSpec("x", (0.9, 0.0, 0.1, 1.0))
        with pytest.raises(ValueError):
            KeywordSpec("x", (0.0, 0.0, 0.5, 1.5))

    def test_detector_needs_required(self):
        with pytest.raises(ValueError):
            KeywordDetector(())

    def test_min_score_range(self):
        with pytest.raises(ValueError):
            det("x", min_score=0.0)
        with pytest.raises(ValueError):
            det("x", min_score=1.2)
