import pytest

from bqt.errors import BackendError
from bqt.executor import (
    Limits,
    Outcome,
    TraceStep,
    WorkflowInput,
    extract_fields,
    render_template,
    run_workflow,
    trace_hash_of,
)
from bqt.fixtures import load_bundled_site
from bqt.fsm import ExtractionRule, KeywordSpec, load_workflow
from bqt.mocksite import MockSession
from bqt.perception import TextBox

VIEW = (1024, 768)
VALUES = {"street": "742 Evergreen Terrace", "city": "Goleta", "state": "CA", "zip": "93117"}


def run_bundled(bundle, app, address_id, tmp_path, spec=None):
    fsm = load_workflow(bundle.workflow_path(app), permissive=True)
    spec = spec or load_bundled_site(app)
    session = MockSession(spec, address_id, tmp_path / "snaps")
    return run_workflow(fsm, session, WorkflowInput(address_id, VALUES), Limits())


class TestRenderTemplate:
    def test_placeholder_substitution(self):
        assert render_template("{street}, {zip}", VALUES) == "742 Evergreen Terrace, 93117"

    def test_literal_text_untouched(self):
        assert render_template("hello", {}) == "hello"


class TestExtractFields:
    ANCHOR = TextBox("Plan", (100, 100, 40, 16), 1.0)

    def rule(self, region, pattern=None):
        return ExtractionRule("plan_1_name", KeywordSpec("Plan"), region, pattern)

    def test_collects_in_reading_order(self):
        boxes = [
            self.ANCHOR,
            TextBox("World", (150, 130, 40, 16), 1.0),
            TextBox("Hello", (100, 130, 40, 16), 1.0),
        ]
        got = extract_fields(boxes, [self.rule((-1.0, 0.5, 2.0, 3.0))], VIEW)
        assert got == [("plan_1_name", "Hello World")]

    def test_region_excludes_outside_centers(self):
        boxes = [
            self.ANCHOR,
            TextBox("inside", (100, 130, 40, 16), 1.0),
            TextBox("below", (100, 400, 40, 16), 1.0),
        ]
        got = extract_fields(boxes, [self.rule((-1.0, 0.5, 2.0, 3.0))], VIEW)
        assert got == [("plan_1_name", "inside")]

    def test_pattern_keeps_first_match(self):
        boxes = [self.ANCHOR, TextBox("was $20 now $15", (100, 130, 120, 16), 1.0)]
        got = extract_fields(boxes, [self.rule((-1.0, 0.5, 2.0, 3.0), r"\$\d+")], VIEW)
        assert got == [("plan_1_name", "$20")]

    def test_pattern_without_match_is_empty(self):
        boxes = [self.ANCHOR, TextBox("call us", (100, 130, 60, 16), 1.0)]
        got = extract_fields(boxes, [self.rule((-1.0, 0.5, 2.0, 3.0), r"\$\d+")], VIEW)
        assert got == [("plan_1_name", "")]

    def test_missing_anchor_yields_empty_value(self):
        got = extract_fields([], [self.rule((0.0, 0.0, 1.0, 1.0))], VIEW)
        assert got == [("plan_1_name", "")]

    def test_anchor_itself_not_collected(self):
        # region starts below the anchor center, so the anchor is outside it
        boxes = [self.ANCHOR]
        got = extract_fields(boxes, [self.rule((-1.0, 0.5, 2.0, 3.0))], VIEW)
        assert got == [("plan_1_name", "")]


class TestTraceHash:
    def test_only_behavior_fields_are_hashed(self):
        a = [TraceStep("s", "click", "go", None, at_ms=10, detail="score=1.00")]
        b = [TraceStep("s", "click", "go", None, at_ms=999, detail="other")]
        assert trace_hash_of(a) == trace_hash_of(b)

    def test_target_changes_hash(self):
        a = [TraceStep("s", "click", "go", None)]
        b = [TraceStep("s", "click", "stop", None)]
        assert trace_hash_of(a) != trace_hash_of(b)


class TestRunWorkflow:
    def test_plans_found_with_fields(self, bundle, tmp_path):
        result = run_bundled(bundle, "alpha-isp", "addr-0001", tmp_path)
        assert result.outcome is Outcome.PLANS_FOUND
        fields = dict(result.raw_fields)
        assert fields["plan_1_name"] == "Alpha Fiber 300"
        assert fields["plan_1_down"] == "300 Mbps"
        assert fields["plan_1_price"] == "$49.99"
        assert fields["plan_2_name"] == "Alpha Fiber Gigabit"
        assert fields["plan_2_down"] == "1 Gbps"

    def test_no_service_outcome(self, bundle, tmp_path):
        result = run_bundled(bundle, "alpha-isp", "addr-0003", tmp_path)
        assert result.outcome is Outcome.NO_SERVICE
        assert result.raw_fields == ()

    def test_replay_produces_identical_trace_hash(self, bundle, tmp_path):
        r1 = run_bundled(bundle, "beta-isp", "addr-0002", tmp_path / "a")
        r2 = run_bundled(bundle, "beta-isp", "addr-0002", tmp_path / "b")
        assert r1.outcome is Outcome.PLANS_FOUND
        assert r1.trace.trace_hash == r2.trace.trace_hash
        assert r1.raw_fields == r2.raw_fields

    def test_gamma_unknown_address_times_out(self, bundle, tmp_path):
        # oracle says "unknown": the walk ends on the dead-end page,
        # whose terminal is an error, reported as a retryable timeout
        result = run_bundled(bundle, "gamma-isp", "demo-gamma-unknown", tmp_path)
        assert result.outcome is Outcome.TIMEOUT

    def test_wrong_site_is_a_detection_failure(self, bundle, tmp_path):
        alpha_site = load_bundled_site("alpha-isp")
        result = run_bundled(bundle, "beta-isp", "addr-0001", tmp_path, spec=alpha_site)
        assert result.outcome is Outcome.STATE_DETECTION_FAILURE
        assert result.failed_state == "enter_address"

    def test_renamed_button_flags_the_stuck_state(self, bundle, tmp_path):
        from bqt.mocksite import Mutation, apply_mutation

        mutated = apply_mutation(
            load_bundled_site("alpha-isp"),
            Mutation("rename_label", {"page": "enter_address",
                                      "old": "Check Availability", "new": "See Offers"}),
        )
        result = run_bundled(bundle, "alpha-isp", "addr-0001", tmp_path, spec=mutated)
        assert result.outcome is Outcome.STATE_DETECTION_FAILURE
        assert result.failed_state == "enter_address"

    def test_backend_error_surfaces(self, bundle, tmp_path):
        class ExplodingSession(MockSession):
            def snapshot(self):
                raise BackendError("connection reset")

        fsm = load_workflow(bundle.workflow_path("alpha-isp"), permissive=True)
        session = ExplodingSession(load_bundled_site("alpha-isp"), "addr-0001", tmp_path)
        result = run_workflow(fsm, session, WorkflowInput("addr-0001", VALUES), Limits())
        assert result.outcome is Outcome.BACKEND_ERROR

    def test_result_round_trips_to_dict(self, bundle, tmp_path):
        result = run_bundled(bundle, "alpha-isp", "addr-0001", tmp_path)
        doc = result.to_dict()
        assert doc["outcome"] == "plans_found"
        assert doc["trace"]["trace_hash"] == result.trace.trace_hash
        assert doc["trace"]["steps"][0]["kind"] == "identify"
