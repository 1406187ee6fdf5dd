import random

import pytest

from bqt.errors import InvalidMutation, UnknownPage, UnknownPath
from bqt.fixtures import load_bundled_site
from bqt.mocksite import (
    CHAR_W,
    TEXT_PAD,
    MockSession,
    Mutation,
    PlanOffer,
    apply_mutation,
    apply_noise,
    generate_demo,
    load_site_spec,
    render_page,
    save_site_spec,
    spec_from_dict,
    spec_to_dict,
    text_width,
)
from bqt.perception import TextBox


@pytest.fixture(scope="module")
def alpha():
    return load_bundled_site("alpha-isp")


class TestRendering:
    def test_text_width_formula(self):
        assert text_width("abc") == CHAR_W * 3 + TEXT_PAD

    def test_rerender_is_byte_identical(self, alpha, tmp_path):
        png1, boxes1 = render_page(alpha, alpha.entry_page, tmp_path / "a")
        png2, boxes2 = render_page(alpha, alpha.entry_page, tmp_path / "b")
        assert png1.name == png2.name  # content-keyed file name
        assert png1.read_bytes() == png2.read_bytes()
        assert boxes1 == boxes2
        assert png1.with_suffix(".boxes.json").read_bytes() == png2.with_suffix(
            ".boxes.json"
        ).read_bytes()

    def test_different_typed_content_different_name(self, alpha, tmp_path):
        png1, _ = render_page(alpha, alpha.entry_page, tmp_path)
        png2, _ = render_page(alpha, alpha.entry_page, tmp_path, typed={"street": "1 Elm"})
        assert png1.name != png2.name

    def test_typed_value_appears_in_boxes(self, alpha, tmp_path):
        _, boxes = render_page(alpha, alpha.entry_page, tmp_path, typed={"street": "1 Elm St"})
        assert any(b.text == "1 Elm St" for b in boxes)

    def test_unknown_page_rejected(self, alpha, tmp_path):
        with pytest.raises(UnknownPage):
            render_page(alpha, "atlantis", tmp_path)

    def test_plan_table_renders_rows(self, alpha, tmp_path):
        plans = (PlanOffer("Test Plan", 200.0, 20.0, "$10.00/mo"),)
        _, boxes = render_page(alpha, "show_plans", tmp_path, plans=plans)
        texts = [b.text for b in boxes]
        assert "Test Plan" in texts
        assert "200 Mbps" in texts
        assert "$10.00/mo" in texts


class TestSpecSerialization:
    def test_round_trip(self, alpha, tmp_path):
        path = tmp_path / "site.mocksite.json"
        save_site_spec(alpha, path)
        again = load_site_spec(path)
        assert spec_to_dict(again) == spec_to_dict(alpha)

    def test_unknown_branch_target_rejected(self, alpha):
        doc = spec_to_dict(alpha)
        doc["branch"]["serviceable"] = "atlantis"
        with pytest.raises(UnknownPage):
            spec_from_dict(doc)

    def test_unknown_entry_rejected(self, alpha):
        doc = spec_to_dict(alpha)
        doc["entry_page"] = "atlantis"
        with pytest.raises(UnknownPage):
            spec_from_dict(doc)


class TestSession:
    def test_virtual_clock_arithmetic(self, alpha, tmp_path):
        s = MockSession(alpha, "addr-0001", tmp_path)
        assert s.now_ms() == 0
        s.snapshot()
        assert s.now_ms() == 5
        s.click(1, 1)
        assert s.now_ms() == 10
        s.type_text("abcd")
        assert s.now_ms() == 18
        s.sleep(250)
        assert s.now_ms() == 268
        s.scroll(-10)
        assert s.now_ms() == 273

    def _fill_and_submit(self, spec, session):
        page = session.pages_current()
        for inp in page.inputs:
            session.click(inp.x + 2, inp.y + 2)
            session.type_text("742 Evergreen Terrace")
        b = page.buttons[0]
        session.click(b.x + 1, b.y + 1)

    def test_required_input_swallows_click(self, alpha, tmp_path):
        s = MockSession(alpha, "addr-0001", tmp_path)
        b = s.pages_current().buttons[0]
        s.click(b.x + 1, b.y + 1)
        assert s.current_page == alpha.entry_page  # validation blocked it

    def test_serviceable_branch(self, alpha, tmp_path):
        s = MockSession(alpha, "addr-0001", tmp_path)  # default oracle: serviceable
        self._fill_and_submit(alpha, s)
        assert s.current_page == "show_plans"
        assert len(s._plans) == 2

    def test_not_serviceable_branch(self, alpha, tmp_path):
        s = MockSession(alpha, "addr-0003", tmp_path)
        self._fill_and_submit(alpha, s)
        assert s.current_page == "no_service"

    def test_unknown_oracle_falls_back(self, tmp_path):
        gamma = load_bundled_site("gamma-isp")
        s = MockSession(gamma, "demo-gamma-unknown", tmp_path)
        page = s.pages_current()
        for inp in page.inputs:
            s.click(inp.x + 2, inp.y + 2)
            s.type_text("x")
        b = page.buttons[0]
        s.click(b.x + 1, b.y + 1)
        assert s.current_page == "bad_address"

    def test_typing_requires_focus(self, alpha, tmp_path):
        s = MockSession(alpha, "addr-0001", tmp_path)
        s.type_text("hello")
        assert s.typed == {}


class TestDemoGeneration:
    def test_alpha_happy_path_shape(self, alpha, tmp_path):
        demo = generate_demo(
            alpha, {"street": "742 Evergreen Terrace"}, "serviceable", tmp_path
        )
        kinds = [e["kind"] for e in demo["events"]]
        assert kinds == ["navigate", "type", "click"]
        assert demo["visited_states"] == ["enter_address", "show_plans"]
        assert demo["events"][1]["placeholder"] == "street"
        assert demo["events"][1]["text"] == "742 Evergreen Terrace"
        # pre-event screens (blank form, typed form) plus the final plans page
        assert set(demo["snapshots"]) == {"s0", "s1", "s2"}
        assert demo["events"][0]["snapshot_ref"] == "s0"
        assert demo["events"][1]["snapshot_ref"] == "s0"
        assert demo["events"][2]["snapshot_ref"] == "s1"
        assert demo["final_snapshot_ref"] == "s2"

    def test_beta_walks_three_pages(self, tmp_path):
        beta = load_bundled_site("beta-isp")
        demo = generate_demo(beta, {"street": "1 Elm", "zip": "93117"}, "serviceable", tmp_path)
        assert demo["visited_states"] == ["enter_address", "confirm_address", "show_plans"]

    def test_missing_branch_raises(self, alpha, tmp_path):
        with pytest.raises(UnknownPath):
            generate_demo(alpha, {"street": "x"}, "unknown", tmp_path)

    def test_missing_required_value_stalls(self, alpha, tmp_path):
        with pytest.raises(UnknownPath):
            generate_demo(alpha, {}, "serviceable", tmp_path)


class TestMutations:
    def test_rename_button(self, alpha):
        mutated = apply_mutation(
            alpha,
            Mutation("rename_label", {"page": "enter_address",
                                      "old": "Check Availability", "new": "See Offers"}),
        )
        labels = [b.label for b in mutated.pages["enter_address"].buttons]
        assert labels == ["See Offers"]
        # original is untouched
        assert alpha.pages["enter_address"].buttons[0].label == "Check Availability"

    def test_rename_static_text(self, alpha):
        old = alpha.pages["no_service"].texts[0].text
        mutated = apply_mutation(
            alpha, Mutation("rename_label", {"page": "no_service", "old": old, "new": "Nope"})
        )
        assert mutated.pages["no_service"].texts[0].text == "Nope"

    def test_rename_missing_element(self, alpha):
        with pytest.raises(InvalidMutation):
            apply_mutation(
                alpha,
                Mutation("rename_label", {"page": "enter_address", "old": "Ghost", "new": "X"}),
            )

    def test_move_element(self, alpha):
        before = alpha.pages["enter_address"].buttons[0]
        mutated = apply_mutation(
            alpha,
            Mutation("move_element", {"page": "enter_address",
                                      "label": before.label, "dx": 30, "dy": -10}),
        )
        after = mutated.pages["enter_address"].buttons[0]
        assert (after.x, after.y) == (before.x + 30, before.y - 10)

    def test_insert_interstitial_rewires_entry(self, alpha, tmp_path):
        mutated = apply_mutation(alpha, Mutation("insert_interstitial_page", {}))
        assert "interstitial" in mutated.pages
        entry_button = mutated.pages[mutated.entry_page].buttons[0]
        assert entry_button.action == {"kind": "goto", "target": "interstitial"}
        # walking the mutated site now takes three pages
        demo = generate_demo(
            mutated, {"street": "742 Evergreen Terrace"}, "serviceable", tmp_path
        )
        assert demo["visited_states"] == ["enter_address", "interstitial", "show_plans"]

    def test_reorder_plans(self, alpha):
        mutated = apply_mutation(alpha, Mutation("reorder_plans", {"address_id": "default"}))
        orig = [p.name for p in alpha.oracle["default"].plans]
        assert [p.name for p in mutated.oracle["default"].plans] == orig[::-1]

    def test_unknown_kind(self, alpha):
        with pytest.raises(InvalidMutation):
            apply_mutation(alpha, Mutation("repaint_background", {}))


class TestNoise:
    BOXES = [TextBox(f"sample text number {i}", (10, 20 * i, 150, 16), 0.95) for i in range(10)]

    def test_zero_noise_is_identity(self):
        assert apply_noise(self.BOXES, random.Random(1)) == self.BOXES

    def test_seeded_noise_is_reproducible(self):
        a = apply_noise(self.BOXES, random.Random(7), char_error_rate=0.1, bbox_jitter_px=2)
        b = apply_noise(self.BOXES, random.Random(7), char_error_rate=0.1, bbox_jitter_px=2)
        assert a == b

    def test_char_errors_change_some_text(self):
        noisy = apply_noise(self.BOXES, random.Random(3), char_error_rate=0.2)
        assert any(n.text != o.text for n, o in zip(noisy, self.BOXES))

    def test_drop_rate_removes_boxes(self):
        noisy = apply_noise(self.BOXES, random.Random(5), drop_rate=0.5)
        assert 0 < len(noisy) < len(self.BOXES)
