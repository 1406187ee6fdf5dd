import csv
import json
import xml.etree.ElementTree as ET

import pytest

from bqt.analysis import (
    Boundary,
    CBGSummary,
    ScatterPoint,
    ServiceClass,
    affordability_threshold,
    analyze_run,
    classify_service,
    emit_scatter_svg,
    emit_state_table_csv,
    load_summaries,
    representative_plan,
    save_summaries,
    scatter_points,
    state_summary,
    summarize_cbg,
    summarize_run,
)
from bqt.canonical import canonical_json
from bqt.errors import NonpositiveIncome
from bqt.pipeline import PlanRecord, persist_dataset

CBG = "060830001001"
STAMP = "2026-01-01T00:00:01.000Z"

SPEEDS_DOWN = [0.0, 1.0, 24.0, 25.0, 26.0, 99.0, 100.0, 101.0, 1000.0]
SPEEDS_UP = [0.0, 1.0, 2.0, 3.0, 4.0, 19.0, 20.0, 21.0, 35.0]


def oracle_strict(d, u):
    if d >= 100.0 and u >= 20.0:
        return ServiceClass.SERVED
    if d >= 25.0 and u >= 3.0:
        return ServiceClass.UNDERSERVED
    return ServiceClass.UNSERVED


def oracle_inclusive(d, u):
    if d > 100.0 and u > 20.0:
        return ServiceClass.SERVED
    if d > 25.0 and u > 3.0:
        return ServiceClass.UNDERSERVED
    return ServiceClass.UNSERVED


def rec(addr, price, down, up=20.0, name="plan", app="alpha-isp", cbg=CBG):
    return PlanRecord(addr, app, cbg, name, down, up, price, STAMP)


class TestClassification:
    @pytest.mark.parametrize("down", SPEEDS_DOWN)
    @pytest.mark.parametrize("up", SPEEDS_UP)
    def test_strict_matches_oracle(self, down, up):
        assert classify_service(down, up, Boundary.STRICT) is oracle_strict(down, up)

    @pytest.mark.parametrize("down", SPEEDS_DOWN)
    @pytest.mark.parametrize("up", SPEEDS_UP)
    def test_inclusive_matches_oracle(self, down, up):
        assert classify_service(down, up, Boundary.INCLUSIVE) is oracle_inclusive(down, up)

    def test_boundaries_disagree_exactly_on_cutoffs(self):
        assert classify_service(25.0, 3.0, Boundary.STRICT) is ServiceClass.UNDERSERVED
        assert classify_service(25.0, 3.0, Boundary.INCLUSIVE) is ServiceClass.UNSERVED
        assert classify_service(100.0, 20.0, Boundary.STRICT) is ServiceClass.SERVED
        assert classify_service(100.0, 20.0, Boundary.INCLUSIVE) is ServiceClass.UNDERSERVED


class TestAffordability:
    def test_two_percent_of_monthly_income(self):
        assert affordability_threshold(75000.0) == 125.0
        assert affordability_threshold(60000.0) == 100.0

    def test_nonpositive_income_rejected(self):
        with pytest.raises(NonpositiveIncome):
            affordability_threshold(0.0)
        with pytest.raises(NonpositiveIncome):
            affordability_threshold(-5.0)


class TestRepresentativePlan:
    def test_cheapest_fast_plan_wins(self):
        plans = [
            rec("a", 20.0, 50.0, name="cheap slow"),
            rec("a", 80.0, 300.0, name="pricey fast"),
            rec("a", 60.0, 100.0, name="fair fast"),
        ]
        assert representative_plan(plans).plan_name == "fair fast"

    def test_fallback_to_fastest_when_nothing_reaches_100(self):
        plans = [
            rec("a", 10.0, 25.0, name="slower"),
            rec("a", 90.0, 99.0, name="fastest"),
        ]
        assert representative_plan(plans).plan_name == "fastest"

    def test_fastest_tie_breaks_on_price(self):
        plans = [
            rec("a", 50.0, 80.0, name="same speed dear"),
            rec("a", 30.0, 80.0, name="same speed cheap"),
        ]
        assert representative_plan(plans).plan_name == "same speed cheap"

    def test_fast_price_tie_prefers_higher_download(self):
        plans = [
            rec("a", 50.0, 200.0, name="gig-ish"),
            rec("a", 50.0, 500.0, name="faster"),
        ]
        assert representative_plan(plans).plan_name == "faster"

    def test_unpriced_and_speedless_offers_ignored(self):
        plans = [
            rec("a", None, 1000.0, name="call us"),
            rec("a", 40.0, None, name="mystery speed"),
            rec("a", 45.0, 50.0, name="usable"),
        ]
        assert representative_plan(plans).plan_name == "usable"

    def test_nothing_usable_gives_none(self):
        assert representative_plan([]) is None
        assert representative_plan([rec("a", None, 100.0)]) is None

    def test_order_independence(self):
        plans = [
            rec("a", 50.0, 120.0, name="n1", app="beta-isp"),
            rec("a", 50.0, 120.0, name="n1", app="alpha-isp"),
            rec("a", 50.0, 120.0, name="n0", app="gamma-isp"),
        ]
        assert representative_plan(plans) == representative_plan(plans[::-1])
        assert representative_plan(plans).plan_name == "n0"


class TestSummarizeCbg:
    def test_lower_median_over_addresses(self):
        # per-address reps priced 10, 20, 30, 40; lower median is 20
        records = [rec(f"addr-{i}", float(10 * i), 200.0) for i in range(1, 5)]
        s = summarize_cbg(CBG, records, attempted=4, succeeded=4, income_usd_year=75000.0)
        assert s.rep_price_usd_month == 20.0
        assert s.n_plan_records == 4

    def test_odd_count_takes_true_median(self):
        records = [rec(f"addr-{i}", float(10 * i), 200.0) for i in range(1, 4)]
        s = summarize_cbg(CBG, records, attempted=3, succeeded=3, income_usd_year=75000.0)
        assert s.rep_price_usd_month == 20.0

    def test_median_is_per_address_not_per_record(self):
        # one address lists many cheap offers; it still contributes one rep
        records = [
            rec("addr-1", 10.0, 200.0, name="a"),
            rec("addr-1", 11.0, 200.0, name="b"),
            rec("addr-1", 12.0, 200.0, name="c"),
            rec("addr-2", 90.0, 200.0),
        ]
        s = summarize_cbg(CBG, records, attempted=2, succeeded=2, income_usd_year=75000.0)
        assert s.rep_price_usd_month == 10.0  # lower median of [10, 90]

    def test_quality_and_classification(self):
        records = [rec("addr-1", 49.99, 300.0, up=20.0)]
        s = summarize_cbg(CBG, records, attempted=4, succeeded=3, income_usd_year=75000.0)
        assert s.data_quality == 0.75
        assert s.ge_100 is True
        assert s.service_class == "served"
        assert s.threshold_usd_month == 125.0
        assert s.exceeds_threshold is False

    def test_exceeds_is_strictly_greater(self):
        records = [rec("addr-1", 125.0, 300.0)]
        s = summarize_cbg(CBG, records, attempted=1, succeeded=1, income_usd_year=75000.0)
        assert s.exceeds_threshold is False
        records = [rec("addr-1", 125.01, 300.0)]
        s = summarize_cbg(CBG, records, attempted=1, succeeded=1, income_usd_year=75000.0)
        assert s.exceeds_threshold is True

    def test_no_records_leaves_unknowns(self):
        s = summarize_cbg(CBG, [], attempted=2, succeeded=0, income_usd_year=75000.0)
        assert s.rep_price_usd_month is None
        assert s.service_class is None
        assert s.ge_100 is None
        assert s.exceeds_threshold is None
        assert s.threshold_usd_month == 125.0
        assert s.data_quality == 0.0

    def test_missing_income_leaves_threshold_unknown(self):
        records = [rec("addr-1", 49.99, 300.0)]
        s = summarize_cbg(CBG, records, attempted=1, succeeded=1, income_usd_year=None)
        assert s.threshold_usd_month is None
        assert s.exceeds_threshold is None

    def test_boundary_is_passed_through(self):
        records = [rec("addr-1", 10.0, 100.0, up=20.0)]
        strict = summarize_cbg(CBG, records, 1, 1, 75000.0, Boundary.STRICT)
        inclusive = summarize_cbg(CBG, records, 1, 1, 75000.0, Boundary.INCLUSIVE)
        assert strict.service_class == "served"
        assert inclusive.service_class == "underserved"

    def test_round_trip_through_ndjson(self, tmp_path):
        s = summarize_cbg(CBG, [rec("addr-1", 49.99, 300.0)], 1, 1, 75000.0)
        other = summarize_cbg("260810001001", [], 2, 1, None)
        path = tmp_path / "summaries.ndjson"
        save_summaries([s, other], path)
        assert set(load_summaries(path)) == {s, other}


class TestScatter:
    def summaries(self):
        return [
            summarize_cbg("060830001001", [rec("a", 130.0, 300.0)], 1, 1, 75000.0),
            summarize_cbg("060830001002", [rec("b", 40.0, 50.0)], 2, 1, 75000.0),
            summarize_cbg("060830001003", [], 1, 0, 75000.0),  # no rep: skipped
            summarize_cbg("060830001004", [rec("c", 60.0, 200.0)], 1, 1, None),  # no income
        ]

    def test_points_skip_unknowns(self):
        pts = scatter_points(self.summaries())
        assert [p.cbg_geoid for p in pts] == ["060830001001", "060830001002"]

    def test_point_properties(self):
        pts = scatter_points(self.summaries())
        assert pts[0].exceeds_threshold is True  # 130 > 125
        assert pts[0].ge_100 is True
        assert pts[0].radius_frac == 1.0
        assert pts[1].exceeds_threshold is False
        assert pts[1].ge_100 is False
        assert pts[1].radius_frac == pytest.approx(0.2 + 0.8 * 0.5)
        assert pts[0].color != pts[1].color

    def test_svg_geometry_matches_exceedance(self, tmp_path):
        pts = scatter_points(self.summaries())
        path = tmp_path / "figure1.svg"
        emit_scatter_svg(pts, path)
        root = ET.fromstring(path.read_text())
        ns = "{http://www.w3.org/2000/svg}"
        diag = next(e for e in root.iter(f"{ns}line") if e.get("id") == "diagonal")
        x1, y1 = float(diag.get("x1")), float(diag.get("y1"))
        x2, y2 = float(diag.get("x2")), float(diag.get("y2"))
        circles = list(root.iter(f"{ns}circle"))
        assert [c.get("data-cbg") for c in circles] == ["060830001001", "060830001002"]
        by_cbg = {p.cbg_geoid: p for p in pts}
        for c in circles:
            cx, cy = float(c.get("cx")), float(c.get("cy"))
            diag_y = y1 + (cx - x1) * (y2 - y1) / (x2 - x1)
            below = cy > diag_y  # svg y axis points down
            assert below == by_cbg[c.get("data-cbg")].exceeds_threshold

    def test_circle_radius_scales_with_quality(self, tmp_path):
        pts = scatter_points(self.summaries())
        path = tmp_path / "figure1.svg"
        emit_scatter_svg(pts, path)
        root = ET.fromstring(path.read_text())
        ns = "{http://www.w3.org/2000/svg}"
        radii = {c.get("data-cbg"): float(c.get("r")) for c in root.iter(f"{ns}circle")}
        assert radii["060830001001"] == 10.0
        assert radii["060830001002"] == pytest.approx(6.0)


class TestStateSummary:
    def summaries(self):
        return [
            summarize_cbg("060830001001", [rec("a", 130.0, 300.0, cbg="060830001001")], 1, 1, 75000.0),
            summarize_cbg("060830001002", [rec("b", 40.0, 50.0, cbg="060830001002")], 1, 1, 75000.0),
            summarize_cbg("260810001001", [rec("c", 20.0, 200.0, cbg="260810001001")], 1, 1, 75000.0),
            summarize_cbg("260810001002", [], 1, 0, 75000.0),  # unknown rep
            summarize_cbg("990000001001", [rec("d", 10.0, 120.0, cbg="990000001001")], 1, 1, 75000.0),
        ]

    def test_fips_rollup(self):
        rows = {r.state: r for r in state_summary(self.summaries())}
        assert set(rows) == {"CA", "MI", "99"}
        ca = rows["CA"]
        assert ca.pct_price_exceeds_threshold == 50.0
        assert ca.pct_rep_below_100mbps == 50.0
        assert (ca.n_cbgs_known, ca.n_cbgs_total) == (2, 2)
        mi = rows["MI"]
        assert mi.pct_price_exceeds_threshold == 0.0
        assert mi.pct_rep_below_100mbps == 0.0
        assert (mi.n_cbgs_known, mi.n_cbgs_total) == (1, 2)

    def test_state_with_no_known_rows(self):
        rows = state_summary([summarize_cbg("060830001001", [], 1, 0, 75000.0)])
        assert rows[0].pct_price_exceeds_threshold is None
        assert rows[0].n_cbgs_known == 0
        assert rows[0].n_cbgs_total == 1

    def test_percentages_round_to_4dp(self):
        group = [
            summarize_cbg(f"06083000{i:04d}", [rec("a", 130.0, 300.0)], 1, 1, 75000.0)
            for i in range(3)
        ] + [summarize_cbg("060830009999", [rec("a", 40.0, 300.0)], 1, 1, 75000.0)]
        rows = state_summary(group)
        assert rows[0].pct_price_exceeds_threshold == 75.0

    def test_table_csv_round_trips(self, tmp_path):
        rows = state_summary(self.summaries())
        path = tmp_path / "table1.csv"
        emit_state_table_csv(rows, path)
        with open(path, newline="") as fh:
            parsed = list(csv.DictReader(fh))
        assert [r["state"] for r in parsed] == ["99", "CA", "MI"]
        ca = next(r for r in parsed if r["state"] == "CA")
        assert float(ca["pct_price_exceeds_threshold"]) == 50.0


class TestAnalyzeRun:
    def test_end_to_end_artifacts(self, tmp_path):
        records = [
            rec("addr-1", 130.0, 300.0, cbg="060830001001"),
            rec("addr-2", 40.0, 50.0, cbg="060830001002"),
        ]
        plans = tmp_path / "plans.ndjson"
        persist_dataset(records, plans)
        report = tmp_path / "run_report.json"
        report.write_text(
            canonical_json(
                {
                    "by_cbg": {
                        "060830001001": {"attempted": 1, "succeeded": 1},
                        "060830001002": {"attempted": 1, "succeeded": 1},
                    }
                }
            )
        )
        income = tmp_path / "income.csv"
        income.write_text(
            "cbg_geoid,median_household_income_usd_year\n"
            "060830001001,75000\n060830001002,75000\n"
        )
        out = tmp_path / "analysis"
        result = analyze_run(plans, report, income, out, Boundary.STRICT)
        assert result["n_records"] == 2
        assert result["n_cbgs"] == 2
        assert result["n_points"] == 2
        assert result["boundary"] == "strict"
        assert result["states"] == {"CA": [50.0, 50.0]}
        for name in ("summaries.ndjson", "table1.csv", "figure1.svg",
                     "figure1_points.csv", "figure1.png"):
            assert (out / name).exists(), name
        assert (out / "figure1.png").stat().st_size > 1000

    def test_summarize_run_includes_empty_cbgs(self):
        records = [rec("addr-1", 50.0, 200.0, cbg="060830001001")]
        counts = {
            "060830001001": {"attempted": 1, "succeeded": 1},
            "060830001009": {"attempted": 2, "succeeded": 0},
        }
        summaries = summarize_run(records, counts, {"060830001001": 75000.0})
        assert [s.cbg_geoid for s in summaries] == ["060830001001", "060830001009"]
        assert summaries[1].n_plan_records == 0
        assert summaries[1].data_quality == 0.0
