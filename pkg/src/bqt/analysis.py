"""Availability and affordability analytics over collected plan records.

Each block group gets a representative plan (the cheapest offer at or
above 100 Mbps download, falling back to the fastest known offer), a
service classification from the familiar 25/3 and 100/20 speed cutoffs,
and an affordability verdict against two percent of median monthly
household income.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .canonical import canonical_json
from .errors import NonpositiveIncome
from .pipeline import PlanRecord

logger = logging.getLogger(__name__)

REP_SPEED_FLOOR_MBPS = 100.0
# two percent of monthly income: (income / 12) * 0.02 == income / 600
AFFORDABILITY_DIVISOR = 600.0

UNSERVED_DOWN, UNSERVED_UP = 25.0, 3.0
UNDERSERVED_DOWN, UNDERSERVED_UP = 100.0, 20.0


class ServiceClass(str, Enum):
    UNSERVED = "unserved"
    UNDERSERVED = "underserved"
    SERVED = "served"


class Boundary(str, Enum):
    """How speeds sitting exactly on a cutoff are treated.

    strict: a cutoff speed escapes the worse class (25/3 is underserved).
    inclusive: a cutoff speed stays in the worse class (25/3 is unserved).
    """

    STRICT = "strict"
    INCLUSIVE = "inclusive"


def classify_service(
    download_mbps: float, upload_mbps: float, boundary: Boundary = Boundary.STRICT
) -> ServiceClass:
    if boundary is Boundary.STRICT:
        if download_mbps < UNSERVED_DOWN or upload_mbps < UNSERVED_UP:
            return ServiceClass.UNSERVED
        if download_mbps < UNDERSERVED_DOWN or upload_mbps < UNDERSERVED_UP:
            return ServiceClass.UNDERSERVED
        return ServiceClass.SERVED
    if download_mbps <= UNSERVED_DOWN or upload_mbps <= UNSERVED_UP:
        return ServiceClass.UNSERVED
    if download_mbps <= UNDERSERVED_DOWN or upload_mbps <= UNDERSERVED_UP:
        return ServiceClass.UNDERSERVED
    return ServiceClass.SERVED


def affordability_threshold(income_usd_year: float) -> float:
    """Monthly price ceiling: two percent of median monthly income."""
    if income_usd_year <= 0:
        raise NonpositiveIncome(f"median income must be positive: {income_usd_year}")
    return income_usd_year / AFFORDABILITY_DIVISOR


def representative_plan(records: Sequence[PlanRecord]) -> Optional[PlanRecord]:
    """Pick one plan to stand for an address.

    Only offers with a known price and download speed are considered.
    Preference goes to the cheapest offer at or above 100 Mbps download;
    if none reaches that, the fastest known offer wins. Ties break on
    price, then name, then provider so the pick never depends on input
    order.
    """
    usable = [
        r
        for r in records
        if r.price_usd_month is not None and r.download_mbps is not None
    ]
    if not usable:
        return None
    fast = [r for r in usable if r.download_mbps >= REP_SPEED_FLOOR_MBPS]
    if fast:
        return min(
            fast, key=lambda r: (r.price_usd_month, -r.download_mbps, r.plan_name, r.app_id)
        )
    return min(
        usable, key=lambda r: (-r.download_mbps, r.price_usd_month, r.plan_name, r.app_id)
    )


@dataclass(frozen=True)
class CBGSummary:
    cbg_geoid: str
    attempted: int
    succeeded: int
    data_quality: float
    n_plan_records: int
    rep_price_usd_month: Optional[float]
    rep_download_mbps: Optional[float]
    rep_upload_mbps: Optional[float]
    ge_100: Optional[bool]
    service_class: Optional[str]
    income_usd_year: Optional[float]
    threshold_usd_month: Optional[float]
    exceeds_threshold: Optional[bool]

    def to_dict(self) -> dict:
        return {
            "cbg_geoid": self.cbg_geoid,
            "attempted": self.attempted,
            "succeeded": self.succeeded,
            "data_quality": self.data_quality,
            "n_plan_records": self.n_plan_records,
            "rep_price_usd_month": self.rep_price_usd_month,
            "rep_download_mbps": self.rep_download_mbps,
            "rep_upload_mbps": self.rep_upload_mbps,
            "ge_100": self.ge_100,
            "service_class": self.service_class,
            "income_usd_year": self.income_usd_year,
            "threshold_usd_month": self.threshold_usd_month,
            "exceeds_threshold": self.exceeds_threshold,
        }


def summary_from_dict(d: Mapping) -> CBGSummary:
    return CBGSummary(
        cbg_geoid=d["cbg_geoid"],
        attempted=int(d.get("attempted", 0)),
        succeeded=int(d.get("succeeded", 0)),
        data_quality=float(d.get("data_quality", 0.0)),
        n_plan_records=int(d.get("n_plan_records", 0)),
        rep_price_usd_month=d.get("rep_price_usd_month"),
        rep_download_mbps=d.get("rep_download_mbps"),
        rep_upload_mbps=d.get("rep_upload_mbps"),
        ge_100=d.get("ge_100"),
        service_class=d.get("service_class"),
        income_usd_year=d.get("income_usd_year"),
        threshold_usd_month=d.get("threshold_usd_month"),
        exceeds_threshold=d.get("exceeds_threshold"),
    )


def summarize_cbg(
    cbg_geoid: str,
    records: Sequence[PlanRecord],
    attempted: int,
    succeeded: int,
    income_usd_year: Optional[float],
    boundary: Boundary = Boundary.STRICT,
) -> CBGSummary:
    """Fold one block group's records into a summary row.

    The block group's representative plan is the lower-median (by price)
    of its per-address representative plans, so one outlier address
    cannot drag the whole group.
    """
    by_addr: dict[str, list[PlanRecord]] = {}
    for r in records:
        by_addr.setdefault(r.address_id, []).append(r)
    reps = [rep for rep in (representative_plan(rs) for rs in by_addr.values()) if rep]
    reps.sort(key=lambda r: (r.price_usd_month, r.address_id))
    rep = reps[(len(reps) - 1) // 2] if reps else None

    quality = (succeeded / attempted) if attempted else 0.0
    income = income_usd_year
    threshold = affordability_threshold(income) if income is not None else None
    price = rep.price_usd_month if rep else None
    down = rep.download_mbps if rep else None
    up = rep.upload_mbps if rep else None
    service = (
        classify_service(down, up, boundary).value
        if down is not None and up is not None
        else None
    )
    return CBGSummary(
        cbg_geoid=cbg_geoid,
        attempted=attempted,
        succeeded=succeeded,
        data_quality=round(quality, 6),
        n_plan_records=len(records),
        rep_price_usd_month=price,
        rep_download_mbps=down,
        rep_upload_mbps=up,
        ge_100=(down >= REP_SPEED_FLOOR_MBPS) if down is not None else None,
        service_class=service,
        income_usd_year=income,
        threshold_usd_month=threshold,
        exceeds_threshold=(price > threshold) if price is not None and threshold is not None else None,
    )


def summarize_run(
    records: Sequence[PlanRecord],
    counts_by_cbg: Mapping[str, Mapping[str, int]],
    income: Mapping[str, float],
    boundary: Boundary = Boundary.STRICT,
) -> list[CBGSummary]:
    by_cbg: dict[str, list[PlanRecord]] = {}
    for r in records:
        by_cbg.setdefault(r.cbg_geoid, []).append(r)
    geoids = sorted(set(by_cbg) | set(counts_by_cbg))
    summaries = []
    for geoid in geoids:
        counts = counts_by_cbg.get(geoid, {})
        summaries.append(
            summarize_cbg(
                geoid,
                by_cbg.get(geoid, []),
                attempted=int(counts.get("attempted", 0)),
                succeeded=int(counts.get("succeeded", 0)),
                income_usd_year=income.get(geoid),
                boundary=boundary,
            )
        )
    return summaries


# --- scatter figure ---


COLOR_GE_100 = "#2f9e44"
COLOR_LT_100 = "#e03131"
MAX_POINT_RADIUS_PX = 10.0


@dataclass(frozen=True)
class ScatterPoint:
    cbg_geoid: str
    price_usd_month: float
    threshold_usd_month: float
    ge_100: bool
    data_quality: float

    @property
    def radius_frac(self) -> float:
        return 0.2 + 0.8 * self.data_quality

    @property
    def color(self) -> str:
        return COLOR_GE_100 if self.ge_100 else COLOR_LT_100

    @property
    def exceeds_threshold(self) -> bool:
        return self.price_usd_month > self.threshold_usd_month


def scatter_points(summaries: Sequence[CBGSummary]) -> list[ScatterPoint]:
    """Summaries with a known representative price and threshold, one point each."""
    points = []
    for s in summaries:
        if s.rep_price_usd_month is None or s.threshold_usd_month is None:
            continue
        points.append(
            ScatterPoint(
                cbg_geoid=s.cbg_geoid,
                price_usd_month=s.rep_price_usd_month,
                threshold_usd_month=s.threshold_usd_month,
                ge_100=bool(s.ge_100),
                data_quality=s.data_quality,
            )
        )
    return points


def emit_scatter_svg(points: Sequence[ScatterPoint], path: str | Path) -> None:
    """Hand-rolled SVG: one circle per point plus the x = y diagonal.

    A point below the diagonal has threshold < price, i.e. the block
    group's representative plan costs more than two percent of monthly
    income.
    """
    size, margin = 640, 70
    span = size - 2 * margin
    dmax = max(
        [p.price_usd_month for p in points] + [p.threshold_usd_month for p in points] + [1.0]
    ) * 1.05

    def sx(v: float) -> float:
        return margin + (v / dmax) * span

    def sy(v: float) -> float:
        return size - margin - (v / dmax) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#ffffff"/>',
        f'<path id="axis-x" d="M {margin} {size - margin} H {size - margin}" '
        'stroke="#333333" stroke-width="1" fill="none"/>',
        f'<path id="axis-y" d="M {margin} {size - margin} V {margin}" '
        'stroke="#333333" stroke-width="1" fill="none"/>',
        f'<line id="diagonal" x1="{sx(0):.2f}" y1="{sy(0):.2f}" '
        f'x2="{sx(dmax):.2f}" y2="{sy(dmax):.2f}" stroke="#888888" '
        'stroke-width="1" stroke-dasharray="6 4"/>',
    ]
    for tick in range(5):
        v = dmax * tick / 4
        parts.append(
            f'<text x="{sx(v):.2f}" y="{size - margin + 24}" font-size="12" '
            f'text-anchor="middle" fill="#333333">{v:.0f}</text>'
        )
        parts.append(
            f'<text x="{margin - 10}" y="{sy(v) + 4:.2f}" font-size="12" '
            f'text-anchor="end" fill="#333333">{v:.0f}</text>'
        )
    parts.append(
        f'<text x="{size / 2:.0f}" y="{size - 16}" font-size="14" text-anchor="middle" '
        'fill="#111111">Representative plan price (USD/month)</text>'
    )
    parts.append(
        f'<text x="20" y="{size / 2:.0f}" font-size="14" text-anchor="middle" '
        f'transform="rotate(-90 20 {size / 2:.0f})" fill="#111111">'
        "Affordability threshold (USD/month)</text>"
    )
    for p in sorted(points, key=lambda q: q.cbg_geoid):
        parts.append(
            f'<circle cx="{sx(p.price_usd_month):.2f}" cy="{sy(p.threshold_usd_month):.2f}" '
            f'r="{p.radius_frac * MAX_POINT_RADIUS_PX:.2f}" fill="{p.color}" '
            f'fill-opacity="0.75" data-cbg="{p.cbg_geoid}"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def emit_points_csv(points: Sequence[ScatterPoint], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cbg_geoid", "price_usd_month", "threshold_usd_month", "ge_100",
             "data_quality", "radius_frac", "color", "exceeds_threshold"]
        )
        for p in sorted(points, key=lambda q: q.cbg_geoid):
            writer.writerow(
                [p.cbg_geoid, p.price_usd_month, p.threshold_usd_month,
                 str(p.ge_100).lower(), p.data_quality, round(p.radius_frac, 6),
                 p.color, str(p.exceeds_threshold).lower()]
            )


# --- per-state table ---


FIPS_STATE = {
    "01": "AL", "02": "AK", "04": "AZ", "05": "AR", "06": "CA", "08": "CO",
    "09": "CT", "10": "DE", "11": "DC", "12": "FL", "13": "GA", "15": "HI",
    "16": "ID", "17": "IL", "18": "IN", "19": "IA", "20": "KS", "21": "KY",
    "22": "LA", "23": "ME", "24": "MD", "25": "MA", "26": "MI", "27": "MN",
    "28": "MS", "29": "MO", "30": "MT", "31": "NE", "32": "NV", "33": "NH",
    "34": "NJ", "35": "NM", "36": "NY", "37": "NC", "38": "ND", "39": "OH",
    "40": "OK", "41": "OR", "42": "PA", "44": "RI", "45": "SC", "46": "SD",
    "47": "TN", "48": "TX", "49": "UT", "50": "VT", "51": "VA", "53": "WA",
    "54": "WV", "55": "WI", "56": "WY", "72": "PR",
}


@dataclass(frozen=True)
class StateSummaryRow:
    state: str
    pct_price_exceeds_threshold: Optional[float]
    pct_rep_below_100mbps: Optional[float]
    n_cbgs_known: int
    n_cbgs_total: int


def state_summary(summaries: Sequence[CBGSummary]) -> list[StateSummaryRow]:
    """Roll block groups up to states via the geoid's 2-digit FIPS prefix.

    Percentages are over block groups with a known representative plan
    and income; groups missing either are counted only in the total.
    """
    by_state: dict[str, list[CBGSummary]] = {}
    for s in summaries:
        prefix = s.cbg_geoid[:2]
        state = FIPS_STATE.get(prefix, prefix)
        by_state.setdefault(state, []).append(s)
    rows = []
    for state in sorted(by_state):
        group = by_state[state]
        known = [s for s in group if s.exceeds_threshold is not None and s.ge_100 is not None]
        if known:
            exceeds = 100.0 * sum(1 for s in known if s.exceeds_threshold) / len(known)
            below = 100.0 * sum(1 for s in known if not s.ge_100) / len(known)
            rows.append(
                StateSummaryRow(state, round(exceeds, 4), round(below, 4), len(known), len(group))
            )
        else:
            rows.append(StateSummaryRow(state, None, None, 0, len(group)))
    return rows


def emit_state_table_csv(rows: Sequence[StateSummaryRow], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["state", "pct_price_exceeds_threshold", "pct_rep_below_100mbps",
             "n_cbgs_known", "n_cbgs_total"]
        )
        for r in rows:
            writer.writerow(
                [
                    r.state,
                    "" if r.pct_price_exceeds_threshold is None else r.pct_price_exceeds_threshold,
                    "" if r.pct_rep_below_100mbps is None else r.pct_rep_below_100mbps,
                    r.n_cbgs_known,
                    r.n_cbgs_total,
                ]
            )


def save_summaries(summaries: Sequence[CBGSummary], path: str | Path) -> None:
    lines = sorted(canonical_json(s.to_dict()) for s in summaries)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_summaries(path: str | Path) -> list[CBGSummary]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(summary_from_dict(json.loads(line)))
    return out


def analyze_run(
    plans_path: str | Path,
    report_path: str | Path,
    income_path: str | Path,
    out_dir: str | Path,
    boundary: Boundary = Boundary.STRICT,
) -> dict:
    """Run the full analysis and write every artifact into ``out_dir``."""
    from .figures import render_scatter_png
    from .pipeline import load_dataset, load_income

    records = load_dataset(plans_path)
    income = load_income(income_path)
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    counts = report.get("by_cbg", {})

    summaries = summarize_run(records, counts, income, boundary)
    points = scatter_points(summaries)
    rows = state_summary(summaries)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_summaries(summaries, out_dir / "summaries.ndjson")
    emit_state_table_csv(rows, out_dir / "table1.csv")
    emit_scatter_svg(points, out_dir / "figure1.svg")
    emit_points_csv(points, out_dir / "figure1_points.csv")
    render_scatter_png(points, out_dir / "figure1.png")

    return {
        "n_records": len(records),
        "n_cbgs": len(summaries),
        "n_points": len(points),
        "boundary": boundary.value,
        "states": {r.state: [r.pct_price_exceeds_threshold, r.pct_rep_below_100mbps] for r in rows},
        "out_dir": str(out_dir),
    }
