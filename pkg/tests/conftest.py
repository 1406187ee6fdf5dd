"""Shared fixtures: demos and compiled workflows for the bundled sites.

Compiling is the slow part of the suite, so it happens once per session
in a throwaway directory that the tests treat as read-only. Anything
that mutates sites, workflows, or repositories copies what it needs.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from bqt.fixtures import BUNDLED_APPS, data_path, load_bundled_site, load_bundled_workflow
from bqt.mocksite import generate_demo
from bqt.pipeline import load_bsls, load_coverage, plan_jobs, sample_addresses, save_jobs, select_cbgs
from bqt.fsm import save_workflow
from bqt.synthesis import Demonstration, StateRepository, compile_workflow

DEMO_PATHS = {
    "alpha-isp": ("serviceable", "not_serviceable"),
    "beta-isp": ("serviceable", "not_serviceable"),
    "gamma-isp": ("serviceable", "not_serviceable", "unknown"),
}

ADDRESS_VALUES = {
    "street": "742 Evergreen Terrace",
    "city": "Goleta",
    "state": "CA",
    "zip": "93117",
}


class Bundle:
    """Paths to one compiled copy of the bundled apps plus a jobs file."""

    def __init__(self, root: Path):
        self.root = root
        self.demo_dir = root / "demos"
        self.compiled_dir = root / "compiled"
        self.repo_dir = root / "repo"
        self.jobs_path = root / "jobs.json"
        self.demos: dict[str, list[Demonstration]] = {}

    def workflow_path(self, app_id: str) -> Path:
        return self.compiled_dir / f"{app_id}.fsm.json"


def build_bundle(root: Path) -> Bundle:
    bundle = Bundle(root)
    bundle.demo_dir.mkdir(parents=True)
    bundle.compiled_dir.mkdir(parents=True)
    repo = StateRepository(bundle.repo_dir)
    for app in BUNDLED_APPS:
        spec = load_bundled_site(app)
        demos = []
        for branch in DEMO_PATHS[app]:
            demo_dir = bundle.demo_dir / f"{app}-{branch}"
            doc = generate_demo(spec, ADDRESS_VALUES, branch, demo_dir)
            demos.append(Demonstration.from_dict(doc, base_dir=demo_dir))
        bundle.demos[app] = demos
        workflow = load_bundled_workflow(app)
        fsm = compile_workflow(workflow, demos, repo)
        save_workflow(fsm, bundle.workflow_path(app), extraction=workflow.extraction)

    bsls = load_bsls(data_path("bsl.csv"))
    coverage = load_coverage(data_path("coverage.csv"))
    selected = set(select_cbgs(bsls))
    in_scope = [b for b in bsls if b.cbg_geoid in selected]
    sampled = sample_addresses(in_scope, 1.0, 7)
    jobs = plan_jobs(sampled, coverage)
    save_jobs(jobs, {b.address_id: b for b in sampled}, bundle.jobs_path, 7, 1.0)
    return bundle


@pytest.fixture(scope="session")
def bundle(tmp_path_factory) -> Bundle:
    return build_bundle(tmp_path_factory.mktemp("bundle"))


@pytest.fixture()
def bundle_copy(bundle, tmp_path) -> Bundle:
    """A private copy for tests that mutate workflows or the repository."""
    root = tmp_path / "bundle"
    shutil.copytree(bundle.root, root)
    copy = Bundle(root)
    copy.demos = bundle.demos
    return copy
