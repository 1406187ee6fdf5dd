"""Access to the bundled example sites, workflows, and location tables."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .fsm import WorkflowDoc, load_workflow_doc
from .mocksite import MockSiteSpec, load_site_spec

BUNDLED_APPS = ("alpha-isp", "beta-isp", "gamma-isp")


def fixtures_root() -> Path:
    return Path(str(resources.files("bqt"))) / "fixtures"


def mocksite_path(app_id: str) -> Path:
    return fixtures_root() / "mocksites" / f"{app_id}.mocksite.json"


def workflow_path(app_id: str) -> Path:
    return fixtures_root() / "workflows" / f"{app_id}.fsm.json"


def data_path(name: str) -> Path:
    return fixtures_root() / "data" / name


def load_bundled_site(app_id: str) -> MockSiteSpec:
    path = mocksite_path(app_id)
    if not path.exists():
        raise FileNotFoundError(f"no bundled site spec for {app_id!r}")
    return load_site_spec(path)


def load_bundled_workflow(app_id: str) -> WorkflowDoc:
    path = workflow_path(app_id)
    if not path.exists():
        raise FileNotFoundError(f"no bundled workflow for {app_id!r}")
    return load_workflow_doc(path)
