"""Request/response handling for the line-delimited JSON protocol.

One request per line: ``{"id": <int>, "image_path": <string>}``. One
response per line, in request order: ``{"id", "boxes", "error"}`` where
``boxes`` is a list of ``{"text", "x", "y", "w", "h", "conf"}`` objects
and ``error`` is null on success. A line that cannot be parsed at all
gets ``{"id": null, "boxes": [], "error": "parse"}``; the process never
dies on bad input.
"""

from __future__ import annotations

import json
from pathlib import Path


class RequestError(Exception):
    """Per-request failure; the message is the wire error code."""


def _parse_failure(req_id=None) -> dict:
    return {"id": req_id, "boxes": [], "error": "parse"}


def handle_line(line: str, engine) -> dict:
    try:
        req = json.loads(line)
    except ValueError:
        return _parse_failure()
    if not isinstance(req, dict):
        return _parse_failure()
    req_id = req.get("id")
    if isinstance(req_id, bool) or not isinstance(req_id, int):
        return _parse_failure()
    path = req.get("image_path")
    if not isinstance(path, str) or not path:
        return _parse_failure(req_id)
    try:
        boxes = engine.boxes_for(Path(path))
    except RequestError as exc:
        return {"id": req_id, "boxes": [], "error": str(exc)}
    return {"id": req_id, "boxes": boxes, "error": None}


def encode_response(resp: dict) -> str:
    return json.dumps(resp, sort_keys=True, separators=(",", ":"))
