"""Box sources: ground-truth fixtures and a real recognition engine.

Both expose ``boxes_for(image_path) -> list[dict]`` and signal
per-request problems with :class:`~bqt_ocr_sidecar.protocol.RequestError`
carrying the wire error code: ``not_found`` for a missing image,
``no_fixture`` when the sibling ground-truth file is absent, ``decode``
when either file exists but cannot be read.
"""

from __future__ import annotations

from pathlib import Path

from .protocol import RequestError


class EngineUnavailable(Exception):
    """Raised at startup when the requested engine cannot load."""


class FixtureEngine:
    """Echoes the ``.boxes.json`` ground truth sitting next to an image.

    The fixture holds ``{"boxes": [...]}`` (a bare list also works); the
    parsed array is returned verbatim so callers see exactly the bytes
    the renderer wrote, modulo JSON serialization.
    """

    def boxes_for(self, image_path: Path) -> list[dict]:
        import json

        if not image_path.exists():
            raise RequestError("not_found")
        sibling = image_path.with_suffix(".boxes.json")
        if not sibling.exists():
            raise RequestError("no_fixture")
        try:
            raw = json.loads(sibling.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise RequestError("decode") from exc
        boxes = raw.get("boxes") if isinstance(raw, dict) else raw
        if not isinstance(boxes, list):
            raise RequestError("decode")
        return boxes


class TesseractEngine:
    """Wraps pytesseract, merging word boxes into line-level spans."""

    def __init__(self):
        try:
            import pytesseract
            from PIL import Image
        except ImportError as exc:
            raise EngineUnavailable(f"ocr engine unavailable: {exc}") from exc
        self._pytesseract = pytesseract
        self._image = Image

    def boxes_for(self, image_path: Path) -> list[dict]:
        if not image_path.exists():
            raise RequestError("not_found")
        try:
            with self._image.open(image_path) as img:
                img.load()
                data = self._pytesseract.image_to_data(
                    img, output_type=self._pytesseract.Output.DICT
                )
        except OSError as exc:
            raise RequestError("decode") from exc

        # keyword search happens on whole lines, so group words by line
        lines: dict[tuple, list[int]] = {}
        for i in range(len(data["text"])):
            if not data["text"][i].strip():
                continue
            key = (data["block_num"][i], data["par_num"][i], data["line_num"][i])
            lines.setdefault(key, []).append(i)

        boxes = []
        for key in sorted(lines):
            idxs = lines[key]
            xs = [data["left"][i] for i in idxs]
            ys = [data["top"][i] for i in idxs]
            x2s = [data["left"][i] + data["width"][i] for i in idxs]
            y2s = [data["top"][i] + data["height"][i] for i in idxs]
            confs = [float(data["conf"][i]) for i in idxs if float(data["conf"][i]) >= 0]
            conf = (sum(confs) / len(confs) / 100.0) if confs else 0.0
            boxes.append(
                {
                    "text": " ".join(data["text"][i].strip() for i in idxs),
                    "x": min(xs),
                    "y": min(ys),
                    "w": max(x2s) - min(xs),
                    "h": max(y2s) - min(ys),
                    "conf": max(0.0, min(1.0, conf)),
                }
            )
        return boxes


def make_engine(mode: str):
    if mode == "fixture":
        return FixtureEngine()
    if mode == "ocr":
        return TesseractEngine()
    raise ValueError(f"unknown mode: {mode!r}")
