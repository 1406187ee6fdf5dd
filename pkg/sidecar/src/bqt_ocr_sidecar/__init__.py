"""Standalone text extraction service for screen snapshot images.

The package deliberately has no runtime dependencies and never imports
the automation engine it serves; the only coupling is the wire protocol.
"""

from .protocol import encode_response, handle_line
from .server import main, serve_stream

__all__ = ["encode_response", "handle_line", "main", "serve_stream"]
