"""Serving loops and the ``bqt-ocr`` entry point.

Default transport is stdio: the caller owns the process, pipes one JSON
request per line, and reads one response per line until EOF. TCP is for
poking at the service by hand; each accepted connection gets the same
sequential loop, so responses always come back in request order per
connection and only one request is ever in flight on it.
"""

from __future__ import annotations

import argparse
import socket
import sys
import threading
from typing import IO

from .engines import EngineUnavailable, make_engine
from .protocol import encode_response, handle_line


def serve_stream(reader: IO[str], writer: IO[str], engine) -> None:
    for line in reader:
        if not line.strip():
            continue
        writer.write(encode_response(handle_line(line, engine)) + "\n")
        writer.flush()


def _serve_connection(conn: socket.socket, engine) -> None:
    with conn:
        reader = conn.makefile("r", encoding="utf-8")
        writer = conn.makefile("w", encoding="utf-8")
        try:
            serve_stream(reader, writer, engine)
        except (BrokenPipeError, ConnectionResetError):
            pass


def serve_tcp(engine, host: str, port: int) -> None:
    with socket.create_server((host, port)) as srv:
        bound = srv.getsockname()[1]
        print(f"listening on {host}:{bound}", file=sys.stderr, flush=True)
        while True:
            conn, _ = srv.accept()
            threading.Thread(
                target=_serve_connection, args=(conn, engine), daemon=True
            ).start()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bqt-ocr",
        description="text extraction service speaking line-delimited JSON",
    )
    parser.add_argument("--mode", choices=("ocr", "fixture"), default="ocr",
                        help="box source: a real engine, or .boxes.json ground truth")
    parser.add_argument("--transport", choices=("stdio", "tcp"), default="stdio")
    parser.add_argument("--host", default="127.0.0.1", help="tcp only")
    parser.add_argument("--port", type=int, default=0,
                        help="tcp only; 0 picks a free port (printed to stderr)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        engine = make_engine(args.mode)
    except EngineUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.transport == "tcp":
            serve_tcp(engine, args.host, args.port)
        else:
            serve_stream(sys.stdin, sys.stdout, engine)
    except KeyboardInterrupt:
        pass
    return 0
