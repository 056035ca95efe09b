"""Batch reward scoring over newline-delimited JSON on a stream socket.

One request object per line in, one response object per line out, matched by
``id``; responses on a connection may arrive out of order relative to other
connections but each connection's responses are written serially. The index
is shared read-only across all connections, so identical requests against
the same index produce byte-identical responses apart from ``timing_ms``.

Request fields (``op`` defaults to ``"score"``):

    {"id": str, "op": "score", "goal": str?, "history": [str, ...],
     "completions": [[str, ...], ...], "config": {...}?,
     "history_vectors": [[float, ...], ...]?,
     "completions_vectors": [[[float, ...], ...], ...]?}

``config`` may override any of top_k, gap_penalty, nw_clip_lo, nw_clip_hi,
tau, alpha, eps. Vectors, when supplied, take precedence over embedding the
texts and must be unit-norm rows of the index dimension. A ``health``
request returns the corpus manifest summary and the server defaults.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Any

import numpy as np

from .align import AlignConfig, StepSequence
from .corpus import CorpusIndex
from .embedding import Embedder, embedder_from_tag
from .reward import RewardConfig, compute_reward, group_advantages

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

ENV_PREFIX = "STEPGROUND_"
DEFAULT_STEP_CAP = 512

_ALIGN_FIELDS = {f.name for f in dataclasses.fields(AlignConfig)}
_REWARD_FIELDS = {f.name for f in dataclasses.fields(RewardConfig)}


class RequestError(ValueError):
    """Client-visible request failure with a machine-readable code."""

    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class ServiceConfig:
    align: AlignConfig = AlignConfig()
    reward: RewardConfig = RewardConfig()
    step_cap: int = DEFAULT_STEP_CAP
    workers: int = 1


def _merge_configs(
    base: ServiceConfig, overrides: dict | None
) -> tuple[AlignConfig, RewardConfig]:
    if not overrides:
        return base.align, base.reward
    if not isinstance(overrides, dict):
        raise RequestError("bad_request", "config must be an object")
    unknown = set(overrides) - _ALIGN_FIELDS - _REWARD_FIELDS
    if unknown:
        raise RequestError(
            "bad_request", f"unknown config fields: {sorted(unknown)}"
        )
    try:
        acfg = dataclasses.replace(
            base.align, **{k: v for k, v in overrides.items() if k in _ALIGN_FIELDS}
        )
        rcfg = dataclasses.replace(
            base.reward, **{k: v for k, v in overrides.items() if k in _REWARD_FIELDS}
        )
    except (TypeError, ValueError) as exc:
        raise RequestError("bad_request", f"invalid config override: {exc}") from exc
    return acfg, rcfg


def _steps_from_request(
    texts: Any,
    vectors: Any,
    embedder: Embedder | None,
    dim: int,
    what: str,
) -> StepSequence:
    if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
        raise RequestError("bad_request", f"{what} must be a list of strings")
    if vectors is not None:
        arr = np.asarray(vectors, dtype=np.float32)
        if arr.ndim != 2 and not (arr.ndim == 1 and arr.size == 0):
            raise RequestError("bad_request", f"{what}_vectors must be a 2-D array")
        arr = arr.reshape(len(texts), -1) if arr.size else arr.reshape(0, dim)
        if arr.shape[0] != len(texts):
            raise RequestError(
                "bad_request",
                f"{what}_vectors row count {arr.shape[0]} does not match "
                f"{len(texts)} steps",
            )
        if arr.shape[0] and arr.shape[1] != dim:
            raise RequestError(
                "bad_request",
                f"{what}_vectors dim {arr.shape[1]} does not match index dim {dim}",
            )
        norms = np.linalg.norm(arr.astype(np.float64), axis=1)
        if arr.shape[0] and np.any(np.abs(norms - 1.0) > 1e-2):
            raise RequestError("bad_request", f"{what}_vectors rows must be unit-norm")
        if arr.shape[0]:
            arr = (arr.astype(np.float64) / norms[:, None]).astype(np.float32)
        return StepSequence(tuple(texts), arr)
    if embedder is None:
        raise RequestError(
            "needs_vectors",
            f"index embedder is external; supply {what}_vectors inline",
        )
    return StepSequence.from_texts(texts, embedder)


def process_request(
    obj: Any,
    index: CorpusIndex,
    embedder: Embedder | None,
    defaults: ServiceConfig,
) -> dict:
    """Score one parsed request object; returns the response object."""
    if not isinstance(obj, dict):
        raise RequestError("bad_request", "request must be a JSON object")
    req_id = obj.get("id")
    op = obj.get("op", "score")
    if op == "health":
        m = index.manifest
        return {
            "id": req_id,
            "corpus": m.embedder,
            "record_count": m.record_count,
            "segment_count": m.segment_count,
            "dim": m.dim,
            "checksum": m.checksum,
            "defaults": {
                **dataclasses.asdict(defaults.align),
                **dataclasses.asdict(defaults.reward),
                "step_cap": defaults.step_cap,
            },
            "version": __version__,
        }
    if op != "score":
        raise RequestError("bad_request", f"unknown op {op!r}")

    history = obj.get("history")
    completions = obj.get("completions")
    if not isinstance(history, list) or not history:
        raise RequestError("bad_request", "history must be a non-empty list of steps")
    if not isinstance(completions, list) or not completions:
        raise RequestError(
            "bad_request", "completions must be a non-empty list of step lists"
        )
    total_steps = len(history) + sum(
        len(c) if isinstance(c, list) else 0 for c in completions
    )
    if total_steps > defaults.step_cap:
        raise RequestError(
            "request_too_large",
            f"request carries {total_steps} steps, cap is {defaults.step_cap}",
        )
    acfg, rcfg = _merge_configs(defaults, obj.get("config"))

    start = time.perf_counter()
    hist_seq = _steps_from_request(
        history, obj.get("history_vectors"), embedder, index.dim, "history"
    )
    comp_vectors = obj.get("completions_vectors")
    if comp_vectors is not None and (
        not isinstance(comp_vectors, list) or len(comp_vectors) != len(completions)
    ):
        raise RequestError(
            "bad_request", "completions_vectors must align with completions"
        )

    breakdowns = []
    for i, comp in enumerate(completions):
        if not isinstance(comp, list):
            raise RequestError("bad_request", f"completion {i} must be a list of steps")
        vec = comp_vectors[i] if comp_vectors is not None else None
        comp_seq = _steps_from_request(
            comp, vec, embedder, index.dim, f"completion[{i}]"
        )
        breakdowns.append(
            compute_reward(
                hist_seq, comp_seq, index, acfg, rcfg, workers=defaults.workers
            )
        )

    response: dict = {
        "id": req_id,
        "completions": [b.to_dict() for b in breakdowns],
        "corpus": index.manifest.embedder,
    }
    if len(breakdowns) >= 2:
        response["advantages"] = group_advantages(
            [b.reward for b in breakdowns]
        ).to_dict()
    response["timing_ms"] = round((time.perf_counter() - start) * 1e3, 3)
    return response


def process_line(
    line: str,
    index: CorpusIndex,
    embedder: Embedder | None,
    defaults: ServiceConfig,
) -> dict:
    """Parse and score one request line, mapping failures to error objects."""
    req_id = None
    try:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RequestError("bad_json", f"malformed JSON: {exc}") from exc
        if isinstance(obj, dict):
            req_id = obj.get("id")
        return process_request(obj, index, embedder, defaults)
    except RequestError as exc:
        return {"id": req_id, "error": {"code": exc.code, "message": str(exc)}}
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error handling request")
        return {"id": req_id, "error": {"code": "internal", "message": str(exc)}}


def encode_response(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode() + b"\n"


class ScoringServer(socketserver.ThreadingTCPServer):
    """Long-running reward endpoint over an immutable corpus index."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(
        self,
        bind: tuple[str, int],
        index: CorpusIndex,
        defaults: ServiceConfig | None = None,
        embedder: Embedder | None = None,
    ) -> None:
        self.index = index
        self.defaults = defaults if defaults is not None else ServiceConfig()
        self.embedder = (
            embedder
            if embedder is not None
            else embedder_from_tag(index.manifest.embedder)
        )
        super().__init__(bind, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.socket.getsockname()[:2]


class _Handler(socketserver.StreamRequestHandler):
    server: ScoringServer

    def handle(self) -> None:
        write_lock = threading.Lock()
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            response = process_line(
                line, self.server.index, self.server.embedder, self.server.defaults
            )
            with write_lock:
                try:
                    self.wfile.write(encode_response(response))
                    self.wfile.flush()
                except (BrokenPipeError, ConnectionResetError):
                    return


def serve(
    index: CorpusIndex,
    bind: tuple[str, int],
    defaults: ServiceConfig | None = None,
) -> None:
    """Run the scoring server until interrupted."""
    with ScoringServer(bind, index, defaults) as server:
        host, port = server.address
        logger.info("scoring service listening on %s:%d", host, port)
        server.serve_forever()


# ---------------------------------------------------------------------------
# client helpers (used by the CLI probe and the test suite)


class ScoringClient:
    """Minimal blocking client for the newline-delimited JSON protocol."""

    def __init__(self, host: str, port: int, timeout: float = 30.0) -> None:
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")

    def request(self, obj: dict) -> dict:
        self._file.write(json.dumps(obj).encode() + b"\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        return json.loads(line)

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()

    def __enter__(self) -> "ScoringClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def request_health(host: str, port: int, timeout: float = 10.0) -> dict:
    with ScoringClient(host, port, timeout=timeout) as client:
        return client.request({"id": "health", "op": "health"})
