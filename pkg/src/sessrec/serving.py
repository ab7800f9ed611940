"""Real-time recommendation: session filtering, NN-restricted scoring and a threaded server."""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataio import Vocabulary, collapse_repeats
from .evaluation import popularity_order
from .knn import NearestNeighborMatrix, candidates
from .model import GraphSessionModel
from .numerics import rowdot
from .sessiongraph import build_graph
from .training import load_checkpoint

log = logging.getLogger(__name__)

SESSION_CAP = 3
DEFAULT_N = 10


class ProtocolError(ValueError):
    pass


class StartupError(RuntimeError):
    pass


@dataclass
class InferenceRequest:
    items: list[int]
    cats: list[str] | None = None
    n: int = DEFAULT_N

    def __post_init__(self) -> None:
        if not self.items:
            raise ProtocolError("items must be non-empty")
        if self.n < 1:
            raise ProtocolError(f"n must be >= 1, got {self.n}")
        if self.cats is not None and len(self.cats) != len(self.items):
            raise ProtocolError("cats must parallel items")

    @classmethod
    def from_json(cls, obj) -> "InferenceRequest":
        if not isinstance(obj, dict):
            raise ProtocolError("request body must be a JSON object")
        items = obj.get("items")
        if not isinstance(items, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in items):
            raise ProtocolError("items must be a list of integers")
        cats = obj.get("cats")
        if cats is not None and not isinstance(cats, list):
            raise ProtocolError("cats must be a list")
        n = obj.get("n", DEFAULT_N)
        if not isinstance(n, int) or isinstance(n, bool):
            raise ProtocolError("n must be an integer")
        return cls(list(items), [str(c) for c in cats] if cats is not None else None, n)


@dataclass
class RankedRecommendations:
    recs: list[int]
    scores: list[float]
    latency_us: int = 0
    fallback_used: bool = False

    def to_json(self) -> dict:
        return {"recs": self.recs, "scores": self.scores, "latency_us": self.latency_us,
                "fallback_used": self.fallback_used}


def filter_session(items: Sequence[int], cats: Sequence[str] | None, vocab: Vocabulary | None,
                   cap: int = SESSION_CAP) -> list[int]:
    """Dense indices of the live session after vocabulary, category and length filters.

    Category labels come from the request when given, else from the
    vocabulary; items whose label differs from the most recent survivor's are
    dropped.  Consecutive repeats are collapsed before keeping the last ``cap``.
    """
    kept: list[tuple[int, str | None]] = []
    for pos, raw in enumerate(items):
        idx = raw if vocab is None else vocab.get(raw)
        if idx is None:
            continue
        cat = cats[pos] if cats is not None else (vocab.category(idx) if vocab is not None else None)
        kept.append((idx, cat))
    if not kept:
        return []
    last_cat = kept[-1][1]
    if last_cat is not None:
        kept = [(i, c) for i, c in kept if c == last_cat]
    return collapse_repeats([i for i, _ in kept])[-cap:]


def top_n(scores: np.ndarray, ids: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Best ``n`` by score descending, ties by id ascending."""
    order = np.lexsort((ids, -scores))[:n]
    return ids[order], scores[order]


class Recommender:
    """Immutable inference state shared by all request threads."""

    def __init__(self, model: GraphSessionModel, matrix: NearestNeighborMatrix, vocab: Vocabulary | None = None,
                 popularity: np.ndarray | None = None, vocab_hash: str | None = None):
        m = model.config.catalog_size
        if matrix.no_items != m:
            raise StartupError(f"NN matrix covers {matrix.no_items} items, model catalog has {m}")
        if vocab is not None and len(vocab) != m:
            raise StartupError(f"vocabulary has {len(vocab)} items, model catalog has {m}")
        if vocab is not None and vocab_hash is not None and vocab.content_hash() != vocab_hash:
            raise StartupError(f"vocabulary hash {vocab.content_hash()} != checkpoint hash {vocab_hash}")
        self.model = model
        self.matrix = matrix
        self.vocab = vocab
        self.vocab_hash = vocab_hash or (vocab.content_hash() if vocab is not None else "")
        if popularity is None:
            # dense ids are assigned by descending corpus count
            popularity = np.arange(m) if vocab is None else popularity_order(np.asarray(vocab.counts))
        self.popularity = np.asarray(popularity, dtype=np.int64)
        self.embeddings = model.params["item_embedding"]
        self.started = time.time()

    @classmethod
    def from_dense(cls, model: GraphSessionModel, matrix: NearestNeighborMatrix) -> "Recommender":
        return cls(model, matrix)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Recommender":
        ckpt = load_checkpoint(path)
        try:
            matrix = NearestNeighborMatrix.load(Path(path))
        except FileNotFoundError:
            raise StartupError(f"{path}: no nn_matrix.bin; run build-nn first")
        if ckpt.vocab is None:
            raise StartupError(f"{path}: checkpoint has no vocabulary")
        return cls(ckpt.model, matrix, ckpt.vocab, vocab_hash=ckpt.vocab_hash)

    def _raw(self, ids: np.ndarray) -> list[int]:
        if self.vocab is None:
            return [int(i) for i in ids]
        return [self.vocab.raw(int(i)) for i in ids]

    def session_embedding(self, dense: Sequence[int]) -> np.ndarray:
        s, _ = self.model.forward(build_graph([list(dense)], self.model.config.graph_mode))
        return s.value[0]

    def _fallback(self, exclude: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        ids = self.popularity[~np.isin(self.popularity, exclude)][:n]
        return ids, np.zeros(ids.size)

    def infer_dense(self, dense: Sequence[int], n: int = DEFAULT_N,
                    exclude: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray, bool]:
        """Top-n dense ids for an already filtered session; returns (ids, scores, fallback_used)."""
        excl = np.union1d(np.asarray(list(dense), dtype=np.int64), np.asarray(list(exclude), dtype=np.int64))
        if not dense:
            return (*self._fallback(excl, n), True)
        cand = candidates(self.matrix, dense)
        cand = cand[~np.isin(cand, excl)]
        if cand.size == 0:
            return (*self._fallback(excl, n), True)
        s = self.session_embedding(dense)
        scores = rowdot(self.embeddings[cand], s)
        ids, sc = top_n(scores, cand, n)
        return ids, sc, False

    def infer(self, request: InferenceRequest) -> RankedRecommendations:
        t0 = time.perf_counter_ns()
        dense = filter_session(request.items, request.cats, self.vocab)
        if self.vocab is None:
            seen = [i for i in request.items if 0 <= i < self.model.config.catalog_size]
        else:
            seen = [self.vocab.index(i) for i in request.items if i in self.vocab]
        ids, sc, fb = self.infer_dense(dense, request.n, seen)
        latency = (time.perf_counter_ns() - t0) // 1000
        return RankedRecommendations(self._raw(ids), [float(x) for x in sc], int(latency), fb)

    def full_catalog_top_n(self, dense: Sequence[int], n: int, exclude: Sequence[int] = ()) -> np.ndarray:
        """Reference ranking over every catalog item (minus session items)."""
        s = self.session_embedding(dense)
        ids = np.arange(self.model.config.catalog_size)
        excl = np.union1d(np.asarray(list(dense), dtype=np.int64), np.asarray(list(exclude), dtype=np.int64))
        ids = ids[~np.isin(ids, excl)]
        return top_n(rowdot(self.embeddings[ids], s), ids, n)[0]

    def health(self) -> dict:
        return {"version": __version__, "vocab_hash": self.vocab_hash,
                "uptime_s": round(time.time() - self.started, 3)}


class LatencyRecorder:
    """Thread-safe latency samples (microseconds) with percentile summaries."""

    def __init__(self, capacity: int = 100_000) -> None:
        self._lock = threading.Lock()
        self._samples: deque[float] = deque(maxlen=capacity)
        self._count = 0
        self._errors = 0
        self._start = time.perf_counter()

    def record(self, micros: float) -> None:
        with self._lock:
            self._samples.append(micros)
            self._count += 1

    def error(self) -> None:
        with self._lock:
            self._errors += 1

    def summary(self) -> dict:
        with self._lock:
            samples = np.array(self._samples, dtype=float)
            count, errors = self._count, self._errors
        elapsed = time.perf_counter() - self._start
        out = {"requests": count, "errors": errors, "throughput_rps": count / elapsed if elapsed > 0 else 0.0}
        for q in (50, 95, 99):
            out[f"p{q}_us"] = float(np.percentile(samples, q)) if samples.size else None
        return out


def handle_payload(rec: Recommender, stats: LatencyRecorder, body: bytes) -> tuple[int, dict]:
    """Shared request path for both protocols; returns (status, JSON object)."""
    t0 = time.perf_counter_ns()
    try:
        req = InferenceRequest.from_json(json.loads(body or b"null"))
        resp = rec.infer(req).to_json()
    except (ProtocolError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        stats.error()
        return 400, {"error": str(exc), "kind": "protocol"}
    except Exception as exc:  # a bad request must not take the worker down
        log.exception("inference failed")
        stats.error()
        return 500, {"error": str(exc), "kind": "internal"}
    stats.record((time.perf_counter_ns() - t0) / 1000)
    return 200, resp


class _PooledServerMixin:
    """Hands each accepted connection to a fixed pool of inference threads."""

    workers = 1

    def _pool_start(self) -> None:
        self._pool = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="infer")

    def process_request(self, request, client_address):
        self._pool.submit(self._process, request, client_address)

    def _process(self, request, client_address):
        try:
            self.finish_request(request, client_address)
        except Exception:
            self.handle_error(request, client_address)
        finally:
            self.shutdown_request(request)

    def server_close(self):
        super().server_close()
        self._pool.shutdown(wait=False, cancel_futures=True)


class _HttpHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; Nagle + delayed ACK would add ~40 ms
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, obj: dict) -> None:
        data = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/health":
            self._send(200, self.server.recommender.health())
        elif self.path == "/stats":
            self._send(200, self.server.stats.summary())
        else:
            self._send(404, {"error": f"no route {self.path}", "kind": "protocol"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        if self.path != "/recommend":
            self._send(404, {"error": f"no route {self.path}", "kind": "protocol"})
            return
        self._send(*handle_payload(self.server.recommender, self.server.stats, body))


class HttpRecommendServer(_PooledServerMixin, HTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, recommender: Recommender, workers: int = 1):
        self.recommender = recommender
        self.stats = LatencyRecorder()
        self.workers = workers
        self._pool_start()
        super().__init__(address, _HttpHandler)


def _recv_exact(sock, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def send_frame(sock, obj: dict) -> None:
    data = json.dumps(obj).encode()
    sock.sendall(struct.pack("<I", len(data)) + data)


def recv_frame(sock) -> dict | None:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack("<I", head)
    body = _recv_exact(sock, n)
    return None if body is None else json.loads(body)


class _RawHandler(socketserver.BaseRequestHandler):
    """Frames are a little-endian uint32 length followed by a JSON body."""

    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, True)

    def handle(self):
        srv = self.server
        while True:
            head = _recv_exact(self.request, 4)
            if head is None:
                return
            (n,) = struct.unpack("<I", head)
            body = _recv_exact(self.request, n)
            if body is None:
                return
            try:
                op = json.loads(body).get("op") if body.startswith(b"{") else None
            except json.JSONDecodeError:
                op = None
            if op == "health":
                out = srv.recommender.health()
            elif op == "stats":
                out = srv.stats.summary()
            else:
                status, out = handle_payload(srv.recommender, srv.stats, body)
            send_frame(self.request, out)


class RawRecommendServer(_PooledServerMixin, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, recommender: Recommender, workers: int = 1):
        self.recommender = recommender
        self.stats = LatencyRecorder()
        self.workers = workers
        self._pool_start()
        super().__init__(address, _RawHandler)


@dataclass
class Service:
    server: socketserver.BaseServer
    thread: threading.Thread | None = field(default=None)

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    def start(self) -> "Service":
        self.thread = threading.Thread(target=self.server.serve_forever, name="accept", daemon=True)
        self.thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise StartupError(f"bind address must be HOST:PORT, got {bind!r}")


def serve(recommender: Recommender, bind: str = "127.0.0.1:8080", workers: int = 1,
          protocol: str = "http") -> Service:
    """Bind and return a not-yet-started :class:`Service`."""
    address = parse_bind(bind)
    cls = {"http": HttpRecommendServer, "raw": RawRecommendServer}.get(protocol)
    if cls is None:
        raise StartupError(f"unknown protocol {protocol!r}")
    try:
        return Service(cls(address, recommender, workers))
    except OSError as exc:
        raise StartupError(f"cannot bind {bind}: {exc}") from exc
