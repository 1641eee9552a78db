"""Pluggable folding oracle: a deterministic toy folder, an HTTP client for
external folding services, and a content-addressed result cache.

Wire protocol (shared by the client and the stub server):

    POST {endpoint}/fold
    request  {"sequences": ["ACD...", ...]}
    response {"results": [{"ca_coords": [[x, y, z], ...],
                           "plddt": [p, ...] | null}, ...]}
    errors   {"error": "..."} with a non-200 status

Environment: RLDIF_FOLD_URL selects an HTTP backend, RLDIF_CACHE_DIR the
cache directory; CLI flags override both.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import requests

from .core import Sequence, decode_sequence, encode_sequence
from . import kernels

TOY_ORACLE_ID = "toy-v1"

# turn angle range of the toy folder, degrees: keeps random traces
# non-degenerate and roughly self-avoiding
TOY_TURN_MIN = 80.0
TOY_TURN_MAX = 140.0

_PAD_TOKEN = 20  # out-of-vocabulary sentinel for terminal 3-mers
_MASK64 = (1 << 64) - 1


class FoldError(Exception):
    pass


class FoldTimeout(FoldError):
    """Backend did not answer within the deadline (after retries)."""


class FoldBackendError(FoldError):
    """Non-retryable backend failure; carries status and a body excerpt."""

    def __init__(self, status: int, body: str):
        super().__init__(f"status {status}: {body[:200]}")
        self.status = status
        self.body = body[:200]


class InvalidLength(FoldError):
    """Backend returned a coordinate count that disagrees with the sequence."""


@dataclass(frozen=True)
class FoldResult:
    """CA trace plus optional per-residue confidence for one sequence."""

    ca_coords: np.ndarray  # [N, 3] Angstrom
    plddt: np.ndarray | None
    oracle_id: str
    sequence_digest: str  # sha256 hex of the sequence text

    def __post_init__(self):
        ca = np.asarray(self.ca_coords, dtype=np.float64)
        if ca.ndim != 2 or ca.shape[1] != 3 or not np.all(np.isfinite(ca)):
            raise ValueError(f"ca_coords must be finite [N, 3], got {ca.shape}")
        object.__setattr__(self, "ca_coords", ca)

    def __eq__(self, other):
        return (
            isinstance(other, FoldResult)
            and self.oracle_id == other.oracle_id
            and self.sequence_digest == other.sequence_digest
            and np.array_equal(self.ca_coords, other.ca_coords)
            and (
                (self.plddt is None and other.plddt is None)
                or (
                    self.plddt is not None
                    and other.plddt is not None
                    and np.array_equal(self.plddt, other.plddt)
                )
            )
        )


def sequence_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def toy_angles(seq: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-residue (turn, torsion) angles in degrees, hashed from 3-mers.

    Residue i hashes the triple (s[i-1], s[i], s[i+1]) with out-of-range
    neighbors replaced by a padding token, so a substitution at i only
    perturbs the angles at i-1, i, i+1.
    """
    idx = seq.indices
    n = len(idx)
    turns = np.empty(n)
    torsions = np.empty(n)
    for i in range(n):
        left = idx[i - 1] if i > 0 else _PAD_TOKEN
        right = idx[i + 1] if i < n - 1 else _PAD_TOKEN
        key = (int(left) * 441 + int(idx[i]) * 21 + int(right)) & _MASK64
        h = _splitmix64(key)
        u1 = (h >> 32) / 2.0**32
        u2 = (h & 0xFFFFFFFF) / 2.0**32
        turns[i] = TOY_TURN_MIN + (TOY_TURN_MAX - TOY_TURN_MIN) * u1
        torsions[i] = -180.0 + 360.0 * u2
    return turns, torsions


class ToyFolder:
    """Deterministic local folding oracle for desk-scale training and tests.

    Builds a CA trace from an ideal extended chain by bending it with
    per-residue turn/torsion angles hashed from sequence 3-mers; the
    sequence-to-structure map is local and reproducible.
    """

    oracle_id = TOY_ORACLE_ID

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def fold(self, seq: Sequence) -> FoldResult:
        with self._lock:
            self.calls += 1
        turns, torsions = toy_angles(seq)
        ca = kernels.toy_chain(np.deg2rad(turns), np.deg2rad(torsions))
        return FoldResult(
            ca_coords=ca,
            plddt=None,
            oracle_id=self.oracle_id,
            sequence_digest=sequence_digest(decode_sequence(seq)),
        )


class HttpFolder:
    """Client for a folding service speaking the /fold JSON protocol.

    Retries 5xx and timeouts with exponential backoff; 4xx is fatal. A
    semaphore bounds concurrent in-flight requests across threads.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 60.0,
        retries: int = 3,
        max_in_flight: int = 8,
        backoff: float = 0.05,
    ):
        if max_in_flight < 1 or retries < 0 or timeout <= 0:
            raise ValueError("limits must be positive")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.oracle_id = f"http:{self.endpoint}"
        self._sem = threading.Semaphore(max_in_flight)
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def _post(self, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._sem:
                    resp = self._session().post(
                        f"{self.endpoint}/fold", json=payload, timeout=self.timeout
                    )
            except requests.Timeout as e:
                last_exc = FoldTimeout(str(e))
                continue
            except requests.ConnectionError as e:
                last_exc = FoldBackendError(0, str(e))
                continue
            if resp.status_code == 200:
                return resp.json()
            if 500 <= resp.status_code < 600:
                last_exc = FoldBackendError(resp.status_code, resp.text)
                continue
            raise FoldBackendError(resp.status_code, resp.text)
        raise last_exc

    def fold(self, seq: Sequence) -> FoldResult:
        text = decode_sequence(seq)
        body = self._post({"sequences": [text]})
        results = body.get("results")
        if not results or len(results) != 1:
            raise FoldBackendError(200, f"malformed response: {json.dumps(body)[:200]}")
        entry = results[0]
        ca = np.asarray(entry["ca_coords"], dtype=np.float64)
        if ca.shape != (len(seq), 3):
            raise InvalidLength(f"backend returned {ca.shape[0]} residues for {len(seq)}")
        plddt = entry.get("plddt")
        return FoldResult(
            ca_coords=ca,
            plddt=None if plddt is None else np.asarray(plddt, dtype=np.float64),
            oracle_id=self.oracle_id,
            sequence_digest=sequence_digest(text),
        )


def fold(oracle, seq: Sequence) -> FoldResult:
    """Fold a sequence with any oracle object exposing .fold()."""
    return oracle.fold(seq)


class CacheCorrupt(Exception):
    """Stored entry failed its checksum; treated as a miss by the cache."""


def _entry_checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


class FoldCache:
    """Content-addressed on-disk cache in front of a folding oracle.

    Keyed by SHA-256(oracle id || 0x00 || sequence); entries are JSON files
    written via temp-file-then-atomic-rename, checksummed on read (a bad
    checksum is a miss and the file is replaced). An in-process memo layer
    skips disk reads for repeated hits; with single_flight=True concurrent
    duplicate requests coalesce into one backend call.
    """

    def __init__(self, cache_dir, oracle, single_flight: bool = False):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.oracle = oracle
        self.single_flight = single_flight
        self._memo: dict[str, FoldResult] = {}
        self._lock = threading.Lock()
        self._inflight: dict[str, threading.Event] = {}
        self.hits = 0
        self.misses = 0

    def key(self, seq: Sequence) -> str:
        text = decode_sequence(seq)
        raw = self.oracle.oracle_id.encode() + b"\x00" + text.encode()
        return hashlib.sha256(raw).hexdigest()

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def _read(self, key: str) -> FoldResult | None:
        path = self._path(key)
        try:
            with open(path) as fh:
                obj = json.load(fh)
            payload = obj["payload"]
            if obj.get("checksum") != _entry_checksum(payload):
                raise CacheCorrupt(key)
            return FoldResult(
                ca_coords=np.asarray(payload["ca_coords"], dtype=np.float64),
                plddt=None if payload["plddt"] is None else np.asarray(payload["plddt"]),
                oracle_id=payload["oracle_id"],
                sequence_digest=payload["sequence_digest"],
            )
        except FileNotFoundError:
            return None
        except (CacheCorrupt, json.JSONDecodeError, KeyError, ValueError):
            path.unlink(missing_ok=True)
            return None

    def _write(self, key: str, result: FoldResult):
        payload = {
            "ca_coords": result.ca_coords.tolist(),
            "plddt": None if result.plddt is None else result.plddt.tolist(),
            "oracle_id": result.oracle_id,
            "sequence_digest": result.sequence_digest,
        }
        obj = {"payload": payload, "checksum": _entry_checksum(payload)}
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(obj, fh)
            os.replace(tmp, self._path(key))
        except BaseException:
            os.unlink(tmp)
            raise

    def fold(self, seq: Sequence) -> FoldResult:
        key = self.key(seq)
        with self._lock:
            memo = self._memo.get(key)
        if memo is not None:
            self.hits += 1
            return memo
        stored = self._read(key)
        if stored is not None:
            self.hits += 1
            with self._lock:
                self._memo[key] = stored
            return stored

        if not self.single_flight:
            return self._fold_and_store(key, seq)

        while True:
            with self._lock:
                memo = self._memo.get(key)
                if memo is not None:
                    self.hits += 1
                    return memo
                event = self._inflight.get(key)
                if event is None:
                    event = threading.Event()
                    self._inflight[key] = event
                    leader = True
                else:
                    leader = False
            if leader:
                try:
                    return self._fold_and_store(key, seq)
                finally:
                    with self._lock:
                        del self._inflight[key]
                    event.set()
            event.wait()

    def _fold_and_store(self, key: str, seq: Sequence) -> FoldResult:
        self.misses += 1
        result = self.oracle.fold(seq)
        self._write(key, result)
        with self._lock:
            self._memo[key] = result
        return result


def fold_cached(cache_dir, oracle, seq: Sequence) -> FoldResult:
    """One-shot cached fold (constructs a FoldCache; hit returns stored)."""
    return FoldCache(cache_dir, oracle).fold(seq)


def oracle_from_env(fold_url: str | None = None):
    """Oracle from an explicit URL, the RLDIF_FOLD_URL variable, or the toy folder."""
    url = fold_url or os.environ.get("RLDIF_FOLD_URL")
    return HttpFolder(url) if url else ToyFolder()


def cache_dir_from_env(cache_dir=None):
    return Path(cache_dir or os.environ.get("RLDIF_CACHE_DIR") or ".fold_cache")


# ---------------------------------------------------------------------------
# stub server


class ToyFolderServer:
    """Threaded HTTP server exposing the toy folder over the /fold protocol.

    Test hooks: `fail_next` injects that many 500 responses, `delay` sleeps
    before answering. Tracks total calls and the high-water mark of
    concurrent in-flight requests.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.folder = ToyFolder()
        self.calls = 0
        self.fail_next = 0
        self.delay = 0.0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status: int, obj: dict):
                raw = json.dumps(obj).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def do_POST(self):
                if self.path != "/fold":
                    self._reply(404, {"error": f"unknown path {self.path}"})
                    return
                with server._lock:
                    server.calls += 1
                    server.in_flight += 1
                    server.max_in_flight = max(server.max_in_flight, server.in_flight)
                    inject_fail = server.fail_next > 0
                    if inject_fail:
                        server.fail_next -= 1
                try:
                    if server.delay:
                        time.sleep(server.delay)
                    if inject_fail:
                        self._reply(500, {"error": "injected failure"})
                        return
                    length = int(self.headers.get("Content-Length", 0))
                    try:
                        body = json.loads(self.rfile.read(length))
                        sequences = body["sequences"]
                        results = []
                        for text in sequences:
                            res = server.folder.fold(encode_sequence(text))
                            results.append(
                                {"ca_coords": res.ca_coords.tolist(), "plddt": None}
                            )
                    except Exception as e:  # malformed input -> client error
                        self._reply(400, {"error": str(e)})
                        return
                    self._reply(200, {"results": results})
                finally:
                    with server._lock:
                        server.in_flight -= 1

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def serve_forever(self):
        self._httpd.serve_forever()
