"""Entity-side TCP inference service and the simulated-capture client.

Wire protocol (CPRV): every message is magic "CPRV" | u8 type | u32 payload
length (little-endian) | payload. Types: 0x01 image frame, 0x02 inference
result (UTF-8 JSON), 0xFF error (UTF-8 JSON with an "error" field).

Frame payload: u8 flags (bit 0 = sanitized) | u16 height | u16 width |
u16 channels | u8 dtype (0 = f32) | f32 little-endian pixels, row-major,
channel-first. The server runs the identical inference path for raw and
sanitized frames and never updates any parameters.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import stack_images, utility_labels
from .errors import ConfigurationError, FormatError, TransportError
from .losses import kl_divergence
from .models import Classifier, SanitizerModel, STOCHASTIC
from .training import derive_seed

MAGIC = b"CPRV"
TYPE_FRAME = 0x01
TYPE_RESULT = 0x02
TYPE_ERROR = 0xFF

DEFAULT_PORT = 7787
DTYPE_F32 = 0
_HEADER = struct.Struct("<BHHHB")  # flags, H, W, C, dtype


def pack_message(mtype: int, payload: bytes) -> bytes:
    return MAGIC + struct.pack("<BI", mtype, len(payload)) + payload


def encode_frame(image: np.ndarray, sanitized: bool) -> bytes:
    c, h, w = image.shape
    flags = 0x01 if sanitized else 0x00
    return _HEADER.pack(flags, h, w, c, DTYPE_F32) + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_frame(payload: bytes):
    if len(payload) < _HEADER.size:
        raise FormatError("frame payload shorter than its header")
    flags, h, w, c, dtype = _HEADER.unpack_from(payload)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    expected = _HEADER.size + c * h * w * 4
    if len(payload) != expected:
        raise FormatError(f"pixel payload length {len(payload) - _HEADER.size} != C*H*W*4 = {c * h * w * 4}")
    if c == 0 or h == 0 or w == 0:
        raise FormatError(f"empty frame dimensions {(c, h, w)}")
    pixels = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).reshape(c, h, w).copy()
    if not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise FormatError("pixel values outside [0, 1]")
    return pixels, bool(flags & 0x01)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(65536, n - got))
        if not chunk:
            raise ConnectionError("peer closed mid-message")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket, max_payload: int):
    """Returns (type, payload); raises FormatError on bad magic and
    ConnectionError on EOF/oversize so callers can drop the connection."""
    magic = _read_exact(sock, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    mtype, length = struct.unpack("<BI", _read_exact(sock, 5))
    if length > max_payload:
        raise ConnectionError(f"payload length {length} exceeds maximum {max_payload}")
    return mtype, _read_exact(sock, length)


@dataclass(frozen=True)
class InferenceResult:
    utility_topk: tuple  # ((subject_id, probability), ...) sorted descending
    privacy_probs: tuple
    sanitized: bool

    def to_json(self) -> bytes:
        return json.dumps(
            {
                "utility_topk": [[int(i), float(p)] for i, p in self.utility_topk],
                "privacy_probs": [float(p) for p in self.privacy_probs],
                "sanitized": self.sanitized,
            }
        ).encode()

    @classmethod
    def from_json(cls, payload: bytes) -> "InferenceResult":
        d = json.loads(payload)
        return cls(
            utility_topk=tuple((int(i), float(p)) for i, p in d["utility_topk"]),
            privacy_probs=tuple(float(p) for p in d["privacy_probs"]),
            sanitized=bool(d["sanitized"]),
        )


def run_inference(utility: Classifier, privacy: Classifier, image: np.ndarray, k: int, sanitized: bool) -> InferenceResult:
    x = torch.from_numpy(image.astype(np.float32)).unsqueeze(0)
    with torch.no_grad():
        u = utility(x).squeeze(0).numpy()
        p = privacy(x).squeeze(0).numpy()
    order = np.argsort(-u, kind="stable")[:k]  # deterministic: ties keep index order
    return InferenceResult(
        utility_topk=tuple((int(i), float(u[i])) for i in order),
        privacy_probs=tuple(float(v) for v in p),
        sanitized=sanitized,
    )


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        self.request.settimeout(srv.recv_timeout)
        while True:
            try:
                mtype, payload = read_message(self.request, srv.max_frame_bytes)
            except FormatError as e:
                self._send_error(str(e))
                return  # framing lost, drop the connection
            except (ConnectionError, socket.timeout, OSError):
                return
            try:
                if mtype != TYPE_FRAME:
                    raise FormatError(f"unexpected message type {mtype:#04x}")
                image, sanitized = decode_frame(payload)
                expect = (srv.utility.in_channels,) + srv.utility.image_hw
                if image.shape != expect:
                    raise FormatError(f"frame shape {image.shape} does not match model input {expect}")
                result = run_inference(srv.utility, srv.privacy, image, srv.topk, sanitized)
                response = pack_message(TYPE_RESULT, result.to_json())
            except FormatError as e:
                response = pack_message(TYPE_ERROR, json.dumps({"error": str(e)}).encode())
            try:
                self.request.sendall(response)
            except OSError:
                return

    def _send_error(self, reason: str):
        try:
            self.request.sendall(pack_message(TYPE_ERROR, json.dumps({"error": reason}).encode()))
        except OSError:
            pass


class EntityServer(socketserver.ThreadingTCPServer):
    """Serves classifier inference over CPRV; parameters are read-only."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, utility: Classifier, privacy: Classifier, host: str = "127.0.0.1",
                 port: int = DEFAULT_PORT, topk: int = 3, max_frame_bytes: int = 1 << 22,
                 recv_timeout: float = 60.0):
        if topk < 1 or topk > utility.num_classes:
            raise ConfigurationError(f"topk {topk} out of range [1, {utility.num_classes}]")
        self.utility = utility.eval()
        self.privacy = privacy.eval()
        self.topk = topk
        self.max_frame_bytes = max_frame_bytes
        self.recv_timeout = recv_timeout
        self._thread = None
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "EntityServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(utility: Classifier, privacy: Classifier, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
          topk: int = 3, max_frame_bytes: int = 1 << 22):
    """Blocking entity server."""
    with EntityServer(utility, privacy, host, port, topk, max_frame_bytes) as server:
        server._thread.join()


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    retries: int = 3
    backoff: float = 0.25
    timeout: float = 30.0
    max_response_bytes: int = 1 << 22


@dataclass
class CaptureReport:
    results: list = field(default_factory=list)  # main-pathway InferenceResult per frame
    raw_results: list = field(default_factory=list)  # raw-reference results (may be empty)
    errors: list = field(default_factory=list)  # (frame index, reason)
    metrics: dict = field(default_factory=dict)


def _connect(cfg: ClientConfig, partial=None) -> socket.socket:
    last = None
    for attempt in range(cfg.retries):
        try:
            sock = socket.create_connection((cfg.host, cfg.port), timeout=cfg.timeout)
            sock.settimeout(cfg.timeout)
            return sock
        except OSError as e:
            last = e
            time.sleep(cfg.backoff * (2 ** attempt))
    raise TransportError(f"could not connect to {cfg.host}:{cfg.port} after {cfg.retries} attempts: {last}",
                         partial=partial or [])


def _roundtrip(sock: socket.socket, image: np.ndarray, sanitized: bool, cfg: ClientConfig):
    sock.sendall(pack_message(TYPE_FRAME, encode_frame(image, sanitized)))
    mtype, payload = read_message(sock, cfg.max_response_bytes)
    if mtype == TYPE_RESULT:
        return InferenceResult.from_json(payload), None
    if mtype == TYPE_ERROR:
        return None, json.loads(payload).get("error", "unknown server error")
    raise FormatError(f"unexpected response type {mtype:#04x}")


def simulate_capture(test_samples, sanitizer: SanitizerModel | None, cfg: ClientConfig,
                     prior=None, rng_seed: int = 0, limit: int | None = None) -> CaptureReport:
    """Stream test frames to the entity server and aggregate the responses.

    With a sanitizer, each sample is first sent raw (reference pathway) and
    then sanitized, so the report carries the same fields as the offline
    trade-off evaluation. Mid-stream transport failures raise TransportError
    with the partial results attached.
    """
    samples = list(test_samples[:limit] if limit else test_samples)
    images = stack_images(samples) if samples else None
    if sanitizer is not None and samples:
        sanitized = _sanitized_images(sanitizer, samples, prior, rng_seed)
    report = CaptureReport()
    sock = _connect(cfg, partial=report.results)
    try:
        try:
            for i in range(len(samples)):
                if sanitizer is not None:
                    raw_res, err = _roundtrip(sock, images[i], sanitized=False, cfg=cfg)
                    if err is not None:
                        report.errors.append((i, err))
                        report.results.append(None)
                        report.raw_results.append(None)
                        continue
                    res, err = _roundtrip(sock, sanitized[i], sanitized=True, cfg=cfg)
                    report.raw_results.append(raw_res if err is None else None)
                else:
                    res, err = _roundtrip(sock, images[i], sanitized=False, cfg=cfg)
                if err is not None:
                    report.errors.append((i, err))
                    report.results.append(None)
                else:
                    report.results.append(res)
        except (ConnectionError, socket.timeout, OSError, FormatError) as e:
            raise TransportError(f"transport failed at frame {len(report.results)}: {e}",
                                 partial=report.results) from e
    finally:
        sock.close()
    report.metrics = _capture_metrics(report, samples, prior)
    return report


def _sanitized_images(sanitizer, samples, prior, rng_seed):
    from .evaluation import sanitize_samples

    if sanitizer.kind == STOCHASTIC and prior is None:
        raise ConfigurationError("stochastic sanitizer capture needs the attribute prior")
    return sanitize_samples(sanitizer, samples, prior, rng_seed=derive_seed(rng_seed, "sanitize"))


def _full_posterior(res: InferenceResult):
    # The top-k list is the full posterior only when its ids are a permutation
    # of all classes (i.e. the server ran with topk == num_classes).
    ids = sorted(i for i, _ in res.utility_topk)
    if ids != list(range(len(ids))):
        return None
    out = np.zeros(len(ids))
    for i, p in res.utility_topk:
        out[i] = p
    return out


def _capture_metrics(report: CaptureReport, samples, prior) -> dict:
    ok = [(i, r) for i, r in enumerate(report.results) if r is not None]
    metrics = {"n": len(ok), "errors": len(report.errors), "utility_kl": None, "privacy_kl": None,
               "top1": None, "top3": None}
    if not ok:
        return metrics
    labels = utility_labels(samples)
    top1 = [r.utility_topk[0][0] == labels[i] for i, r in ok]
    metrics["top1"] = float(np.mean(top1))
    if all(len(r.utility_topk) >= 3 for _, r in ok):
        metrics["top3"] = float(np.mean([labels[i] in [t[0] for t in r.utility_topk[:3]] for i, r in ok]))
    if prior is not None:
        p = np.array([r.privacy_probs for _, r in ok])
        metrics["privacy_kl"] = float(kl_divergence(np.broadcast_to(np.asarray(prior), p.shape), p).mean().item())
    if report.raw_results and all(r is not None for r in report.raw_results):
        sans = [_full_posterior(r) for _, r in ok]
        raws = [_full_posterior(report.raw_results[i]) for i, _ in ok]
        if all(s is not None for s in sans) and all(r is not None for r in raws):
            metrics["utility_kl"] = float(kl_divergence(np.array(raws), np.array(sans)).mean().item())
    return metrics
