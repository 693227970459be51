"""Measurement sequencing: display white, capture, display check, capture, analyse."""
from __future__ import annotations

import csv
import json
import logging
import socket
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ..classifier import FEATURE_NAMES, FeatureVector, SvmModel, classify, extract_features
from ..config import DEFAULT_CONFIG, Config
from ..errors import AnalysisFailed, ProtocolError, ProtocolViolation, SolvisError, StepTimeout
from ..labels import Label
from ..raster import Raster, decode_png, write_png
from ..sa import GroundTruthPattern
from . import protocol as proto
from .protocol import Kind, Pattern, ProtocolMessage

log = logging.getLogger(__name__)


class SequenceState(Enum):
    IDLE = "Idle"
    AWAIT_WHITE_DISPLAY_ACK = "AwaitWhiteDisplayAck"
    AWAIT_WHITE_IMAGE = "AwaitWhiteImage"
    AWAIT_CHECK_DISPLAY_ACK = "AwaitCheckDisplayAck"
    AWAIT_CHECK_IMAGE = "AwaitCheckImage"
    ANALYZING = "Analyzing"
    DONE = "Done"
    FAILED = "Failed"


STATE_ORDER = (SequenceState.IDLE, SequenceState.AWAIT_WHITE_DISPLAY_ACK, SequenceState.AWAIT_WHITE_IMAGE,
               SequenceState.AWAIT_CHECK_DISPLAY_ACK, SequenceState.AWAIT_CHECK_IMAGE,
               SequenceState.ANALYZING, SequenceState.DONE)

CANONICAL_SEQUENCE = (Kind.DISPLAY_SET, Kind.DISPLAY_ACK, Kind.CAPTURE_REQ, Kind.CAPTURE_IMG,
                      Kind.DISPLAY_SET, Kind.DISPLAY_ACK, Kind.CAPTURE_REQ, Kind.CAPTURE_IMG)


class Session:
    """State machine for one measurement; moves only forward or to Failed."""

    def __init__(self, session_id: str):
        self.session_id = session_id
        self.state = SequenceState.IDLE
        self.seq = 0
        self.trace: list[tuple[str, Kind, int]] = []
        self.timestamps: dict[str, float] = {}

    def advance(self, to: SequenceState) -> None:
        if self.state is SequenceState.FAILED:
            raise ProtocolViolation("session already failed")
        if to is not SequenceState.FAILED:
            here = STATE_ORDER.index(self.state)
            if STATE_ORDER.index(to) != here + 1:
                raise ProtocolViolation(f"illegal transition {self.state.value} -> {to.value}")
        self.state = to
        self.timestamps[to.value] = time.time()

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    session_id: str
    timestamps: dict[str, float]
    white_image: Raster
    check_image: Raster
    features: FeatureVector
    label: Label
    config_hash: str
    trace: tuple[tuple[str, str, int], ...] = field(default=(), repr=False)

    def sidecar(self, with_timestamps: bool = True) -> dict:
        out = {"session_id": self.session_id,
               "label": self.label.value,
               "features": {n: float(v) for n, v in zip(FEATURE_NAMES, self.features.to_array())},
               "config_hash": self.config_hash,
               "trace": [list(t) for t in self.trace]}
        if with_timestamps:
            out["timestamps"] = self.timestamps
        return out

    def same_measurement(self, other: "MeasurementRecord") -> bool:
        """Equality ignoring timestamps."""
        return (self.sidecar(False) == other.sidecar(False)
                and self.white_image == other.white_image and self.check_image == other.check_image)

    def save(self, directory: str | Path) -> Path:
        out = Path(directory) / self.session_id
        out.mkdir(parents=True, exist_ok=True)
        write_png(self.white_image, out / "white.png")
        write_png(self.check_image, out / "check.png")
        (out / "record.json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return out


def connect(address: str | tuple[str, int], timeout: float = 10.0) -> socket.socket:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        address = (host or "127.0.0.1", int(port))
    sock = socket.create_connection(address, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def _exchange(session: Session, sock: socket.socket, peer: str, request: ProtocolMessage,
              expect: Kind, timeout: float, max_payload: int) -> ProtocolMessage:
    try:
        proto.send_message(sock, request, max_payload)
    except OSError as exc:
        raise ProtocolViolation(f"{peer} connection failed: {exc}") from exc
    session.trace.append((peer, request.kind, request.seq))
    try:
        reply = proto.read_message(sock, timeout, max_payload)
    except (socket.timeout, TimeoutError):
        raise StepTimeout(session.state, timeout) from None
    except OSError as exc:
        raise ProtocolViolation(f"{peer} connection failed: {exc}") from exc
    if reply.kind is not expect:
        raise ProtocolViolation(f"{peer} sent {reply.kind.name} while {session.state.value}")
    if reply.seq != request.seq + 1:
        raise ProtocolViolation(f"{peer} replied with seq {reply.seq}, expected {request.seq + 1}")
    session.seq = reply.seq
    session.trace.append((peer, reply.kind, reply.seq))
    return reply


def _capture(session: Session, display, camera, pattern: Pattern, timeout: float, max_payload: int) -> Raster:
    ack_state, image_state = (
        (SequenceState.AWAIT_WHITE_DISPLAY_ACK, SequenceState.AWAIT_WHITE_IMAGE) if pattern is Pattern.WHITE
        else (SequenceState.AWAIT_CHECK_DISPLAY_ACK, SequenceState.AWAIT_CHECK_IMAGE))
    session.advance(ack_state)
    ack = _exchange(session, display, "display", proto.display_set(session.next_seq(), pattern),
                    Kind.DISPLAY_ACK, timeout, max_payload)
    if proto.parse_pattern(ack) is not pattern:
        raise ProtocolViolation(f"display acknowledged the wrong pattern {ack.payload!r}")
    session.advance(image_state)
    try:
        reply = _exchange(session, camera, "camera", proto.capture_req(session.next_seq()),
                          Kind.CAPTURE_IMG, timeout, max_payload)
        return decode_png(reply.payload)
    except (StepTimeout, ProtocolViolation):
        raise
    except (ProtocolError, OSError, ValueError) as exc:
        # a damaged image frame or undecodable PNG leaves nothing to analyse
        raise AnalysisFailed(exc) from exc


def _broadcast(session: Session, socks, m: ProtocolMessage, max_payload: int) -> None:
    for sock in socks:
        try:
            proto.send_message(sock, m, max_payload)
        except OSError as exc:
            log.warning("could not deliver %s: %s", m.kind.name, exc)
    session.trace.append(("broadcast", m.kind, m.seq))


def run_measurement(display: socket.socket, camera: socket.socket, model: SvmModel,
                    config: Config = DEFAULT_CONFIG, truth: GroundTruthPattern | None = None,
                    session_id: str | None = None, trace: list | None = None) -> MeasurementRecord:
    """Run one capture-and-classify session over connected display and camera sockets.

    Raises ``StepTimeout``, ``ProtocolViolation`` or ``AnalysisFailed``; no
    record is produced unless both images arrived and the pipeline succeeded.
    ``trace`` (if given) receives the (peer, kind, seq) message log either way.
    """
    session = Session(session_id or uuid.uuid4().hex[:12])
    timeout = config["protocol.timeout"]
    max_payload = config["protocol.max_payload"]
    session.timestamps[SequenceState.IDLE.value] = time.time()
    try:
        white = _capture(session, display, camera, Pattern.WHITE, timeout, max_payload)
        check = _capture(session, display, camera, Pattern.CHECK, timeout, max_payload)
        session.advance(SequenceState.ANALYZING)
        try:
            features = extract_features(white, check, truth, config)
            label = classify(model, features)
        except SolvisError as exc:
            raise AnalysisFailed(exc) from exc
        except ValueError as exc:
            raise AnalysisFailed(exc) from exc
        result = proto.analyze_result(session.next_seq(), label.value,
                                      {n: float(v) for n, v in zip(FEATURE_NAMES, features.to_array())})
        _broadcast(session, (display, camera), result, max_payload)
        session.advance(SequenceState.DONE)
    except (StepTimeout, ProtocolViolation, AnalysisFailed, ProtocolError) as exc:
        failed_in = session.state
        session.advance(SequenceState.FAILED)
        _broadcast(session, (display, camera),
                   proto.error(session.next_seq(), 1, f"{failed_in.value}: {exc}"), max_payload)
        if trace is not None:
            trace.extend(session.trace)
        if isinstance(exc, (StepTimeout, ProtocolViolation, AnalysisFailed)):
            raise
        raise AnalysisFailed(exc) from exc
    if trace is not None:
        trace.extend(session.trace)
    return MeasurementRecord(session.session_id, dict(session.timestamps), white, check, features, label,
                             config.hash(),
                             tuple((peer, kind.name, seq) for peer, kind, seq in session.trace))


# -- series -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SeriesEntry:
    index: int
    started: float
    record: MeasurementRecord | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.record is not None


TREND_COLUMNS = ("step", "minutes", "status", "label", "superposition_ratio", "particle_pixel_count", "error")


def run_series(display: socket.socket, camera: socket.socket, model: SvmModel, count: int,
               interval: float = 0.0, config: Config = DEFAULT_CONFIG,
               truth: GroundTruthPattern | None = None, session_prefix: str = "step",
               out_dir: str | Path | None = None) -> list[SeriesEntry]:
    """Repeat ``run_measurement`` every ``interval`` seconds; failures are logged, not fatal."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    entries = []
    t0 = time.monotonic()
    for k in range(count):
        wait = t0 + k * interval - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        started = time.monotonic() - t0
        try:
            record = run_measurement(display, camera, model, config, truth, f"{session_prefix}-{k:03d}")
            entries.append(SeriesEntry(k, started, record))
            if out_dir is not None:
                record.save(out_dir)
        except (StepTimeout, ProtocolViolation, AnalysisFailed) as exc:
            log.warning("series step %d failed: %s", k, exc)
            entries.append(SeriesEntry(k, started, error=f"{type(exc).__name__}: {exc}"))
    return entries


def trend_rows(entries, minutes_per_step: float | None = None) -> list[dict]:
    rows = []
    for e in entries:
        minutes = e.index * minutes_per_step if minutes_per_step is not None else e.started / 60.0
        row = {"step": e.index, "minutes": f"{minutes:g}", "status": "ok" if e.ok else "failed",
               "label": "", "superposition_ratio": "", "particle_pixel_count": "", "error": e.error or ""}
        if e.ok:
            row["label"] = e.record.label.value
            row["superposition_ratio"] = repr(e.record.features.superposition_ratio)
            row["particle_pixel_count"] = repr(e.record.features.particle_pixel_count)
        rows.append(row)
    return rows


def write_trend_csv(path: str | Path, entries, minutes_per_step: float | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TREND_COLUMNS)
        writer.writeheader()
        writer.writerows(trend_rows(entries, minutes_per_step))
