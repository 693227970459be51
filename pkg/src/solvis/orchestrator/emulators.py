"""Stand-ins for the display and camera units, backed by synthetic scenes.

Both listen on TCP, serve one connection at a time and reply to requests
with ``seq + 1``.  A shared ``Bench`` plays the part of the physical setup:
the display writes the pattern on screen, the camera reads it.
"""
from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from ..config import DEFAULT_CONFIG, Config
from ..raster import encode_png
from ..synthgen import RenderedScene, SceneParams, render_scene
from . import protocol as proto
from .protocol import Kind, Pattern, ProtocolMessage

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Behavior:
    """Fault injection.

    ``delay`` seconds before every reply; ``drop`` swallows requests;
    ``corrupt`` sends a truncated frame and hangs up; ``wrong_order`` answers
    with a reply of the wrong kind.  ``sessions`` limits the faults to those
    measurement indices (counted from 0); ``None`` means every session.
    """

    delay: float = 0.0
    drop: bool = False
    corrupt: bool = False
    wrong_order: bool = False
    sessions: frozenset[int] | None = None

    def active(self, session: int) -> bool:
        return self.sessions is None or session in self.sessions


HAPPY = Behavior()


class Bench:
    """What the camera sees: the pattern on the display and the flask in front of it."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pattern = Pattern.WHITE

    @property
    def pattern(self) -> Pattern:
        with self._lock:
            return self._pattern

    @pattern.setter
    def pattern(self, value: Pattern) -> None:
        with self._lock:
            self._pattern = value


class _Emulator:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, behavior: Behavior = HAPPY,
                 max_payload: int = proto.MAX_PAYLOAD):
        self.behavior = behavior
        self.max_payload = max_payload
        self.received: list[ProtocolMessage] = []
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "_Emulator":
        self._thread = threading.Thread(target=self._serve, name=type(self).__name__, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._listener.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def serve_forever(self) -> None:
        self._serve()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except (socket.timeout, TimeoutError):
                continue
            except OSError:
                break
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._handle(conn)

    def _handle(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                m = proto.read_message(conn, 0.2, self.max_payload)
            except (socket.timeout, TimeoutError):
                continue
            except (proto.ProtocolError, OSError):
                return
            self.received.append(m)
            try:
                if not self._respond(conn, m):
                    return
            except OSError:
                return

    def _reply(self, conn: socket.socket, m: ProtocolMessage, session: int) -> bool:
        """Send ``m`` subject to the behavior; False means the connection is done."""
        b = self.behavior
        if not b.active(session):
            proto.send_message(conn, m, self.max_payload)
            return True
        if b.delay > 0:
            if self._stop.wait(b.delay):
                return False
        if b.drop:
            return True
        if b.wrong_order:
            wrong = Kind.CAPTURE_IMG if m.kind is not Kind.CAPTURE_IMG else Kind.DISPLAY_ACK
            proto.send_message(conn, ProtocolMessage(wrong, m.seq, m.payload), self.max_payload)
            return True
        frame = proto.encode_message(m, self.max_payload)
        if b.corrupt:
            conn.sendall(frame[:max(proto.HEADER_SIZE, len(frame) // 2)])
            conn.shutdown(socket.SHUT_WR)
            return False
        conn.sendall(frame)
        return True

    def _respond(self, conn: socket.socket, m: ProtocolMessage) -> bool:
        raise NotImplementedError


class DisplayEmulator(_Emulator):
    def __init__(self, bench: Bench, host: str = "127.0.0.1", port: int = 0, behavior: Behavior = HAPPY,
                 max_payload: int = proto.MAX_PAYLOAD):
        super().__init__(host, port, behavior, max_payload)
        self.bench = bench
        self.sessions = 0
        self.shown: list[Pattern] = []

    def _respond(self, conn: socket.socket, m: ProtocolMessage) -> bool:
        if m.kind is not Kind.DISPLAY_SET:
            return True  # results and errors are informational
        try:
            pattern = proto.parse_pattern(m)
        except proto.ProtocolError:
            proto.send_message(conn, proto.error(m.seq + 1, 2, "bad pattern"), self.max_payload)
            return True
        if pattern is Pattern.WHITE:
            self.sessions += 1
        self.bench.pattern = pattern
        self.shown.append(pattern)
        return self._reply(conn, proto.display_ack(m.seq + 1, pattern), self.sessions - 1)


SceneSource = Callable[[int], RenderedScene]


def scene_source(scenes: Sequence[SceneParams | RenderedScene], config: Config = DEFAULT_CONFIG) -> SceneSource:
    """Scene for the k-th measurement; the last one repeats.  Renders lazily."""
    if not scenes:
        raise ValueError("need at least one scene")
    cache: dict[int, RenderedScene] = {}

    def get(k: int) -> RenderedScene:
        k = min(k, len(scenes) - 1)
        if k not in cache:
            item = scenes[k]
            cache.clear()  # a series only moves forward
            cache[k] = item if isinstance(item, RenderedScene) else render_scene(item, config)
        return cache[k]

    return get


class CameraEmulator(_Emulator):
    """Replies to CAPTURE_REQ with the current scene under the displayed pattern.

    Each white-pattern capture starts the next measurement, which moves a
    series on to its next scene.  Without a bench (camera running on its
    own) captures alternate white, check, white, ...
    """

    def __init__(self, bench: Bench | None, scenes: SceneSource, host: str = "127.0.0.1", port: int = 0,
                 behavior: Behavior = HAPPY, max_payload: int = proto.MAX_PAYLOAD):
        super().__init__(host, port, behavior, max_payload)
        self.bench = bench
        self.scenes = scenes
        self.sessions = 0
        self._captures = 0
        self._png: dict[tuple[int, Pattern], bytes] = {}

    def _image(self, session: int, pattern: Pattern) -> bytes:
        key = (session, pattern)
        if key not in self._png:
            self._png = {k: v for k, v in self._png.items() if k[0] == session}
            scene = self.scenes(session)
            self._png[key] = encode_png(scene.white if pattern is Pattern.WHITE else scene.check)
        return self._png[key]

    def _respond(self, conn: socket.socket, m: ProtocolMessage) -> bool:
        if m.kind is not Kind.CAPTURE_REQ:
            return True
        if self.bench is not None:
            pattern = self.bench.pattern
        else:
            pattern = Pattern.WHITE if self._captures % 2 == 0 else Pattern.CHECK
        self._captures += 1
        if pattern is Pattern.WHITE:
            self.sessions += 1
        session = max(self.sessions - 1, 0)
        return self._reply(conn, proto.capture_img(m.seq + 1, self._image(session, pattern)), session)


@dataclass
class Rig:
    """A display and a camera emulator sharing one bench."""

    display: DisplayEmulator
    camera: CameraEmulator

    @classmethod
    def start(cls, scenes: Sequence[SceneParams | RenderedScene], display_behavior: Behavior = HAPPY,
              camera_behavior: Behavior = HAPPY, config: Config = DEFAULT_CONFIG) -> "Rig":
        bench = Bench()
        max_payload = config["protocol.max_payload"]
        display = DisplayEmulator(bench, behavior=display_behavior, max_payload=max_payload).start()
        camera = CameraEmulator(bench, scene_source(scenes, config), behavior=camera_behavior,
                                max_payload=max_payload).start()
        return cls(display, camera)

    def stop(self) -> None:
        self.display.stop()
        self.camera.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def wait_for(predicate: Callable[[], bool], timeout: float = 5.0) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()
