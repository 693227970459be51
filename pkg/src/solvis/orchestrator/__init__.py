"""Socket choreography between the analysis server, display unit and camera unit."""
from .emulators import Behavior, Bench, CameraEmulator, DisplayEmulator, Rig, scene_source
from .protocol import Kind, Pattern, ProtocolMessage, decode_message, encode_message
from .server import (CANONICAL_SEQUENCE, MeasurementRecord, SequenceState, connect, run_measurement,
                     run_series, write_trend_csv)

__all__ = [
    "Behavior", "Bench", "CameraEmulator", "DisplayEmulator", "Rig", "scene_source",
    "Kind", "Pattern", "ProtocolMessage", "decode_message", "encode_message",
    "CANONICAL_SEQUENCE", "MeasurementRecord", "SequenceState", "connect", "run_measurement",
    "run_series", "write_trend_csv",
]
