"""Dissolution-state labels."""
from __future__ import annotations

from enum import Enum


class Label(Enum):
    """Pass: dissolved and clear.  Fail1: turbid.  Fail2: particles remain.

    Declaration order is the fixed tie-break order for classification.
    """

    PASS = "Pass"
    FAIL1 = "Fail1"
    FAIL2 = "Fail2"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @property
    def is_fail(self) -> bool:
        return self is not Label.PASS

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().replace(" ", "").lower()
        for label in cls:
            if label.value.lower() == key:
                return label
        raise ValueError(f"unknown label {text!r}")


LABELS = tuple(Label)
