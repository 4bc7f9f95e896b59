"""Shared record types: components, cause types and the structured incident."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

#: Reply used whenever a narrative carries no information for a field.
SENTINEL = "There are no certain information mentioned in the incident"


class Component(str, enum.Enum):
    BrakeSystem = "BrakeSystem"
    SteeringSystem = "SteeringSystem"
    Pedals = "Pedals"
    DriveSystem = "DriveSystem"
    WheelTire = "WheelTire"
    FrontFork = "FrontFork"
    Frame = "Frame"
    SaddleSeat = "SaddleSeat"
    Visibility = "Visibility"

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @classmethod
    def parse(cls, text: str) -> "Component":
        """Resolve an enum value, a display name or a common alias.

        Matching ignores case, spaces, slashes and hyphens, so ``"Wheel/Tire"``,
        ``"wheel tire"`` and ``"WheelTire"`` all resolve to the same member.
        """
        key = _squash(text)
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown component: {text!r}") from None

    @classmethod
    def ordered(cls, items) -> list["Component"]:
        """Sort components in declaration order."""
        members = list(cls)
        return sorted(set(items), key=members.index)


_DISPLAY = {
    Component.BrakeSystem: "Brake System",
    Component.SteeringSystem: "Steering System",
    Component.Pedals: "Pedals",
    Component.DriveSystem: "Drive System",
    Component.WheelTire: "Wheel/Tire",
    Component.FrontFork: "Front Fork",
    Component.Frame: "Frame",
    Component.SaddleSeat: "Saddles/Seats",
    Component.Visibility: "Visibility",
}


def _squash(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


_ALIASES: dict[str, Component] = {}
for _c in Component:
    _ALIASES[_squash(_c.value)] = _c
    _ALIASES[_squash(_DISPLAY[_c])] = _c
for _alias, _c in [
    ("brake", Component.BrakeSystem),
    ("brakes", Component.BrakeSystem),
    ("steering", Component.SteeringSystem),
    ("handlebar", Component.SteeringSystem),
    ("pedal", Component.Pedals),
    ("drive", Component.DriveSystem),
    ("drive belt/chain", Component.DriveSystem),
    ("chain", Component.DriveSystem),
    ("wheel", Component.WheelTire),
    ("tire", Component.WheelTire),
    ("wheels/tires", Component.WheelTire),
    ("fork", Component.FrontFork),
    ("bicycle frame", Component.Frame),
    ("saddle", Component.SaddleSeat),
    ("seat", Component.SaddleSeat),
    ("seats", Component.SaddleSeat),
    ("saddle/seat", Component.SaddleSeat),
    ("visibility issues", Component.Visibility),
    ("lights", Component.Visibility),
]:
    _ALIASES[_squash(_alias)] = _c


class CauseType(str, enum.Enum):
    HumanRelated = "HumanRelated"
    EquipmentRelated = "EquipmentRelated"
    Both = "Both"
    Unclear = "Unclear"

    @property
    def code(self) -> int | None:
        """Predictor code; ``None`` for Unclear, which never enters a model."""
        return {"HumanRelated": 1, "EquipmentRelated": 2, "Both": 3}.get(self.value)


@dataclass
class StructuredIncident:
    """One extracted record, as written to the structured JSONL file.

    Demographic fields are carried over from the source report so that the
    statistics stage can run from the JSONL file alone.
    """

    record_id: str
    is_ebike: str | None = None
    modes_count: int = 0
    time_raw: str | None = None
    weather_raw: str | None = None
    road_raw: str | None = None
    cause_raw: str | None = None
    cause_type: str | None = None
    components_related: list[str] = field(default_factory=list)
    components_caused: list[str] = field(default_factory=list)
    predictors: dict[str, int] | None = None
    modes: list[str] = field(default_factory=list)
    cause_label: str | None = None
    excluded_reason: str | None = None
    status: str = "ok"
    error: str | None = None
    year: int | None = None
    state: str = ""
    age_years: int | None = None
    gender_raw: str = ""
    severity_code: int = -1

    _JSON_RENAMES = {"age_years": "age", "gender_raw": "gender", "severity_code": "severity"}

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if isinstance(value, list):
                value = list(value)
            elif isinstance(value, dict):
                value = dict(value)
            out[self._JSON_RENAMES.get(name, name)] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StructuredIncident":
        back = {v: k for k, v in cls._JSON_RENAMES.items()}
        kwargs = {}
        for key, value in data.items():
            name = back.get(key, key)
            if name not in cls.__dataclass_fields__:
                raise ValueError(f"unexpected key in structured record: {key!r}")
            kwargs[name] = value
        if "record_id" not in kwargs:
            raise ValueError("structured record lacks record_id")
        return cls(**kwargs)
