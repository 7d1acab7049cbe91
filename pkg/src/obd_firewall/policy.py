"""JSON policy documents: parsing, semantic validation and serialization.

A policy file looks like::

    {"name": "t2", "description": "", "version": "1.0", "protocol": "CAN",
     "behaviours": [{"type": "replace", "identifier": "A6", "value": 200000.0}]}

Range syntax: ``id_range`` is ``"LO-HI"`` in hex, ``val_range`` is
``"low..high"`` in decimal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .model import FormatError, canonicalize_identifier

SUPPORTED_VERSIONS = frozenset({"1.0"})
PROTOCOLS = frozenset({"CAN"})
BEHAVIOUR_TYPES = ("reject", "limit", "replace")

_TOP_KEYS = ("name", "description", "version", "protocol", "behaviours")
_BEHAVIOUR_KEYS = ("type", "identifier", "value", "delay", "pub_once", "id_range", "val_range")


class PolicyError(ValueError):
    """Base class for policy load failures.  ``path`` points into the document."""

    def __init__(self, message: str, path: str = "") -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class PolicyParseError(PolicyError):
    pass


class PolicyVersionError(PolicyError):
    pass


class PolicySchemaError(PolicyError):
    pass


@dataclass(frozen=True)
class Behaviour:
    type: str
    identifier: str
    value: Optional[float] = None
    delay: Optional[int] = None
    pub_once: bool = False
    id_range: Optional[tuple[str, str]] = None
    val_range: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        # numeric forms are precomputed so the match loop stays cheap
        object.__setattr__(self, "_id_int", int(self.identifier, 16))
        if self.id_range is not None:
            bounds = (int(self.id_range[0], 16), int(self.id_range[1], 16))
        else:
            bounds = None
        object.__setattr__(self, "_id_bounds", bounds)

    @property
    def id_bounds(self) -> Optional[tuple[int, int]]:
        return self._id_bounds  # type: ignore[attr-defined]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.type, "identifier": self.identifier}
        if self.value is not None:
            out["value"] = self.value
        if self.delay is not None:
            out["delay"] = self.delay
        if self.pub_once:
            out["pub_once"] = True
        if self.id_range is not None:
            out["id_range"] = f"{self.id_range[0]}-{self.id_range[1]}"
        if self.val_range is not None:
            out["val_range"] = f"{self.val_range[0]!r}..{self.val_range[1]!r}"
        return out


@dataclass(frozen=True)
class Policy:
    name: str
    description: str
    version: str
    protocol: str
    behaviours: tuple[Behaviour, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "version": self.version,
            "protocol": self.protocol,
            "behaviours": [b.to_dict() for b in self.behaviours],
        }


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def add(self, path: str, message: str) -> None:
        self.violations.append((path, message))

    def to_lines(self) -> list[str]:
        return [json.dumps({"path": p, "message": m}) for p, m in self.violations]


def _number(raw: Any, path: str) -> float:
    if isinstance(raw, bool):
        raise PolicySchemaError("expected a number, got a boolean", path)
    if isinstance(raw, (int, float)):
        try:
            value = float(raw)
        except OverflowError:
            raise PolicySchemaError("number out of range", path) from None
    elif isinstance(raw, str):
        try:
            value = float(raw.strip())
        except ValueError:
            raise PolicySchemaError(f"not a number: {raw!r}", path) from None
    else:
        raise PolicySchemaError(f"expected a number, got {type(raw).__name__}", path)
    if not math.isfinite(value):
        raise PolicySchemaError(f"value must be finite: {raw!r}", path)
    return value


def _string(raw: Any, path: str) -> str:
    if not isinstance(raw, str):
        raise PolicySchemaError(f"expected a string, got {type(raw).__name__}", path)
    return raw


def _hex(raw: Any, path: str) -> str:
    try:
        return canonicalize_identifier(_string(raw, path))
    except FormatError as exc:
        raise PolicySchemaError(str(exc), path) from None


def _parse_id_range(raw: Any, path: str) -> tuple[str, str]:
    text = _string(raw, path)
    lo, sep, hi = text.partition("-")
    if not sep:
        raise PolicySchemaError(f"id_range must look like LO-HI, got {text!r}", path)
    return _hex(lo, path), _hex(hi, path)


def _parse_val_range(raw: Any, path: str) -> tuple[float, float]:
    text = _string(raw, path)
    lo, sep, hi = text.partition("..")
    if not sep:
        raise PolicySchemaError(f"val_range must look like low..high, got {text!r}", path)
    return _number(lo, path), _number(hi, path)


def _check_keys(obj: dict, allowed: Iterable[str], required: Iterable[str], path: str) -> None:
    allowed = set(allowed)
    for key in obj:
        if key not in allowed:
            raise PolicySchemaError(f"unknown key {key!r}", f"{path}.{key}" if path else key)
    for key in required:
        if key not in obj:
            raise PolicySchemaError(f"missing required field {key!r}", f"{path}.{key}" if path else key)


def _parse_behaviour(obj: Any, path: str) -> Behaviour:
    if not isinstance(obj, dict):
        raise PolicySchemaError("behaviour must be an object", path)
    _check_keys(obj, _BEHAVIOUR_KEYS, ("type", "identifier"), path)
    btype = _string(obj["type"], f"{path}.type")
    if btype not in BEHAVIOUR_TYPES:
        raise PolicySchemaError(
            f"unknown behaviour type {btype!r}; expected one of {', '.join(BEHAVIOUR_TYPES)}",
            f"{path}.type",
        )
    value = obj.get("value")
    delay = obj.get("delay")
    if delay is not None and (isinstance(delay, bool) or not isinstance(delay, int)):
        raise PolicySchemaError("delay must be an integer number of milliseconds", f"{path}.delay")
    pub_once = obj.get("pub_once", False)
    if not isinstance(pub_once, bool):
        raise PolicySchemaError("pub_once must be a boolean", f"{path}.pub_once")
    return Behaviour(
        type=btype,
        identifier=_hex(obj["identifier"], f"{path}.identifier"),
        value=None if value is None else _number(value, f"{path}.value"),
        delay=delay,
        pub_once=pub_once,
        id_range=None if obj.get("id_range") is None else _parse_id_range(obj["id_range"], f"{path}.id_range"),
        val_range=None
        if obj.get("val_range") is None
        else _parse_val_range(obj["val_range"], f"{path}.val_range"),
    )


def parse_policy(text: Union[str, bytes]) -> Policy:
    """Parse a policy document.  Raises a :class:`PolicyError` subclass on
    any failure; never anything else."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicyParseError(f"invalid UTF-8 at byte {exc.start}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyParseError(f"{exc.msg} (line {exc.lineno}, column {exc.colno}, char {exc.pos})") from None
    except RecursionError:
        raise PolicyParseError("document nested too deeply") from None
    except ValueError as exc:
        raise PolicyParseError(str(exc)) from None
    if not isinstance(doc, dict):
        raise PolicySchemaError("policy must be a JSON object")
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS, "")
    version = doc["version"]
    if not isinstance(version, str) or version not in SUPPORTED_VERSIONS:
        raise PolicyVersionError(
            f"unsupported policy version {version!r}; supported: {', '.join(sorted(SUPPORTED_VERSIONS))}",
            "version",
        )
    protocol = _string(doc["protocol"], "protocol")
    if protocol not in PROTOCOLS:
        raise PolicySchemaError(f"unsupported protocol {protocol!r}", "protocol")
    behaviours = doc["behaviours"]
    if not isinstance(behaviours, list):
        raise PolicySchemaError("behaviours must be a list", "behaviours")
    return Policy(
        name=_string(doc["name"], "name"),
        description=_string(doc["description"], "description"),
        version=version,
        protocol=protocol,
        behaviours=tuple(_parse_behaviour(b, f"behaviours[{i}]") for i, b in enumerate(behaviours)),
    )


def load_policy(path: Union[str, Path]) -> Policy:
    return parse_policy(Path(path).read_bytes())


def validate_policy(policy: Policy) -> ValidationReport:
    report = ValidationReport()
    for i, b in enumerate(policy.behaviours):
        path = f"behaviours[{i}]"
        if b.type not in BEHAVIOUR_TYPES:
            report.add(f"{path}.type", f"unknown behaviour type {b.type!r}")
        if b.type in ("limit", "replace") and b.value is None:
            report.add(f"{path}.value", f"{b.type} requires a value")
        if b.delay is not None and b.delay < 0:
            report.add(f"{path}.delay", f"delay must be >= 0, got {b.delay}")
        if b.id_range is not None:
            lo, hi = b.id_bounds
            if lo > hi:
                report.add(f"{path}.id_range", f"range start {b.id_range[0]} exceeds end {b.id_range[1]}")
            elif not lo <= int(b.identifier, 16) <= hi:
                report.add(f"{path}.id_range", f"identifier {b.identifier} outside range")
        if b.val_range is not None and b.val_range[0] > b.val_range[1]:
            report.add(f"{path}.val_range", f"range low {b.val_range[0]} exceeds high {b.val_range[1]}")
    return report


def serialize_policy(policy: Policy) -> str:
    return json.dumps(policy.to_dict(), indent=2) + "\n"


def pool_behaviours(policies: Iterable[Policy]) -> tuple[list[Behaviour], list[str]]:
    """Flatten several policies into one evaluation pool.

    Returns the behaviours and, aligned with them, a label ``name[i]`` naming
    the policy and the behaviour's position inside it (names need not be
    unique, so the index disambiguates).
    """
    pool: list[Behaviour] = []
    labels: list[str] = []
    for policy in policies:
        for i, b in enumerate(policy.behaviours):
            pool.append(b)
            labels.append(f"{policy.name}[{i}]")
    return pool, labels
