"""
Bearer traffic model: packet events, PDP-context sessions and JSONL trace ingestion.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from ipaddress import IPv4Address
from typing import IO, Any, Dict, Iterable, List, Optional, Union

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer, field_validator

from src.errors import TraceError

logger = structlog.get_logger(__name__)


class Direction(str, Enum):
    UPLINK = "UL"
    DOWNLINK = "DL"


class PaymentMode(str, Enum):
    POSTPAID = "POSTPAID"
    PREPAID = "PREPAID"


class ContextState(str, Enum):
    ACTIVE = "ACTIVE"
    DEACTIVATED = "DEACTIVATED"


class EventKind(str, Enum):
    ACTIVATE = "ACTIVATE"
    PACKET = "PACKET"
    QOS_CHANGE = "QOS_CHANGE"
    DEACTIVATE = "DEACTIVATE"
    EVENT = "EVENT"
    TOPUP = "TOPUP"
    TARIFF = "TARIFF"


# Kinds that belong to a PDP context; TOPUP and TARIFF are administrative.
CONTEXT_KINDS = {EventKind.ACTIVATE, EventKind.PACKET, EventKind.QOS_CHANGE, EventKind.DEACTIVATE, EventKind.EVENT}

_PROTOCOL_NUMBERS = {6: "TCP", 17: "UDP"}


def normalize_protocol(value: Any) -> str:
    """TCP / UDP by name or number; anything else becomes OTHER:<number>."""
    if isinstance(value, bool):
        raise ValueError(f"invalid protocol: {value!r}")
    if isinstance(value, int):
        if not 0 <= value <= 255:
            raise ValueError(f"protocol number out of range: {value}")
        return _PROTOCOL_NUMBERS.get(value, f"OTHER:{value}")
    if isinstance(value, str):
        text = value.strip().upper()
        if text in ("TCP", "UDP"):
            return text
        if text.startswith("OTHER:") and text[6:].isdigit():
            return normalize_protocol(int(text[6:]))
        if text.isdigit():
            return normalize_protocol(int(text))
    raise ValueError(f"invalid protocol: {value!r}")


class PacketEvent(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    timestamp: int = Field(alias="ts", ge=0)
    src_addr: IPv4Address = Field(alias="src")
    dst_addr: IPv4Address = Field(alias="dst")
    src_port: int = Field(alias="sport", ge=0, le=65535)
    dst_port: int = Field(alias="dport", ge=0, le=65535)
    protocol: str = Field(alias="proto")
    direction: Direction = Field(alias="dir")
    byte_count: int = Field(alias="bytes", ge=0)
    url: Optional[str] = None
    app_tag: Optional[str] = Field(default=None, alias="app")

    @field_validator("protocol", mode="before")
    @classmethod
    def _protocol(cls, value: Any) -> str:
        return normalize_protocol(value)

    @field_serializer("protocol")
    def _protocol_wire(self, value: str) -> Union[str, int]:
        if value.startswith("OTHER:"):
            return int(value[6:])
        return value

    @property
    def is_transport(self) -> bool:
        return self.protocol in ("TCP", "UDP")


class Activation(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    subscriber_id: str = Field(alias="subscriber", min_length=1)
    apn_profile_id: str = Field(alias="apn", min_length=1)
    qos_profile: str = Field(alias="qos")
    payment_mode: PaymentMode = Field(alias="mode")


class QosChange(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    qos_profile: str = Field(alias="qos")


class ContentEvent(BaseModel):
    """A billable content event (a movie, a call, a broadcast) delivered through a bucket."""
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    event_id: str = Field(min_length=1)
    event_class: str = Field(alias="class")
    bucket_id: str = Field(alias="bucket")
    quoted_at: Optional[int] = Field(default=None, ge=0)


class TopUp(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    subscriber_id: str = Field(alias="subscriber")
    amount: int = Field(ge=0)


class TariffChange(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="ignore")

    tariff: Dict[str, Any]
    effective_from: int = Field(ge=0)


Payload = Union[PacketEvent, Activation, QosChange, ContentEvent, TopUp, TariffChange]

_PAYLOAD_MODELS = {
    EventKind.ACTIVATE: Activation,
    EventKind.PACKET: PacketEvent,
    EventKind.QOS_CHANGE: QosChange,
    EventKind.EVENT: ContentEvent,
    EventKind.TOPUP: TopUp,
    EventKind.TARIFF: TariffChange,
}

_WIRE_FIELDS = {
    EventKind.ACTIVATE: ("kind", "ctx", "ts", "subscriber", "apn", "qos", "mode"),
    EventKind.PACKET: ("kind", "ctx", "ts", "src", "dst", "sport", "dport", "proto", "dir", "bytes", "url", "app"),
    EventKind.QOS_CHANGE: ("kind", "ctx", "ts", "qos"),
    EventKind.DEACTIVATE: ("kind", "ctx", "ts"),
    EventKind.EVENT: ("kind", "ctx", "ts", "event_id", "class", "bucket", "quoted_at"),
    EventKind.TOPUP: ("kind", "ts", "subscriber", "amount"),
    EventKind.TARIFF: ("kind", "ts", "tariff", "effective_from"),
}


@dataclass(frozen=True)
class SessionEvent:
    kind: EventKind
    context_id: Optional[str]
    timestamp: int
    payload: Optional[Payload] = None
    line_no: int = field(default=0, compare=False)

    @property
    def packet(self) -> Optional[PacketEvent]:
        return self.payload if self.kind == EventKind.PACKET else None

    def to_wire(self) -> Dict[str, Any]:
        """Canonical JSONL object; field order follows the trace grammar."""
        data: Dict[str, Any] = {"kind": self.kind.value}
        if self.kind in CONTEXT_KINDS:
            data["ctx"] = self.context_id
        data["ts"] = self.timestamp
        if self.payload is not None:
            body = self.payload.model_dump(mode="json", by_alias=True, exclude_none=True)
            for key in _WIRE_FIELDS[self.kind]:
                if key in body and key not in data:
                    data[key] = body[key]
        return data


@dataclass
class PdpContext:
    context_id: str
    subscriber_id: str
    apn_profile_id: str
    qos_profile: str
    payment_mode: PaymentMode
    activation_time: int
    state: ContextState = ContextState.ACTIVE
    deactivation_time: Optional[int] = None

    @classmethod
    def from_event(cls, event: SessionEvent) -> "PdpContext":
        activation: Activation = event.payload
        return cls(
            context_id=event.context_id,
            subscriber_id=activation.subscriber_id,
            apn_profile_id=activation.apn_profile_id,
            qos_profile=activation.qos_profile,
            payment_mode=activation.payment_mode,
            activation_time=event.timestamp,
        )

    def deactivate(self, timestamp: int) -> None:
        self.state = ContextState.DEACTIVATED
        self.deactivation_time = timestamp

    def covers(self, timestamp: int) -> bool:
        if timestamp < self.activation_time:
            return False
        return self.deactivation_time is None or timestamp <= self.deactivation_time


# ===== Ingestion ===== #

def _lines(source: Union[str, bytes, IO, Iterable]) -> Iterable[str]:
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        return source.splitlines()
    return source


def _parse_line(raw: str, line_no: int) -> SessionEvent:
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise TraceError("MALFORMED_LINE", f"line {line_no}: {e.msg}", line_no=line_no)
    if not isinstance(obj, dict):
        raise TraceError("MALFORMED_LINE", f"line {line_no}: expected a JSON object", line_no=line_no)

    try:
        kind = EventKind(obj.get("kind"))
    except ValueError:
        raise TraceError("MALFORMED_LINE", f"line {line_no}: unknown kind {obj.get('kind')!r}", line_no=line_no)

    unknown = sorted(set(obj) - set(_WIRE_FIELDS[kind]))
    if unknown:
        logger.warning("unknown trace fields ignored", line_no=line_no, fields=unknown)

    context_id = obj.get("ctx")
    if kind in CONTEXT_KINDS and (not isinstance(context_id, str) or not context_id):
        raise TraceError("MALFORMED_LINE", f"line {line_no}: missing ctx", line_no=line_no)
    timestamp = obj.get("ts")
    if isinstance(timestamp, bool) or not isinstance(timestamp, int) or timestamp < 0:
        raise TraceError("MALFORMED_LINE", f"line {line_no}: ts must be a non-negative integer", line_no=line_no)

    payload = None
    model = _PAYLOAD_MODELS.get(kind)
    if model is not None:
        try:
            payload = model.model_validate(obj)
        except ValidationError as e:
            reason = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
            raise TraceError("MALFORMED_LINE", f"line {line_no}: {reason}", line_no=line_no)

    return SessionEvent(
        kind=kind,
        context_id=context_id if kind in CONTEXT_KINDS else None,
        timestamp=timestamp,
        payload=payload,
        line_no=line_no,
    )


def ingest_trace(source: Union[str, bytes, IO, Iterable], format: str = "JSONL") -> List[SessionEvent]:
    """
    Parse a JSONL trace into session events, preserving input order.
    Every line yields exactly one event; a blank line is malformed.
    """
    if format.upper() != "JSONL":
        raise TraceError("MALFORMED_LINE", f"unsupported trace format: {format}", line_no=0)

    events: List[SessionEvent] = []
    activated: set = set()
    last_ts: Dict[str, int] = {}

    for line_no, raw in enumerate(_lines(source), start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        if not raw.strip():
            raise TraceError("MALFORMED_LINE", f"line {line_no}: blank line", line_no=line_no)
        event = _parse_line(raw, line_no)

        ctx = event.context_id
        if ctx is not None:
            if event.kind == EventKind.ACTIVATE:
                activated.add(ctx)
            elif ctx not in activated:
                raise TraceError("ORPHAN_EVENT", f"line {line_no}: {event.kind.value} for context {ctx} before ACTIVATE",
                                 context_id=ctx, line_no=line_no)
            if ctx in last_ts and event.timestamp < last_ts[ctx]:
                raise TraceError("TIME_REGRESSION", f"line {line_no}: context {ctx} went back in time",
                                 context_id=ctx, line_no=line_no)
            last_ts[ctx] = event.timestamp

        events.append(event)

    logger.debug("trace ingested", events=len(events), contexts=len(activated))
    return events


def dump_trace(events: Iterable[SessionEvent]) -> str:
    lines = [json.dumps(event.to_wire(), separators=(",", ":")) for event in events]
    return "".join(line + "\n" for line in lines)


def context_byte_totals(events: Iterable[SessionEvent]) -> Dict[str, int]:
    totals: Dict[str, int] = defaultdict(int)
    for event in events:
        if event.kind == EventKind.PACKET:
            totals[event.context_id] += event.payload.byte_count
    return dict(totals)


# ===== Validation ===== #

@dataclass(frozen=True)
class Finding:
    index: int
    code: str
    message: str
    context_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {"index": self.index, "code": self.code, "ctx": self.context_id, "message": self.message}


@dataclass
class ValidationReport:
    violations: List[Finding] = field(default_factory=list)
    warnings: List[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.to_dict() for v in self.violations],
            "warnings": [w.to_dict() for w in self.warnings],
        }


def validate_session(events: Iterable[SessionEvent]) -> ValidationReport:
    """
    Check PdpContext / SessionEvent invariants over a whole event sequence.
    Violations are data; the events are never modified.
    """
    report = ValidationReport()
    activations: Dict[str, int] = defaultdict(int)
    deactivated: set = set()
    qos: Dict[str, str] = {}
    last_ts: Dict[str, int] = {}
    last_index: Dict[str, int] = {}

    for index, event in enumerate(events):
        ctx = event.context_id
        if ctx is None:
            continue
        last_index[ctx] = index

        if ctx in last_ts and event.timestamp < last_ts[ctx]:
            report.violations.append(Finding(index, "TIME_REGRESSION", "timestamp decreased", ctx))
        last_ts[ctx] = max(event.timestamp, last_ts.get(ctx, event.timestamp))

        if event.kind == EventKind.ACTIVATE:
            activations[ctx] += 1
            if activations[ctx] > 1:
                report.violations.append(Finding(index, "DUPLICATE_ACTIVATE", "context activated twice", ctx))
            else:
                qos[ctx] = event.payload.qos_profile
            continue

        if activations[ctx] == 0:
            report.violations.append(Finding(index, "EVENT_BEFORE_ACTIVATE", f"{event.kind.value} before ACTIVATE", ctx))
            continue
        if ctx in deactivated:
            report.violations.append(Finding(index, "EVENT_AFTER_DEACTIVATE", f"{event.kind.value} after DEACTIVATE", ctx))
            continue

        if event.kind == EventKind.DEACTIVATE:
            deactivated.add(ctx)
        elif event.kind == EventKind.QOS_CHANGE:
            if event.payload.qos_profile == qos.get(ctx):
                report.violations.append(Finding(index, "QOS_UNCHANGED", "QOS_CHANGE carries the current profile", ctx))
            qos[ctx] = event.payload.qos_profile
        elif event.kind == EventKind.PACKET:
            packet = event.payload
            if (packet.url is not None or packet.app_tag is not None) and not packet.is_transport:
                report.warnings.append(Finding(index, "IMPLAUSIBLE_DPI", f"url/app_tag on {packet.protocol}", ctx))

    for ctx, count in activations.items():
        if count and ctx not in deactivated:
            report.violations.append(Finding(last_index[ctx], "MISSING_DEACTIVATE", "context never deactivated", ctx))

    for warning in report.warnings:
        logger.warning("trace warning", index=warning.index, code=warning.code, ctx=warning.context_id)
    return report
