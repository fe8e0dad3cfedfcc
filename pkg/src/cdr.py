"""
G-CDR recording: one billing record per PDP context activation, cut into usage containers on
volume limit, QoS change and time-of-day triggers, rated at close and exported over Ga / RADIUS.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Dict, FrozenSet, Iterable, List, Optional, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.classifier import Usage
from src.errors import CdrError
from src.rating import BillingMethod, Money, TariffCatalog, TariffDesk, UsageSnapshot, rate
from src.traffic import PaymentMode

logger = structlog.get_logger(__name__)

HOUR_MS = 3_600_000


class CutReason(str, Enum):
    VOLUME_LIMIT = "VOLUME_LIMIT"
    QOS_CHANGE = "QOS_CHANGE"
    TOD_BOUNDARY = "TOD_BOUNDARY"
    FINAL = "FINAL"


class RecordState(str, Enum):
    OPEN = "OPEN"
    CLOSED = "CLOSED"


# ===== Profiles ===== #

class ApnProfileDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    volume_limit_bytes: int = Field(gt=0)
    tod_profile: Optional[str] = None


class TodProfileDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    cut_hours: List[int] = Field(default_factory=list)

    @field_validator("cut_hours")
    @classmethod
    def _hours(cls, hours: List[int]) -> List[int]:
        if len(set(hours)) != len(hours):
            raise ValueError("cut hours must be distinct")
        if any(not 0 <= hour <= 23 for hour in hours):
            raise ValueError("cut hours must lie within 0-23")
        return sorted(hours)


@dataclass(frozen=True)
class TodProfile:
    tod_id: str
    cut_hours: FrozenSet[int]

    def boundaries(self, after: int, until: int) -> List[int]:
        """Hour boundaries t with after < t <= until whose hour of day is a cut hour."""
        found = []
        t = (after // HOUR_MS + 1) * HOUR_MS
        while t <= until:
            if (t // HOUR_MS) % 24 in self.cut_hours:
                found.append(t)
            t += HOUR_MS
        return found


@dataclass(frozen=True)
class ApnProfile:
    apn_id: str
    volume_limit_bytes: int
    tod_profile_id: Optional[str] = None


# ===== Records ===== #

@dataclass(frozen=True)
class MeteredUsage:
    """Usage delta of one admitted packet or content event, tagged with the tariff version in force."""
    bucket_id: str
    tariff_id: str
    method: BillingMethod
    tariff_from: int
    timestamp: int
    usage: Usage
    event: Optional[Tuple[str, Money]] = None


@dataclass
class _BucketLedger:
    tariff_id: str
    method: BillingMethod
    segments: Dict[int, Usage] = field(default_factory=dict)
    events: Dict[int, List[Tuple[str, Money]]] = field(default_factory=dict)


@dataclass
class CdrContainer:
    seq_no: int
    start_time: int
    qos_profile: str
    end_time: Optional[int] = None
    cut_reason: Optional[CutReason] = None
    usage: Dict[str, Usage] = field(default_factory=dict)
    charge: Dict[str, Money] = field(default_factory=dict)
    tariffs: Dict[str, str] = field(default_factory=dict)
    _ledgers: Dict[str, _BucketLedger] = field(default_factory=dict, compare=False, repr=False)
    rated: bool = field(default=False, compare=False)

    @property
    def sealed(self) -> bool:
        return self.cut_reason is not None

    def add(self, metered: MeteredUsage) -> None:
        ledger = self._ledgers.setdefault(metered.bucket_id, _BucketLedger(metered.tariff_id, metered.method))
        ledger.segments[metered.tariff_from] = ledger.segments.get(metered.tariff_from, Usage()) + metered.usage
        if metered.event is not None:
            ledger.events.setdefault(metered.tariff_from, []).append(metered.event)
        self.usage[metered.bucket_id] = self.usage.get(metered.bucket_id, Usage()) + metered.usage
        self.tariffs[metered.bucket_id] = metered.tariff_id

    def bytes_total(self) -> int:
        return sum(u.bytes_total for u in self.usage.values())

    def total_charge(self, currency: str) -> Money:
        total = Money.zero(currency)
        for money in self.charge.values():
            total = total + money
        return total


@dataclass
class GCdr:
    cdr_id: str
    context_id: str
    subscriber_id: str
    apn_profile_id: str
    payment_mode: PaymentMode
    open_time: int
    close_time: Optional[int] = None
    containers: List[CdrContainer] = field(default_factory=list)
    state: RecordState = RecordState.OPEN
    partial: bool = field(default=False, compare=False)
    volume_counter: int = field(default=0, compare=False)
    clock: int = field(default=0, compare=False)
    exported: int = field(default=0, compare=False)

    @property
    def current(self) -> CdrContainer:
        return self.containers[-1]

    def usage_by_bucket(self) -> Dict[str, Usage]:
        totals: Dict[str, Usage] = {}
        for container in self.containers:
            for bucket_id, usage in container.usage.items():
                totals[bucket_id] = totals.get(bucket_id, Usage()) + usage
        return dict(sorted(totals.items()))

    def charge_by_bucket(self) -> Dict[str, Money]:
        totals: Dict[str, Money] = {}
        for container in self.containers:
            for bucket_id, money in container.charge.items():
                totals[bucket_id] = totals[bucket_id] + money if bucket_id in totals else money
        return dict(sorted(totals.items()))

    def view(self, containers: List[CdrContainer], partial: bool) -> "GCdr":
        return replace(self, containers=list(containers), partial=partial,
                       close_time=None if partial else self.close_time)


# ===== Engine ===== #

class CdrEngine:
    """
    Owns APN/TOD profiles and the OPEN records keyed by context. A record is driven by one worker.
    """

    def __init__(self, apn_profiles: Dict[str, ApnProfile], tod_profiles: Dict[str, TodProfile], desk: TariffDesk):
        self.apn_profiles = apn_profiles
        self.tod_profiles = tod_profiles
        self.desk = desk
        self.open_records: Dict[str, GCdr] = {}

    def _tod_for(self, record: GCdr) -> Optional[TodProfile]:
        apn = self.apn_profiles[record.apn_profile_id]
        return self.tod_profiles.get(apn.tod_profile_id) if apn.tod_profile_id else None

    def open_record(self, context_id: str, subscriber_id: str, apn_profile_id: str, qos_profile: str,
                    payment_mode: PaymentMode, timestamp: int) -> GCdr:
        if context_id in self.open_records:
            raise CdrError("DUPLICATE_OPEN", f"context {context_id} already has an open record", context_id=context_id)
        if apn_profile_id not in self.apn_profiles:
            raise CdrError("UNKNOWN_APN", f"APN profile {apn_profile_id!r} is not configured", apn=apn_profile_id)

        record = GCdr(
            cdr_id=f"cdr-{context_id}",
            context_id=context_id,
            subscriber_id=subscriber_id,
            apn_profile_id=apn_profile_id,
            payment_mode=payment_mode,
            open_time=timestamp,
            containers=[CdrContainer(seq_no=1, start_time=timestamp, qos_profile=qos_profile)],
            clock=timestamp,
        )
        self.open_records[context_id] = record
        logger.debug("record opened", cdr_id=record.cdr_id, ctx=context_id, mode=payment_mode.value)
        return record

    def account_usage(self, record: GCdr, metered: MeteredUsage) -> List[CdrContainer]:
        """
        Record one usage delta; returns the containers completed by it (TOD cuts first, then volume cuts).
        The packet stays whole in the container it lands in; the counter carries the overflow.
        """
        _require_open(record)
        completed = self.on_clock(record, metered.timestamp)

        record.current.add(metered)
        self.desk.mark_metered(metered.tariff_id, metered.tariff_from)
        record.volume_counter += metered.usage.bytes_total
        limit = self.apn_profiles[record.apn_profile_id].volume_limit_bytes
        while record.volume_counter >= limit:
            completed.append(cut_container(record, CutReason.VOLUME_LIMIT, metered.timestamp))
            record.volume_counter -= limit
        return completed

    def on_qos_change(self, record: GCdr, qos_profile: str, timestamp: int) -> List[CdrContainer]:
        _require_open(record)
        if qos_profile == record.current.qos_profile:
            raise CdrError("NO_CHANGE", f"QoS profile of {record.context_id} is already {qos_profile!r}",
                           context_id=record.context_id)
        completed = self.on_clock(record, timestamp)
        completed.append(cut_container(record, CutReason.QOS_CHANGE, timestamp, qos_profile))
        return completed

    def on_clock(self, record: GCdr, now: int) -> List[CdrContainer]:
        _require_open(record)
        completed = []
        tod = self._tod_for(record)
        if tod is not None:
            for boundary in tod.boundaries(record.clock, now):
                completed.append(cut_container(record, CutReason.TOD_BOUNDARY, boundary))
        record.clock = max(record.clock, now)
        return completed

    def close_record(self, record: GCdr, timestamp: int) -> GCdr:
        if record.state == RecordState.CLOSED:
            raise CdrError("ALREADY_CLOSED", f"record {record.cdr_id} is closed", cdr_id=record.cdr_id)
        self.on_clock(record, timestamp)

        final = record.current
        final.end_time = timestamp
        final.cut_reason = CutReason.FINAL
        for container in record.containers:
            self._rate_container(container)

        record.close_time = timestamp
        record.state = RecordState.CLOSED
        self.open_records.pop(record.context_id, None)
        logger.debug("record closed", cdr_id=record.cdr_id, containers=len(record.containers))
        return record

    def flush(self, record: GCdr) -> Optional[GCdr]:
        """Hot billing: rate and hand out sealed containers not exported yet (None if there are none)."""
        ready = [c for c in record.containers[record.exported:] if c.sealed]
        if not ready:
            return None
        for container in ready:
            self._rate_container(container)
        record.exported += len(ready)
        return record.view(ready, partial=True)

    def remainder(self, record: GCdr) -> GCdr:
        """The closed record minus the containers already handed out by flush()."""
        if record.state != RecordState.CLOSED:
            raise CdrError("OPEN_RECORD", f"record {record.cdr_id} is still open", cdr_id=record.cdr_id)
        return record.view(record.containers[record.exported:], partial=False)

    def _rate_container(self, container: CdrContainer) -> None:
        if container.rated:
            return
        catalog: TariffCatalog = self.desk.catalog
        for bucket_id, ledger in sorted(container._ledgers.items()):
            total: Optional[Money] = None
            for tariff_from, usage in sorted(ledger.segments.items()):
                tariff = catalog.tariff_version(ledger.tariff_id, tariff_from)
                snapshot = UsageSnapshot.from_usage("", bucket_id, ledger.method, usage,
                                                    ledger.events.get(tariff_from, ()))
                charge = rate(snapshot, tariff)
                total = charge if total is None else total + charge
            container.charge[bucket_id] = total
            self.desk.mark_rated(ledger.tariff_id, container.end_time)
        container.rated = True


def _require_open(record: GCdr) -> None:
    if record.state != RecordState.OPEN:
        raise CdrError("RECORD_CLOSED", f"record {record.cdr_id} is closed", cdr_id=record.cdr_id)


def cut_container(record: GCdr, reason: CutReason, timestamp: int, qos_profile: Optional[str] = None) -> CdrContainer:
    sealed = record.current
    sealed.end_time = timestamp
    sealed.cut_reason = reason
    record.containers.append(CdrContainer(
        seq_no=sealed.seq_no + 1,
        start_time=timestamp,
        qos_profile=qos_profile or sealed.qos_profile,
    ))
    logger.debug("container cut", cdr_id=record.cdr_id, seq=sealed.seq_no, reason=reason.value, at=timestamp)
    return sealed


# ===== Ga export ===== #

def _container_to_wire(container: CdrContainer) -> dict:
    return {
        "seq": container.seq_no,
        "start": container.start_time,
        "end": container.end_time,
        "reason": container.cut_reason.value,
        "qos": container.qos_profile,
        "usage": {bucket: container.usage[bucket].to_wire() for bucket in sorted(container.usage)},
        "charge": {
            bucket: {**container.charge[bucket].to_wire(), "tariff": container.tariffs[bucket]}
            for bucket in sorted(container.charge)
        },
    }


def record_to_wire(record: GCdr) -> dict:
    return {
        "cdr_id": record.cdr_id,
        "ctx": record.context_id,
        "subscriber": record.subscriber_id,
        "apn": record.apn_profile_id,
        "mode": record.payment_mode.value,
        "open": record.open_time,
        "close": record.close_time,
        "containers": [_container_to_wire(c) for c in record.containers],
    }


def _write(lines: List[str], sink: Optional[IO]) -> str:
    text = "".join(line + "\n" for line in lines)
    if sink is not None:
        sink.write(text)
    return text


def export_ga(records: Iterable[GCdr], sink: Optional[IO] = None) -> str:
    lines = []
    for record in records:
        if record.state != RecordState.CLOSED and not record.partial:
            raise CdrError("OPEN_RECORD", f"record {record.cdr_id} is still open", cdr_id=record.cdr_id)
        lines.append(json.dumps(record_to_wire(record), separators=(",", ":")))
    return _write(lines, sink)


def parse_ga(text: str) -> List[GCdr]:
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            containers = []
            for c in data["containers"]:
                charge = {b: Money(v["amount"], v["currency"]) for b, v in c["charge"].items()}
                containers.append(CdrContainer(
                    seq_no=c["seq"],
                    start_time=c["start"],
                    end_time=c["end"],
                    cut_reason=CutReason(c["reason"]),
                    qos_profile=c["qos"],
                    usage={b: Usage.from_wire(u) for b, u in c["usage"].items()},
                    charge=charge,
                    tariffs={b: v["tariff"] for b, v in c["charge"].items()},
                    rated=True,
                ))
            partial = data["close"] is None
            records.append(GCdr(
                cdr_id=data["cdr_id"],
                context_id=data["ctx"],
                subscriber_id=data["subscriber"],
                apn_profile_id=data["apn"],
                payment_mode=PaymentMode(data["mode"]),
                open_time=data["open"],
                close_time=data["close"],
                containers=containers,
                state=RecordState.OPEN if partial else RecordState.CLOSED,
                partial=partial,
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise CdrError("MALFORMED_CDR", f"line {line_no}: {e}", line_no=line_no)
    return records


def merge_partials(records: Iterable[GCdr]) -> List[GCdr]:
    """Join hot-billing fragments of one cdr_id back into a single closed record."""
    merged: Dict[str, GCdr] = {}
    for record in records:
        if record.cdr_id not in merged:
            merged[record.cdr_id] = replace(record, containers=list(record.containers))
            continue
        target = merged[record.cdr_id]
        target.containers.extend(record.containers)
        if not record.partial:
            target.close_time = record.close_time
            target.state = RecordState.CLOSED
            target.partial = False
    for record in merged.values():
        record.containers.sort(key=lambda c: c.seq_no)
    return list(merged.values())


# ===== RADIUS export ===== #

def _radius_message(record: GCdr, status: str, at: int, uplink: int, downlink: int) -> dict:
    return {
        "Acct-Status-Type": status,
        "Acct-Session-Id": record.cdr_id,
        "User-Name": record.subscriber_id,
        "Event-Timestamp": at,
        "Acct-Input-Octets": uplink,
        "Acct-Output-Octets": downlink,
        "Acct-Session-Time": (at - record.open_time) // 1000,
    }


def export_radius(records: Iterable[GCdr], sink: Optional[IO] = None) -> str:
    """Start, one Interim-Update per non-final container, Stop. Octet counters are cumulative."""
    lines = []
    for record in records:
        if record.state != RecordState.CLOSED:
            raise CdrError("OPEN_RECORD", f"record {record.cdr_id} is still open", cdr_id=record.cdr_id)
        messages = [_radius_message(record, "Start", record.open_time, 0, 0)]
        uplink = downlink = 0
        for container in record.containers:
            uplink += sum(u.bytes_ul for u in container.usage.values())
            downlink += sum(u.bytes_dl for u in container.usage.values())
            if container.cut_reason == CutReason.FINAL:
                messages.append(_radius_message(record, "Stop", record.close_time, uplink, downlink))
            else:
                messages.append(_radius_message(record, "Interim-Update", container.end_time, uplink, downlink))
        lines.extend(json.dumps(m, separators=(",", ":")) for m in messages)
    return _write(lines, sink)
