"""
Flow classification: operator filter rules (5-tuple plus url / app tag) mapped to rating buckets,
and the per-context bucket accumulators the rules feed.
"""

import re
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from ipaddress import IPv4Network, ip_network
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import RuleError
from src.traffic import Direction, PacketEvent, normalize_protocol

logger = structlog.get_logger(__name__)

DEFAULT_RULE = "DEFAULT"
DOWNLOAD_TAG = "download-complete"
GAME_TAG = "game-session"


class Authorize(str, Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"


# ===== Rule definitions (configuration fragment) ===== #

def _port_range(value: Any) -> Optional[Tuple[int, int]]:
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError("port must be an integer or a range")
    if isinstance(value, int):
        low = high = value
    elif isinstance(value, str) and "-" in value:
        low, high = (int(part) for part in value.split("-", 1))
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        low, high = int(value[0]), int(value[1])
    else:
        raise ValueError(f"invalid port range: {value!r}")
    if not (0 <= low <= high <= 65535):
        raise ValueError(f"invalid port range: {value!r}")
    return (low, high)


class MatchDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    src_cidr: Optional[str] = None
    dst_cidr: Optional[str] = None
    sport: Optional[Tuple[int, int]] = None
    dport: Optional[Tuple[int, int]] = None
    proto: Optional[str] = None
    url_glob: Optional[str] = None
    app_tag: Optional[str] = None

    @field_validator("src_cidr", "dst_cidr")
    @classmethod
    def _cidr(cls, value: Optional[str]) -> Optional[str]:
        if value is None:
            return None
        network = ip_network(value, strict=False)
        if not isinstance(network, IPv4Network):
            raise ValueError("only IPv4 prefixes are supported")
        return str(network)

    @field_validator("sport", "dport", mode="before")
    @classmethod
    def _ports(cls, value: Any) -> Optional[Tuple[int, int]]:
        return _port_range(value)

    @field_validator("proto", mode="before")
    @classmethod
    def _proto(cls, value: Any) -> Optional[str]:
        return None if value is None else normalize_protocol(value)


class RuleDef(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    id: str = Field(min_length=1)
    priority: int
    match: MatchDef
    bucket: str
    authorize: Authorize = Authorize.ALLOW


# ===== Compiled rules ===== #

def glob_to_regex(pattern: str) -> "re.Pattern[str]":
    """'*' matches any run of characters, '?' exactly one; everything else is literal and case-sensitive."""
    parts = []
    for char in pattern:
        if char == "*":
            parts.append(".*")
        elif char == "?":
            parts.append(".")
        else:
            parts.append(re.escape(char))
    return re.compile("".join(parts), re.DOTALL)


@dataclass(frozen=True)
class MatchSpec:
    src_cidr: Optional[IPv4Network] = None
    dst_cidr: Optional[IPv4Network] = None
    src_port_range: Optional[Tuple[int, int]] = None
    dst_port_range: Optional[Tuple[int, int]] = None
    protocol: Optional[str] = None
    url_glob: Optional[str] = None
    app_tag: Optional[str] = None
    _url_pattern: Optional["re.Pattern[str]"] = field(default=None, compare=False, repr=False)

    @classmethod
    def from_def(cls, match: MatchDef) -> "MatchSpec":
        return cls(
            src_cidr=IPv4Network(match.src_cidr) if match.src_cidr else None,
            dst_cidr=IPv4Network(match.dst_cidr) if match.dst_cidr else None,
            src_port_range=match.sport,
            dst_port_range=match.dport,
            protocol=match.proto,
            url_glob=match.url_glob,
            app_tag=match.app_tag,
            _url_pattern=glob_to_regex(match.url_glob) if match.url_glob is not None else None,
        )

    @property
    def is_empty(self) -> bool:
        return all(getattr(self, f.name) is None for f in fields(self) if not f.name.startswith("_"))

    def matches(self, packet: PacketEvent) -> bool:
        if self.protocol is not None and packet.protocol != self.protocol:
            return False
        if self.src_cidr is not None and packet.src_addr not in self.src_cidr:
            return False
        if self.dst_cidr is not None and packet.dst_addr not in self.dst_cidr:
            return False
        if self.src_port_range is not None and not self.src_port_range[0] <= packet.src_port <= self.src_port_range[1]:
            return False
        if self.dst_port_range is not None and not self.dst_port_range[0] <= packet.dst_port <= self.dst_port_range[1]:
            return False
        if self.app_tag is not None and packet.app_tag != self.app_tag:
            return False
        if self._url_pattern is not None:
            if packet.url is None or self._url_pattern.fullmatch(packet.url) is None:
                return False
        return True


@dataclass(frozen=True)
class FilterRule:
    rule_id: str
    priority: int
    match: MatchSpec
    bucket_id: str
    authorize: Authorize = Authorize.ALLOW


@dataclass(frozen=True)
class RuleSet:
    """Immutable, priority-ordered rules; shareable across workers once compiled."""
    rules: Tuple[FilterRule, ...]
    default_bucket: str

    def __iter__(self) -> Iterator[FilterRule]:
        return iter(self.rules)

    def __len__(self) -> int:
        return len(self.rules)


@dataclass(frozen=True)
class FlowAssignment:
    context_id: Optional[str]
    rule_id: str
    bucket_id: str
    authorize: Authorize = Authorize.ALLOW
    gated: bool = False

    @property
    def is_default(self) -> bool:
        return self.rule_id == DEFAULT_RULE

    def gate(self) -> "FlowAssignment":
        return replace(self, gated=True)


def compile_rules(definitions: Iterable[Union[dict, RuleDef]], default_bucket: str, bucket_ids: Iterable[str]) -> RuleSet:
    """
    Validate rule definitions and freeze them into a RuleSet ordered by ascending priority.
    After compilation classify() cannot fail.
    """
    known = set(bucket_ids)
    if default_bucket not in known:
        raise RuleError("UNKNOWN_BUCKET", f"default bucket {default_bucket!r} is not configured", bucket_id=default_bucket)

    compiled: List[FilterRule] = []
    seen_ids: Dict[str, int] = {}
    seen_priorities: Dict[int, str] = {}

    for definition in definitions:
        if not isinstance(definition, RuleDef):
            try:
                definition = RuleDef.model_validate(definition)
            except ValidationError as e:
                raise RuleError("INVALID_RULE", str(e))

        if definition.id in seen_ids:
            raise RuleError("DUPLICATE_RULE_ID", f"rule id {definition.id!r} defined twice", rule_id=definition.id)
        if definition.priority in seen_priorities:
            raise RuleError(
                "DUPLICATE_PRIORITY",
                f"rules {seen_priorities[definition.priority]!r} and {definition.id!r} share priority {definition.priority}",
                rule_id=definition.id,
                priority=definition.priority,
            )
        if definition.bucket not in known:
            raise RuleError("UNKNOWN_BUCKET", f"rule {definition.id!r} targets unknown bucket {definition.bucket!r}",
                            rule_id=definition.id, bucket_id=definition.bucket)

        match = MatchSpec.from_def(definition.match)
        if match.is_empty:
            raise RuleError("EMPTY_MATCH", f"rule {definition.id!r} has no match fields", rule_id=definition.id)

        seen_ids[definition.id] = definition.priority
        seen_priorities[definition.priority] = definition.id
        compiled.append(FilterRule(definition.id, definition.priority, match, definition.bucket, definition.authorize))

    compiled.sort(key=lambda rule: rule.priority)
    logger.debug("rules compiled", rules=len(compiled), default_bucket=default_bucket)
    return RuleSet(rules=tuple(compiled), default_bucket=default_bucket)


def classify(packet: PacketEvent, rules: RuleSet, context_id: Optional[str] = None) -> FlowAssignment:
    """First match in priority order wins; no match falls through to the default bucket."""
    for rule in rules:
        if rule.match.matches(packet):
            return FlowAssignment(context_id, rule.rule_id, rule.bucket_id, rule.authorize)
    return FlowAssignment(context_id, DEFAULT_RULE, rules.default_bucket)


# ===== Bucket accumulators ===== #

@dataclass(frozen=True)
class Usage:
    bytes_ul: int = 0
    bytes_dl: int = 0
    packet_count: int = 0
    click_count: int = 0
    download_count: int = 0
    game_count: int = 0
    event_count: int = 0
    active_seconds: int = 0

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    @property
    def bytes_total(self) -> int:
        return self.bytes_ul + self.bytes_dl

    @property
    def is_zero(self) -> bool:
        return not any(getattr(self, f.name) for f in fields(self))

    def to_wire(self) -> Dict[str, int]:
        return {
            "ul": self.bytes_ul,
            "dl": self.bytes_dl,
            "clicks": self.click_count,
            "downloads": self.download_count,
            "games": self.game_count,
            "events": self.event_count,
            "secs": self.active_seconds,
        }

    @classmethod
    def from_wire(cls, data: Dict[str, int]) -> "Usage":
        return cls(
            bytes_ul=data["ul"],
            bytes_dl=data["dl"],
            click_count=data["clicks"],
            download_count=data["downloads"],
            game_count=data["games"],
            event_count=data["events"],
            active_seconds=data["secs"],
        )


@dataclass
class _Meter:
    last_url: Optional[str] = None
    last_ts: Optional[int] = None
    paid_second: Optional[int] = None


@dataclass
class FlowAudit:
    deny_packets: Dict[str, int] = field(default_factory=lambda: defaultdict(int))
    deny_bytes: Dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def record_deny(self, assignment: FlowAssignment, packet: PacketEvent) -> None:
        self.deny_packets[assignment.rule_id] += 1
        self.deny_bytes[assignment.rule_id] += packet.byte_count
        logger.debug("packet denied", rule_id=assignment.rule_id, ctx=assignment.context_id, bytes=packet.byte_count)

    def to_dict(self) -> dict:
        return {
            rule_id: {"packets": self.deny_packets[rule_id], "bytes": self.deny_bytes[rule_id]}
            for rule_id in sorted(self.deny_packets)
        }


class BucketStore:
    """
    Rating-bucket accumulators keyed by (context, bucket). One context is owned by one worker.
    """

    def __init__(self, idle_gap_ms: int = 10_000):
        self.idle_gap_ms = idle_gap_ms
        self._usage: Dict[Tuple[str, str], Usage] = {}
        self._meters: Dict[Tuple[str, str], _Meter] = defaultdict(_Meter)

    def measure(self, assignment: FlowAssignment, packet: PacketEvent) -> Usage:
        """The contribution this packet would make if admitted now; nothing is recorded."""
        meter = self._meters.get((assignment.context_id, assignment.bucket_id), _Meter())

        clicks = 1 if packet.url is not None and packet.url != meter.last_url else 0
        second = packet.timestamp // 1000
        if meter.last_ts is None or packet.timestamp - meter.last_ts > self.idle_gap_ms:
            seconds = 1
        else:
            seconds = max(0, second - meter.paid_second)

        uplink = packet.direction == Direction.UPLINK
        return Usage(
            bytes_ul=packet.byte_count if uplink else 0,
            bytes_dl=0 if uplink else packet.byte_count,
            packet_count=1,
            click_count=clicks,
            download_count=1 if packet.app_tag == DOWNLOAD_TAG else 0,
            game_count=1 if packet.app_tag == GAME_TAG else 0,
            active_seconds=seconds,
        )

    def accumulate(self, assignment: FlowAssignment, packet: PacketEvent) -> Usage:
        if assignment.gated:
            raise RuleError("GATED_FLOW", "accumulate called on a gated flow",
                            context_id=assignment.context_id, bucket_id=assignment.bucket_id)

        delta = self.measure(assignment, packet)
        key = (assignment.context_id, assignment.bucket_id)
        meter = self._meters[key]
        if packet.url is not None:
            meter.last_url = packet.url
        if delta.active_seconds or meter.paid_second is None:
            meter.paid_second = packet.timestamp // 1000
        meter.last_ts = packet.timestamp

        self._usage[key] = self._usage.get(key, Usage()) + delta
        return delta

    def add_event(self, context_id: str, bucket_id: str) -> Usage:
        delta = Usage(event_count=1)
        key = (context_id, bucket_id)
        self._usage[key] = self._usage.get(key, Usage()) + delta
        return delta

    def usage(self, context_id: str, bucket_id: str) -> Usage:
        return self._usage.get((context_id, bucket_id), Usage())

    def totals_for(self, context_id: str) -> Dict[str, Usage]:
        return {bucket: usage for (ctx, bucket), usage in sorted(self._usage.items()) if ctx == context_id}

    def contexts(self) -> List[str]:
        return sorted({ctx for ctx, _ in self._usage})

    def forget(self, context_id: str) -> None:
        """Drop the click and second meters of a closed context; accumulated usage stays."""
        for key in [key for key in self._meters if key[0] == context_id]:
            del self._meters[key]


def accumulate(assignment: FlowAssignment, packet: PacketEvent, buckets: BucketStore) -> BucketStore:
    buckets.accumulate(assignment, packet)
    return buckets
