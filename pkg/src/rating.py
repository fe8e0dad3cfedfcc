"""
Rating engine: tariffs for the content billing methods, integer money, per-event quotes,
and a copy-on-swap tariff catalog.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from threading import Lock
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.classifier import Usage
from src.errors import RatingError

logger = structlog.get_logger(__name__)


class BillingMethod(str, Enum):
    FREE = "FREE"
    PER_BYTE = "PER_BYTE"
    PER_CLICK = "PER_CLICK"
    PER_DOWNLOAD = "PER_DOWNLOAD"
    PER_GAME = "PER_GAME"
    PER_EVENT_QUOTED = "PER_EVENT_QUOTED"
    PER_SECOND = "PER_SECOND"
    PER_EVENT = "PER_EVENT"


UNIT_RATED = {
    BillingMethod.PER_BYTE,
    BillingMethod.PER_CLICK,
    BillingMethod.PER_DOWNLOAD,
    BillingMethod.PER_GAME,
    BillingMethod.PER_SECOND,
    BillingMethod.PER_EVENT,
}


@dataclass(frozen=True)
class Money:
    """Integer count of minor currency units; floats never enter the engine."""
    amount: int
    currency: str

    def __post_init__(self):
        if isinstance(self.amount, bool) or not isinstance(self.amount, int):
            raise TypeError(f"Money amount must be an int, got {type(self.amount).__name__}")

    @classmethod
    def zero(cls, currency: str) -> "Money":
        return cls(0, currency)

    def __add__(self, other: "Money") -> "Money":
        if other.currency != self.currency:
            raise RatingError("CURRENCY_MISMATCH", f"{self.currency} vs {other.currency}")
        return Money(self.amount + other.amount, self.currency)

    def __mul__(self, count: int) -> "Money":
        return Money(self.amount * count, self.currency)

    def to_wire(self) -> dict:
        return {"amount": self.amount, "currency": self.currency}


class TariffDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    method: BillingMethod
    rate: int = Field(default=0, ge=0)
    event_prices: Dict[str, int] = Field(default_factory=dict)
    currency: Optional[str] = None
    effective_from: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_prices(self) -> "TariffDef":
        if any(price < 0 for price in self.event_prices.values()):
            raise ValueError("event prices must be non-negative")
        if self.event_prices and self.method != BillingMethod.PER_EVENT_QUOTED:
            raise ValueError("event_prices only apply to PER_EVENT_QUOTED tariffs")
        return self


@dataclass(frozen=True)
class Tariff:
    tariff_id: str
    method: BillingMethod
    rate: Money
    effective_from: int = 0
    event_prices: Mapping[str, int] = field(default_factory=dict, compare=False)

    @classmethod
    def from_def(cls, definition: TariffDef, currency: str) -> "Tariff":
        return cls(
            tariff_id=definition.id,
            method=definition.method,
            rate=Money(definition.rate, definition.currency or currency),
            effective_from=definition.effective_from,
            event_prices=MappingProxyType(dict(definition.event_prices)),
        )

    @property
    def currency(self) -> str:
        return self.rate.currency


@dataclass(frozen=True)
class UsageSnapshot:
    """Rated view of one bucket's usage at a cut instant."""
    context_id: str
    bucket_id: str
    method: BillingMethod
    bytes_total: int = 0
    click_count: int = 0
    download_count: int = 0
    game_count: int = 0
    event_count: int = 0
    event_list: Tuple[Tuple[str, Optional[Money]], ...] = ()
    active_seconds: int = 0

    @classmethod
    def from_usage(cls, context_id: str, bucket_id: str, method: BillingMethod, usage: Usage,
                   events: Iterable[Tuple[str, Optional[Money]]] = ()) -> "UsageSnapshot":
        return cls(
            context_id=context_id,
            bucket_id=bucket_id,
            method=method,
            bytes_total=usage.bytes_total,
            click_count=usage.click_count,
            download_count=usage.download_count,
            game_count=usage.game_count,
            event_count=usage.event_count,
            event_list=tuple(events),
            active_seconds=usage.active_seconds,
        )


def units_for(method: BillingMethod, usage: Usage) -> int:
    """Chargeable quantity of `usage` under a unit-rated method; 0 for FREE and quoted events."""
    if method == BillingMethod.PER_BYTE:
        return usage.bytes_total
    if method == BillingMethod.PER_CLICK:
        return usage.click_count
    if method == BillingMethod.PER_DOWNLOAD:
        return usage.download_count
    if method == BillingMethod.PER_GAME:
        return usage.game_count
    if method == BillingMethod.PER_SECOND:
        return usage.active_seconds
    if method == BillingMethod.PER_EVENT:
        return usage.event_count
    return 0


def rate(snapshot: UsageSnapshot, tariff: Tariff) -> Money:
    if snapshot.method != tariff.method:
        raise RatingError("METHOD_MISMATCH", f"bucket {snapshot.bucket_id} is {snapshot.method.value}, "
                          f"tariff {tariff.tariff_id} is {tariff.method.value}", bucket_id=snapshot.bucket_id)

    if tariff.method == BillingMethod.FREE:
        return Money.zero(tariff.currency)

    if tariff.method == BillingMethod.PER_EVENT_QUOTED:
        total = Money.zero(tariff.currency)
        for event_id, price in snapshot.event_list:
            if price is None:
                raise RatingError("QUOTE_MISSING", f"event {event_id} has no quote", event_id=event_id)
            total = total + price
        return total

    if tariff.method == BillingMethod.PER_BYTE:
        units = snapshot.bytes_total
    elif tariff.method == BillingMethod.PER_CLICK:
        units = snapshot.click_count
    elif tariff.method == BillingMethod.PER_DOWNLOAD:
        units = snapshot.download_count
    elif tariff.method == BillingMethod.PER_GAME:
        units = snapshot.game_count
    elif tariff.method == BillingMethod.PER_SECOND:
        units = snapshot.active_seconds
    else:
        units = snapshot.event_count
    return tariff.rate * units


# ===== Quotes ===== #

@dataclass(frozen=True)
class EventDescriptor:
    bucket_id: str
    event_id: str
    event_class: str


@dataclass(frozen=True)
class Quote:
    quote_id: str
    event_id: str
    price: Money
    expiry: int

    def is_valid_at(self, instant: int) -> bool:
        return instant <= self.expiry


class QuoteBook:
    """
    Issues one quote per event id. Repeated requests return the original quote.
    """

    def __init__(self, ttl_ms: int = 300_000):
        self.ttl_ms = ttl_ms
        self._quotes: Dict[str, Quote] = {}

    def request_quote(self, descriptor: EventDescriptor, tariff: Tariff, now: int) -> Quote:
        existing = self._quotes.get(descriptor.event_id)
        if existing is not None:
            return existing

        if tariff.method != BillingMethod.PER_EVENT_QUOTED:
            raise RatingError("METHOD_MISMATCH", f"tariff {tariff.tariff_id} does not quote events",
                              tariff_id=tariff.tariff_id)
        if descriptor.event_class not in tariff.event_prices:
            raise RatingError("UNKNOWN_EVENT_CLASS", f"no price for event class {descriptor.event_class!r}",
                              event_id=descriptor.event_id, event_class=descriptor.event_class)

        quote = Quote(
            quote_id=f"q-{len(self._quotes) + 1:06d}",
            event_id=descriptor.event_id,
            price=Money(tariff.event_prices[descriptor.event_class], tariff.currency),
            expiry=now + self.ttl_ms,
        )
        self._quotes[descriptor.event_id] = quote
        logger.debug("quote issued", quote_id=quote.quote_id, event_id=quote.event_id, price=quote.price.amount)
        return quote

    def get(self, event_id: str) -> Optional[Quote]:
        return self._quotes.get(event_id)


def request_quote(descriptor: EventDescriptor, tariff: Tariff, now: int, book: Optional[QuoteBook] = None) -> Quote:
    return (book or QuoteBook()).request_quote(descriptor, tariff, now)


# ===== Tariff catalog ===== #

@dataclass(frozen=True)
class TariffCatalog:
    """
    Immutable catalog version: tariff schedules per id, the latest rated cut per id and the versions
    that already carry metered usage.
    """
    versions: Mapping[str, Tuple[Tariff, ...]]
    rated_until: Mapping[str, int] = field(default_factory=dict)
    metered: Mapping[str, FrozenSet[int]] = field(default_factory=dict)

    @classmethod
    def from_tariffs(cls, tariffs: Iterable[Tariff]) -> "TariffCatalog":
        schedule: Dict[str, List[Tariff]] = {}
        for tariff in tariffs:
            versions = schedule.setdefault(tariff.tariff_id, [])
            if any(v.effective_from == tariff.effective_from for v in versions):
                raise RatingError("DUPLICATE_TARIFF", f"two versions of {tariff.tariff_id} effective at "
                                  f"{tariff.effective_from}", tariff_id=tariff.tariff_id)
            versions.append(tariff)
        return cls(versions=MappingProxyType({
            tariff_id: tuple(sorted(versions, key=lambda t: t.effective_from))
            for tariff_id, versions in schedule.items()
        }), rated_until=MappingProxyType({}))

    def __contains__(self, tariff_id: str) -> bool:
        return tariff_id in self.versions

    def tariff_at(self, tariff_id: str, instant: int) -> Tariff:
        if tariff_id not in self.versions:
            raise RatingError("UNKNOWN_TARIFF", f"tariff {tariff_id!r} is not configured", tariff_id=tariff_id)
        effective = [t for t in self.versions[tariff_id] if t.effective_from <= instant]
        if not effective:
            raise RatingError("NO_TARIFF", f"tariff {tariff_id!r} has no version effective at {instant}",
                              tariff_id=tariff_id, instant=instant)
        return effective[-1]

    def tariff_version(self, tariff_id: str, effective_from: int) -> Tariff:
        for tariff in self.versions.get(tariff_id, ()):
            if tariff.effective_from == effective_from:
                return tariff
        raise RatingError("UNKNOWN_TARIFF", f"tariff {tariff_id!r} has no version from {effective_from}",
                          tariff_id=tariff_id)

    def mark_rated(self, tariff_id: str, instant: int) -> "TariffCatalog":
        if instant <= self.rated_until.get(tariff_id, -1):
            return self
        return replace(self, rated_until=MappingProxyType({**self.rated_until, tariff_id: instant}))

    def mark_metered(self, tariff_id: str, effective_from: int) -> "TariffCatalog":
        seen = self.metered.get(tariff_id, frozenset())
        if effective_from in seen:
            return self
        return replace(self, metered=MappingProxyType({**self.metered, tariff_id: seen | {effective_from}}))


def swap_tariff(catalog: TariffCatalog, tariff_id: str, new_tariff: Tariff, effective_from: int) -> TariffCatalog:
    """
    Publish a new tariff version from `effective_from` on. Usage already rated is never re-rated,
    so the change must start after the latest rated cut.
    """
    if tariff_id not in catalog:
        raise RatingError("UNKNOWN_TARIFF", f"tariff {tariff_id!r} is not configured", tariff_id=tariff_id)
    current_method = catalog.versions[tariff_id][0].method
    if new_tariff.method != current_method:
        raise RatingError("METHOD_MISMATCH", f"tariff {tariff_id!r} is {current_method.value}, a swap cannot make it "
                          f"{new_tariff.method.value}", tariff_id=tariff_id)
    last_rated = catalog.rated_until.get(tariff_id)
    if last_rated is not None and effective_from <= last_rated:
        raise RatingError("RETROACTIVE_CHANGE", f"tariff {tariff_id!r} already rated up to {last_rated}",
                          tariff_id=tariff_id, effective_from=effective_from, rated_until=last_rated)
    if effective_from in catalog.metered.get(tariff_id, ()):
        raise RatingError("RETROACTIVE_CHANGE", f"tariff {tariff_id!r} version from {effective_from} already carries "
                          f"usage", tariff_id=tariff_id, effective_from=effective_from)

    version = replace(new_tariff, tariff_id=tariff_id, effective_from=effective_from)
    versions = [t for t in catalog.versions[tariff_id] if t.effective_from != effective_from]
    versions.append(version)
    versions.sort(key=lambda t: t.effective_from)

    logger.info("tariff swapped", tariff_id=tariff_id, method=version.method.value,
                rate=version.rate.amount, effective_from=effective_from)
    return replace(catalog, versions=MappingProxyType({**catalog.versions, tariff_id: tuple(versions)}))


class TariffDesk:
    """Holds the published catalog version; swaps and rating marks replace it atomically."""

    def __init__(self, catalog: TariffCatalog):
        self._catalog = catalog
        self._lock = Lock()

    @property
    def catalog(self) -> TariffCatalog:
        return self._catalog

    def swap(self, tariff_id: str, new_tariff: Tariff, effective_from: int) -> TariffCatalog:
        with self._lock:
            self._catalog = swap_tariff(self._catalog, tariff_id, new_tariff, effective_from)
            return self._catalog

    def mark_rated(self, tariff_id: str, instant: int) -> None:
        with self._lock:
            self._catalog = self._catalog.mark_rated(tariff_id, instant)

    def mark_metered(self, tariff_id: str, effective_from: int) -> None:
        with self._lock:
            self._catalog = self._catalog.mark_metered(tariff_id, effective_from)
