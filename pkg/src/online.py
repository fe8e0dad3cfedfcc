"""
Online charging: prepaid accounts, coupon grants in the unit of each bucket's tariff, flow gating
when credit runs out, settlement on return, and a Gy-style credit-control message front end.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from threading import RLock
from typing import Callable, Dict, List, Literal, Optional, Union

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import CreditError
from src.rating import BillingMethod, Money, Tariff
from src.traffic import PaymentMode

logger = structlog.get_logger(__name__)


class GrantType(str, Enum):
    DATA_VOLUME = "DATA_VOLUME"
    TIME = "TIME"
    UNITS = "UNITS"
    MONEY = "MONEY"


class CouponState(str, Enum):
    OUTSTANDING = "OUTSTANDING"
    RETURNED = "RETURNED"


class ResultCode(str, Enum):
    OK = "OK"
    PARTIAL = "PARTIAL"
    DENIED = "DENIED"


DEFAULT_QUANTA = {
    GrantType.DATA_VOLUME: 4096,
    GrantType.TIME: 10,
    GrantType.UNITS: 5,
}


def grant_type_for(method: BillingMethod) -> Optional[GrantType]:
    if method == BillingMethod.PER_BYTE:
        return GrantType.DATA_VOLUME
    if method == BillingMethod.PER_SECOND:
        return GrantType.TIME
    if method == BillingMethod.PER_EVENT_QUOTED:
        return GrantType.MONEY
    if method == BillingMethod.FREE:
        return None
    return GrantType.UNITS


def unit_price(tariff: Tariff) -> Money:
    """Price of one granted unit; quoted events are granted in money itself."""
    if tariff.method == BillingMethod.PER_EVENT_QUOTED:
        return Money(1, tariff.currency)
    return tariff.rate


@dataclass
class PrepaidAccount:
    subscriber_id: str
    balance: Money
    reserved: Optional[Money] = None
    topup_epoch: int = 0
    _lock: RLock = field(default_factory=RLock, repr=False, compare=False)

    def __post_init__(self):
        if self.reserved is None:
            self.reserved = Money.zero(self.balance.currency)
        if self.balance.amount < 0:
            raise CreditError("NEGATIVE_BALANCE", f"account {self.subscriber_id} opens below zero")

    @property
    def available(self) -> Money:
        return Money(self.balance.amount - self.reserved.amount, self.balance.currency)


@dataclass
class Coupon:
    coupon_id: str
    context_id: str
    bucket_id: str
    grant: GrantType
    quantity: int
    unit_rate: Money
    reserved_value: Money
    tariff_id: str
    tariff_from: int
    consumed: int = 0
    state: CouponState = CouponState.OUTSTANDING
    partial: bool = False

    @property
    def remaining(self) -> int:
        return self.quantity - self.consumed


@dataclass(frozen=True)
class Settlement:
    coupon_id: str
    charged: Money
    released: Money
    balance_after: Money


@dataclass
class CreditSession:
    context_id: str
    subscriber_id: str
    coupons: Dict[str, List[Coupon]] = field(default_factory=dict)
    gated_buckets: Dict[str, int] = field(default_factory=dict)
    charged: int = 0

    def outstanding(self, bucket_id: str) -> List[Coupon]:
        return [c for c in self.coupons.get(bucket_id, []) if c.state == CouponState.OUTSTANDING]


@dataclass
class CreditStats:
    granted: int = 0
    partial: int = 0
    denied: int = 0
    returned: int = 0
    gated_packets: int = 0
    gated_bytes: int = 0
    charged: int = 0

    def to_dict(self) -> dict:
        return {
            "granted": self.granted,
            "partial": self.partial,
            "denied": self.denied,
            "returned": self.returned,
            "gated_packets": self.gated_packets,
            "gated_bytes": self.gated_bytes,
            "charged": self.charged,
        }


class CreditControl:
    """
    Prepaid credit control. Account mutations (reserve / charge / release) run under the account lock,
    so one account can back several sessions.
    """

    def __init__(self, accounts: Dict[str, PrepaidAccount], quanta: Optional[Dict[GrantType, int]] = None,
                 bucket_quanta: Optional[Dict[str, int]] = None):
        self.accounts = accounts
        self.quanta = {**DEFAULT_QUANTA, **(quanta or {})}
        self.bucket_quanta = bucket_quanta or {}
        self.sessions: Dict[str, CreditSession] = {}
        self.stats = CreditStats()
        self._coupon_seq = 0

    def account(self, subscriber_id: str) -> PrepaidAccount:
        if subscriber_id not in self.accounts:
            raise CreditError("UNKNOWN_ACCOUNT", f"no prepaid account for {subscriber_id}", subscriber_id=subscriber_id)
        return self.accounts[subscriber_id]

    def open_session(self, context_id: str, subscriber_id: str, payment_mode: PaymentMode) -> CreditSession:
        if payment_mode != PaymentMode.PREPAID:
            raise CreditError("NOT_PREPAID", f"context {context_id} is {payment_mode.value}", context_id=context_id)
        self.account(subscriber_id)
        session = CreditSession(context_id=context_id, subscriber_id=subscriber_id)
        self.sessions[context_id] = session
        return session

    def session(self, context_id: str) -> CreditSession:
        if context_id not in self.sessions:
            raise CreditError("NOT_PREPAID", f"context {context_id} has no credit session", context_id=context_id)
        return self.sessions[context_id]

    def top_up(self, subscriber_id: str, amount: int) -> PrepaidAccount:
        account = self.account(subscriber_id)
        with account._lock:
            account.balance = Money(account.balance.amount + amount, account.balance.currency)
            account.topup_epoch += 1
        logger.info("account topped up", subscriber_id=subscriber_id, amount=amount,
                    balance=account.balance.amount)
        return account

    def quantum_for(self, bucket_id: str, grant: GrantType) -> int:
        return self.bucket_quanta.get(bucket_id, self.quanta.get(grant, 1))

    # === Coupons === #

    def request_coupon(self, context_id: str, bucket_id: str, tariff: Tariff,
                       quantity: Optional[int] = None) -> Optional[Coupon]:
        """
        Reserve one quantum (or `quantity`) of the tariff's unit. Short funds give a partial coupon for
        the largest affordable amount; nothing affordable is DENIED (None) and gates the bucket.
        """
        session = self.session(context_id)
        account = self.account(session.subscriber_id)
        grant = grant_type_for(tariff.method)
        if grant is None:
            raise CreditError("NOT_CHARGEABLE", f"bucket {bucket_id} is free of charge", bucket_id=bucket_id)

        wanted = quantity if quantity is not None else self.quantum_for(bucket_id, grant)
        price = unit_price(tariff)

        with account._lock:
            affordable = self._affordable(account, price, wanted)
            if affordable <= 0:
                self._deny(session, account, bucket_id)
                return None

            reserved = price * affordable
            account.reserved = account.reserved + reserved
            self._coupon_seq += 1
            coupon = Coupon(
                coupon_id=f"cp-{self._coupon_seq:06d}",
                context_id=context_id,
                bucket_id=bucket_id,
                grant=grant,
                quantity=affordable,
                unit_rate=price,
                reserved_value=reserved,
                tariff_id=tariff.tariff_id,
                tariff_from=tariff.effective_from,
                partial=affordable < wanted,
            )

        session.coupons.setdefault(bucket_id, []).append(coupon)
        session.gated_buckets.pop(bucket_id, None)
        self.stats.granted += 1
        if coupon.partial:
            self.stats.partial += 1
        logger.debug("coupon granted", coupon_id=coupon.coupon_id, ctx=context_id, bucket_id=bucket_id,
                     quantity=coupon.quantity, partial=coupon.partial)
        return coupon

    def return_coupon(self, coupon: Coupon, final_usage: Optional[int] = None) -> Settlement:
        if coupon.state == CouponState.RETURNED:
            raise CreditError("ALREADY_RETURNED", f"coupon {coupon.coupon_id} was already returned",
                              coupon_id=coupon.coupon_id)
        session = self.session(coupon.context_id)
        account = self.account(session.subscriber_id)
        if final_usage is not None:
            coupon.consumed = max(0, min(final_usage, coupon.quantity))

        with account._lock:
            charge = coupon.unit_rate * coupon.consumed
            account.balance = Money(account.balance.amount - charge.amount, account.balance.currency)
            account.reserved = Money(account.reserved.amount - coupon.reserved_value.amount, account.reserved.currency)
            coupon.state = CouponState.RETURNED
            balance_after = account.balance

        session.charged += charge.amount
        self.stats.returned += 1
        self.stats.charged += charge.amount
        logger.debug("coupon returned", coupon_id=coupon.coupon_id, consumed=coupon.consumed, charged=charge.amount)
        return Settlement(coupon.coupon_id, charge, Money(coupon.reserved_value.amount - charge.amount,
                                                          charge.currency), balance_after)

    def _reclaim(self, subscriber_id: str, keep: tuple) -> None:
        """Settle idle reservations held by the account's other buckets so their funds become available."""
        for session in self.sessions.values():
            if session.subscriber_id != subscriber_id:
                continue
            for bucket_id in sorted(session.coupons):
                if (session.context_id, bucket_id) == keep:
                    continue
                for coupon in session.outstanding(bucket_id):
                    self.return_coupon(coupon)

    # === Admission === #

    def is_gated(self, context_id: str, bucket_id: str) -> bool:
        session = self.session(context_id)
        if bucket_id not in session.gated_buckets:
            return False
        return session.gated_buckets[bucket_id] == self.account(session.subscriber_id).topup_epoch

    def consume(self, context_id: str, bucket_id: str, tariff: Tariff, units: int, byte_count: int = 0) -> bool:
        """
        Admit usage worth `units` of the bucket's grant unit, re-requesting coupons first when the
        outstanding ones cannot cover it. Admission is all or nothing; a drop gates the bucket.
        """
        session = self.session(context_id)
        if self.is_gated(context_id, bucket_id):
            self._drop(context_id, bucket_id, byte_count)
            return False
        if units == 0 or tariff.method == BillingMethod.FREE:
            return True

        for coupon in session.outstanding(bucket_id):
            if (coupon.tariff_id, coupon.tariff_from) != (tariff.tariff_id, tariff.effective_from):
                self.return_coupon(coupon)

        account = self.account(session.subscriber_id)
        price = unit_price(tariff)
        remaining = sum(c.remaining for c in session.outstanding(bucket_id))
        reclaimed = False
        while remaining < units:
            # quoted events reserve exactly the quoted price
            wanted = units - remaining if tariff.method == BillingMethod.PER_EVENT_QUOTED else None
            if self._affordable(account, price, 1) == 0 and not reclaimed:
                reclaimed = True
                self._reclaim(session.subscriber_id, (context_id, bucket_id))
            coupon = self.request_coupon(context_id, bucket_id, tariff, wanted)
            if coupon is None:
                self._drop(context_id, bucket_id, byte_count)
                return False
            remaining += coupon.quantity

        left = units
        for coupon in session.outstanding(bucket_id):
            take = min(left, coupon.remaining)
            coupon.consumed += take
            left -= take
            if coupon.remaining == 0:
                self.return_coupon(coupon)
            if left == 0:
                break
        return True

    @staticmethod
    def _affordable(account: PrepaidAccount, price: Money, wanted: int) -> int:
        if price.amount == 0:
            return wanted
        return min(wanted, account.available.amount // price.amount)

    def _deny(self, session: CreditSession, account: PrepaidAccount, bucket_id: str) -> None:
        session.gated_buckets[bucket_id] = account.topup_epoch
        self.stats.denied += 1
        logger.info("coupon denied", ctx=session.context_id, bucket_id=bucket_id,
                    available=account.available.amount)

    def _drop(self, context_id: str, bucket_id: str, byte_count: int) -> None:
        self.stats.gated_packets += 1
        self.stats.gated_bytes += byte_count
        logger.debug("gated drop", ctx=context_id, bucket_id=bucket_id, bytes=byte_count)

    def close_session(self, context_id: str) -> List[Settlement]:
        """Return every outstanding coupon and forget the session."""
        session = self.session(context_id)
        settlements = []
        for bucket_id in sorted(session.coupons):
            for coupon in session.outstanding(bucket_id):
                settlements.append(self.return_coupon(coupon))
        del self.sessions[context_id]
        return settlements


# ===== Gy front end ===== #

class GyQuantity(BaseModel):
    model_config = ConfigDict(extra="forbid")

    unit: GrantType
    qty: int = Field(ge=0)


class GyUnit(BaseModel):
    model_config = ConfigDict(extra="forbid")

    unit: GrantType


class GyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["INITIAL", "UPDATE", "TERMINATE"]
    session: str = Field(min_length=1)
    subscriber: str
    bucket: str
    used: Optional[GyQuantity] = None
    requested: Optional[GyUnit] = None
    ts: int = Field(default=0, ge=0)


class GyServer:
    """
    Credit-control message handler over a CreditControl. Each Gy session holds at most one coupon per
    bucket: INITIAL grants it, UPDATE settles it and grants the next, TERMINATE settles everything.
    """

    def __init__(self, control: CreditControl, tariff_for: Callable[[str, int], Tariff]):
        self.control = control
        self.tariff_for = tariff_for

    def gy_exchange(self, message: Union[str, dict]) -> dict:
        try:
            request = GyRequest.model_validate_json(message) if isinstance(message, str) \
                else GyRequest.model_validate(message)
        except ValidationError as e:
            raise CreditError("PROTOCOL_VIOLATION", f"malformed credit-control request: {e.error_count()} errors")

        tariff = self.tariff_for(request.bucket, request.ts)
        grant = grant_type_for(tariff.method)
        for quantity in (request.used, request.requested):
            if quantity is not None and quantity.unit != grant:
                raise CreditError("PROTOCOL_VIOLATION", f"bucket {request.bucket} is granted in "
                                  f"{grant.value if grant else 'nothing'}, not {quantity.unit.value}")

        known = request.session in self.control.sessions
        if request.type == "INITIAL":
            if known:
                raise CreditError("PROTOCOL_VIOLATION", f"session {request.session} already initiated")
            self.control.open_session(request.session, request.subscriber, PaymentMode.PREPAID)
            return self._grant(request, tariff, clamped=False)

        if not known:
            raise CreditError("PROTOCOL_VIOLATION", f"{request.type} for unknown session {request.session}")
        if self.control.sessions[request.session].subscriber_id != request.subscriber:
            raise CreditError("PROTOCOL_VIOLATION", f"session {request.session} belongs to another subscriber")

        clamped = self._settle(request)
        if request.type == "UPDATE":
            return self._grant(request, tariff, clamped)

        self.control.close_session(request.session)
        account = self.control.account(request.subscriber)
        return self._answer(ResultCode.PARTIAL if clamped else ResultCode.OK, grant, 0, account)

    def _settle(self, request: GyRequest) -> bool:
        used = request.used.qty if request.used is not None else 0
        clamped = False
        for coupon in self.control.sessions[request.session].outstanding(request.bucket):
            if used > coupon.quantity:
                clamped = True
            self.control.return_coupon(coupon, used)
            used = max(0, used - coupon.quantity)
        return clamped or used > 0

    def _grant(self, request: GyRequest, tariff: Tariff, clamped: bool) -> dict:
        grant = grant_type_for(tariff.method)
        account = self.control.account(request.subscriber)
        if grant is None:
            return self._answer(ResultCode.OK, None, 0, account)
        coupon = self.control.request_coupon(request.session, request.bucket, tariff)
        if coupon is None:
            return self._answer(ResultCode.DENIED, grant, 0, account)
        result = ResultCode.PARTIAL if coupon.partial or clamped else ResultCode.OK
        return self._answer(result, grant, coupon.quantity, account)

    @staticmethod
    def _answer(result: ResultCode, grant: Optional[GrantType], quantity: int, account: PrepaidAccount) -> dict:
        return {
            "type": "ANSWER",
            "result": result.value,
            "granted": {"unit": grant.value if grant else None, "qty": quantity},
            "balance_after": account.balance.amount,
        }


def gy_exchange(server: GyServer, message: Union[str, dict]) -> dict:
    return server.gy_exchange(message)


def replay_gy(server: GyServer, lines: List[str]) -> str:
    answers = []
    for line in lines:
        if line.strip():
            answers.append(json.dumps(server.gy_exchange(line), separators=(",", ":")))
    return "".join(a + "\n" for a in answers)
