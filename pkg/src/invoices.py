"""
Subscriber invoices built from closed G-CDRs. Postpaid line items are amounts due; prepaid line
items were settled against coupons already and are listed as a statement.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

from src.cdr import GCdr, RecordState
from src.classifier import Usage
from src.errors import CdrError
from src.traffic import PaymentMode


@dataclass
class LineItem:
    bucket_id: str
    tariff_id: str
    payment_mode: PaymentMode
    usage: Usage = field(default_factory=Usage)
    charge: int = 0

    def to_dict(self) -> dict:
        return {
            "bucket": self.bucket_id,
            "tariff": self.tariff_id,
            "mode": self.payment_mode.value,
            "usage": self.usage.to_wire(),
            "charge": self.charge,
        }


@dataclass
class Invoice:
    subscriber_id: str
    currency: str
    period_start: int
    period_end: int
    line_items: List[LineItem] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(item.charge for item in self.line_items)

    @property
    def amount_due(self) -> int:
        return sum(item.charge for item in self.line_items if item.payment_mode == PaymentMode.POSTPAID)

    @property
    def settled(self) -> int:
        return sum(item.charge for item in self.line_items if item.payment_mode == PaymentMode.PREPAID)

    def to_dict(self) -> dict:
        return {
            "subscriber": self.subscriber_id,
            "currency": self.currency,
            "period": {"start": self.period_start, "end": self.period_end},
            "line_items": [item.to_dict() for item in self.line_items],
            "total": self.total,
            "amount_due": self.amount_due,
            "settled": self.settled,
        }


def make_invoices(records: Iterable[GCdr], currency: str = "EUR") -> List[Invoice]:
    """One invoice per subscriber; line items keyed by (bucket, tariff, payment mode), sorted."""
    by_subscriber: Dict[str, List[GCdr]] = {}
    for record in records:
        if record.state != RecordState.CLOSED or record.partial:
            raise CdrError("OPEN_RECORD", f"record {record.cdr_id} is not closed; merge partial records first",
                           cdr_id=record.cdr_id)
        by_subscriber.setdefault(record.subscriber_id, []).append(record)

    invoices = []
    for subscriber_id in sorted(by_subscriber):
        subscriber_records = by_subscriber[subscriber_id]
        items: Dict[Tuple[str, str, PaymentMode], LineItem] = {}
        for record in subscriber_records:
            for container in record.containers:
                for bucket_id, usage in container.usage.items():
                    key = (bucket_id, container.tariffs[bucket_id], record.payment_mode)
                    item = items.setdefault(key, LineItem(*key))
                    item.usage = item.usage + usage
                    charge = container.charge.get(bucket_id)
                    if charge is not None:
                        item.charge += charge.amount
        invoices.append(Invoice(
            subscriber_id=subscriber_id,
            currency=currency,
            period_start=min(r.open_time for r in subscriber_records),
            period_end=max(r.close_time for r in subscriber_records),
            line_items=[items[key] for key in sorted(items, key=lambda k: (k[0], k[1], k[2].value))],
        ))
    return invoices


def invoices_to_json(invoices: Iterable[Invoice]) -> str:
    return json.dumps([invoice.to_dict() for invoice in invoices], indent=2) + "\n"


def invoice_totals(invoices: Iterable[Invoice]) -> Dict[str, int]:
    return {invoice.subscriber_id: invoice.total for invoice in invoices}
