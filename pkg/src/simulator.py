"""
End-to-end simulation: replays a session trace through classification, prepaid admission, CDR
recording and rating, then writes the Ga / RADIUS exports, invoices and the audit report.
The trace timestamps are the only clock.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import structlog
from pydantic import ValidationError

from src.cdr import GCdr, MeteredUsage, export_ga, export_radius
from src.classifier import Authorize, BucketStore, FlowAudit, Usage, classify
from src.config import EngineConfig, load_config
from src.errors import RatingError, SimulationError, TraceError
from src.invoices import Invoice, invoices_to_json, make_invoices
from src.rating import BillingMethod, EventDescriptor, Tariff, TariffDef, TariffDesk, units_for
from src.traffic import (
    ContentEvent, EventKind, PaymentMode, PdpContext, SessionEvent, TariffChange, TopUp, ingest_trace,
    validate_session,
)

logger = structlog.get_logger(__name__)

OUTPUT_FILES = ("cdrs.jsonl", "radius.jsonl", "invoices.json", "audit.json")


@dataclass
class ContextAudit:
    offered_packets: int = 0
    offered_bytes: int = 0
    admitted_packets: int = 0
    admitted_bytes: int = 0
    denied_packets: int = 0
    denied_bytes: int = 0
    gated_packets: int = 0
    gated_bytes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunSummary:
    events: int = 0
    contexts: int = 0
    records: int = 0
    containers: int = 0
    total_charge: int = 0
    amount_due: int = 0
    prepaid_settled: int = 0
    denied_packets: int = 0
    gated_packets: int = 0
    rejected_events: int = 0
    currency: str = "EUR"

    @property
    def conserved(self) -> bool:
        return self.total_charge == self.amount_due + self.prepaid_settled

    def to_dict(self) -> dict:
        return {**asdict(self), "conserved": self.conserved}


@dataclass
class RejectedEvent:
    index: int
    code: str
    context_id: Optional[str]
    detail: str

    def to_dict(self) -> dict:
        return {"index": self.index, "code": self.code, "ctx": self.context_id, "detail": self.detail}


class Simulator:
    """
    Single-collector replay: events are processed in trace order and every output list is built in
    emission order, so identical inputs give byte-identical files.
    """

    def __init__(self, config: EngineConfig, flush_interval: Optional[int] = None):
        if flush_interval is not None and flush_interval <= 0:
            raise SimulationError("INVALID_FLUSH_INTERVAL", f"flush interval must be positive, got {flush_interval}")
        self.config = config
        self.flush_interval = flush_interval
        self.rules = config.rule_set()
        self.desk = TariffDesk(config.tariff_catalog())
        self.cdrs = config.cdr_engine(self.desk)
        self.buckets = BucketStore(idle_gap_ms=config.rating.idle_gap_ms)
        self.credit = config.credit_control()
        self.quotes = config.quote_book()
        self.bucket_tariffs = config.bucket_tariffs()
        self.flow_audit = FlowAudit()

        self.contexts: Dict[str, PdpContext] = {}
        self.records: Dict[str, GCdr] = {}
        self.closed: List[GCdr] = []
        self.exports: List[GCdr] = []
        self.context_audit: Dict[str, ContextAudit] = {}
        self.rejected: List[RejectedEvent] = []
        self.swaps: List[dict] = []
        self._seen_events: Dict[str, set] = {}
        self.clock = 0
        self._next_flush: Optional[int] = None

    # === Replay === #

    def run(self, events: List[SessionEvent]) -> RunSummary:
        for index, event in enumerate(events):
            self.clock = max(self.clock, event.timestamp)
            self._dispatch(index, event)
            self._maybe_flush()

        summary = self.summary(len(events))
        logger.info("simulation finished", **summary.to_dict())
        return summary

    def _dispatch(self, index: int, event: SessionEvent) -> None:
        if event.kind == EventKind.ACTIVATE:
            self._activate(event)
        elif event.kind == EventKind.PACKET:
            self._packet(event)
        elif event.kind == EventKind.QOS_CHANGE:
            self.contexts[event.context_id].qos_profile = event.payload.qos_profile
            self.cdrs.on_qos_change(self.records[event.context_id], event.payload.qos_profile, event.timestamp)
        elif event.kind == EventKind.EVENT:
            self._content_event(index, event)
        elif event.kind == EventKind.DEACTIVATE:
            self._deactivate(event)
        elif event.kind == EventKind.TOPUP:
            topup: TopUp = event.payload
            self.credit.top_up(topup.subscriber_id, topup.amount)
        elif event.kind == EventKind.TARIFF:
            self._swap(index, event)

    def _activate(self, event: SessionEvent) -> None:
        context = PdpContext.from_event(event)
        self.contexts[context.context_id] = context
        self.context_audit[context.context_id] = ContextAudit()
        if context.payment_mode == PaymentMode.PREPAID:
            self.credit.open_session(context.context_id, context.subscriber_id, context.payment_mode)
        self.records[context.context_id] = self.cdrs.open_record(
            context.context_id, context.subscriber_id, context.apn_profile_id, context.qos_profile,
            context.payment_mode, event.timestamp,
        )

    def _tariff_for(self, bucket_id: str, instant: int) -> Tariff:
        return self.desk.catalog.tariff_at(self.bucket_tariffs[bucket_id], instant)

    def _packet(self, event: SessionEvent) -> None:
        ctx = event.context_id
        context = self.contexts[ctx]
        packet = event.packet
        audit = self.context_audit[ctx]
        audit.offered_packets += 1
        audit.offered_bytes += packet.byte_count

        assignment = classify(packet, self.rules, ctx)
        if assignment.authorize == Authorize.DENY:
            self.flow_audit.record_deny(assignment, packet)
            audit.denied_packets += 1
            audit.denied_bytes += packet.byte_count
            return

        tariff = self._tariff_for(assignment.bucket_id, event.timestamp)
        if context.payment_mode == PaymentMode.PREPAID:
            units = units_for(tariff.method, self.buckets.measure(assignment, packet))
            if not self.credit.consume(ctx, assignment.bucket_id, tariff, units, packet.byte_count):
                audit.gated_packets += 1
                audit.gated_bytes += packet.byte_count
                return

        delta = self.buckets.accumulate(assignment, packet)
        audit.admitted_packets += 1
        audit.admitted_bytes += packet.byte_count
        self.cdrs.account_usage(self.records[ctx], MeteredUsage(
            assignment.bucket_id, tariff.tariff_id, tariff.method, tariff.effective_from, event.timestamp, delta,
        ))

    def _content_event(self, index: int, event: SessionEvent) -> None:
        ctx = event.context_id
        content: ContentEvent = event.payload
        if content.bucket_id not in self.bucket_tariffs:
            raise SimulationError("UNKNOWN_BUCKET", f"line {event.line_no}: event {content.event_id} names unknown "
                                  f"bucket {content.bucket_id!r}", line_no=event.line_no)

        seen = self._seen_events.setdefault(ctx, set())
        if content.event_id in seen:
            self._reject(index, "DUPLICATE_EVENT", ctx, content.event_id)
            return

        tariff = self._tariff_for(content.bucket_id, event.timestamp)
        price = None
        units = units_for(tariff.method, Usage(event_count=1))
        if tariff.method == BillingMethod.PER_EVENT_QUOTED:
            requested_at = min(content.quoted_at if content.quoted_at is not None else event.timestamp, event.timestamp)
            try:
                quote = self.quotes.request_quote(
                    EventDescriptor(content.bucket_id, content.event_id, content.event_class), tariff, requested_at,
                )
            except RatingError as e:
                self._reject(index, e.code, ctx, content.event_id)
                return
            if not quote.is_valid_at(event.timestamp):
                self._reject(index, "QUOTE_EXPIRED", ctx, f"{content.event_id} ({quote.quote_id})")
                return
            price = quote.price
            units = price.amount

        if self.contexts[ctx].payment_mode == PaymentMode.PREPAID:
            if not self.credit.consume(ctx, content.bucket_id, tariff, units):
                self._reject(index, "GATED", ctx, content.event_id)
                return
        seen.add(content.event_id)

        delta = self.buckets.add_event(ctx, content.bucket_id)
        self.cdrs.account_usage(self.records[ctx], MeteredUsage(
            content.bucket_id, tariff.tariff_id, tariff.method, tariff.effective_from, event.timestamp, delta,
            event=(content.event_id, price) if price is not None else None,
        ))

    def _deactivate(self, event: SessionEvent) -> None:
        ctx = event.context_id
        context = self.contexts[ctx]
        record = self.cdrs.close_record(self.records[ctx], event.timestamp)
        if context.payment_mode == PaymentMode.PREPAID:
            self.credit.close_session(ctx)
        self.buckets.forget(ctx)
        context.deactivate(event.timestamp)
        self.closed.append(record)
        self.exports.append(self.cdrs.remainder(record))

    def _swap(self, index: int, event: SessionEvent) -> None:
        change: TariffChange = event.payload
        try:
            definition = TariffDef.model_validate(change.tariff)
        except ValidationError as e:
            raise SimulationError("TARIFF_INVALID", f"line {event.line_no}: {e.errors()[0]['msg']}",
                                  line_no=event.line_no)
        if definition.currency not in (None, self.config.currency):
            raise SimulationError("TARIFF_INVALID", f"line {event.line_no}: tariff {definition.id!r} is priced in "
                                  f"{definition.currency}", line_no=event.line_no)
        try:
            if change.effective_from <= self.clock:
                raise RatingError("RETROACTIVE_CHANGE", f"effective_from {change.effective_from} is not after the "
                                  f"trace clock {self.clock}", tariff_id=definition.id)
            self.desk.swap(definition.id, Tariff.from_def(definition, self.config.currency), change.effective_from)
        except RatingError as e:
            logger.warning("tariff swap rejected", tariff_id=definition.id, code=e.code)
            self._reject(index, e.code, None, definition.id)
            return
        self.swaps.append({"ts": event.timestamp, "tariff": definition.id, "effective_from": change.effective_from})

    def _reject(self, index: int, code: str, context_id: Optional[str], detail: str) -> None:
        self.rejected.append(RejectedEvent(index, code, context_id, detail))
        logger.debug("event rejected", index=index, code=code, ctx=context_id, detail=detail)

    # === Hot billing === #

    def _maybe_flush(self) -> None:
        if self.flush_interval is None:
            return
        if self._next_flush is None:
            self._next_flush = (self.clock // self.flush_interval + 1) * self.flush_interval
            return
        if self.clock < self._next_flush:
            return
        self.flush_all()
        self._next_flush = (self.clock // self.flush_interval + 1) * self.flush_interval

    def flush_all(self) -> None:
        """Hand out every sealed container of the open records; open containers stay put."""
        for ctx in sorted(self.cdrs.open_records):
            partial = self.cdrs.flush(self.cdrs.open_records[ctx])
            if partial is not None:
                self.exports.append(partial)

    # === Results === #

    def invoices(self) -> List[Invoice]:
        return make_invoices(self.closed, self.config.currency)

    def summary(self, event_count: int) -> RunSummary:
        invoices = self.invoices()
        total = sum(money.amount for record in self.closed for money in record.charge_by_bucket().values())
        return RunSummary(
            events=event_count,
            contexts=len(self.contexts),
            records=len(self.closed),
            containers=sum(len(record.containers) for record in self.closed),
            total_charge=total,
            amount_due=sum(invoice.amount_due for invoice in invoices),
            prepaid_settled=self.credit.stats.charged,
            denied_packets=sum(a.denied_packets for a in self.context_audit.values()),
            gated_packets=sum(a.gated_packets for a in self.context_audit.values()),
            rejected_events=len(self.rejected),
            currency=self.config.currency,
        )

    def audit(self) -> dict:
        return {
            "deny": self.flow_audit.to_dict(),
            "coupons": self.credit.stats.to_dict(),
            "contexts": {ctx: self.context_audit[ctx].to_dict() for ctx in sorted(self.context_audit)},
            "rejected_events": [r.to_dict() for r in self.rejected],
            "tariff_swaps": self.swaps,
            "accounts": {
                sub: {"balance": account.balance.amount, "reserved": account.reserved.amount,
                      "topups": account.topup_epoch}
                for sub, account in sorted(self.credit.accounts.items())
            },
        }

    def write_outputs(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {name: out_dir / name for name in OUTPUT_FILES}
        with open(paths["cdrs.jsonl"], "w", encoding="utf-8", newline="\n") as f:
            export_ga(self.exports, f)
        with open(paths["radius.jsonl"], "w", encoding="utf-8", newline="\n") as f:
            export_radius(self.closed, f)
        with open(paths["invoices.json"], "w", encoding="utf-8", newline="\n") as f:
            f.write(invoices_to_json(self.invoices()))
        with open(paths["audit.json"], "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(self.audit(), indent=2) + "\n")
        return paths


def load_trace(trace_path: Union[str, Path]) -> List[SessionEvent]:
    """Parse and validate a trace file; any problem is TRACE_INVALID naming the line."""
    trace_path = Path(trace_path)
    try:
        with open(trace_path, "r", encoding="utf-8") as f:
            events = ingest_trace(f.read())
    except OSError as e:
        raise SimulationError("TRACE_INVALID", f"{trace_path}: cannot read ({e.strerror})", path=str(trace_path))
    except TraceError as e:
        raise SimulationError("TRACE_INVALID", f"{trace_path}: {e.code}: {e.message}", path=str(trace_path),
                              line_no=e.details.get("line_no"), reason=e.code)

    report = validate_session(events)
    if not report.ok:
        first = report.violations[0]
        line_no = events[first.index].line_no
        raise SimulationError("TRACE_INVALID", f"{trace_path}: line {line_no}: {first.code}: {first.message}",
                              path=str(trace_path), line_no=line_no, reason=first.code)
    return events


def run_simulation(config_path: Union[str, Path], trace_path: Union[str, Path], out_dir: Union[str, Path],
                   flush_interval: Optional[int] = None) -> RunSummary:
    config = load_config(config_path)
    events = load_trace(trace_path)
    simulator = Simulator(config, flush_interval)
    summary = simulator.run(events)
    simulator.write_outputs(out_dir)
    return summary
