"""
Command-line surface: simulate, invoice, validate, gy and the token tool.
stdout carries machine-readable JSON only; diagnostics and logs go to stderr.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import structlog

from src.cdr import merge_partials, parse_ga
from src.config import EngineConfig, SecureDef, load_config
from src.errors import ChargingError, ConfigError, SecureChargingError
from src.invoices import invoice_totals, invoices_to_json, make_invoices
from src.log import configure_logging
from src.online import GyServer, replay_gy
from src.rating import TariffDesk
from src.secure import (
    ChainFile, ClearanceClaim, Credential, KeyPair, PaymentToken, TokenCommitment, TokenVerifier,
    UserStatement, claim_from_json, claim_to_json, clear, dispute, issue_credential, make_claim, make_commitment,
    model_from_json, pay, restore_chain,
)
from src.simulator import run_simulation
from src.traffic import ingest_trace, validate_session

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_ERROR = 2


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _read(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise ChargingError("IO_ERROR", f"{path}: {e.strerror}", path=path)


def _write(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# === simulate / invoice / validate / gy === #

def cmd_simulate(args) -> int:
    summary = run_simulation(args.config, args.trace, args.out, flush_interval=args.flush_interval)
    _emit(summary.to_dict())
    return EXIT_OK


def cmd_invoice(args) -> int:
    records = merge_partials(parse_ga(_read(args.cdrs)))
    currency = args.currency
    if currency is None:
        charges = [m for r in records for c in r.containers for m in c.charge.values()]
        currency = charges[0].currency if charges else "EUR"
    invoices = make_invoices(records, currency)
    _write(args.out, invoices_to_json(invoices))
    _emit({"invoices": len(invoices), "totals": invoice_totals(invoices), "out": args.out})
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_session(ingest_trace(_read(args.trace)))
    _emit(report.to_dict())
    return EXIT_OK if report.ok else EXIT_REJECTED


def cmd_gy(args) -> int:
    config = load_config(args.config)
    desk = TariffDesk(config.tariff_catalog())
    bucket_tariffs = config.bucket_tariffs()

    def tariff_for(bucket_id: str, instant: int):
        if bucket_id not in bucket_tariffs:
            raise ChargingError("PROTOCOL_VIOLATION", f"unknown bucket {bucket_id!r}")
        return desk.catalog.tariff_at(bucket_tariffs[bucket_id], instant)

    server = GyServer(config.credit_control(), tariff_for)
    sys.stdout.write(replay_gy(server, _read(args.requests).splitlines()))
    return EXIT_OK


# === token tool === #

def _secure(config: EngineConfig) -> SecureDef:
    if config.secure is None:
        raise ConfigError("CONFIG_INVALID", "configuration has no secure section", reason="MISSING_SECTION")
    return config.secure


def cmd_token_commit(args) -> int:
    secure = _secure(load_config(args.config))
    secure.vasp(args.vasp)
    issuer = KeyPair.from_seed(secure.issuer.key)
    subscriber_key = secure.subscriber_key(args.subscriber)
    window = (secure.credential_window.start, secure.credential_window.end)
    credential = issue_credential(issuer, secure.issuer.id, secure.issuer.kind, args.subscriber,
                                  subscriber_key.public_hex, window)
    seed = args.seed.encode("utf-8")
    commitment, _ = make_commitment(subscriber_key, credential, issuer.public_hex, args.vasp, args.n, args.value,
                                    seed, args.ts, secure.hash_alg)

    out = Path(args.out)
    _write(str(out / "commitment.json"), commitment.model_dump_json(indent=2) + "\n")
    _write(str(out / "credential.json"), credential.model_dump_json(indent=2) + "\n")
    chain_file = ChainFile(commitment_id=commitment.commitment_id, seed=seed.hex())
    _write(str(out / "chain.json"), chain_file.model_dump_json(indent=2) + "\n")
    _emit(commitment.model_dump(mode="json"))
    return EXIT_OK


def cmd_token_pay(args) -> int:
    commitment = model_from_json(TokenCommitment, _read(args.commitment), "commitment")
    chain_file = model_from_json(ChainFile, _read(args.chain), "chain")
    if chain_file.commitment_id != commitment.commitment_id:
        raise SecureChargingError("MISMATCHED_COMMITMENT", f"chain file belongs to {chain_file.commitment_id}, not "
                                  f"{commitment.commitment_id}")
    state = restore_chain(commitment, bytes.fromhex(chain_file.seed), chain_file.index)
    tokens = [pay(state) for _ in range(args.count)]

    with open(args.tokens, "a", encoding="utf-8", newline="\n") as f:
        for token in tokens:
            f.write(token.model_dump_json() + "\n")
    chain_file.index = state.index
    _write(args.chain, chain_file.model_dump_json(indent=2) + "\n")
    _emit({"commitment_id": commitment.commitment_id, "paid": len(tokens), "index": state.index})
    return EXIT_OK


def cmd_token_claim(args) -> int:
    secure = _secure(load_config(args.config))
    commitment = model_from_json(TokenCommitment, _read(args.commitment), "commitment")
    credential = model_from_json(Credential, _read(args.credential), "credential")
    vasp_key = KeyPair.from_seed(secure.vasp(commitment.vasp_id).key)

    verifier = TokenVerifier(commitment)
    rejected = 0
    for line in _read(args.tokens).splitlines():
        if line.strip() and not verifier.accept(model_from_json(PaymentToken, line, "token")):
            rejected += 1
    k, w_k = verifier.last
    _write(args.out, claim_to_json(make_claim(commitment, credential, k, w_k, vasp_key)))
    _emit({"commitment_id": commitment.commitment_id, "k": k, "value": verifier.claim_value,
           "rejected_tokens": rejected, "hash_invocations": verifier.hash_fn.calls})
    return EXIT_OK


def _load_claim(path: str) -> ClearanceClaim:
    return claim_from_json(_read(path))


def cmd_token_verify(args) -> int:
    secure = _secure(load_config(args.config))
    claim = _load_claim(args.claim)
    vasp_key = KeyPair.from_seed(secure.vasp(claim.commitment.vasp_id).key)
    issuer_public = KeyPair.from_seed(secure.issuer.key).public_hex
    try:
        settlement = clear(claim, issuer_public, fee_bp=0, vasp_public_key=vasp_key.public_hex)
    except SecureChargingError as e:
        _emit({"commitment_id": claim.commitment.commitment_id, "valid": False, "k": claim.k, "value": 0,
               "reason": e.code})
        return EXIT_REJECTED
    _emit({"commitment_id": claim.commitment.commitment_id, "valid": True, "k": claim.k,
           "value": settlement.bill, "reason": "OK"})
    return EXIT_OK


def cmd_token_clear(args) -> int:
    secure = _secure(load_config(args.config))
    claim = _load_claim(args.claim)
    vasp_key = KeyPair.from_seed(secure.vasp(claim.commitment.vasp_id).key)
    settlement = clear(claim, KeyPair.from_seed(secure.issuer.key).public_hex, secure.fee_for(claim.commitment.vasp_id),
                       vasp_public_key=vasp_key.public_hex)
    _emit(settlement.to_dict())
    return EXIT_OK


def cmd_token_dispute(args) -> int:
    secure = _secure(load_config(args.config))
    claim = _load_claim(args.claim)
    statement = UserStatement(commitment_id=args.commitment_id or claim.commitment.commitment_id, k=args.user_k)
    ruling = dispute(statement, claim, KeyPair.from_seed(secure.issuer.key).public_hex)
    _emit(ruling.to_dict())
    return EXIT_OK


# === Parser === #

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbb", description="Content-based billing engine")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default) or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="replay a trace and write CDRs, RADIUS, invoices and audit")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--trace", required=True)
    simulate.add_argument("--out", required=True)
    simulate.add_argument("--flush-interval", type=int, default=None, help="hot-billing flush period in trace ms")
    simulate.set_defaults(handler=cmd_simulate)

    invoice = commands.add_parser("invoice", help="rebuild invoices from a Ga CDR file")
    invoice.add_argument("--cdrs", required=True)
    invoice.add_argument("--out", required=True)
    invoice.add_argument("--currency", default=None)
    invoice.set_defaults(handler=cmd_invoice)

    validate = commands.add_parser("validate", help="check a trace against the session rules")
    validate.add_argument("--trace", required=True)
    validate.set_defaults(handler=cmd_validate)

    gy = commands.add_parser("gy", help="replay credit-control requests against the prepaid accounts")
    gy.add_argument("--config", required=True)
    gy.add_argument("--requests", required=True)
    gy.set_defaults(handler=cmd_gy)

    token = commands.add_parser("token", help="secured charging: commitments, tokens, claims")
    token_commands = token.add_subparsers(dest="token_command", required=True)

    commit = token_commands.add_parser("commit")
    commit.add_argument("--config", required=True)
    commit.add_argument("--subscriber", required=True)
    commit.add_argument("--vasp", required=True)
    commit.add_argument("--n", type=int, required=True)
    commit.add_argument("--value", type=int, required=True)
    commit.add_argument("--seed", required=True)
    commit.add_argument("--ts", type=int, default=0)
    commit.add_argument("--out", required=True)
    commit.set_defaults(handler=cmd_token_commit)

    pay_cmd = token_commands.add_parser("pay")
    pay_cmd.add_argument("--commitment", required=True)
    pay_cmd.add_argument("--chain", required=True)
    pay_cmd.add_argument("--tokens", required=True)
    pay_cmd.add_argument("--count", type=int, default=1)
    pay_cmd.set_defaults(handler=cmd_token_pay)

    claim = token_commands.add_parser("claim")
    claim.add_argument("--config", required=True)
    claim.add_argument("--commitment", required=True)
    claim.add_argument("--credential", required=True)
    claim.add_argument("--tokens", required=True)
    claim.add_argument("--out", required=True)
    claim.set_defaults(handler=cmd_token_claim)

    for name, handler in (("verify", cmd_token_verify), ("clear", cmd_token_clear)):
        sub = token_commands.add_parser(name)
        sub.add_argument("--config", required=True)
        sub.add_argument("--claim", required=True)
        sub.set_defaults(handler=handler)

    dispute_cmd = token_commands.add_parser("dispute")
    dispute_cmd.add_argument("--config", required=True)
    dispute_cmd.add_argument("--claim", required=True)
    dispute_cmd.add_argument("--user-k", type=int, required=True)
    dispute_cmd.add_argument("--commitment-id", default=None)
    dispute_cmd.set_defaults(handler=cmd_token_dispute)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ChargingError as e:
        sys.stderr.write(json.dumps({"error": e.code, "message": e.message}) + "\n")
        logger.debug("command failed", command=args.command, code=e.code, **e.details)
        return EXIT_ERROR
