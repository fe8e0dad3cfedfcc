"""
Secured charging: credentialed subscribers commit to a hash chain per VASP, pay with successive
preimages, and the VASP clears the highest token it holds through the provider offline.

Signatures are Ed25519 (cryptography); hashes come from hashlib by name and are recorded in every
commitment, so a claim file is self-describing.
"""

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import structlog
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import SecureChargingError

logger = structlog.get_logger(__name__)

HASH_ALGORITHMS = ("sha256", "sha3_256", "blake2s")
BASIS_POINTS = 10_000


# === Primitives === #

class HashPrimitive:
    """Named 256-bit hash that counts its invocations."""

    def __init__(self, name: str = "sha256"):
        if name not in HASH_ALGORITHMS:
            raise SecureChargingError("UNKNOWN_HASH", f"unsupported hash algorithm {name!r}", hash_alg=name)
        self.name = name
        self.calls = 0

    def __call__(self, data: bytes) -> bytes:
        self.calls += 1
        return hashlib.new(self.name, data).digest()


class KeyPair:
    def __init__(self, private_key: Ed25519PrivateKey):
        self._private = private_key

    @classmethod
    def from_seed(cls, seed_hex: str) -> "KeyPair":
        try:
            return cls(Ed25519PrivateKey.from_private_bytes(bytes.fromhex(seed_hex)))
        except ValueError as e:
            raise SecureChargingError("BAD_KEY", f"key seed must be 32 bytes of hex: {e}")

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls(Ed25519PrivateKey.generate())

    @property
    def public_hex(self) -> str:
        return self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw).hex()

    def sign(self, payload: bytes) -> str:
        return self._private.sign(payload).hex()


def verify_signature(public_hex: str, signature_hex: str, payload: bytes) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_hex))
        key.verify(bytes.fromhex(signature_hex), payload)
    except (InvalidSignature, ValueError):
        return False
    return True


def _canonical(fields: dict) -> bytes:
    return json.dumps(fields, sort_keys=True, separators=(",", ":")).encode("utf-8")


# === Credentials === #

class IssuerKind(str, Enum):
    NGN_PROVIDER = "NGN_PROVIDER"
    TTP = "TTP"


class Credential(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    subscriber_id: str
    public_key: str
    issuer: IssuerKind
    issuer_id: str
    valid_from: int
    valid_until: int
    signature: str = ""

    def signed_payload(self) -> bytes:
        return _canonical(self.model_dump(mode="json", exclude={"signature"}))


def issue_credential(issuer_key: KeyPair, issuer_id: str, issuer: IssuerKind, subscriber_id: str,
                     subscriber_public_key: str, window: Tuple[int, int]) -> Credential:
    valid_from, valid_until = window
    if valid_until <= valid_from:
        raise SecureChargingError("EMPTY_WINDOW", f"credential window [{valid_from}, {valid_until}) is empty")
    unsigned = Credential(subscriber_id=subscriber_id, public_key=subscriber_public_key, issuer=issuer,
                          issuer_id=issuer_id, valid_from=valid_from, valid_until=valid_until)
    return unsigned.model_copy(update={"signature": issuer_key.sign(unsigned.signed_payload())})


def verify_credential(credential: Credential, issuer_public_key: str, at: int) -> bool:
    if not credential.valid_from <= at < credential.valid_until:
        return False
    return verify_signature(issuer_public_key, credential.signature, credential.signed_payload())


# === Commitments and tokens === #

class TokenCommitment(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    commitment_id: str
    subscriber_id: str
    vasp_id: str
    chain_root: str
    chain_length: int = Field(ge=1)
    token_value: int = Field(ge=0)
    timestamp: int
    nonce: str
    hash_alg: str = "sha256"
    signature: str = ""

    def signed_payload(self) -> bytes:
        return _canonical(self.model_dump(mode="json", exclude={"signature"}))


class PaymentToken(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    commitment_id: str
    index: int = Field(ge=1)
    preimage: str


@dataclass
class ChainState:
    """Subscriber-side secret: the full chain w_0..w_N and the index of the last token released."""
    commitment: TokenCommitment
    chain: List[bytes]
    index: int = 0

    @property
    def exhausted(self) -> bool:
        return self.index >= self.commitment.chain_length


class ChainFile(BaseModel):
    """Wallet file next to a commitment: the chain seed and the index of the last token paid."""
    model_config = ConfigDict(extra="forbid")

    commitment_id: str = Field(min_length=1)
    seed: str
    index: int = Field(default=0, ge=0)

    @field_validator("seed")
    @classmethod
    def _hex(cls, value: str) -> str:
        bytes.fromhex(value)
        return value


def build_chain(seed: bytes, nonce: bytes, length: int, hash_fn: Callable[[bytes], bytes]) -> List[bytes]:
    """Returns [w_0, ..., w_N] with w_N = H(seed || nonce) and w_{i-1} = H(w_i)."""
    chain = [hash_fn(seed + nonce)]
    for _ in range(length):
        chain.append(hash_fn(chain[-1]))
    chain.reverse()
    return chain


def make_commitment(subscriber_key: KeyPair, credential: Credential, issuer_public_key: str, vasp_id: str,
                    chain_length: int, token_value: int, seed: bytes, timestamp: int,
                    hash_alg: str = "sha256") -> Tuple[TokenCommitment, ChainState]:
    if chain_length < 1:
        raise SecureChargingError("INVALID_CHAIN_LENGTH", f"chain length must be at least 1, got {chain_length}")
    if not verify_credential(credential, issuer_public_key, timestamp):
        raise SecureChargingError("INVALID_CREDENTIAL", f"credential of {credential.subscriber_id} does not verify "
                                  f"at {timestamp}", subscriber_id=credential.subscriber_id)
    if credential.public_key != subscriber_key.public_hex:
        raise SecureChargingError("INVALID_CREDENTIAL", "signing key is not the credentialed key",
                                  subscriber_id=credential.subscriber_id)

    hash_fn = HashPrimitive(hash_alg)
    nonce = hash_fn(b"nonce|" + seed + f"|{vasp_id}|{timestamp}".encode("utf-8"))
    chain = build_chain(seed, nonce, chain_length, hash_fn)

    unsigned = TokenCommitment(
        commitment_id=hash_fn(nonce + chain[0]).hex()[:16],
        subscriber_id=credential.subscriber_id,
        vasp_id=vasp_id,
        chain_root=chain[0].hex(),
        chain_length=chain_length,
        token_value=token_value,
        timestamp=timestamp,
        nonce=nonce.hex(),
        hash_alg=hash_alg,
    )
    commitment = unsigned.model_copy(update={"signature": subscriber_key.sign(unsigned.signed_payload())})
    logger.info("commitment made", commitment_id=commitment.commitment_id, vasp_id=vasp_id, n=chain_length)
    return commitment, ChainState(commitment=commitment, chain=chain)


def restore_chain(commitment: TokenCommitment, seed: bytes, index: int = 0) -> ChainState:
    """Rebuilds the subscriber's chain state from the seed the commitment was made with."""
    chain = build_chain(seed, bytes.fromhex(commitment.nonce), commitment.chain_length,
                        HashPrimitive(commitment.hash_alg))
    if chain[0].hex() != commitment.chain_root:
        raise SecureChargingError("BAD_CHAIN", f"seed does not reproduce commitment {commitment.commitment_id}")
    return ChainState(commitment=commitment, chain=chain, index=index)


def pay(state: ChainState) -> PaymentToken:
    if state.exhausted:
        raise SecureChargingError("CHAIN_EXHAUSTED", f"all {state.commitment.chain_length} tokens of "
                                  f"{state.commitment.commitment_id} are spent")
    state.index += 1
    return PaymentToken(commitment_id=state.commitment.commitment_id, index=state.index,
                        preimage=state.chain[state.index].hex())


def verify_token(commitment: TokenCommitment, last_verified: Tuple[int, str], token: PaymentToken,
                 hash_fn: Optional[HashPrimitive] = None) -> bool:
    """
    Accepts iff hashing the token's preimage exactly (i - j) times gives w_j. Costs i - j hash
    invocations; (0, chain_root) is the base.
    """
    j, w_j = last_verified
    if token.commitment_id != commitment.commitment_id:
        return False
    if not j < token.index <= commitment.chain_length:
        return False
    hash_fn = hash_fn or HashPrimitive(commitment.hash_alg)
    try:
        value = bytes.fromhex(token.preimage)
    except ValueError:
        return False
    for _ in range(token.index - j):
        value = hash_fn(value)
    return value.hex() == w_j


class TokenVerifier:
    """VASP-side state for one commitment: the highest verified (index, preimage)."""

    def __init__(self, commitment: TokenCommitment, hash_fn: Optional[HashPrimitive] = None):
        self.commitment = commitment
        self.hash_fn = hash_fn or HashPrimitive(commitment.hash_alg)
        self.last: Tuple[int, str] = (0, commitment.chain_root)

    def accept(self, token: PaymentToken) -> bool:
        if not verify_token(self.commitment, self.last, token, self.hash_fn):
            logger.debug("token rejected", commitment_id=self.commitment.commitment_id, index=token.index)
            return False
        self.last = (token.index, token.preimage)
        return True

    @property
    def highest(self) -> int:
        return self.last[0]

    @property
    def claim_value(self) -> int:
        return self.last[0] * self.commitment.token_value


# === Clearance === #

class ClearanceClaim(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    commitment: TokenCommitment
    credential: Credential
    k: int = Field(ge=0)
    w_k: str
    vasp_sig: str = ""
    hash_alg: str = "sha256"

    def signed_payload(self) -> bytes:
        return _canonical(self.model_dump(mode="json", exclude={"vasp_sig"}))


def make_claim(commitment: TokenCommitment, credential: Credential, k: int, w_k: str,
               vasp_key: KeyPair) -> ClearanceClaim:
    unsigned = ClearanceClaim(commitment=commitment, credential=credential, k=k, w_k=w_k,
                              hash_alg=commitment.hash_alg)
    return unsigned.model_copy(update={"vasp_sig": vasp_key.sign(unsigned.signed_payload())})


@dataclass(frozen=True)
class SettlementInstruction:
    commitment_id: str
    subscriber_id: str
    vasp_id: str
    tokens: int
    bill: int
    vasp_share: int
    provider_fee: int

    def to_dict(self) -> dict:
        return {
            "commitment_id": self.commitment_id,
            "subscriber": self.subscriber_id,
            "vasp": self.vasp_id,
            "tokens": self.tokens,
            "bill": self.bill,
            "vasp_share": self.vasp_share,
            "provider_fee": self.provider_fee,
        }


def chain_reaches_root(claim: ClearanceClaim) -> bool:
    token = PaymentToken(commitment_id=claim.commitment.commitment_id, index=max(claim.k, 1), preimage=claim.w_k)
    if claim.k == 0:
        return claim.w_k == claim.commitment.chain_root
    return verify_token(claim.commitment, (0, claim.commitment.chain_root), token)


def clear(claim: ClearanceClaim, issuer_public_key: str, fee_bp: int,
          vasp_public_key: Optional[str] = None) -> SettlementInstruction:
    """Checks the claim end to end and splits the bill: fee = floor(bill * fee_bp / 10000)."""
    commitment = claim.commitment
    if claim.k > commitment.chain_length:
        raise SecureChargingError("OVERCLAIM", f"claim for {claim.k} tokens exceeds chain of {commitment.chain_length}",
                                  commitment_id=commitment.commitment_id)
    if claim.hash_alg != commitment.hash_alg:
        raise SecureChargingError("BAD_CHAIN", "claim and commitment name different hash algorithms")
    if claim.credential.subscriber_id != commitment.subscriber_id or \
            not verify_credential(claim.credential, issuer_public_key, commitment.timestamp):
        raise SecureChargingError("BAD_CREDENTIAL", f"credential of {commitment.subscriber_id} does not verify",
                                  commitment_id=commitment.commitment_id)
    if not verify_signature(claim.credential.public_key, commitment.signature, commitment.signed_payload()):
        raise SecureChargingError("BAD_COMMITMENT_SIG", f"commitment {commitment.commitment_id} signature is invalid",
                                  commitment_id=commitment.commitment_id)
    if vasp_public_key is not None and not verify_signature(vasp_public_key, claim.vasp_sig, claim.signed_payload()):
        raise SecureChargingError("BAD_CLAIM_SIG", f"claim on {commitment.commitment_id} is not signed by "
                                  f"{commitment.vasp_id}", commitment_id=commitment.commitment_id)
    if not chain_reaches_root(claim):
        raise SecureChargingError("BAD_CHAIN", f"w_{claim.k} does not hash to the root of {commitment.commitment_id}",
                                  commitment_id=commitment.commitment_id)

    bill = claim.k * commitment.token_value
    fee = bill * fee_bp // BASIS_POINTS
    logger.info("claim cleared", commitment_id=commitment.commitment_id, k=claim.k, bill=bill)
    return SettlementInstruction(commitment.commitment_id, commitment.subscriber_id, commitment.vasp_id,
                                 claim.k, bill, bill - fee, fee)


# === Disputes === #

class UserStatement(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    commitment_id: str
    k: int = Field(ge=0)


@dataclass(frozen=True)
class Ruling:
    commitment_id: str
    user_k: int
    vasp_k: int
    claim_valid: bool
    ruling: int
    owed: int
    reason: str = field(default="")

    def to_dict(self) -> dict:
        return {
            "commitment_id": self.commitment_id,
            "user_k": self.user_k,
            "vasp_k": self.vasp_k,
            "claim_valid": self.claim_valid,
            "ruling": self.ruling,
            "owed": self.owed,
            "reason": self.reason,
        }


def dispute(statement: UserStatement, claim: ClearanceClaim, issuer_public_key: str) -> Ruling:
    """
    The VASP is owed exactly what it can prove: a valid w_k proves the subscriber released k tokens,
    whatever the subscriber states. An unprovable claim falls back to zero.
    """
    commitment = claim.commitment
    if statement.commitment_id != commitment.commitment_id:
        raise SecureChargingError("MISMATCHED_COMMITMENT", f"statement on {statement.commitment_id}, claim on "
                                  f"{commitment.commitment_id}")
    try:
        settlement = clear(claim, issuer_public_key, fee_bp=0)
    except SecureChargingError as e:
        return Ruling(commitment.commitment_id, statement.k, claim.k, False, 0, 0, e.code)
    return Ruling(commitment.commitment_id, statement.k, claim.k, True, claim.k, settlement.bill,
                  "CLAIM_PROVEN" if claim.k != statement.k else "AGREED")


# === Files === #

def claim_to_json(claim: ClearanceClaim) -> str:
    return json.dumps(claim.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def claim_from_json(text: str) -> ClearanceClaim:
    try:
        return ClearanceClaim.model_validate_json(text)
    except ValidationError as e:
        raise SecureChargingError("SCHEMA_ERROR", f"claim file does not match the claim schema "
                                  f"({e.error_count()} errors): {e.errors()[0]['msg']}")


def model_from_json(model: type, text: str, what: str):
    try:
        return model.model_validate_json(text)
    except ValidationError as e:
        raise SecureChargingError("SCHEMA_ERROR", f"{what} file is malformed ({e.error_count()} errors): "
                                  f"{e.errors()[0]['msg']}")
