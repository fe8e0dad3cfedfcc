import random

import pytest

from src.errors import SecureChargingError
from src.secure import (
    HashPrimitive, IssuerKind, KeyPair, PaymentToken, TokenVerifier, UserStatement, claim_from_json, claim_to_json,
    clear, dispute, issue_credential, make_claim, make_commitment, pay, restore_chain, verify_credential,
    verify_token,
)

ISSUER = KeyPair.from_seed("11" * 32)
ALICE = KeyPair.from_seed("22" * 32)
VASP = KeyPair.from_seed("55" * 32)
WINDOW = (0, 1_000_000)


@pytest.fixture
def credential():
    return issue_credential(ISSUER, "ngn-provider", IssuerKind.NGN_PROVIDER, "alice", ALICE.public_hex, WINDOW)


@pytest.fixture
def chain_factory(credential):
    def _make(n: int = 100, value: int = 100, hash_alg: str = "sha256", seed: bytes = b"alice-seed"):
        return make_commitment(ALICE, credential, ISSUER.public_hex, "vasp-movies", n, value, seed, 10, hash_alg)

    return _make


def _claim_after(state, credential, k):
    for _ in range(k - state.index):
        pay(state)
    return make_claim(state.commitment, credential, k, state.chain[k].hex(), VASP)


# === Credentials === #

def test_credential_verifies(credential):
    assert verify_credential(credential, ISSUER.public_hex, 500)


@pytest.mark.parametrize("field, value", [
    ("subscriber_id", "alicf"),
    ("public_key", VASP.public_hex),
    ("valid_until", 2_000_000),
    ("issuer", IssuerKind.TTP),
])
def test_tampered_credential_fails(credential, field, value):
    forged = credential.model_copy(update={field: value})
    assert not verify_credential(forged, ISSUER.public_hex, 500)


def test_credential_window_is_half_open(credential):
    assert verify_credential(credential, ISSUER.public_hex, 0)
    assert not verify_credential(credential, ISSUER.public_hex, 1_000_000)


def test_credential_under_other_issuer(credential):
    assert not verify_credential(credential, VASP.public_hex, 500)


def test_empty_window():
    with pytest.raises(SecureChargingError) as exc:
        issue_credential(ISSUER, "ngn", IssuerKind.TTP, "alice", ALICE.public_hex, (5, 5))
    assert exc.value.code == "EMPTY_WINDOW"


def test_bad_key_seed():
    with pytest.raises(SecureChargingError) as exc:
        KeyPair.from_seed("zz")
    assert exc.value.code == "BAD_KEY"


# === Commitments === #

def test_minimal_chain(chain_factory):
    commitment, state = chain_factory(n=1)
    hash_fn = HashPrimitive()

    assert hash_fn(state.chain[1]).hex() == commitment.chain_root
    token = pay(state)
    counter = HashPrimitive()
    assert verify_token(commitment, (0, commitment.chain_root), token, counter)
    assert counter.calls == 1


def test_token_37_costs_37_hashes(chain_factory):
    commitment, state = chain_factory(n=100)
    tokens = [pay(state) for _ in range(37)]
    counter = HashPrimitive()

    assert verify_token(commitment, (0, commitment.chain_root), tokens[-1], counter)
    assert counter.calls == 37

    counter = HashPrimitive()
    assert verify_token(commitment, (36, tokens[35].preimage), tokens[36], counter)
    assert counter.calls == 1


def test_commitment_needs_credentialed_key(credential):
    with pytest.raises(SecureChargingError) as exc:
        make_commitment(VASP, credential, ISSUER.public_hex, "vasp-movies", 10, 100, b"s", 10)
    assert exc.value.code == "INVALID_CREDENTIAL"


def test_commitment_outside_credential_window(credential):
    with pytest.raises(SecureChargingError) as exc:
        make_commitment(ALICE, credential, ISSUER.public_hex, "vasp-movies", 10, 100, b"s", 5_000_000)
    assert exc.value.code == "INVALID_CREDENTIAL"


def test_zero_length_chain(chain_factory):
    with pytest.raises(SecureChargingError) as exc:
        chain_factory(n=0)
    assert exc.value.code == "INVALID_CHAIN_LENGTH"


def test_commitments_differ_per_vasp_and_seed(chain_factory):
    first, _ = chain_factory(seed=b"one")
    second, _ = chain_factory(seed=b"two")

    assert first.commitment_id != second.commitment_id
    assert first.chain_root != second.chain_root


def test_restore_chain_from_seed(chain_factory):
    commitment, state = chain_factory(n=20, seed=b"kept")

    restored = restore_chain(commitment, b"kept", index=4)
    assert restored.chain == state.chain
    assert pay(restored).index == 5

    with pytest.raises(SecureChargingError) as exc:
        restore_chain(commitment, b"lost")
    assert exc.value.code == "BAD_CHAIN"


@pytest.mark.parametrize("hash_alg", ["sha256", "sha3_256", "blake2s"])
def test_every_supported_hash(chain_factory, hash_alg):
    commitment, state = chain_factory(n=5, hash_alg=hash_alg)
    verifier = TokenVerifier(commitment)

    assert all(verifier.accept(pay(state)) for _ in range(5))
    assert verifier.highest == 5


def test_unknown_hash():
    with pytest.raises(SecureChargingError) as exc:
        HashPrimitive("md5")
    assert exc.value.code == "UNKNOWN_HASH"


# === Payment === #

def test_fresh_chain_pays_index_one(chain_factory):
    _, state = chain_factory(n=3)
    assert pay(state).index == 1


def test_exhausted_chain(chain_factory):
    _, state = chain_factory(n=3)
    for _ in range(3):
        pay(state)

    with pytest.raises(SecureChargingError) as exc:
        pay(state)
    assert exc.value.code == "CHAIN_EXHAUSTED"


def test_all_tokens_verify_and_add_up(chain_factory):
    commitment, state = chain_factory(n=100, value=100)
    verifier = TokenVerifier(commitment)

    assert all(verifier.accept(pay(state)) for _ in range(10))
    assert verifier.claim_value == 1000
    assert verifier.hash_fn.calls == 10


def test_skipped_tokens_cover_the_gap(chain_factory):
    commitment, state = chain_factory(n=100)
    tokens = [pay(state) for _ in range(6)]
    verifier = TokenVerifier(commitment)
    assert verifier.accept(tokens[0])

    assert verifier.accept(tokens[5])
    assert verifier.hash_fn.calls == 1 + 5
    assert not verifier.accept(tokens[3])


@pytest.mark.parametrize("token", [
    PaymentToken(commitment_id="x", index=1, preimage="ab" * 32),
    PaymentToken(commitment_id="OWN", index=1, preimage="ab" * 32),
    PaymentToken(commitment_id="OWN", index=1, preimage="not-hex"),
    PaymentToken(commitment_id="OWN", index=101, preimage="ab" * 32),
])
def test_forged_tokens_rejected(chain_factory, token):
    commitment, _ = chain_factory(n=100)
    if token.commitment_id == "OWN":
        token = token.model_copy(update={"commitment_id": commitment.commitment_id})

    assert not verify_token(commitment, (0, commitment.chain_root), token)


def test_random_forgeries_never_verify(chain_factory):
    commitment, state = chain_factory(n=16)
    rng = random.Random(7)
    base = (0, commitment.chain_root)

    accepted = 0
    for trial in range(10_000):
        index = rng.randint(1, 16)
        if trial % 2:
            preimage = bytearray(state.chain[index])
            preimage[rng.randrange(len(preimage))] ^= 1 << rng.randrange(8)
        else:
            preimage = rng.randbytes(32)
        token = PaymentToken(commitment_id=commitment.commitment_id, index=index, preimage=bytes(preimage).hex())
        accepted += verify_token(commitment, base, token)

    assert accepted == 0


# === Clearance === #

def test_clear_splits_bill(chain_factory, credential):
    _, state = chain_factory(n=100, value=100)
    claim = _claim_after(state, credential, 10)

    settlement = clear(claim, ISSUER.public_hex, fee_bp=500, vasp_public_key=VASP.public_hex)

    assert (settlement.bill, settlement.vasp_share, settlement.provider_fee) == (1000, 950, 50)
    assert settlement.to_dict()["subscriber"] == "alice"


def test_fee_rounds_down(chain_factory, credential):
    _, state = chain_factory(n=10, value=33)
    settlement = clear(_claim_after(state, credential, 1), ISSUER.public_hex, fee_bp=500)

    assert (settlement.bill, settlement.provider_fee, settlement.vasp_share) == (33, 1, 32)


def test_settlement_always_adds_up(chain_factory, credential):
    rng = random.Random(11)
    for case in range(150):
        n = rng.randint(1, 40)
        value = rng.randint(0, 10_000)
        k = rng.randint(0, n)
        fee_bp = rng.randint(0, 10_000)
        _, state = chain_factory(n=n, value=value, seed=f"seed-{case}".encode())

        settlement = clear(_claim_after(state, credential, k), ISSUER.public_hex, fee_bp, VASP.public_hex)

        assert settlement.tokens == k
        assert settlement.bill == k * value
        assert settlement.bill == settlement.vasp_share + settlement.provider_fee
        assert settlement.provider_fee == settlement.bill * fee_bp // 10_000
        assert 0 <= settlement.provider_fee <= settlement.bill


def test_overclaim(chain_factory, credential):
    commitment, state = chain_factory(n=100)
    claim = make_claim(commitment, credential, 101, state.chain[100].hex(), VASP)

    with pytest.raises(SecureChargingError) as exc:
        clear(claim, ISSUER.public_hex, 500)
    assert exc.value.code == "OVERCLAIM"


def test_forged_preimage(chain_factory, credential):
    commitment, _ = chain_factory(n=100)
    claim = make_claim(commitment, credential, 10, "ab" * 32, VASP)

    with pytest.raises(SecureChargingError) as exc:
        clear(claim, ISSUER.public_hex, 500)
    assert exc.value.code == "BAD_CHAIN"


def test_claim_signed_by_someone_else(chain_factory, credential):
    _, state = chain_factory(n=100)
    claim = _claim_after(state, credential, 3)

    with pytest.raises(SecureChargingError) as exc:
        clear(claim, ISSUER.public_hex, 500, vasp_public_key=ALICE.public_hex)
    assert exc.value.code == "BAD_CLAIM_SIG"


def test_inflated_token_value(chain_factory, credential):
    commitment, state = chain_factory(n=100, value=100)
    inflated = commitment.model_copy(update={"token_value": 1000})
    claim = make_claim(inflated, credential, 3, state.chain[3].hex(), VASP)

    with pytest.raises(SecureChargingError) as exc:
        clear(claim, ISSUER.public_hex, 500)
    assert exc.value.code == "BAD_COMMITMENT_SIG"


def test_stretched_credential(chain_factory, credential):
    commitment, state = chain_factory(n=100)
    stretched = credential.model_copy(update={"valid_until": 9_000_000})
    claim = make_claim(commitment, stretched, 3, state.chain[3].hex(), VASP)

    with pytest.raises(SecureChargingError) as exc:
        clear(claim, ISSUER.public_hex, 500)
    assert exc.value.code == "BAD_CREDENTIAL"


def test_claim_file_reads_back(chain_factory, credential):
    _, state = chain_factory(n=10)
    claim = _claim_after(state, credential, 4)

    assert claim_from_json(claim_to_json(claim)) == claim
    with pytest.raises(SecureChargingError) as exc:
        claim_from_json(claim_to_json(claim)[:40])
    assert exc.value.code == "SCHEMA_ERROR"


# === Disputes === #

def test_proven_claim_beats_user_statement(chain_factory, credential):
    commitment, state = chain_factory(n=100, value=100)
    claim = _claim_after(state, credential, 8)

    ruling = dispute(UserStatement(commitment_id=commitment.commitment_id, k=5), claim, ISSUER.public_hex)

    assert (ruling.ruling, ruling.owed, ruling.claim_valid, ruling.reason) == (8, 800, True, "CLAIM_PROVEN")


def test_unprovable_claim_falls_to_zero(chain_factory, credential):
    commitment, _ = chain_factory(n=100)
    claim = make_claim(commitment, credential, 8, "cd" * 32, VASP)

    ruling = dispute(UserStatement(commitment_id=commitment.commitment_id, k=5), claim, ISSUER.public_hex)

    assert (ruling.ruling, ruling.owed, ruling.claim_valid, ruling.reason) == (0, 0, False, "BAD_CHAIN")


def test_agreement_at_zero(chain_factory, credential):
    commitment, _ = chain_factory(n=100)
    claim = make_claim(commitment, credential, 0, commitment.chain_root, VASP)

    ruling = dispute(UserStatement(commitment_id=commitment.commitment_id, k=0), claim, ISSUER.public_hex)

    assert ruling.to_dict() == {"commitment_id": commitment.commitment_id, "user_k": 0, "vasp_k": 0,
                                "claim_valid": True, "ruling": 0, "owed": 0, "reason": "AGREED"}


def test_statement_about_another_commitment(chain_factory, credential):
    commitment, _ = chain_factory(n=100)
    claim = make_claim(commitment, credential, 0, commitment.chain_root, VASP)

    with pytest.raises(SecureChargingError) as exc:
        dispute(UserStatement(commitment_id="elsewhere", k=0), claim, ISSUER.public_hex)
    assert exc.value.code == "MISMATCHED_COMMITMENT"
