"""
Engine configuration: one JSON (or YAML) document holding rules, buckets, tariffs, CDR profiles,
prepaid accounts and the secure-charging keys. Everything is cross-checked before a single event
is processed.
"""

from pathlib import Path
from typing import Dict, List, Optional, Union

import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.cdr import ApnProfile, ApnProfileDef, CdrEngine, TodProfile, TodProfileDef
from src.classifier import RuleDef, RuleSet, compile_rules
from src.errors import ChargingError, ConfigError
from src.online import CreditControl, GrantType, PrepaidAccount
from src.rating import Money, QuoteBook, Tariff, TariffCatalog, TariffDef, TariffDesk
from src.secure import HASH_ALGORITHMS, IssuerKind, KeyPair

logger = structlog.get_logger(__name__)


# === Sections === #

class BucketDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    tariff: str
    quantum: Optional[int] = Field(default=None, gt=0)


class RatingDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    quote_ttl_s: int = Field(default=300, ge=1)
    idle_gap_ms: int = Field(default=10_000, ge=1000)


class AccountDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    subscriber: str = Field(min_length=1)
    balance: int = Field(ge=0)


class PrepaidDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    quanta: Dict[GrantType, int] = Field(default_factory=dict)
    accounts: List[AccountDef] = Field(default_factory=list)

    @field_validator("quanta")
    @classmethod
    def _positive(cls, quanta: Dict[GrantType, int]) -> Dict[GrantType, int]:
        if any(q <= 0 for q in quanta.values()):
            raise ValueError("quanta must be positive")
        return quanta


class KeyDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    key: str = Field(pattern=r"^[0-9a-fA-F]{64}$")


class IssuerDef(KeyDef):
    kind: IssuerKind = IssuerKind.NGN_PROVIDER


class VaspDef(KeyDef):
    fee_bp: Optional[int] = Field(default=None, ge=0, le=10_000)


class WindowDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    start: int = 0
    end: int


class SecureDef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hash_alg: str = "sha256"
    fee_bp: int = Field(default=500, ge=0, le=10_000)
    issuer: IssuerDef
    vasps: List[VaspDef] = Field(default_factory=list)
    subscribers: List[KeyDef] = Field(default_factory=list)
    credential_window: WindowDef

    def vasp(self, vasp_id: str) -> VaspDef:
        for vasp in self.vasps:
            if vasp.id == vasp_id:
                return vasp
        raise ConfigError("CONFIG_INVALID", f"VASP {vasp_id!r} is not configured", reason="UNKNOWN_VASP")

    def subscriber_key(self, subscriber_id: str) -> KeyPair:
        for entry in self.subscribers:
            if entry.id == subscriber_id:
                return KeyPair.from_seed(entry.key)
        raise ConfigError("CONFIG_INVALID", f"no key for subscriber {subscriber_id!r}", reason="UNKNOWN_SUBSCRIBER")

    def fee_for(self, vasp_id: str) -> int:
        fee = self.vasp(vasp_id).fee_bp
        return self.fee_bp if fee is None else fee


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    currency: str = Field(default="EUR", min_length=1)
    default_bucket: str
    buckets: List[BucketDef]
    rules: List[RuleDef] = Field(default_factory=list)
    tariffs: List[TariffDef]
    rating: RatingDef = Field(default_factory=RatingDef)
    apn_profiles: List[ApnProfileDef]
    tod_profiles: List[TodProfileDef] = Field(default_factory=list)
    prepaid: PrepaidDef = Field(default_factory=PrepaidDef)
    secure: Optional[SecureDef] = None

    # === Builders === #

    def bucket_tariffs(self) -> Dict[str, str]:
        return {bucket.id: bucket.tariff for bucket in self.buckets}

    def rule_set(self) -> RuleSet:
        return compile_rules(self.rules, self.default_bucket, [bucket.id for bucket in self.buckets])

    def tariff_catalog(self) -> TariffCatalog:
        return TariffCatalog.from_tariffs(Tariff.from_def(t, self.currency) for t in self.tariffs)

    def cdr_engine(self, desk: TariffDesk) -> CdrEngine:
        apns = {a.id: ApnProfile(a.id, a.volume_limit_bytes, a.tod_profile) for a in self.apn_profiles}
        tods = {t.id: TodProfile(t.id, frozenset(t.cut_hours)) for t in self.tod_profiles}
        return CdrEngine(apns, tods, desk)

    def accounts(self) -> Dict[str, PrepaidAccount]:
        return {a.subscriber: PrepaidAccount(a.subscriber, Money(a.balance, self.currency))
                for a in self.prepaid.accounts}

    def credit_control(self) -> CreditControl:
        bucket_quanta = {b.id: b.quantum for b in self.buckets if b.quantum is not None}
        return CreditControl(self.accounts(), self.prepaid.quanta, bucket_quanta)

    def quote_book(self) -> QuoteBook:
        return QuoteBook(ttl_ms=self.rating.quote_ttl_s * 1000)


def _duplicates(ids: List[str]) -> List[str]:
    seen, dupes = set(), []
    for item in ids:
        if item in seen and item not in dupes:
            dupes.append(item)
        seen.add(item)
    return dupes


def check_references(config: EngineConfig) -> None:
    """Every id one section names must resolve in another; raises ValueError naming the first break."""
    for section, ids in (
        ("buckets", [b.id for b in config.buckets]),
        ("apn_profiles", [a.id for a in config.apn_profiles]),
        ("tod_profiles", [t.id for t in config.tod_profiles]),
        ("prepaid.accounts", [a.subscriber for a in config.prepaid.accounts]),
    ):
        dupes = _duplicates(ids)
        if dupes:
            raise ValueError(f"{section}: duplicate id {dupes[0]!r}")

    methods: Dict[str, object] = {}
    origins: Dict[str, int] = {}
    for tariff in config.tariffs:
        if tariff.currency is not None and tariff.currency != config.currency:
            raise ValueError(f"tariff {tariff.id!r} is priced in {tariff.currency}, the engine bills in {config.currency}")
        if methods.setdefault(tariff.id, tariff.method) != tariff.method:
            raise ValueError(f"tariff {tariff.id!r} changes billing method between versions")
        origins[tariff.id] = min(origins.get(tariff.id, tariff.effective_from), tariff.effective_from)
    for tariff_id, origin in origins.items():
        if origin != 0:
            raise ValueError(f"tariff {tariff_id!r} has no version effective from 0")

    for bucket in config.buckets:
        if bucket.tariff not in methods:
            raise ValueError(f"bucket {bucket.id!r} references unknown tariff {bucket.tariff!r}")

    tod_ids = {t.id for t in config.tod_profiles}
    for apn in config.apn_profiles:
        if apn.tod_profile is not None and apn.tod_profile not in tod_ids:
            raise ValueError(f"APN profile {apn.id!r} references unknown TOD profile {apn.tod_profile!r}")

    if config.secure is not None:
        if config.secure.hash_alg not in HASH_ALGORITHMS:
            raise ValueError(f"secure.hash_alg {config.secure.hash_alg!r} is not one of {', '.join(HASH_ALGORITHMS)}")
        dupes = _duplicates([v.id for v in config.secure.vasps])
        if dupes:
            raise ValueError(f"secure.vasps: duplicate id {dupes[0]!r}")
        if config.secure.credential_window.end <= config.secure.credential_window.start:
            raise ValueError("secure.credential_window is empty")


def parse_config(data: Union[dict, None], source: str = "<config>") -> EngineConfig:
    if not isinstance(data, dict):
        raise ConfigError("CONFIG_INVALID", f"{source}: top level must be an object", path=source)
    try:
        config = EngineConfig.model_validate(data)
        check_references(config)
        config.rule_set()
        config.tariff_catalog()
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError("CONFIG_INVALID", f"{source}: {where}: {first['msg']}", path=source, reason=first["type"])
    except ValueError as e:
        raise ConfigError("CONFIG_INVALID", f"{source}: {e}", path=source, reason="REFERENCE")
    except ChargingError as e:
        raise ConfigError("CONFIG_INVALID", f"{source}: {e.code}: {e.message}", path=source, reason=e.code)
    return config


def load_config(path: Union[str, Path]) -> EngineConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError("CONFIG_INVALID", f"{path}: cannot read ({e.strerror})", path=str(path), reason="IO")
    except yaml.YAMLError as e:
        raise ConfigError("CONFIG_INVALID", f"{path}: not parseable: {e}", path=str(path), reason="SYNTAX")
    config = parse_config(data, str(path))
    logger.debug("config loaded", path=str(path), buckets=len(config.buckets), rules=len(config.rules),
                 tariffs=len(config.tariffs))
    return config
