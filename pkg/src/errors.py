from typing import Any, Dict


class ChargingError(Exception):
    """
    Base error for the charging engine. `code` is the stable machine-readable name
    (MALFORMED_LINE, DUPLICATE_PRIORITY, ...); `details` name the offending line, id or index.
    """

    def __init__(self, code: str, message: str = "", **details: Any):
        self.code = code
        self.message = message or code
        self.details: Dict[str, Any] = details
        super().__init__(f"{code}: {self.message}")

    def to_dict(self) -> dict:
        return {"error": self.code, "message": self.message, **self.details}


class TraceError(ChargingError):
    pass


class RuleError(ChargingError):
    pass


class RatingError(ChargingError):
    pass


class CdrError(ChargingError):
    pass


class CreditError(ChargingError):
    pass


class SecureChargingError(ChargingError):
    pass


class ConfigError(ChargingError):
    pass


class SimulationError(ChargingError):
    pass
