import json
from pathlib import Path

import pytest

from src.config import load_config, parse_config
from src.log import configure_logging
from src.traffic import PacketEvent

DEMO_DIR = Path(__file__).resolve().parent.parent / "demo"


@pytest.fixture(autouse=True, scope="session")
def _logging():
    configure_logging("WARNING")


@pytest.fixture
def demo_dir() -> Path:
    return DEMO_DIR


@pytest.fixture
def demo_config_data() -> dict:
    with open(DEMO_DIR / "config.json", "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def demo_config():
    return load_config(DEMO_DIR / "config.json")


@pytest.fixture
def expected() -> dict:
    with open(DEMO_DIR / "expected.json", "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def make_packet():
    """Factory for packets with sensible defaults; keyword names follow the trace wire fields."""

    def _make(ts=0, src="10.0.0.1", dst="198.51.100.10", sport=40000, dport=80, proto="TCP", dir="DL",
              bytes=100, url=None, app=None) -> PacketEvent:
        return PacketEvent.model_validate({
            "ts": ts, "src": src, "dst": dst, "sport": sport, "dport": dport, "proto": proto, "dir": dir,
            "bytes": bytes, "url": url, "app": app,
        })

    return _make


@pytest.fixture
def small_config():
    """Minimal postpaid/prepaid config used by the simulator and property tests."""

    def _build(balance: int = 0, volume_limit: int = 10_000, cut_hours=(), quanta=None, extra_tariffs=()) -> object:
        return parse_config({
            "currency": "EUR",
            "default_bucket": "web",
            "buckets": [
                {"id": "web", "tariff": "t-web"},
                {"id": "news", "tariff": "t-news"},
                {"id": "stream", "tariff": "t-stream"},
                {"id": "portal", "tariff": "t-portal"},
                {"id": "movies", "tariff": "t-movies"},
                {"id": "free", "tariff": "t-free"},
                {"id": "downloads", "tariff": "t-mp3"},
                {"id": "games", "tariff": "t-games"},
                {"id": "calls", "tariff": "t-call"},
            ],
            "rules": [
                {"id": "r-free", "priority": 1, "match": {"url_glob": "free.example/*"}, "bucket": "free"},
                {"id": "r-block", "priority": 2, "match": {"dst_cidr": "203.0.113.0/24"}, "bucket": "web",
                 "authorize": "DENY"},
                {"id": "r-news", "priority": 10, "match": {"dst_cidr": "198.51.100.10/32"}, "bucket": "news"},
                {"id": "r-stream", "priority": 20, "match": {"proto": "UDP"}, "bucket": "stream"},
                {"id": "r-portal", "priority": 30, "match": {"url_glob": "portal.example/*"}, "bucket": "portal"},
                {"id": "r-mp3", "priority": 40, "match": {"app_tag": "download-complete"}, "bucket": "downloads"},
                {"id": "r-games", "priority": 50, "match": {"app_tag": "game-session"}, "bucket": "games"},
            ],
            "tariffs": [
                {"id": "t-web", "method": "PER_BYTE", "rate": 2},
                {"id": "t-news", "method": "PER_BYTE", "rate": 1},
                {"id": "t-stream", "method": "PER_SECOND", "rate": 20},
                {"id": "t-portal", "method": "PER_CLICK", "rate": 10},
                {"id": "t-movies", "method": "PER_EVENT_QUOTED", "event_prices": {"movie": 1500}},
                {"id": "t-free", "method": "FREE"},
                {"id": "t-mp3", "method": "PER_DOWNLOAD", "rate": 300},
                {"id": "t-games", "method": "PER_GAME", "rate": 200},
                {"id": "t-call", "method": "PER_EVENT", "rate": 50},
                *extra_tariffs,
            ],
            "apn_profiles": [{"id": "internet", "volume_limit_bytes": volume_limit, "tod_profile": "tod"}],
            "tod_profiles": [{"id": "tod", "cut_hours": list(cut_hours)}],
            "prepaid": {
                "quanta": quanta or {"DATA_VOLUME": 4096, "TIME": 10, "UNITS": 5},
                "accounts": [{"subscriber": "pre", "balance": balance}],
            },
        })

    return _build
