import copy

import pytest

from src.config import load_config, parse_config
from src.errors import ConfigError
from src.online import GrantType


def _invalid(data) -> ConfigError:
    with pytest.raises(ConfigError) as exc:
        parse_config(data, "test.json")
    assert exc.value.code == "CONFIG_INVALID"
    return exc.value


def test_demo_config_loads(demo_config):
    assert demo_config.currency == "EUR"
    assert len(demo_config.rule_set()) == 7
    assert demo_config.bucket_tariffs()["movies"] == "t-movies"
    assert demo_config.quote_book().ttl_ms == 300_000
    assert demo_config.credit_control().quantum_for("stream", GrantType.TIME) == 10
    assert demo_config.secure.fee_for("vasp-movies") == 500


def test_yaml_is_accepted(tmp_path):
    path = tmp_path / "engine.yaml"
    path.write_text(
        "default_bucket: web\n"
        "buckets:\n  - {id: web, tariff: t-web, quantum: 2048}\n"
        "tariffs:\n  - {id: t-web, method: PER_BYTE, rate: 1}\n"
        "apn_profiles:\n  - {id: internet, volume_limit_bytes: 1000}\n",
        encoding="utf-8",
    )
    config = load_config(path)

    assert config.rules == []
    assert config.credit_control().quantum_for("web", GrantType.DATA_VOLUME) == 2048


def test_rule_to_unknown_bucket(demo_config_data):
    data = copy.deepcopy(demo_config_data)
    data["rules"][0]["bucket"] = "nowhere"

    assert _invalid(data).details["reason"] == "UNKNOWN_BUCKET"


def test_bucket_with_unknown_tariff(demo_config_data):
    data = copy.deepcopy(demo_config_data)
    data["buckets"][0]["tariff"] = "t-nothing"

    assert _invalid(data).details["reason"] == "REFERENCE"


@pytest.mark.parametrize("extra_tariff, fragment", [
    ({"id": "t-web", "method": "PER_CLICK", "rate": 1, "effective_from": 1000}, "billing method"),
    ({"id": "t-late", "method": "PER_BYTE", "rate": 1, "effective_from": 1000}, "effective from 0"),
    ({"id": "t-usd", "method": "PER_BYTE", "rate": 1, "currency": "USD"}, "USD"),
])
def test_tariff_schedule_checks(demo_config_data, extra_tariff, fragment):
    data = copy.deepcopy(demo_config_data)
    data["tariffs"].append(extra_tariff)

    assert fragment in _invalid(data).message


def test_duplicate_tariff_version(demo_config_data):
    data = copy.deepcopy(demo_config_data)
    data["tariffs"].append({"id": "t-web", "method": "PER_BYTE", "rate": 5})

    assert _invalid(data).details["reason"] == "DUPLICATE_TARIFF"


def test_later_tariff_version_is_fine(demo_config_data):
    data = copy.deepcopy(demo_config_data)
    data["tariffs"].append({"id": "t-web", "method": "PER_BYTE", "rate": 5, "effective_from": 60_000})

    catalog = parse_config(data).tariff_catalog()
    assert catalog.tariff_at("t-web", 60_000).rate.amount == 5


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(colour="blue"),
    lambda d: d["apn_profiles"][0].update(volume_limit_bytes=0),
    lambda d: d["tod_profiles"][0].update(cut_hours=[24]),
    lambda d: d["prepaid"]["quanta"].update(TIME=0),
    lambda d: d["prepaid"]["accounts"][0].update(balance=-5),
    lambda d: d["rating"].update(idle_gap_ms=10),
    lambda d: d["secure"].update(hash_alg="md5"),
    lambda d: d["secure"]["issuer"].update(key="abc"),
    lambda d: d["secure"]["credential_window"].update(end=0),
    lambda d: d["apn_profiles"][0].update(tod_profile="offpeak"),
    lambda d: d["buckets"].append({"id": "web", "tariff": "t-web"}),
])
def test_invalid_sections(demo_config_data, mutate):
    data = copy.deepcopy(demo_config_data)
    mutate(data)
    _invalid(data)


def test_top_level_must_be_object():
    assert "top level" in _invalid(["not", "an", "object"]).message


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_config(tmp_path / "absent.json")
    assert exc.value.details["reason"] == "IO"


def test_unparseable_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("buckets: [unclosed\n", encoding="utf-8")

    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert exc.value.details["reason"] == "SYNTAX"


def test_unknown_vasp_and_subscriber(demo_config):
    with pytest.raises(ConfigError):
        demo_config.secure.vasp("vasp-games")
    with pytest.raises(ConfigError):
        demo_config.secure.subscriber_key("mallory")
