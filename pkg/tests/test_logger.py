import json
import logging

from ddlod.utils.logger import get_logger, make_formatter, set_level


def record(message="Basis cache miss"):
    return logging.LogRecord("ddlod.cli.experiments", logging.INFO, "experiments.py", 42, message, None, None,
                             func="basis_cache")


def test_json_records_carry_context():
    payload = json.loads(make_formatter(debug=False).format(record()))
    assert payload["app"] == "ddlod"
    assert payload["module"] == "experiments"
    assert payload["funcName"] == "basis_cache"
    assert payload["message"] == "Basis cache miss"


def test_text_records_name_the_function():
    line = make_formatter(debug=True).format(record())
    assert "ddlod.cli.experiments.basis_cache" in line
    assert line.endswith("Basis cache miss")


def test_set_level_reaches_existing_loggers():
    logger = get_logger("ddlod.tests.level")
    set_level("error")
    try:
        assert logger.level == logging.ERROR
    finally:
        set_level("info")
