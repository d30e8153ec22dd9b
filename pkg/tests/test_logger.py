"""Tests for logging setup"""
import logging

from onnkit.logger import PACKAGE_LOGGER, run_log, setup_logger


def test_module_loggers_share_the_package_handler():
    """Test that module loggers propagate to the single package handler"""
    child = setup_logger("onnkit.example")
    package = logging.getLogger(PACKAGE_LOGGER)
    assert child.name == "onnkit.example"
    assert not child.handlers
    assert child.propagate
    assert len(package.handlers) == 1
    assert setup_logger() is package
    assert len(package.handlers) == 1


def test_run_log_mirrors_messages(tmp_path):
    """Test that run_log writes package messages to a file and detaches afterwards"""
    child = setup_logger("onnkit.example")
    package = logging.getLogger(PACKAGE_LOGGER)
    path = tmp_path / "logs" / "run.log"
    with run_log(path, level=logging.INFO):
        child.warning("inside the run")
        assert len(package.handlers) == 2
    child.warning("after the run")
    text = path.read_text()
    assert "onnkit.example - WARNING - inside the run" in text
    assert "after the run" not in text
    assert len(package.handlers) == 1
