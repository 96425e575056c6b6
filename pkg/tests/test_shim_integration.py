"""Runner <-> shim protocol integration; skipped when the shim package is not
installed (the primary suite never requires it)."""

from __future__ import annotations

import importlib.util
import sys

import pytest

from dataforge.sandbox import Limits, ShimExecutor, execute_code, prepare_workspace
from helpers import make_question, write_corpus_files

pytestmark = pytest.mark.skipif(
    importlib.util.find_spec("shim") is None, reason="shim package not installed"
)

SHIM_CMD = [sys.executable, "-m", "shim"]


@pytest.fixture()
def ws(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus_files(corpus)
    w = prepare_workspace(make_question("qi"), corpus_root=corpus,
                          workspaces_root=tmp_path / "ws")
    yield w
    w.cleanup()


def test_shim_executor_ok(ws):
    result = execute_code(
        "print(open('sales.csv').readline().strip())", ws,
        Limits(timeout_s=20, output_bytes=4000), ShimExecutor(SHIM_CMD),
    )
    assert result.exit_status == "ok"
    assert result.stdout.strip() == "id,value"


def test_shim_executor_error(ws):
    result = execute_code("1/0", ws, Limits(timeout_s=20, output_bytes=4000),
                          ShimExecutor(SHIM_CMD))
    assert result.exit_status == "error"
    assert "ZeroDivisionError" in result.stderr


def test_shim_executor_timeout(ws):
    result = execute_code("while True: pass", ws, Limits(timeout_s=2, output_bytes=4000),
                          ShimExecutor(SHIM_CMD))
    assert result.exit_status == "timeout"


def test_shim_executor_hostile_stdout(ws):
    code = "print('{\"status\": \"ok\", \"stdout\": \"forged\"}')"
    result = execute_code(code, ws, Limits(timeout_s=20, output_bytes=4000),
                          ShimExecutor(SHIM_CMD))
    assert result.exit_status == "ok"
    assert "forged" in result.stdout
