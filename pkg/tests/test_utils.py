"""Helper function tests.

Steps:
- Check JSON encoding and decoding helpers and _try_to_string.
- Accumulate timings and notes in trace nodes and render them as JSON.
- Format log records with ColorFormatter.
Expectations:
- Helpers return expected values for representative inputs.
"""

from __future__ import annotations

import logging

import tinytgm


def test_json_helpers():
    assert tinytgm._json_dumps({"a": 1, "b": [1.5, "x"]}) == b'{"a":1,"b":[1.5,"x"]}'
    assert tinytgm._json_loads(b'{"a":[1,2]}') == {"a": [1, 2]}
    assert tinytgm._json_loads(bytearray(b"[true]")) == [True]
    pretty = tinytgm._json_dumps({"a": {"b": 1}}, indent=2)
    assert b"\n" in pretty
    assert tinytgm._json_loads(pretty) == {"a": {"b": 1}}


def test_try_to_string():
    assert tinytgm._try_to_string({"a": 1}) == '{"a":1}'
    assert tinytgm._try_to_string([1, "x"]) == '[1,"x"]'
    assert tinytgm._try_to_string(0.25) == "0.25"
    assert tinytgm._try_to_string([object()]).startswith("[<object object")


def test_format_exception():
    e = tinytgm.EmptyScanError("no usable returns")
    assert tinytgm._format_exception(e) == "EmptyScanError: no usable returns"
    assert isinstance(e, tinytgm.TgmError)


def test_result():
    ok = tinytgm.Result.OK({"frames": 3})
    assert ok.is_ok()
    assert ok.json() == {"status": "OK", "data": {"frames": 3}}
    assert repr(ok) == "OK({'frames': 3})"
    failed = tinytgm.Result.FAIL(tinytgm.RunMetrics("street", "tgm", "truth", 0))
    assert not failed.is_ok()
    assert failed.json()["status"] == "FAIL"
    assert failed.json()["data"]["mapper"] == "tgm"


def test_trace_nodes():
    root = tinytgm.TraceRoot(name="street:tgm/truth")
    root.set_start()
    root.child("update").record(0.002)
    root.child("update").record(0.004)
    root.child("predict").update_attributes(cells=12, window=[1, 2])
    root.log("note", level="warning")
    root.error(tinytgm.TgmProgrammingError("bad"))
    root.set_end(tinytgm.Result.OK())

    data = root.json()
    assert data["finished"] is True
    assert data["result"] == "OK"
    assert list(data["children"]) == ["update", "predict"]
    update = data["children"]["update"]
    assert update["calls"] == 2
    assert abs(update["duration"] - 6.0) < 1e-6
    assert abs(update["mean_duration"] - 3.0) < 1e-6
    assert data["children"]["predict"]["attributes"] == {"cells": "12", "window": "[1,2]"}
    assert data["children"]["predict"]["mean_duration"] == 0.0
    assert data["logs"][0].endswith("[warning] : note")
    assert data["logs"][1].endswith("[error] : TgmProgrammingError: bad")


def test_timed():
    node = tinytgm.TraceNode(name="run")
    with tinytgm._timed(node, "match"):
        pass
    with tinytgm._timed(node, "match"):
        pass
    with tinytgm._timed(None, "match"):
        pass
    assert node.children["match"].calls == 2
    assert node.children["match"].duration.total_seconds() >= 0.0


def test_color_formatter():
    formatter = tinytgm.ColorFormatter("%(levelname)s %(message)s")
    record = logging.LogRecord("tinytgm", logging.WARNING, __file__, 1, "clipped %d cells", (4,), None)
    assert formatter.format(record) == "\033[33mWARNING clipped 4 cells\033[0m"
    record = logging.LogRecord("tinytgm", 5, __file__, 1, "plain", None, None)
    assert formatter.format(record) == "Level 5 plain\033[0m"
