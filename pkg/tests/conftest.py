"""Per-criterion pass/fail summary for tests tagged ``@pytest.mark.criterion("A<n>", ...)``."""
import pytest

_criteria = {}  # id -> {"title", "nodes", "failed", "seconds", "notes"}
_node_to_id = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion this test checks")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is None:
            continue
        cid, title = mark.args
        entry = _criteria.setdefault(cid, {"title": title, "nodes": 0, "failed": 0, "skipped": 0,
                                          "seconds": 0.0, "notes": []})
        entry["nodes"] += 1
        _node_to_id[item.nodeid] = cid


def pytest_runtest_logreport(report):
    cid = _node_to_id.get(report.nodeid)
    if cid is None:
        return
    entry = _criteria[cid]
    entry["seconds"] += report.duration
    if report.failed:
        entry["failed"] += 1
    elif report.skipped and report.when in ("setup", "call"):
        entry["skipped"] += 1
    for name, text in report.user_properties:
        if name == "note" and text not in entry["notes"]:
            entry["notes"].append(text)


@pytest.fixture
def note(record_property):
    """Attach a one-line measurement to the criterion summary."""
    return lambda text: record_property("note", text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        e = _criteria[cid]
        status = "FAIL" if e["failed"] else ("SKIP" if e["skipped"] == e["nodes"] else "PASS")
        tr.write_line(f"{cid} {status}  {e['title']}  ({e['nodes']} checks, {e['seconds']:.1f}s)")
        for text in e["notes"]:
            tr.write_line(f"     {text}")
