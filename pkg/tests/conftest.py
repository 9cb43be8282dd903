"""Collects acceptance outcomes and prints one line per criterion after the run."""

import pytest

_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _results.setdefault(props["criterion"], {"title": props["title"], "ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["notes"].extend(v for k, v in report.user_properties if k == "note")


@pytest.fixture(autouse=True)
def _criterion_props(request):
    marker = request.node.get_closest_marker("criterion")
    if marker:
        number, title = marker.args
        request.node.user_properties += [("criterion", number), ("title", title)]


@pytest.fixture
def note(request):
    """Attach a short result string to the criterion summary line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("note", text))
    return add


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["ok"] else "FAIL"
        detail = f"  [{'; '.join(r['notes'])}]" if r["notes"] else ""
        terminalreporter.write_line(f"{status}  criterion {number}: {r['title']}{detail}")
