"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


@pytest.fixture
def note(request):
    """Attach a short measurement to the criterion line."""

    def add(text):
        request.node.user_properties.append(("note", str(text)))

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "outcomes": [], "notes": [], "skips": []})
    entry["outcomes"].append(rep.outcome)
    if rep.skipped and isinstance(rep.longrepr, tuple):
        entry["skips"].append(rep.longrepr[2].removeprefix("Skipped: "))
    if rep.when == "call":
        entry["notes"].extend(v for k, v in item.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        e = _results[number]
        outs = e["outcomes"]
        if "failed" in outs:
            status = "FAIL"
        elif all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(e["notes"] or sorted(set(e["skips"])))
        line = f"criterion {number:>2} {status}: {e['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
