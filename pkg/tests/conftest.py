"""Collects acceptance outcomes and prints one line per criterion after the run."""

_criteria = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    failed = report.failed
    if report.when == "call" or failed:
        entry = _criteria.setdefault(key, {"title": props.get("title", ""), "ok": True, "detail": ""})
        entry["ok"] = entry["ok"] and not failed and not report.skipped
        entry["detail"] = props.get("detail", entry["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=int):
        e = _criteria[key]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {key} {status}: {e['title']} | {e['detail']}")
