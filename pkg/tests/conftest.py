import pytest

# criterion number -> (title, passed)
_ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    n, title = m.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    if rep.when != "call" and not failed:
        return
    titles, ok = _ACCEPTANCE.get(n, ("", True))
    if title not in titles.split("; "):
        titles = f"{titles}; {title}" if titles else title
    _ACCEPTANCE[n] = (titles, ok and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[n]
        tr.write_line(f"C{n:<2} {'PASS' if ok else 'FAIL'}  {title}")
