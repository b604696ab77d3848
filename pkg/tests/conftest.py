import contextlib
import time

import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``with criterion(6, "title") as note:`` records one PASS/FAIL line.

    ``note(text)`` attaches measured values to the line.
    """

    @contextlib.contextmanager
    def run(number, title):
        details = []
        start = time.perf_counter()
        try:
            yield details.append
        except BaseException as exc:
            details.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            _LINES.append(_line(number, title, "FAIL", details, time.perf_counter() - start))
            raise
        _LINES.append(_line(number, title, "PASS", details, time.perf_counter() - start))

    return run


def _line(number, title, status, details, seconds):
    extra = "; ".join(details)
    return f"criterion {number:>2} {status}  {title} ({seconds:.1f} s){': ' + extra if extra else ''}"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
