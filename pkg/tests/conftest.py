"""Collects acceptance-criterion verdicts and prints one PASS/FAIL line per criterion."""
import contextlib

VERDICTS: dict = {}


@contextlib.contextmanager
def criterion(number: int, title: str, detail: list | None = None):
    """Record PASS when the block finishes, FAIL when an assertion (or anything else) escapes it."""
    try:
        yield
    except BaseException:
        VERDICTS[number] = ("FAIL", title, "; ".join(detail or []))
        raise
    VERDICTS[number] = ("PASS", title, "; ".join(detail or []))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        verdict, title, detail = VERDICTS[n]
        line = f"criterion {n}: {verdict}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
