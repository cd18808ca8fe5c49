"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from contextlib import contextmanager

RESULTS: list[str] = []


@contextmanager
def criterion(label: str):
    """Record ``label`` as PASS, or FAIL with the error, and re-raise failures."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        line = f"FAIL  {label}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        RESULTS.append(line)
        print(line)
        raise
    detail = f" ({'; '.join(notes)})" if notes else ""
    line = f"PASS  {label}{detail}"
    RESULTS.append(line)
    print(line)
