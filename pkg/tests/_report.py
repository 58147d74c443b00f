"""Collects one pass/fail line per acceptance criterion."""

import time
from contextlib import contextmanager

LINES = []


@contextmanager
def criterion(number, title):
    """Record PASS or FAIL for ``number``; the body fills ``notes``."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        status, notes = "FAIL", notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"]
        raise
    else:
        status = "PASS"
    finally:
        line = f"criterion {number:>2} {status}  {title} ({time.perf_counter() - start:.1f}s)"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        LINES.append(line)
        print(line)
