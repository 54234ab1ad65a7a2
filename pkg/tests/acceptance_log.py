"""Collects one summary line per acceptance criterion for the terminal report."""

LINES = {}


def report(n: int, ok: bool, detail: str) -> bool:
    LINES[n] = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    print(LINES[n])
    return ok
