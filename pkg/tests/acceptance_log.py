"""Collects acceptance-criterion outcomes for the terminal summary."""

RESULTS = {}


def record(number, ok, detail):
    RESULTS[number] = (ok, detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
