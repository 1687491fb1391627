"""Collects one PASS/FAIL line per acceptance criterion."""

LINES = []


def record(label, ok, detail):
    line = f"{label:<34} {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return ok
