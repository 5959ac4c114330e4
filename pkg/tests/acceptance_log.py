"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
RESULTS = []


def record(name, ok, detail, seconds, limit):
    ok = bool(ok) and seconds < limit
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({seconds:.1f} s, limit {limit:g} s)"
    RESULTS.append(line)
    print(line)
    return ok
