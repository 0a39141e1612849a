"""Collector for acceptance-criterion results, printed in the terminal
summary so the one-line-per-criterion report survives pytest's capture."""

results: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    results.append((criterion, ok, detail))
    print(line)
