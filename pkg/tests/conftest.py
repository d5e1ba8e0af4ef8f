import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    results = request.config.stash[_RESULTS]
    seen = []

    def record(number: int, passed: bool, detail: str):
        seen.append(number)
        prev = results.get(number)
        ok = bool(passed) and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        results[number] = (ok, text)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    yield record
    if not seen:
        number = getattr(request.function, "criterion_number", None)
        if number is not None:
            results[number] = (False, "test raised before reporting")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
