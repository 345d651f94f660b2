import pytest

from chanstream.apps.eventfilter import write_dataset
from chanstream.apps.wordcount import write_corpus

CORPUS_FILES = 120
CORPUS_TOKENS_PER_FILE = 1000

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """120 text files, 120,000 tokens in total."""
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, CORPUS_FILES, CORPUS_TOKENS_PER_FILE, seed=2024)
    return root


@pytest.fixture(scope="session")
def events(tmp_path_factory):
    """10,000 synthetic events in 8 files plus the generator that made them."""
    root = tmp_path_factory.mktemp("events")
    gen = write_dataset(root, 10_000, 8, seed=11)
    return root, gen


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "passed": 0, "failed": 0, "skipped": 0, "why": []})
    if rep.when == "call" or rep.outcome != "passed":
        if rep.skipped:
            entry["skipped"] += 1
            entry["why"].append(str(rep.longrepr[-1]) if isinstance(rep.longrepr, tuple) else "skipped")
        elif rep.failed:
            entry["failed"] += 1
        elif rep.when == "call":
            entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if e["failed"]:
            verdict = "FAIL"
        elif e["passed"]:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        detail = f" ({'; '.join(sorted(set(e['why'])))})" if verdict == "SKIP" else ""
        terminalreporter.write_line(f"criterion {n} [{e['title']}]: {verdict}{detail}")
