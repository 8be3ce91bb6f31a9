import hypothesis
import pytest

from kbprobe.gateway import Gateway
from kbprobe.policies import Explorer
from kbprobe.processor import KnowledgeProcessor
from kbprobe.sim_oracle import SimBackend, generate_corpus

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(seed=7, branching=3, depth=2, facts_per_leaf=20, zipf_s=1.1, paraphrases_per_fact=2)


@pytest.fixture()
def sim_gateway(corpus):
    return Gateway(backends={"sim:": SimBackend(corpus, seed=7)})


@pytest.fixture()
def processor(sim_gateway):
    return KnowledgeProcessor(sim_gateway)


@pytest.fixture()
def explorer(sim_gateway):
    return Explorer(sim_gateway)


# -- acceptance report ------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        verdict = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {e['title']} ({e['tests']} checks)")
