import numpy as np
import pytest

from sessrec.dataio import augment_all, prepare_corpus, split_holdout
from sessrec.model import GraphSessionModel, ModelConfig
from sessrec.synthetic import planted_markov_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    pc = planted_markov_corpus(n_items=40, n_sessions=1500, seed=3)
    corpus = prepare_corpus(pc.sessions, min_frequency=1)
    train_seqs, valid_seqs = split_holdout(corpus.sequences)
    return corpus, train_seqs, augment_all(train_seqs), augment_all(valid_seqs)


@pytest.fixture
def tiny_model():
    return GraphSessionModel(ModelConfig(catalog_size=5, embedding_dim=4, layer_pattern="GA", dropout=0.0),
                    seed=7, dtype=np.float64)


# acceptance reporting: tests marked ``acceptance(n, title)`` get a ``verdict``
# fixture for free-form detail and one summary line each at the end of the run

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")
    config._acceptance = {}


@pytest.fixture
def verdict(request):
    notes = []
    request.node._acceptance_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    notes = getattr(item, "_acceptance_notes", [])
    item.config._acceptance[number] = ("PASS" if rep.passed else "FAIL", title, "; ".join(notes))


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, notes = results[number]
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}" + (f": {notes}" if notes else ""))
