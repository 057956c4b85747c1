import numpy as np
import pytest

from gatedcnn_nci import pipeline, synth
from gatedcnn_nci.model import ModelConfig

TINY_SPEC = synth.SynthSpec(
    vocab_size=60, n_codes=4, notes_per_split=(60, 20, 20), note_len=(6, 12), plant_prob=0.4, noise_rate=0.0, seed=3
)


@pytest.fixture(scope="session")
def tiny_data():
    return synth.generate(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_data):
    return pipeline.preprocess(tiny_data.splits, tiny_data.descriptions, min_doc_count=1)


@pytest.fixture
def tiny_config(tiny_corpus):
    return ModelConfig(vocab_size=len(tiny_corpus.vocab), n_codes=len(tiny_corpus.codes), d_e=8, d_g=2, n_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
