import numpy as np
import pytest

from cpc.segmentation import tokenize

_ACCEPTANCE: list[tuple[str, bool, str]] = []


class StubEmbedder:
    """Maps a whole token sequence (joined by spaces) to a fixed vector.

    Every token of a known sequence gets the same vector, so pooling any span
    of it returns that vector's direction.
    """

    max_tokens = None

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = {" ".join(t.text for t in tokenize(k)): np.asarray(v, float) for k, v in table.items()}

    def embed_document(self, tokens):
        return np.tile(self.table[" ".join(tokens)], (len(tokens), 1))


@pytest.fixture
def stub_embedder():
    return StubEmbedder


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome for the end-of-run summary."""

    def record(name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
