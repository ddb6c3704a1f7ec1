import numpy as np
import pytest

from padensemble import synthetic
from padensemble.corpus import ImageSample, save_corpus

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oxml_corpus():
    """62 labeled images with the 36/14/12 class counts, small sizes for speed."""
    return synthetic.make_corpus(synthetic.OXML_COUNTS, 6, 16, seed=7)


@pytest.fixture
def oxml_dataset(tmp_path, oxml_corpus):
    return save_corpus(oxml_corpus, tmp_path / "oxml")


def solid(sample_id, h, w, value=128, label=None):
    return ImageSample(sample_id, np.full((h, w, 3), value, dtype=np.uint8), label)
