import numpy as np
import pytest

from ltmlab import data, kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile the jitted kernels once so individual tests time only their work
    kernels.warmup()


@pytest.fixture(scope="session")
def desk_corpus_char():
    return data.load_corpus(data.desk_corpus_dir(), "char")


@pytest.fixture()
def tiny_corpus_dir(tmp_path):
    """Three small split files with a shared alphabet."""
    base = tmp_path / "corpus"
    base.mkdir()
    rng = np.random.default_rng(0)
    alphabet = "abcdefg .\n"
    for name, n in (("train.txt", 4000), ("valid.txt", 800), ("test.txt", 800)):
        text = "".join(rng.choice(list(alphabet), size=n))
        (base / name).write_text(text, encoding="utf-8")
    return base
