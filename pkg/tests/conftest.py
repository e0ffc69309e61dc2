import numpy as np
import pytest

from labelaware.langsim import CorpusConfig, build_corpus


def rel_err(a, b):
    """Worst-case relative error, floored at scale 1 so near-zero entries
    compare absolutely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


SMALL_CORPUS_CONFIG = CorpusConfig(
    num_languages=6,
    num_pretrain_languages=4,
    num_features=8,
    min_frames=20,
    max_frames=30,
    pretrain_per_language=24,
    finetune_per_language=10,
    dev_per_language=4,
    test_per_language=6,
)


@pytest.fixture(scope="session")
def small_corpus():
    """A fast corpus for trainer/pipeline tests."""
    return build_corpus(SMALL_CORPUS_CONFIG, master_seed=7)


@pytest.fixture(scope="session")
def default_corpus():
    """The full default corpus (12 languages, 8 in pretrain)."""
    return build_corpus(CorpusConfig(), master_seed=0)
