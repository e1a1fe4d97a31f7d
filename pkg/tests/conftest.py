from math import comb

import numpy as np
import pytest

from planlm.actions import cluster_corpus
from planlm.condlm import ConditionedLM
from planlm.corpus import SegmentedCorpus, synthetic_texts
from planlm.planner import PlannerModel


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def adjusted_rand_index(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_ij = sum(comb(int(x), 2) for x in table.ravel())
    sum_a = sum(comb(int(x), 2) for x in table.sum(1))
    sum_b = sum(comb(int(x), 2) for x in table.sum(0))
    expected = sum_a * sum_b / comb(len(a), 2)
    top = (sum_a + sum_b) / 2
    return 1.0 if top == expected else (sum_ij - expected) / (top - expected)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


@pytest.fixture(scope="session")
def small_corpus():
    """300 synthetic documents labelled with K=8 actions."""
    texts, latents = synthetic_texts(300, n_templates=8, seed=3)
    corpus = SegmentedCorpus.from_texts(texts, seed=3)
    vocab = cluster_corpus(corpus, K=8, seed=3, storage_dtype=np.float32)
    corpus.meta["latents"] = latents
    return corpus, vocab


@pytest.fixture
def tiny_models(small_corpus):
    corpus, vocab = small_corpus
    planner = PlannerModel(vocab.K, d=16, n_layers=1, n_heads=2, rng=np.random.default_rng(5))
    lm = ConditionedLM(vocab.centroids, d_model=16, n_layers=2, n_heads=2, rng=np.random.default_rng(6))
    return planner, lm
