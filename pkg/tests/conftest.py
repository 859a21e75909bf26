import numpy as np
import pytest

from graphdoc.corpusio import generate_synthetic
from graphdoc.docmodel import Document, GraphDocModel, ModelConfig

TINY = dict(d_model=8, d_tok=8, heads=2, layers=2, vocab_buckets=64, max_tokens=16, precision=64)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return GraphDocModel(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(topics=3, vocab_per_topic=40, background_vocab=20, docs=30, dev_docs=6,
                              test_docs=9, queries=(12, 6, 6), seed=11)


def make_doc(doc_id="doc", sections=((3,),), seed=0, label=None):
    """A document whose section ``s`` holds ``sections[s][0]`` short passages."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(30)]
    secs = [[" ".join(rng.choice(words, size=6)) + "." for _ in range(n)] for (n,) in sections]
    return Document(doc_id, secs, label=label)
