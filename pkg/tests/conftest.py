import json
import os

import pytest

from ctxground import build_vocabulary, compute_adj_noun_stats, load_corpus

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(fixture_path("corpus.jsonl"))


@pytest.fixture(scope="session")
def base_names():
    with open(fixture_path("base_names.json")) as fh:
        return set(json.load(fh))


@pytest.fixture(scope="session")
def vocab(base_names):
    return build_vocabulary(fixture_path("synonyms.json"), base_names)


@pytest.fixture(scope="session")
def stats(corpus, vocab):
    return compute_adj_noun_stats(corpus, vocab)


@pytest.fixture(scope="session")
def category_lists():
    from ctxground.corpus import load_category_lists
    return load_category_lists(fixture_path("categories.json"))
