"""Tests for the planted synthetic scene/caption generator."""

import numpy as np
import pytest

from ctxground import build_vocabulary, compute_adj_noun_stats, load_corpus
from ctxground.encoders import load_scenes
from ctxground.synthetic import (
    ATTRIBUTES,
    CLASS_NOUNS,
    SURFACES,
    SyntheticSpec,
    _allowed_attributes,
    generate_synthetic,
)

SPEC = SyntheticSpec(n_classes=4, n_attributes=4, n_scenes=12)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SPEC, seed=0)


def test_counts_and_shapes(data):
    assert len(data["scenes"]) == SPEC.n_scenes
    assert len(data["corpus"]) == SPEC.n_scenes
    for scene in data["scenes"]:
        assert scene.features.shape == (SPEC.grid_h, SPEC.grid_w, SPEC.d_v)


def test_deterministic_per_seed():
    a = generate_synthetic(SPEC, seed=7)
    b = generate_synthetic(SPEC, seed=7)
    for sa, sb in zip(a["scenes"], b["scenes"]):
        assert sa.image_id == sb.image_id
        assert np.array_equal(sa.features, sb.features)
        assert sa.gt == sb.gt
    assert a["corpus"] == b["corpus"]


def test_different_seeds_differ():
    a = generate_synthetic(SPEC, seed=0)
    b = generate_synthetic(SPEC, seed=1)
    assert not np.array_equal(a["scenes"][0].features, b["scenes"][0].features)


def test_caption_structure(data):
    classes = set(CLASS_NOUNS[:SPEC.n_classes])
    attrs = set(ATTRIBUTES[:SPEC.n_attributes])
    for cap in data["corpus"]:
        adjs = [t.text for t in cap.tokens if t.deprel == "amod"]
        assert len(adjs) == 1 and adjs[0] in attrs
        nouns = [t.text for t in cap.tokens if t.deprel == "root"]
        assert len(nouns) == 1 and nouns[0] in classes
        assert cap.tokens[-1].text in SURFACES
        # one PP or VP phrase covering the trailing context
        assert len(cap.phrases) == 1
        kind, (lo, hi) = cap.phrases[0]
        assert kind in ("pp", "vp")
        assert (lo, hi) == ((2, 5) if kind == "pp" else (2, 6))
        assert hi == len(cap.tokens)


def test_caption_mentions_first_placed_object(data):
    by_id = {s.image_id: s for s in data["scenes"]}
    for cap in data["corpus"]:
        scene = by_id[cap.image_id]
        noun = next(t.text for t in cap.tokens if t.deprel == "root")
        adj = next(t.text for t in cap.tokens if t.deprel == "amod")
        assert (noun, adj) in {(c, a) for c, a in scene.gt.values()}


def test_gt_cells_match_object_footprint(data):
    s = SPEC.object_size
    for scene in data["scenes"]:
        assert scene.gt  # at least one object placed
        assert len(scene.gt) % (s * s) == 0


def test_allowed_attribute_pools():
    pools = _allowed_attributes(8, 8)
    assert all(len(p) == 4 for p in pools)  # max(2, (8+1)//2)
    assert pools[0] == [0, 1, 2, 3]
    assert pools[7] == [7, 0, 1, 2]  # wraps around
    # too few attributes to carve a proper subset: full pool
    assert _allowed_attributes(4, 2) == [[0, 1]] * 4
    # every pool is a proper subset when possible
    assert all(len(set(p)) < 8 for p in pools)


def test_corpus_respects_attribute_pools(data):
    pools = _allowed_attributes(SPEC.n_classes, SPEC.n_attributes)
    classes = CLASS_NOUNS[:SPEC.n_classes]
    attrs = ATTRIBUTES[:SPEC.n_attributes]
    allowed = {classes[c]: {attrs[i] for i in pools[c]}
               for c in range(SPEC.n_classes)}
    big = generate_synthetic(
        SyntheticSpec(n_classes=4, n_attributes=4, n_scenes=100), seed=3)
    for scene in big["scenes"]:
        for cls, attr in scene.gt.values():
            assert attr in allowed[cls]


def test_surfaces_outside_vocabulary(data):
    vocab = build_vocabulary(data["synonyms"], set(data["base_names"]))
    for s in SURFACES:
        assert s not in vocab.term_index


def test_stats_cover_pools(data):
    vocab = build_vocabulary(data["synonyms"], set(data["base_names"]))
    stats = compute_adj_noun_stats(data["corpus"], vocab)
    assert stats.per_noun_adjs, "expected amod statistics from captions"


def test_file_round_trip(tmp_path):
    out = generate_synthetic(SPEC, seed=0, out_dir=str(tmp_path))
    scenes = load_scenes(out["scenes_path"])
    corpus = load_corpus(out["corpus_path"])
    assert len(scenes) == SPEC.n_scenes
    assert [c.caption_id for c in corpus] == \
        [c.caption_id for c in out["corpus"]]
    for mem, disk in zip(out["scenes"], scenes):
        assert np.allclose(mem.features, disk.features)
        assert mem.gt == disk.gt
    vocab = build_vocabulary(out["synonyms_path"], set(out["base_names"]))
    assert vocab.term_index


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticSpec(attribute_effect=1.5)
    with pytest.raises(ValueError):
        SyntheticSpec(n_classes=99)
    with pytest.raises(ValueError):
        SyntheticSpec(n_attributes=99)
    with pytest.raises(ValueError):
        SyntheticSpec(grid_h=2, grid_w=2, max_objects=5)


def test_base_names_are_class_prefix(data):
    names = data["base_names"]
    assert names == CLASS_NOUNS[:len(names)]
    assert 2 <= len(names) < SPEC.n_classes
