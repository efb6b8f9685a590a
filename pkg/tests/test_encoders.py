import math

import numpy as np
import pytest
import torch

from ctxground.corpus import TaggedCaption, Token
from ctxground.encoders import (
    CONTEXT_FREE,
    CONTEXTUALIZED,
    UNK,
    EncoderStack,
    SceneGrid,
    apply_gradients,
    build_class_embeddings,
    build_token_inventory,
    embed_caption,
    embed_caption_context_free,
    embed_caption_contextualized,
    embed_regions,
    load_checkpoint,
    load_scenes,
    prompt_tokens,
    save_checkpoint,
    save_scenes,
    sinusoidal_positions,
)


def cap(*texts, caption_id="t", image_id="t"):
    toks = tuple(Token(t, "other", 0, "dep") for t in texts)
    return TaggedCaption(caption_id, image_id, toks, ())


@pytest.fixture()
def enc():
    return EncoderStack(
        ["orange", "basketball", "eating", "an", "car", "hot", "dog", "a", "."],
        d=8, d_v=4, d_r=6, layers=2, seed=3, language_frozen=False,
    )


# ---- context-free embeddings -------------------------------------------------

def test_context_free_rows_are_table_lookups(enc):
    rows = embed_caption_context_free(cap("orange", "basketball"), enc)
    table = enc.params["word_table"]
    assert torch.equal(rows[0], table[enc.token_index["orange"]])
    assert torch.equal(rows[1], table[enc.token_index["basketball"]])


def test_context_freeness_across_captions_and_positions(enc):
    a = embed_caption_context_free(cap("orange", "basketball"), enc)
    b = embed_caption_context_free(cap("eating", "an", "orange"), enc)
    assert torch.equal(a[0], b[2])


def test_context_free_repeated_token_identical_rows(enc):
    rows = embed_caption_context_free(cap("car", "car"), enc)
    assert torch.equal(rows[0], rows[1])


def test_context_free_empty_caption(enc):
    rows = embed_caption_context_free(cap(), enc)
    assert rows.shape == (0, enc.d)


def test_oov_token_hits_unk_row(enc):
    rows = embed_caption_context_free(cap("zzz-not-a-token"), enc)
    assert torch.equal(rows[0], enc.params["word_table"][enc.token_index[UNK]])


# ---- contextualized embeddings -----------------------------------------------

def test_contextualized_depends_on_context(enc):
    a = embed_caption_contextualized(cap("orange", "basketball"), enc)
    b = embed_caption_contextualized(cap("eating", "an", "orange"), enc)
    assert not torch.allclose(a[0], b[2])


def test_zero_layers_is_rows_plus_positions(enc):
    flat = EncoderStack(enc.tokens, d=8, d_v=4, d_r=6, layers=0, seed=3)
    c = cap("orange", "basketball")
    out = embed_caption_contextualized(c, flat)
    expected = embed_caption_context_free(c, flat) + sinusoidal_positions(2, 8)
    assert torch.allclose(out, expected)


def test_zeroed_output_projections_give_identity_plus_positions(enc):
    c = cap("orange")
    for l in range(enc.n_layers):
        enc.params[f"L{l}.wo"] = torch.zeros_like(enc.params[f"L{l}.wo"])
        enc.params[f"L{l}.ff_w2"] = torch.zeros_like(enc.params[f"L{l}.ff_w2"])
        enc.params[f"L{l}.ff_b2"] = torch.zeros_like(enc.params[f"L{l}.ff_b2"])
    out = embed_caption_contextualized(c, enc)
    expected = embed_caption_context_free(c, enc) + sinusoidal_positions(1, 8)
    assert torch.allclose(out, expected)


def test_embed_caption_dispatch(enc):
    c = cap("orange", "basketball")
    assert torch.equal(embed_caption(c, enc, CONTEXT_FREE),
                       embed_caption_context_free(c, enc))
    assert torch.equal(embed_caption(c, enc, CONTEXTUALIZED),
                       embed_caption_contextualized(c, enc))
    with pytest.raises(ValueError, match="mode"):
        embed_caption(c, enc, "bogus")


def test_batched_contextualize_matches_single(enc):
    caps = [cap("orange", "basketball"), cap("hot", "dog")]
    singles = [embed_caption_contextualized(c, enc) for c in caps]
    stacked = enc.contextualize_rows(torch.stack(
        [embed_caption_context_free(c, enc) for c in caps]
    ))
    for j, single in enumerate(singles):
        assert torch.allclose(stacked[j], single, atol=1e-12)


# ---- region embeddings -------------------------------------------------------

def scene(h, w, d_v, seed=0, gt=None):
    rng = np.random.default_rng(seed)
    return SceneGrid(f"s{seed}", h, w, rng.normal(size=(h, w, d_v)), gt or {})


def test_embed_regions_shape_contract(enc):
    rng = np.random.default_rng(5)
    for _ in range(10):
        h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        out = embed_regions(scene(h, w, enc.d_v), enc)
        assert out.shape == (h * w, enc.d)


def test_embed_regions_single_cell(enc):
    assert embed_regions(scene(1, 1, enc.d_v), enc).shape == (1, enc.d)


def test_embed_regions_identity_maps():
    e = EncoderStack(["x"], d=4, d_v=4, d_r=4, layers=0, seed=0)
    e.params["vision_w"] = torch.eye(4)
    e.params["vision_b"] = torch.zeros(4)
    e.params["v2l_w"] = torch.eye(4)
    e.params["v2l_b"] = torch.zeros(4)
    s = scene(2, 2, 4, seed=1)
    assert torch.allclose(embed_regions(s, e),
                          torch.as_tensor(s.flat_features()))


def test_embed_regions_row_major_order(enc):
    s = scene(2, 3, enc.d_v, seed=2)
    out = embed_regions(s, enc)
    for r in range(2):
        for c in range(3):
            single = SceneGrid("one", 1, 1, s.features[r:r + 1, c:c + 1])
            assert torch.allclose(out[r * 3 + c], embed_regions(single, enc)[0])


def test_embed_regions_dim_mismatch(enc):
    with pytest.raises(ValueError, match="d_v"):
        embed_regions(scene(2, 2, enc.d_v + 1), enc)


# ---- class embeddings --------------------------------------------------------

def test_prompt_vowel_rule():
    assert prompt_tokens("apple") == ["an", "apple", "."]
    assert prompt_tokens("car") == ["a", "car", "."]
    assert prompt_tokens("umbrella") == ["an", "umbrella", "."]


def test_class_embedding_context_free_single_token(enc):
    (emb,) = build_class_embeddings(["car"], enc, CONTEXT_FREE)
    row = enc.params["word_table"][enc.token_index["car"]]
    assert np.allclose(emb.vector, row.numpy())


def test_class_embedding_context_free_multiword_mean(enc):
    (emb,) = build_class_embeddings(["hot dog"], enc, CONTEXT_FREE)
    t = enc.params["word_table"]
    mean = (t[enc.token_index["hot"]] + t[enc.token_index["dog"]]) / 2
    assert np.allclose(emb.vector, mean.numpy())


def test_class_embedding_prompted_equals_manual_pipeline(enc):
    (emb,) = build_class_embeddings(["orange"], enc, CONTEXTUALIZED,
                                    use_prompt=True)
    manual = embed_caption_contextualized(cap("an", "orange", "."), enc)
    assert np.array_equal(emb.vector, manual[1:2].mean(dim=0).numpy())


def test_class_embedding_empty_list(enc):
    with pytest.raises(ValueError, match="empty"):
        build_class_embeddings([], enc, CONTEXT_FREE)


# ---- gradients and freezing --------------------------------------------------

def zero_grads(enc):
    return {k: np.zeros(tuple(v.shape)) for k, v in enc.params.items()}


def test_apply_gradients_step(enc):
    grads = zero_grads(enc)
    grads["v2l_w"] = np.ones(tuple(enc.params["v2l_w"].shape))
    before = enc.params["v2l_w"].clone()
    apply_gradients(enc, grads, 0.1)
    assert torch.allclose(enc.params["v2l_w"], before - 0.1)
    assert enc.step_count == 1


def test_apply_gradients_zero_and_zero_lr_noop(enc):
    before = {k: v.clone() for k, v in enc.params.items()}
    apply_gradients(enc, zero_grads(enc), 0.5)
    grads = {k: np.ones(tuple(v.shape)) for k, v in enc.params.items()}
    snapshot = enc.snapshot()
    apply_gradients(enc, grads, 0.0)
    for k in before:
        assert torch.equal(enc.params[k], snapshot.params[k])


def test_apply_gradients_rejects_non_finite(enc):
    grads = zero_grads(enc)
    grads["vision_w"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="vision_w"):
        apply_gradients(enc, grads, 0.1)


def test_language_freeze_blocks_unchanged_after_100_steps():
    e = EncoderStack(["x", "y"], d=4, d_v=3, d_r=4, layers=1, seed=0,
                     language_frozen=True)
    frozen = {k: e.params[k].clone() for k in e.frozen_blocks()}
    rng = np.random.default_rng(0)
    for _ in range(100):
        grads = {k: rng.normal(size=tuple(v.shape)) for k, v in e.params.items()}
        apply_gradients(e, grads, 0.05)
    for k, v in frozen.items():
        assert torch.equal(e.params[k], v)
    assert "word_table" in e.frozen_blocks()
    assert any(k.startswith("L0.") for k in e.frozen_blocks())


def test_v2l_freeze():
    e = EncoderStack(["x"], d=4, d_v=3, d_r=4, layers=1, seed=0,
                     v2l_frozen=True, language_frozen=False)
    assert {"v2l_w", "v2l_b"} <= e.frozen_blocks()
    assert "word_table" not in e.frozen_blocks()


# ---- checkpointing -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, enc):
    enc.step_count = 17
    path = save_checkpoint(enc, tmp_path / "ck.json")
    back = load_checkpoint(path)
    assert back.tokens == enc.tokens
    assert back.step_count == 17
    assert back.language_frozen == enc.language_frozen
    for k, v in enc.params.items():
        assert torch.equal(back.params[k], v)


def test_checkpoint_rejects_dim_mismatch(tmp_path, enc):
    import json
    path = save_checkpoint(enc, tmp_path / "ck.json")
    blob = json.loads(path and open(path).read())
    blob["params"]["v2l_w"] = [[0.0]]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(blob))
    with pytest.raises(ValueError, match="v2l_w"):
        load_checkpoint(bad)


# ---- scene files -------------------------------------------------------------

def test_scene_file_round_trip(tmp_path):
    s = scene(3, 2, 5, seed=9, gt={(0, 1): ("car", "red")})
    path = save_scenes([s], tmp_path / "scenes.jsonl")
    (back,) = load_scenes(path)
    assert back.image_id == s.image_id
    assert np.allclose(back.features, s.features)
    assert back.gt == s.gt


def test_scene_file_rejects_bad_row_count(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"image_id": "x", "h": 2, "w": 2, "features": [[0.0]], "gt": []}\n')
    with pytest.raises(ValueError, match="feature rows"):
        load_scenes(p)


def test_scene_file_rejects_out_of_grid_gt(tmp_path):
    p = tmp_path / "bad.jsonl"
    feats = [[0.0]] * 4
    import json
    p.write_text(json.dumps({"image_id": "x", "h": 2, "w": 2,
                             "features": feats,
                             "gt": [{"cell": [5, 0], "class": "car"}]}) + "\n")
    with pytest.raises(ValueError, match="outside"):
        load_scenes(p)


def test_scene_grid_shape_validation():
    with pytest.raises(ValueError, match="shape"):
        SceneGrid("x", 2, 2, np.zeros((3, 2, 4)))


# ---- misc --------------------------------------------------------------------

def test_token_inventory_includes_vocab_and_prompt_tokens(corpus, vocab):
    tokens = build_token_inventory(corpus, vocab)
    assert {"a", "an", "."} <= set(tokens)
    assert "hot" in tokens and "dog" in tokens
    assert tokens == sorted(tokens)


def test_sinusoidal_positions_values():
    enc = sinusoidal_positions(3, 4)
    assert enc[0, 0] == pytest.approx(math.sin(0))
    assert enc[1, 0] == pytest.approx(math.sin(1))
    assert enc[1, 1] == pytest.approx(math.cos(1))
    assert enc[2, 2] == pytest.approx(math.sin(2 / 10000 ** (2 / 4)))


def test_same_seed_same_init():
    a = EncoderStack(["x", "y"], d=4, d_v=3, d_r=4, layers=1, seed=11)
    b = EncoderStack(["x", "y"], d=4, d_v=3, d_r=4, layers=1, seed=11)
    for k in a.params:
        assert torch.equal(a.params[k], b.params[k])
