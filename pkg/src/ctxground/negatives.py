"""Negative caption samplers: adjective swaps and noun swaps.

Each sampler mutates exactly one token's text, keeping all POS, head,
and dependency annotations intact. Adjective swaps draw from the pool of
adjectives seen with the same object class in the corpus ("plausible");
noun swaps draw a vocabulary term of a different class.
"""

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .corpus import TaggedCaption, extract_adjectives

ADJ_SWAP = "ADJ_SWAP"
NOUN_SWAP = "NOUN_SWAP"

MODES = ("adj", "noun", "adj+noun", "random-adj")


@dataclass(frozen=True)
class NegativeSample:
    source_caption_id: str
    kind: str
    swapped_index: int
    original_text: str
    replacement_text: str
    caption: TaggedCaption


def _swap_token(caption, index, new_text, suffix):
    tokens = list(caption.tokens)
    tokens[index] = replace(tokens[index], text=new_text)
    return TaggedCaption(
        caption.caption_id + suffix,
        caption.image_id,
        tuple(tokens),
        caption.phrases,
    )


def derive_seed(rng_seed, caption_id):
    """Stable per-caption seed so batches parallelize deterministically."""
    return (int(rng_seed) << 32) ^ zlib.crc32(caption_id.encode("utf-8"))


def _adj_candidates(caption, vocab):
    return [
        (adj_i, noun_i, cls)
        for adj_i, noun_i, cls in extract_adjectives(caption, vocab)
        if cls is not None
    ]


def gen_adj_negative(caption, stats, vocab, rng_seed):
    """Swap one object-modifying adjective for a plausible alternative.

    Returns None when the caption has no adjective-modified vocabulary
    noun, or when the plausible pool for the picked pair is empty.
    """
    candidates = _adj_candidates(caption, vocab)
    if not candidates:
        return None
    rng = np.random.default_rng(rng_seed)
    adj_i, _, cls = candidates[rng.integers(len(candidates))]
    original = caption.tokens[adj_i].text
    pool = [a for a in stats.per_noun_adjs.get(cls, []) if a != original]
    if not pool:
        return None
    replacement = pool[rng.integers(len(pool))]
    return NegativeSample(
        caption.caption_id, ADJ_SWAP, adj_i, original, replacement,
        _swap_token(caption, adj_i, replacement, "#adj"),
    )


def gen_random_adj_negative(caption, stats, vocab, rng_seed):
    """Like gen_adj_negative but the pool is every corpus adjective."""
    candidates = _adj_candidates(caption, vocab)
    if not candidates:
        return None
    rng = np.random.default_rng(rng_seed)
    adj_i, _, _ = candidates[rng.integers(len(candidates))]
    original = caption.tokens[adj_i].text
    pool = [a for a in stats.all_adjectives() if a != original]
    if not pool:
        return None
    replacement = pool[rng.integers(len(pool))]
    return NegativeSample(
        caption.caption_id, ADJ_SWAP, adj_i, original, replacement,
        _swap_token(caption, adj_i, replacement, "#radj"),
    )


def gen_noun_negative(caption, vocab, rng_seed, require_adjective=False):
    """Swap one vocabulary noun for a term of a different class.

    Only single-token vocabulary matches are swappable (a multi-word term
    cannot change class by editing one token). Replacement terms are
    single-token as well. With ``require_adjective`` the noun must be
    adjective-modified, matching the adjective sampler's eligibility.
    """
    if require_adjective:
        modified = {noun_i for _, noun_i, cls in _adj_candidates(caption, vocab)}
    spots = []
    for start, end, cls in vocab.match_spans(caption):
        if end - start != 1:
            continue
        if require_adjective and start not in modified:
            continue
        spots.append((start, cls))
    if not spots:
        return None
    rng = np.random.default_rng(rng_seed)
    index, cls = spots[rng.integers(len(spots))]
    pool = sorted(
        t for t, c in vocab.term_index.items() if c != cls and " " not in t
    )
    if not pool:
        return None
    original = caption.tokens[index].text
    replacement = pool[rng.integers(len(pool))]
    return NegativeSample(
        caption.caption_id, NOUN_SWAP, index, original, replacement,
        _swap_token(caption, index, replacement, "#noun"),
    )


def build_negative_batch(batch, mode, stats, vocab, rng_seed):
    """One negative per eligible caption per requested kind.

    Modes: "adj", "noun", "adj+noun" (two per caption), "random-adj".
    Ineligible captions contribute nothing.
    """
    if mode not in MODES:
        raise ValueError(f"unknown negatives mode {mode!r}; want one of {MODES}")
    out = []
    for caption in batch:
        seed = derive_seed(rng_seed, caption.caption_id)
        if mode in ("adj", "adj+noun"):
            neg = gen_adj_negative(caption, stats, vocab, seed)
            if neg is not None:
                out.append(neg)
        if mode == "random-adj":
            neg = gen_random_adj_negative(caption, stats, vocab, seed)
            if neg is not None:
                out.append(neg)
        if mode in ("noun", "adj+noun"):
            neg = gen_noun_negative(
                caption, vocab, seed + 1, require_adjective=(mode == "adj+noun")
            )
            if neg is not None:
                out.append(neg)
    return out


def negative_to_dict(neg):
    return {
        "source_caption_id": neg.source_caption_id,
        "kind": neg.kind,
        "swapped_index": neg.swapped_index,
        "original_text": neg.original_text,
        "replacement_text": neg.replacement_text,
        "tokens": [t.text for t in neg.caption.tokens],
    }
