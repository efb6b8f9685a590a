"""Planted synthetic data: scenes with class/attribute structure and
matching templated captions.

Each class has a feature-space prototype; each attribute an offset mixed
in with weight ``attribute_effect``. Captions mention the first placed
object as "<adj> <noun> ..." with correct amod annotations, so every
caption has exactly one adjective over the vocabulary, and the noun sits
at the same position as in the "a <name> ." classification prompt.

Each class only ever appears with a proper subset of the attributes (when
there are enough attributes to carve subsets from), so adjective
plausibility is a real constraint: a class's plausible-adjective pool
differs from the full adjective pool.
"""

import json
from dataclasses import dataclass

import numpy as np

from .corpus import TaggedCaption, Token, save_corpus
from .encoders import SceneGrid, save_scenes

CLASS_NOUNS = ["car", "dog", "ball", "cup", "tree", "bird", "fish", "hat",
               "boat", "lamp", "sock", "cake", "frog", "star", "bell", "drum"]
ATTRIBUTES = ["red", "blue", "green", "shiny", "tall", "small", "dark", "pale"]
SURFACES = ["table", "field", "road"]  # kept out of the vocabulary


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    n_attributes: int = 4
    n_scenes: int = 200
    grid_h: int = 6
    grid_w: int = 6
    d_v: int = 16
    noise_sigma: float = 0.1
    attribute_effect: float = 0.7
    max_objects: int = 3
    object_size: int = 2  # square side, in cells

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 0.0 <= self.attribute_effect <= 1.0:
            raise ValueError("attribute_effect must be in [0, 1]")
        if self.n_classes > len(CLASS_NOUNS):
            raise ValueError(f"at most {len(CLASS_NOUNS)} classes supported")
        if self.n_attributes > len(ATTRIBUTES):
            raise ValueError(f"at most {len(ATTRIBUTES)} attributes supported")
        fit = (self.grid_h - self.object_size + 1) * \
              (self.grid_w - self.object_size + 1)
        if fit < self.max_objects:
            raise ValueError("grid too small for the requested object count")


def _place_objects(rng, spec):
    """Non-overlapping square placements: list of (row, col) corners."""
    k = int(rng.integers(1, spec.max_objects + 1))
    taken = np.zeros((spec.grid_h, spec.grid_w), dtype=bool)
    corners = []
    s = spec.object_size
    for _ in range(k):
        for _attempt in range(50):
            r = int(rng.integers(0, spec.grid_h - s + 1))
            c = int(rng.integers(0, spec.grid_w - s + 1))
            if not taken[r:r + s, c:c + s].any():
                taken[r:r + s, c:c + s] = True
                corners.append((r, c))
                break
    return corners


def _caption_tokens(adj, noun, surface, template):
    if template == 0:
        # "<adj> <noun> on the <surface>", PP span [2, 5)
        tokens = (
            Token(adj, "adj", 1, "amod"),
            Token(noun, "noun", 1, "root"),
            Token("on", "prep", 1, "prep"),
            Token("the", "det", 4, "det"),
            Token(surface, "noun", 2, "pobj"),
        )
        phrases = (("pp", (2, 5)),)
    else:
        # "<adj> <noun> sitting on the <surface>", VP span [2, 6)
        tokens = (
            Token(adj, "adj", 1, "amod"),
            Token(noun, "noun", 1, "root"),
            Token("sitting", "verb", 1, "acl"),
            Token("on", "prep", 2, "prep"),
            Token("the", "det", 5, "det"),
            Token(surface, "noun", 3, "pobj"),
        )
        phrases = (("vp", (2, 6)),)
    return tokens, phrases


def _allowed_attributes(n_classes, n_attributes):
    """Per-class attribute pools: consecutive wrap-around subsets of about
    half the attributes, minimum two (so plausible swaps always exist).
    Falls back to the full set when it cannot be a proper subset."""
    k = max(2, (n_attributes + 1) // 2)
    if k >= n_attributes:
        return [list(range(n_attributes))] * n_classes
    return [[(c + j) % n_attributes for j in range(k)]
            for c in range(n_classes)]


def generate_synthetic(spec, seed, out_dir=None):
    """Build (scenes, corpus, synonym_entries); optionally write files.

    Deterministic per seed. When ``out_dir`` is set, writes scenes.jsonl,
    corpus.jsonl, and synonyms.json there and returns their paths too.
    """
    rng = np.random.default_rng(seed)
    classes = CLASS_NOUNS[:spec.n_classes]
    attrs = ATTRIBUTES[:spec.n_attributes]
    prototypes = rng.normal(size=(spec.n_classes, spec.d_v))
    offsets = rng.normal(size=(spec.n_attributes, spec.d_v))
    allowed = _allowed_attributes(spec.n_classes, spec.n_attributes)

    scenes, corpus = [], []
    s = spec.object_size
    for i in range(spec.n_scenes):
        image_id = f"syn{i:05d}"
        features = rng.normal(0.0, spec.noise_sigma,
                              size=(spec.grid_h, spec.grid_w, spec.d_v))
        gt = {}
        placed = []
        for (r, c) in _place_objects(rng, spec):
            cls_i = int(rng.integers(spec.n_classes))
            pool = allowed[cls_i]
            attr_i = pool[int(rng.integers(len(pool)))]
            placed.append((cls_i, attr_i))
            blob = prototypes[cls_i] + spec.attribute_effect * offsets[attr_i]
            for rr in range(r, r + s):
                for cc in range(c, c + s):
                    features[rr, cc] += blob
                    gt[(rr, cc)] = (classes[cls_i], attrs[attr_i])
        scenes.append(SceneGrid(image_id, spec.grid_h, spec.grid_w,
                                features, gt))
        cls_i, attr_i = placed[0]
        surface = SURFACES[int(rng.integers(len(SURFACES)))]
        template = int(rng.integers(2))
        tokens, phrases = _caption_tokens(attrs[attr_i], classes[cls_i],
                                          surface, template)
        corpus.append(TaggedCaption(f"cap{i:05d}", image_id, tokens, phrases))

    synonym_entries = [{"name": n, "synonyms": []} for n in classes]
    base_names = classes[:max(2, (3 * spec.n_classes) // 4)]

    result = {
        "scenes": scenes,
        "corpus": corpus,
        "synonyms": synonym_entries,
        "base_names": base_names,
    }
    if out_dir is not None:
        import os
        os.makedirs(out_dir, exist_ok=True)
        result["scenes_path"] = save_scenes(
            scenes, os.path.join(out_dir, "scenes.jsonl"))
        result["corpus_path"] = os.path.join(out_dir, "corpus.jsonl")
        save_corpus(corpus, result["corpus_path"])
        result["synonyms_path"] = os.path.join(out_dir, "synonyms.json")
        with open(result["synonyms_path"], "w", encoding="utf-8") as fh:
            json.dump(synonym_entries, fh, indent=1)
        result["base_names_path"] = os.path.join(out_dir, "base_names.json")
        with open(result["base_names_path"], "w", encoding="utf-8") as fh:
            json.dump(base_names, fh)
    return result
