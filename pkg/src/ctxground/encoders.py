"""Desk-scale trainable encoders.

A word-embedding table provides context-free token vectors; a small
pre-norm self-attention stack contextualizes them; synthetic region
features pass through a vision projection and a vision-to-language (V2L)
layer into the shared embedding space. All parameters are float64 torch
tensors so gradient checks against central finite differences are tight.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

UNK = "<unk>"

CONTEXT_FREE = "context-free"
CONTEXTUALIZED = "contextualized"
MODES = (CONTEXT_FREE, CONTEXTUALIZED)

VOWELS = "aeiou"

torch.set_default_dtype(torch.float64)


@dataclass
class SceneGrid:
    """Image surrogate: a grid of region feature vectors with GT labels.

    ``gt`` maps (row, col) -> (class_name, attribute); unlisted cells are
    background.
    """

    image_id: str
    height_cells: int
    width_cells: int
    features: np.ndarray  # (h, w, d_v)
    gt: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        expected = (self.height_cells, self.width_cells)
        if self.features.shape[:2] != expected:
            raise ValueError(
                f"scene {self.image_id}: features shape "
                f"{self.features.shape} does not match grid {expected}"
            )

    @property
    def n_regions(self):
        return self.height_cells * self.width_cells

    def flat_features(self):
        return self.features.reshape(self.n_regions, -1)


def load_scenes(path):
    """Load a JSON-lines scene file (features stored row-major, one row
    per cell)."""
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            h, w = obj["h"], obj["w"]
            feats = np.asarray(obj["features"], dtype=np.float64)
            if feats.shape[0] != h * w:
                raise ValueError(
                    f"line {line_no}: scene {obj['image_id']} has "
                    f"{feats.shape[0]} feature rows, expected {h * w}"
                )
            gt = {
                tuple(g["cell"]): (g["class"], g.get("attr", ""))
                for g in obj.get("gt", [])
            }
            for (r, c) in gt:
                if not (0 <= r < h and 0 <= c < w):
                    raise ValueError(
                        f"line {line_no}: gt cell ({r}, {c}) outside {h}x{w} grid"
                    )
            scenes.append(
                SceneGrid(obj["image_id"], h, w, feats.reshape(h, w, -1), gt)
            )
    return scenes


def save_scenes(scenes, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps({
                "image_id": s.image_id,
                "h": s.height_cells,
                "w": s.width_cells,
                "features": [list(map(float, row)) for row in s.flat_features()],
                "gt": [
                    {"cell": [r, c], "class": cls, "attr": attr}
                    for (r, c), (cls, attr) in sorted(s.gt.items())
                ],
            }) + "\n")
    return path


def sinusoidal_positions(n, d):
    """Standard sin/cos position encoding, (n, d)."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.tensor(enc)


class EncoderStack:
    """All trainable parameters plus freeze flags.

    Parameter blocks are named so gradients, SGD updates, and checkpoints
    address them uniformly: ``word_table``, ``bg_emb``, ``vision_w``/``_b``,
    ``v2l_w``/``_b``, and per-layer attention/feedforward/norm tensors.
    """

    def __init__(self, tokens, d=32, d_v=16, d_r=32, layers=2, seed=0,
                 language_frozen=True, v2l_frozen=False):
        self.d = d
        self.d_v = d_v
        self.d_r = d_r
        self.n_layers = layers
        self.seed = seed
        self.step_count = 0
        self.language_frozen = language_frozen
        self.v2l_frozen = v2l_frozen
        self.tokens = [UNK] + sorted(set(tokens) - {UNK})
        self.token_index = {t: i for i, t in enumerate(self.tokens)}

        g = torch.Generator().manual_seed(seed)

        def init(*shape):
            return (torch.rand(*shape, generator=g) - 0.5) * 0.2

        self.params = {
            "word_table": init(len(self.tokens), d),
            "bg_emb": torch.zeros(d),
            "vision_w": init(d_v, d_r),
            "vision_b": torch.zeros(d_r),
            "v2l_w": init(d_r, d),
            "v2l_b": torch.zeros(d),
        }
        for l in range(layers):
            self.params.update({
                f"L{l}.wq": init(d, d),
                f"L{l}.wk": init(d, d),
                f"L{l}.wv": init(d, d),
                f"L{l}.wo": init(d, d),
                f"L{l}.ln1_g": torch.ones(d),
                f"L{l}.ln1_b": torch.zeros(d),
                f"L{l}.ff_w1": init(d, 2 * d),
                f"L{l}.ff_b1": torch.zeros(2 * d),
                f"L{l}.ff_w2": init(2 * d, d),
                f"L{l}.ff_b2": torch.zeros(d),
                f"L{l}.ln2_g": torch.ones(d),
                f"L{l}.ln2_b": torch.zeros(d),
            })

    # ---- freeze handling -------------------------------------------------
    LANGUAGE_BLOCKS = ("word_table",)

    def frozen_blocks(self):
        frozen = set()
        if self.language_frozen:
            frozen.add("word_table")
            frozen.update(k for k in self.params if k.startswith("L"))
        if self.v2l_frozen:
            frozen.update(("v2l_w", "v2l_b"))
        return frozen

    def trainable_blocks(self):
        frozen = self.frozen_blocks()
        return [k for k in self.params if k not in frozen]

    # ---- forward pieces (torch, differentiable) --------------------------
    def token_rows(self, texts, params=None):
        p = params or self.params
        idx = [self.token_index.get(t, 0) for t in texts]
        return p["word_table"][idx]

    def contextualize_rows(self, rows, params=None):
        # Accepts (n, d) or a batch (b, n, d) of same-length captions.
        p = params or self.params
        n = rows.shape[-2]
        x = rows + sinusoidal_positions(n, self.d)
        for l in range(self.n_layers):
            x = self._layer(x, l, p)
        return x

    def _layer(self, x, l, p):
        h = _layer_norm(x, p[f"L{l}.ln1_g"], p[f"L{l}.ln1_b"])
        q = h @ p[f"L{l}.wq"]
        k = h @ p[f"L{l}.wk"]
        v = h @ p[f"L{l}.wv"]
        attn = torch.softmax(q @ k.transpose(-2, -1) / np.sqrt(self.d), dim=-1)
        x = x + (attn @ v) @ p[f"L{l}.wo"]
        h = _layer_norm(x, p[f"L{l}.ln2_g"], p[f"L{l}.ln2_b"])
        ff = torch.relu(h @ p[f"L{l}.ff_w1"] + p[f"L{l}.ff_b1"])
        return x + ff @ p[f"L{l}.ff_w2"] + p[f"L{l}.ff_b2"]

    def project_regions(self, flat_features, params=None):
        p = params or self.params
        x = torch.as_tensor(flat_features, dtype=torch.float64)
        r = x @ p["vision_w"] + p["vision_b"]
        return r @ p["v2l_w"] + p["v2l_b"]

    def snapshot(self):
        import copy
        clone = object.__new__(EncoderStack)
        clone.__dict__ = copy.deepcopy(
            {k: v for k, v in self.__dict__.items() if k != "params"}
        )
        clone.params = {k: v.detach().clone() for k, v in self.params.items()}
        return clone


def _layer_norm(x, gain, bias, eps=1e-6):
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def build_token_inventory(corpus, vocab=None, extra=("a", "an", ".")):
    """All token texts the encoder must know: corpus tokens, vocabulary
    terms (split into words), and the prompt tokens."""
    tokens = set(extra)
    for cap in corpus:
        tokens.update(t.text for t in cap.tokens)
    if vocab is not None:
        for term in vocab.term_index:
            tokens.update(term.split(" "))
    return sorted(tokens)


# ---- spec operations ------------------------------------------------------

def embed_caption_context_free(caption, enc, params=None):
    """(n_C, d) static table rows; OOV tokens hit the UNK row."""
    texts = [t.text for t in caption.tokens]
    if not texts:
        return torch.zeros(0, enc.d)
    return enc.token_rows(texts, params)


def embed_caption_contextualized(caption, enc, params=None):
    """(n_C, d) rows from the self-attention stack over table rows plus
    sinusoidal positions; every row depends on the whole caption."""
    rows = embed_caption_context_free(caption, enc, params)
    if rows.shape[0] == 0:
        return rows
    return enc.contextualize_rows(rows, params)


def embed_caption(caption, enc, mode, params=None):
    if mode == CONTEXT_FREE:
        return embed_caption_context_free(caption, enc, params)
    if mode == CONTEXTUALIZED:
        return embed_caption_contextualized(caption, enc, params)
    raise ValueError(f"unknown grounding mode {mode!r}")


def embed_regions(scene, enc, mode=CONTEXT_FREE, params=None):
    """(n_I, d) projected region embeddings, grid flattened row-major.

    The same projection serves both grounding modes; ``mode`` names the
    target space the output is interpreted in.
    """
    if mode not in MODES:
        raise ValueError(f"unknown grounding mode {mode!r}")
    flat = scene.flat_features()
    if flat.shape[1] != enc.d_v:
        raise ValueError(
            f"scene {scene.image_id}: feature dim {flat.shape[1]} != "
            f"encoder d_v {enc.d_v}"
        )
    return enc.project_regions(flat, params)


@dataclass(frozen=True)
class ClassEmbedding:
    class_name: str
    vector: np.ndarray
    mode: str
    prompt_used: bool


def prompt_tokens(name):
    """CLIP-style prompt around a class name: "a/an <name> ." """
    article = "an" if name[0] in VOWELS else "a"
    return [article] + name.split(" ") + ["."]


def build_class_embeddings(class_names, enc, mode, use_prompt=False):
    """One embedding per class name.

    Context-free: mean of table rows over the name's words. Contextualized
    with prompt: run the prompt through the stack and average the rows at
    the name's positions; without prompt, contextualize the bare name.
    """
    if not class_names:
        raise ValueError("empty class list")
    from .corpus import TaggedCaption, Token

    def as_caption(words):
        toks = tuple(Token(w, "other", 0, "dep") for w in words)
        return TaggedCaption("_class", "_class", toks, ())

    out = []
    for name in class_names:
        words = name.split(" ")
        if mode == CONTEXT_FREE:
            rows = embed_caption_context_free(as_caption(words), enc)
            vec = rows.mean(dim=0)
            used_prompt = False
        elif mode == CONTEXTUALIZED:
            if use_prompt:
                toks = prompt_tokens(name)
                rows = embed_caption_contextualized(as_caption(toks), enc)
                vec = rows[1:1 + len(words)].mean(dim=0)
            else:
                rows = embed_caption_contextualized(as_caption(words), enc)
                vec = rows.mean(dim=0)
            used_prompt = use_prompt
        else:
            raise ValueError(f"unknown grounding mode {mode!r}")
        out.append(
            ClassEmbedding(name, vec.detach().numpy(), mode, used_prompt)
        )
    return out


def apply_gradients(enc, grads, learning_rate):
    """In-place SGD step, skipping frozen blocks; returns enc."""
    frozen = enc.frozen_blocks()
    for name, grad in grads.items():
        if name in frozen:
            continue
        g = torch.as_tensor(grad, dtype=torch.float64)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in block {name!r}")
        enc.params[name] = enc.params[name] - learning_rate * g
    enc.step_count += 1
    return enc


# ---- checkpointing ---------------------------------------------------------

def save_checkpoint(enc, path):
    blob = {
        "dims": {"d": enc.d, "d_v": enc.d_v, "d_r": enc.d_r,
                 "layers": enc.n_layers},
        "seed": enc.seed,
        "step_count": enc.step_count,
        "freeze": {"language_frozen": enc.language_frozen,
                   "v2l_frozen": enc.v2l_frozen},
        "tokens": enc.tokens,
        "params": {k: v.numpy().tolist() for k, v in enc.params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)
    return path


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    dims = blob["dims"]
    enc = EncoderStack(
        blob["tokens"], d=dims["d"], d_v=dims["d_v"], d_r=dims["d_r"],
        layers=dims["layers"], seed=blob["seed"],
        language_frozen=blob["freeze"]["language_frozen"],
        v2l_frozen=blob["freeze"]["v2l_frozen"],
    )
    if enc.tokens != blob["tokens"]:
        raise ValueError("checkpoint token inventory is not in canonical order")
    enc.step_count = blob["step_count"]
    for name, value in blob["params"].items():
        t = torch.tensor(value, dtype=torch.float64)
        if name not in enc.params or t.shape != enc.params[name].shape:
            raise ValueError(
                f"checkpoint block {name!r} has shape {tuple(t.shape)}, "
                f"expected {tuple(enc.params.get(name, torch.zeros(0)).shape)}"
            )
        enc.params[name] = t
    return enc
