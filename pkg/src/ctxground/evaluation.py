"""Measurement protocols: unsupervised phrase grounding (AP@t),
text-to-region retrieval (P@k/R@k), open-vocabulary region
classification, and the attribute-sensitivity probe.
"""

import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy import ndimage

from . import encoders as E
from . import negatives as N
from .corpus import TaggedCaption, extract_adjectives

# probe scenarios
AS_IS = "AS_IS"
DROP_ADJ = "DROP_ADJ"
PLAUSIBLE_CHANGE = "PLAUSIBLE_CHANGE"
RANDOM_CHANGE = "RANDOM_CHANGE"
SCENARIOS = (AS_IS, DROP_ADJ, PLAUSIBLE_CHANGE, RANDOM_CHANGE)

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
EIGHT_CONNECTED = np.ones((3, 3))


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float = 0.0

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box {self}")
        if min(self.x0, self.y0) < 0:
            raise ValueError(f"negative coordinates in {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def iou(a, b):
    """Intersection over union of two half-open boxes, in [0, 1]."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def ground_word(region_emb, grid_shape, word_vec, th_sim, stride=32,
                connectivity=4):
    """Boxes from connected components of the thresholded similarity map.

    ``region_emb`` is (n_I, d) row-major over ``grid_shape`` = (h, w).
    Box score = max similarity inside the component; coordinates are cell
    rectangles scaled by ``stride`` to pixels.
    """
    h, w = grid_shape
    sims = np.asarray(region_emb, dtype=np.float64) @ np.asarray(
        word_vec, dtype=np.float64
    )
    grid = sims.reshape(h, w)
    mask = grid >= th_sim
    if not mask.any():
        return []
    structure = FOUR_CONNECTED if connectivity == 4 else EIGHT_CONNECTED
    labels, n = ndimage.label(mask, structure=structure)
    boxes = []
    for comp in range(1, n + 1):
        rows, cols = np.nonzero(labels == comp)
        boxes.append(Box(
            x0=float(cols.min() * stride),
            y0=float(rows.min() * stride),
            x1=float((cols.max() + 1) * stride),
            y1=float((rows.max() + 1) * stride),
            score=float(grid[rows, cols].max()),
        ))
    return boxes


def average_precision(predictions, n_gt, iou_threshold, gts_by_image):
    """AP over one class: rank by score, greedily match unclaimed GT.

    ``predictions`` is a list of (image_id, Box); ``gts_by_image`` maps
    image_id -> list of GT boxes for the class.
    """
    if n_gt == 0:
        return None
    order = sorted(range(len(predictions)),
                   key=lambda i: -predictions[i][1].score)
    matched = {img: [False] * len(b) for img, b in gts_by_image.items()}
    tp = 0
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        image_id, box = predictions[i]
        gts = gts_by_image.get(image_id, [])
        best, best_iou = None, iou_threshold
        for g, gt_box in enumerate(gts):
            if matched[image_id][g]:
                continue
            v = iou(box, gt_box)
            if v >= best_iou:
                best, best_iou = g, v
        if best is not None:
            matched[image_id][best] = True
            tp += 1
            ap += tp / rank
    return ap / n_gt


def scene_gt_boxes(scene, stride=32, connectivity=4):
    """Per-class GT boxes from connected components of a scene's labeled
    cells (the desk-scale stand-in for annotated boxes)."""
    classes = sorted({cls for cls, _ in scene.gt.values()})
    structure = FOUR_CONNECTED if connectivity == 4 else EIGHT_CONNECTED
    out = {}
    for cls in classes:
        mask = np.zeros((scene.height_cells, scene.width_cells), dtype=bool)
        for (r, c), (g_cls, _) in scene.gt.items():
            if g_cls == cls:
                mask[r, c] = True
        labels, n = ndimage.label(mask, structure=structure)
        boxes = []
        for comp in range(1, n + 1):
            rows, cols = np.nonzero(labels == comp)
            boxes.append(Box(
                x0=float(cols.min() * stride), y0=float(rows.min() * stride),
                x1=float((cols.max() + 1) * stride),
                y1=float((rows.max() + 1) * stride),
            ))
        out[cls] = boxes
    return out


def apply_scenario(caption, scenario, stats, vocab, rng_seed):
    """Caption transform for one probe scenario.

    DROP_ADJ deletes the object-modifying adjectives; the change
    scenarios reuse the negative samplers so the probe and training share
    one definition of plausibility. A caption with nothing to modify is
    returned unchanged.
    """
    if scenario == AS_IS:
        return caption
    if scenario == DROP_ADJ:
        doomed = {
            adj_i for adj_i, _, cls in extract_adjectives(caption, vocab)
            if cls is not None
        }
        if not doomed:
            return caption
        keep = [i for i in range(len(caption.tokens)) if i not in doomed]
        new_index = {old: new for new, old in enumerate(keep)}
        tokens = []
        for old in keep:
            tok = caption.tokens[old]
            h = tok.head
            while h in doomed:
                nxt = caption.tokens[h].head
                h = old if nxt == h else nxt
            tokens.append(dc_replace(tok, head=new_index.get(h, new_index[old])))
        phrases = []
        for pk, (start, end) in caption.phrases:
            surviving = [new_index[i] for i in range(start, end)
                         if i not in doomed]
            if surviving:
                phrases.append((pk, (surviving[0], surviving[-1] + 1)))
        return TaggedCaption(caption.caption_id, caption.image_id,
                             tuple(tokens), tuple(phrases))
    if scenario == PLAUSIBLE_CHANGE:
        neg = N.gen_adj_negative(caption, stats, vocab, rng_seed)
    elif scenario == RANDOM_CHANGE:
        neg = N.gen_random_adj_negative(caption, stats, vocab, rng_seed)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return caption if neg is None else neg.caption


def _vocab_word_vectors(caption, rows, vocab, phrase_level=False):
    """(canonical_class, d-vector) per vocabulary match in the caption;
    multi-word matches average their token rows.

    With ``phrase_level`` the vector also averages in the rows of amod
    modifiers pointing into the match, so grounding queries the attribute
    phrase ("brown bear") rather than the bare noun.
    """
    out = []
    for start, end, cls in vocab.match_spans(caption):
        idx = list(range(start, end))
        if phrase_level:
            idx += [i for i, tok in enumerate(caption.tokens)
                    if tok.deprel == "amod" and start <= tok.head < end]
        vec = rows[sorted(idx)].mean(axis=0)
        out.append((cls, vec))
    return out


def phrase_grounding_ap(corpus, scenes, enc, vocab, mode=E.CONTEXTUALIZED,
                        scenario=AS_IS, t=30, th_sim=10.0, stats=None,
                        stride=32, connectivity=4, rng_seed=0,
                        phrase_level=False):
    """Mean AP@t of unsupervised boxes over vocabulary words.

    Returns a dict with per-class AP, the macro mean (primary), and a
    per-caption-averaged alternative.
    """
    by_id = {s.image_id: s for s in scenes}
    predictions = {}        # class -> list of (image_id, Box)
    caption_aps = []
    gt_box_cache = {s.image_id: scene_gt_boxes(s, stride, connectivity)
                    for s in scenes}
    any_gt = any(boxes for per in gt_box_cache.values()
                 for boxes in per.values())
    if not any_gt:
        raise ValueError("no ground-truth boxes in any scene")
    for caption in corpus:
        scene = by_id.get(caption.image_id)
        if scene is None:
            continue
        cap = apply_scenario(caption, scenario, stats, vocab,
                             N.derive_seed(rng_seed, caption.caption_id))
        rows = E.embed_caption(cap, enc, mode).detach().numpy()
        regions = E.embed_regions(scene, enc, mode).detach().numpy()
        shape = (scene.height_cells, scene.width_cells)
        cap_hits = []
        for cls, vec in _vocab_word_vectors(cap, rows, vocab, phrase_level):
            boxes = ground_word(regions, shape, vec, th_sim, stride,
                                connectivity)
            predictions.setdefault(cls, []).extend(
                (scene.image_id, b) for b in boxes
            )
            gt = gt_box_cache[scene.image_id].get(cls, [])
            if gt:
                ap = average_precision(
                    [(scene.image_id, b) for b in boxes], len(gt), t / 100.0,
                    {scene.image_id: gt},
                )
                cap_hits.append(ap)
        if cap_hits:
            caption_aps.append(float(np.mean(cap_hits)))
    per_class = {}
    for cls, preds in sorted(predictions.items()):
        gts_by_image = {
            img: per.get(cls, []) for img, per in gt_box_cache.items()
            if per.get(cls)
        }
        n_gt = sum(len(b) for b in gts_by_image.values())
        ap = average_precision(preds, n_gt, t / 100.0, gts_by_image)
        if ap is not None:
            per_class[cls] = ap
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {
        "per_class_ap": per_class,
        "mean_ap": mean_ap,
        "per_caption_mean_ap": float(np.mean(caption_aps)) if caption_aps else 0.0,
        "n_captions": len(caption_aps),
    }


def suggest_th_sim(corpus, scenes, enc, vocab, mode=E.CONTEXTUALIZED,
                   quantile=0.85, phrase_level=False):
    """Data-driven similarity threshold: a quantile of all region-word
    similarities for vocabulary words over paired scenes.

    Desk-scale embeddings do not live on the paper-reported scale, so a
    fixed threshold is rarely meaningful; this picks one from the model.
    """
    by_id = {s.image_id: s for s in scenes}
    sims = []
    for caption in corpus:
        scene = by_id.get(caption.image_id)
        if scene is None:
            continue
        rows = E.embed_caption(caption, enc, mode).detach().numpy()
        regions = E.embed_regions(scene, enc, mode).detach().numpy()
        for _, vec in _vocab_word_vectors(caption, rows, vocab, phrase_level):
            sims.extend(regions @ vec)
    if not sims:
        raise ValueError("no vocabulary words found in the paired corpus")
    return float(np.quantile(sims, quantile))


# ---- retrieval ---------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalQuery:
    attribute: str
    object: str
    embedding: np.ndarray


def build_retrieval_queries(pairs, enc, mode=E.CONTEXTUALIZED):
    """Query embedding = mean of the attribute and object token
    embeddings, contextualized together."""
    from .corpus import Token
    queries = []
    for attr, obj in pairs:
        words = [attr] + obj.split(" ")
        toks = tuple(Token(w, "other", 0, "dep") for w in words)
        cap = TaggedCaption("_q", "_q", toks, ())
        rows = E.embed_caption(cap, enc, mode).detach().numpy()
        queries.append(RetrievalQuery(attr, obj, rows.mean(axis=0)))
    return queries


def build_region_gallery(scenes, enc, mode=E.CONTEXTUALIZED):
    """(embedding, gt_attribute, gt_object) per labeled cell."""
    gallery = []
    for scene in scenes:
        regions = E.embed_regions(scene, enc, mode).detach().numpy()
        for (r, c), (cls, attr) in sorted(scene.gt.items()):
            gallery.append((regions[r * scene.width_cells + c], attr, cls))
    return gallery


def retrieval_eval(queries, gallery, ks):
    """recall@k / precision@k over dot-product rankings.

    Correct = attribute and object both match; ties broken by gallery
    index; k larger than the gallery is clamped with a warning.
    """
    if not gallery:
        raise ValueError("empty gallery")
    emb = np.stack([g[0] for g in gallery])
    ks_used = []
    for k in ks:
        if k > len(gallery):
            warnings.warn(
                f"k={k} exceeds gallery size {len(gallery)}; clamping"
            )
            k = len(gallery)
        ks_used.append(k)
    recall = {k: 0.0 for k in ks_used}
    precision = {k: 0.0 for k in ks_used}
    for q in queries:
        scores = emb @ q.embedding
        order = np.argsort(-scores, kind="stable")
        correct = np.array(
            [gallery[i][1] == q.attribute and gallery[i][2] == q.object
             for i in order]
        )
        for k in ks_used:
            hits = int(correct[:k].sum())
            recall[k] += 1.0 if hits > 0 else 0.0
            precision[k] += hits / k
    nq = max(len(queries), 1)
    return {
        "recall": {k: v / nq for k, v in recall.items()},
        "precision": {k: v / nq for k, v in precision.items()},
        "n_queries": len(queries),
        "n_gallery": len(gallery),
    }


# ---- classification -----------------------------------------------------------

BASE = "BASE"
TARGET = "TARGET"
UNION = "UNION"


def fit_linear_probe(scenes, enc, class_names, mode=E.CONTEXTUALIZED,
                     steps=300, lr=0.5, seed=0):
    """Cross-entropy probe over region embeddings on labeled scenes.

    Stands in for supervised finetuning: returns (class_weight_rows,
    background_weight) aligned with ``class_names``. Cells outside ``gt``
    are background. Trained with full-batch gradient descent; the region
    encoder stays fixed.
    """
    import torch
    feats, labels = [], []
    index = {name: i for i, name in enumerate(class_names)}
    bg = len(class_names)
    for scene in scenes:
        regions = E.embed_regions(scene, enc, mode).detach()
        for r in range(scene.height_cells):
            for c in range(scene.width_cells):
                cls_attr = scene.gt.get((r, c))
                if cls_attr is not None and cls_attr[0] not in index:
                    continue  # class outside the probe's label set
                feats.append(regions[r * scene.width_cells + c])
                labels.append(bg if cls_attr is None else index[cls_attr[0]])
    X = torch.stack(feats)
    y = torch.tensor(labels)
    g = torch.Generator().manual_seed(seed)
    W = (torch.rand(bg + 1, X.shape[1], generator=g) - 0.5) * 0.02
    W.requires_grad_(True)
    for _ in range(steps):
        loss = torch.nn.functional.cross_entropy(X @ W.T, y)
        (grad,) = torch.autograd.grad(loss, W)
        with torch.no_grad():
            W -= lr * grad
    W = W.detach().numpy()
    return W[:bg], W[bg]


def classify_regions(scenes, enc, vocab, class_set=UNION,
                     mode=E.CONTEXTUALIZED, use_prompt=False, probe=None):
    """Argmax dot-product region classification over class embeddings
    plus the background embedding.

    ``probe`` optionally supplies (class_rows, background_row) from
    fit_linear_probe in place of text-derived embeddings. Accuracy is
    reported over labeled (non-background) GT cells, bucketed
    base/target/all.
    """
    base = vocab.base_names()
    target = vocab.target_names()
    if class_set == BASE:
        names = base
    elif class_set == TARGET:
        names = target
    elif class_set == UNION:
        names = base + target
    else:
        raise ValueError(f"unknown class set {class_set!r}")
    if not names:
        raise ValueError(f"class set {class_set} is empty")
    if probe is not None:
        class_rows, bg_row = probe
        class_rows = np.asarray(class_rows)
        bg_row = np.asarray(bg_row)
    else:
        embs = E.build_class_embeddings(names, enc, mode, use_prompt)
        class_rows = np.stack([e.vector for e in embs])
        bg_row = enc.params["bg_emb"].detach().numpy()
    weights = np.vstack([class_rows, bg_row])  # background is last
    correct = {n: 0 for n in names}
    totals = {n: 0 for n in names}
    for scene in scenes:
        regions = E.embed_regions(scene, enc, mode).detach().numpy()
        scores = regions @ weights.T
        pred = scores.argmax(axis=1)
        for (r, c), (cls, _) in scene.gt.items():
            if cls not in totals:
                continue
            totals[cls] += 1
            if pred[r * scene.width_cells + c] < len(names) and \
                    names[pred[r * scene.width_cells + c]] == cls:
                correct[cls] += 1
    per_class = {
        n: (correct[n] / totals[n]) if totals[n] else None for n in names
    }

    def bucket(members):
        vals = [per_class[n] for n in members if per_class[n] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "per_class_accuracy": per_class,
        "base_accuracy": bucket([n for n in names if n in base]),
        "target_accuracy": bucket([n for n in names if n in target]),
        "mean_accuracy": bucket(names),
        "class_set": class_set,
        "n_cells": int(sum(totals.values())),
    }


def attribute_probe(corpus, scenes, enc, vocab, stats, t=30, th_sim=10.0,
                    mode=E.CONTEXTUALIZED, seed=0, stride=32,
                    phrase_level=False):
    """AP@t under the four caption-modification scenarios, shared seed."""
    results = {}
    for scenario in SCENARIOS:
        report = phrase_grounding_ap(
            corpus, scenes, enc, vocab, mode=mode, scenario=scenario, t=t,
            th_sim=th_sim, stats=stats, stride=stride, rng_seed=seed,
            phrase_level=phrase_level,
        )
        results[scenario] = report["mean_ap"]
    return {
        "as_is": results[AS_IS],
        "drop": results[DROP_ADJ],
        "plausible": results[PLAUSIBLE_CHANGE],
        "random": results[RANDOM_CHANGE],
        "deltas": {
            "drop": results[DROP_ADJ] - results[AS_IS],
            "plausible": results[PLAUSIBLE_CHANGE] - results[AS_IS],
            "random": results[RANDOM_CHANGE] - results[AS_IS],
        },
    }
