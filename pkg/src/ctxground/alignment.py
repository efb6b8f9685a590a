"""Grounding scores, contrastive losses, gradients, and pretraining.

The grounding score of an image-caption pair is the attention-weighted
mean of region-word dot products, with attention softmax-normalized over
regions per word. Image-side and caption-side InfoNCE-style losses
contrast the score against other captions (plus swapped negatives) and
other images respectively.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import logsumexp

from . import encoders as E
from . import negatives as N


@dataclass(frozen=True)
class GroundingResult:
    sim: np.ndarray    # (n_I, n_C)
    attn: np.ndarray   # (n_I, n_C), columns sum to 1
    score: float


@dataclass(frozen=True)
class BatchLoss:
    loss_image_side: float     # summed over the batch
    loss_caption_side: float   # summed over the batch
    per_pair_scores: np.ndarray  # (|B_I|, |B_C| + |B_N|)
    total: float               # (img + cap) / batch size


def attention(sim):
    """Column-wise softmax over regions, max-subtracted for stability."""
    sim = np.asarray(sim, dtype=np.float64)
    shifted = sim - sim.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def grounding_score(region_emb, word_emb, normalize=False):
    """Score an (n_I, d) region matrix against an (n_C, d) word matrix."""
    R = _to_numpy(region_emb)
    W = _to_numpy(word_emb)
    if W.shape[0] == 0:
        raise ValueError("grounding score undefined for an empty caption")
    if R.shape[0] == 0:
        raise ValueError("grounding score undefined with zero regions")
    if normalize:
        R = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), 1e-12)
        W = W / np.maximum(np.linalg.norm(W, axis=1, keepdims=True), 1e-12)
    sim = R @ W.T
    attn = attention(sim)
    score = float((attn * sim).sum() / W.shape[0])
    return GroundingResult(sim, attn, score)


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def loss_image_side(score_pos, scores_others):
    """-log softmax of the positive score against competing captions."""
    all_scores = np.concatenate(([score_pos], np.asarray(scores_others, dtype=np.float64).ravel()))
    return float(logsumexp(all_scores) - score_pos)


def loss_caption_side(score_pos, scores_other_images):
    """Symmetric loss contrasting over images; negatives never enter."""
    return loss_image_side(score_pos, scores_other_images)


# ---- differentiable (torch) path -------------------------------------------

def _score_t(R, W, normalize=False):
    if normalize:
        R = R / torch.clamp(R.norm(dim=1, keepdim=True), min=1e-12)
        W = W / torch.clamp(W.norm(dim=1, keepdim=True), min=1e-12)
    sim = R @ W.T
    attn = torch.softmax(sim, dim=0)
    return (attn * sim).sum() / W.shape[0]


def _embed_captions_bucketed(caps, enc, mode, params):
    """Word matrices for many captions, contextualizing same-length
    captions in one stacked pass."""
    rows_list = [E.embed_caption_context_free(c, enc, params) for c in caps]
    if mode == E.CONTEXT_FREE:
        return rows_list
    out = [None] * len(caps)
    buckets = {}
    for i, r in enumerate(rows_list):
        buckets.setdefault(r.shape[0], []).append(i)
    for length, idxs in buckets.items():
        if length == 0:
            for i in idxs:
                out[i] = rows_list[i]
            continue
        x = enc.contextualize_rows(
            torch.stack([rows_list[i] for i in idxs]), params
        )
        for j, i in enumerate(idxs):
            out[i] = x[j]
    return out


def _batch_score_matrix(images, captions, negs, enc, mode, params,
                        normalize=False):
    regions = [E.embed_regions(s, enc, mode, params) for s in images]
    all_captions = list(captions) + [n.caption for n in negs]
    words = _embed_captions_bucketed(all_captions, enc, mode, params)
    if len({R.shape[0] for R in regions}) != 1:
        rows = [torch.stack([_score_t(R, W, normalize) for W in words])
                for R in regions]
        return torch.stack(rows)
    Rb = torch.stack(regions)  # (|B_I|, n_I, d)
    if normalize:
        Rb = Rb / torch.clamp(Rb.norm(dim=-1, keepdim=True), min=1e-12)
    col_parts = {}
    buckets = {}
    for j, W in enumerate(words):
        buckets.setdefault(W.shape[0], []).append(j)
    for length, idxs in buckets.items():
        Wb = torch.stack([words[j] for j in idxs])  # (m, n_C, d)
        if normalize:
            Wb = Wb / torch.clamp(Wb.norm(dim=-1, keepdim=True), min=1e-12)
        sim = torch.einsum("bid,mjd->bmij", Rb, Wb)
        attn = torch.softmax(sim, dim=2)
        scores = (attn * sim).sum(dim=(2, 3)) / length  # (|B_I|, m)
        col_parts.update(zip(idxs, scores.unbind(dim=1)))
    cols = torch.stack([col_parts[j] for j in range(len(words))], dim=1)
    return cols  # (|B_I|, |B_C| + |B_N|)


def _batch_loss_t(images, captions, negs, enc, mode, params, normalize=False):
    n = len(captions)
    if len(images) != n:
        raise ValueError(
            f"batch length mismatch: {len(images)} images, {n} captions"
        )
    S = _batch_score_matrix(images, captions, negs, enc, mode, params,
                            normalize)
    # image side: row i against all captions and negatives
    loss_img = (torch.logsumexp(S, dim=1) - torch.diag(S)).sum()
    # caption side: column j against images, B_C only
    Sc = S[:, :n]
    loss_cap = (torch.logsumexp(Sc, dim=0) - torch.diag(Sc)).sum()
    if not torch.isfinite(loss_img) or not torch.isfinite(loss_cap):
        raise FloatingPointError("non-finite loss in batch forward")
    return loss_img, loss_cap, S


def batch_forward(images, captions, negs, enc, mode, normalize=False):
    """Full score matrix plus both contrastive losses for one batch."""
    loss_img, loss_cap, S = _batch_loss_t(
        images, captions, negs, enc, mode, enc.params, normalize
    )
    n = len(captions)
    total = float((loss_img + loss_cap) / n)
    return BatchLoss(float(loss_img), float(loss_cap), S.detach().numpy(),
                     total)


def batch_backward(images, captions, negs, enc, mode, normalize=False):
    """Gradients of the averaged total loss for every parameter block.

    Frozen blocks get exact zero arrays.
    """
    params = {k: v.detach().clone() for k, v in enc.params.items()}
    trainable = enc.trainable_blocks()
    for k in trainable:
        params[k].requires_grad_(True)
    loss_img, loss_cap, _ = _batch_loss_t(
        images, captions, negs, enc, mode, params, normalize
    )
    total = (loss_img + loss_cap) / len(captions)
    grads_t = torch.autograd.grad(
        total, [params[k] for k in trainable], allow_unused=True
    )
    grads = {}
    for k in enc.params:
        if k in trainable:
            g = grads_t[trainable.index(k)]
            grads[k] = (torch.zeros_like(params[k]) if g is None else g).detach().numpy()
        else:
            grads[k] = np.zeros(tuple(enc.params[k].shape))
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in block {k!r}")
    return grads


def _forward_backward(images, captions, negs, enc, mode, normalize=False):
    """One autograd pass returning (BatchLoss, grads); used by pretrain."""
    params = {k: v.detach().clone() for k, v in enc.params.items()}
    trainable = enc.trainable_blocks()
    for k in trainable:
        params[k].requires_grad_(True)
    loss_img, loss_cap, S = _batch_loss_t(
        images, captions, negs, enc, mode, params, normalize
    )
    n = len(captions)
    total = (loss_img + loss_cap) / n
    grads_t = torch.autograd.grad(
        total, [params[k] for k in trainable], allow_unused=True
    )
    grads = {}
    for k, g in zip(trainable, grads_t):
        grads[k] = (torch.zeros_like(params[k]) if g is None else g).detach().numpy()
    result = BatchLoss(loss_img.item(), loss_cap.item(),
                       S.detach().numpy(), total.item())
    return result, grads


def clip_gradients(grads, max_norm):
    """Scale the gradient set down to a global L2 norm of max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def total_loss_value(images, captions, negs, enc, mode, params=None,
                     normalize=False):
    """Scalar averaged loss; used by the finite-difference oracle."""
    loss_img, loss_cap, _ = _batch_loss_t(
        images, captions, negs, enc, params=params or enc.params, mode=mode,
        normalize=normalize,
    )
    return float((loss_img + loss_cap) / len(captions))


# ---- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = E.CONTEXTUALIZED
    negatives_mode: str = None       # None, "adj", "noun", "adj+noun", "random-adj"
    freeze_language: bool = False
    freeze_v2l: bool = False
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.05
    seed: int = 0
    d: int = 32
    d_v: int = 16
    d_r: int = 32
    layers: int = 2
    normalize_sim: bool = False
    clip_grad_norm: float = 5.0  # 0 disables; plain SGD is unstable without it

    def lr_at(self, step):
        lr = self.lr
        if step >= int(self.steps * 0.875):
            return lr * 0.01
        if step >= int(self.steps * 0.5):
            return lr * 0.1
        return lr


def pair_corpus_to_scenes(corpus, scenes):
    """(caption, scene) pairs joined on image_id; unmatched captions are
    dropped."""
    by_id = {s.image_id: s for s in scenes}
    return [(c, by_id[c.image_id]) for c in corpus if c.image_id in by_id]


def pretrain(corpus, scenes, config, stats=None, vocab=None, enc=None,
             log_path=None):
    """Shuffled mini-batch SGD over image-caption pairs.

    Returns (encoder, log_rows). ``stats`` and ``vocab`` are required when
    a negatives mode is set. Deterministic for a given seed.
    """
    pairs = pair_corpus_to_scenes(corpus, scenes)
    if not pairs:
        raise ValueError("no caption has a matching scene")
    if config.negatives_mode and (stats is None or vocab is None):
        raise ValueError("negatives mode requires stats and vocab")
    if enc is None:
        tokens = E.build_token_inventory(corpus, vocab)
        if stats is not None:
            tokens = sorted(set(tokens) | set(stats.all_adjectives()))
        enc = E.EncoderStack(
            tokens, d=config.d, d_v=config.d_v, d_r=config.d_r,
            layers=config.layers, seed=config.seed,
            language_frozen=config.freeze_language,
            v2l_frozen=config.freeze_v2l,
        )
    rng = np.random.default_rng(config.seed)
    log_rows = []
    n = len(pairs)
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        idx = rng.choice(n, size=bs, replace=False)
        captions = [pairs[i][0] for i in idx]
        images = [pairs[i][1] for i in idx]
        negs = []
        if config.negatives_mode:
            negs = N.build_negative_batch(
                captions, config.negatives_mode, stats, vocab,
                rng_seed=config.seed * 1000003 + step,
            )
        result, grads = _forward_backward(
            images, captions, negs, enc, config.mode, config.normalize_sim
        )
        if config.clip_grad_norm:
            grads = clip_gradients(grads, config.clip_grad_norm)
        E.apply_gradients(enc, grads, config.lr_at(step))
        S = result.per_pair_scores[:, :bs]
        pos = float(np.trace(S) / bs)
        off = float((S.sum() - np.trace(S)) / max(bs * bs - bs, 1))
        log_rows.append({
            "step": step,
            "loss_total": result.total,
            "loss_img": result.loss_image_side,
            "loss_cap": result.loss_caption_side,
            "pos_score_mean": pos,
            "neg_score_mean": off,
        })
    if log_path is not None:
        write_training_log(log_rows, log_path)
    return enc, log_rows


def write_training_log(log_rows, path):
    fields = ["step", "loss_total", "loss_img", "loss_cap",
              "pos_score_mean", "neg_score_mean"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(log_rows)
    return path
