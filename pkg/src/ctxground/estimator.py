"""scikit-learn style front door for the grounding model.

``RegionWordAligner`` wraps pretraining as ``fit``, region embedding as
``transform``, and open-vocabulary region classification as ``predict``,
so the model composes with sklearn pipelines and parameter search.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import alignment as A
from . import encoders as E
from . import evaluation as V
from .corpus import TaggedCaption, compute_adj_noun_stats


def _check_scenes(scenes):
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes given")
    for s in scenes:
        if not isinstance(s, E.SceneGrid):
            raise TypeError(f"expected SceneGrid, got {type(s).__name__}")
    dims = {s.features.shape[-1] for s in scenes}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims across scenes: {dims}")
    return scenes


def _check_captions(captions):
    captions = list(captions)
    for c in captions:
        if not isinstance(c, TaggedCaption):
            raise TypeError(f"expected TaggedCaption, got {type(c).__name__}")
    return captions


class RegionWordAligner(BaseEstimator):
    """Region-word alignment model with contrastive pretraining.

    Parameters mirror the training configuration; ``fit`` expects scenes
    as X and their paired captions as y, joined on image_id.
    """

    def __init__(self, mode=E.CONTEXTUALIZED, negatives_mode=None,
                 freeze_language=False, freeze_v2l=False, use_prompt=True,
                 steps=2000, batch_size=8, lr=0.05, seed=0,
                 d=32, d_v=16, d_r=32, layers=2, normalize_sim=False):
        self.mode = mode
        self.negatives_mode = negatives_mode
        self.freeze_language = freeze_language
        self.freeze_v2l = freeze_v2l
        self.use_prompt = use_prompt
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.d = d
        self.d_v = d_v
        self.d_r = d_r
        self.layers = layers
        self.normalize_sim = normalize_sim

    def _config(self):
        return A.TrainConfig(
            mode=self.mode, negatives_mode=self.negatives_mode,
            freeze_language=self.freeze_language, freeze_v2l=self.freeze_v2l,
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, d=self.d, d_v=self.d_v, d_r=self.d_r,
            layers=self.layers, normalize_sim=self.normalize_sim,
        )

    def fit(self, X, y, vocab=None):
        """Pretrain on scenes X paired (by image_id) with captions y."""
        scenes = _check_scenes(X)
        captions = _check_captions(y)
        if vocab is None:
            raise ValueError("fit requires the object vocabulary")
        self.vocab_ = vocab
        self.stats_ = compute_adj_noun_stats(captions, vocab)
        self.encoder_, self.training_log_ = A.pretrain(
            captions, scenes, self._config(), stats=self.stats_, vocab=vocab,
        )
        return self

    def transform(self, X):
        """Region embeddings per scene: list of (n_I, d) arrays."""
        check_is_fitted(self, "encoder_")
        return [
            E.embed_regions(s, self.encoder_, self.mode).detach().numpy()
            for s in _check_scenes(X)
        ]

    def predict(self, X):
        """Per-cell class labels ('' = background), one (h, w) array of
        objects per scene."""
        check_is_fitted(self, "encoder_")
        scenes = _check_scenes(X)
        names = self.vocab_.base_names() + self.vocab_.target_names()
        embs = E.build_class_embeddings(
            names, self.encoder_, self.mode, self.use_prompt
        )
        weights = np.vstack(
            [np.stack([e.vector for e in embs]),
             self.encoder_.params["bg_emb"].detach().numpy()]
        )
        out = []
        for s in scenes:
            regions = E.embed_regions(s, self.encoder_, self.mode)
            pred = (regions.detach().numpy() @ weights.T).argmax(axis=1)
            labels = np.array(
                [names[i] if i < len(names) else "" for i in pred],
                dtype=object,
            )
            out.append(labels.reshape(s.height_cells, s.width_cells))
        return out

    def score(self, X, y=None):
        """Mean per-class accuracy over labeled cells (UNION setting)."""
        check_is_fitted(self, "encoder_")
        report = V.classify_regions(
            _check_scenes(X), self.encoder_, self.vocab_,
            class_set=V.UNION, mode=self.mode, use_prompt=self.use_prompt,
        )
        return report["mean_accuracy"] or 0.0
