"""scikit-learn style wrappers.

``MonolithicCaptioner`` trains the whole pipeline (text warm-up, visual
initialization, staged curriculum) from images and captions and predicts
captions by greedy decoding.  ``PatchTokenizer`` exposes the patch front end as
a transformer.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import multimodal as mm
from . import trainer as T
from .exceptions import InputError
from .model import ModelConfig, ModelState, greedy_decode, init_visual_from_textual
from .synthetic import CAPTION_PROMPT, ListDataset, Sample


def _samples(X, y, prompt):
    if len(X) != len(y):
        raise InputError(f"{len(X)} images but {len(y)} captions")
    if not len(X):
        raise InputError("no training samples")
    return ListDataset(Sample(mm.check_image(img), prompt, str(c), str(c), {})
                       for img, c in zip(X, y))


class MonolithicCaptioner(BaseEstimator):
    """Image captioner trained with the staged curriculum.

    ``X`` is a sequence of HxWx3 float images in [0, 1], ``y`` the captions.
    The same (image, caption) pairs feed every stage.
    """

    def __init__(self, variant="EVIP_PP", d_model=64, n_heads=4, n_layers=2, ffn_hidden=128,
                 pretrain_steps=400, stage_steps=None, lr=5e-4, batch_size=8,
                 prompt=CAPTION_PROMPT, max_new_tokens=96, strategy="fused", seed=0):
        self.variant = variant
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_hidden = ffn_hidden
        self.pretrain_steps = pretrain_steps
        self.stage_steps = stage_steps
        self.lr = lr
        self.batch_size = batch_size
        self.prompt = prompt
        self.max_new_tokens = max_new_tokens
        self.strategy = strategy
        self.seed = seed

    def _config(self):
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                           ffn_hidden=self.ffn_hidden,
                           attention_experts=T.Variant(self.variant) is T.Variant.EVIP_PP)

    def fit(self, X, y):
        data = _samples(X, y, self.prompt)
        model = ModelState(self._config(), seed=self.seed, strategy=self.strategy)
        T.pretrain_text(model, data, steps=self.pretrain_steps, seed=self.seed,
                        batch_size=self.batch_size, variant=self.variant)
        init_visual_from_textual(model)
        plans = T.curriculum(self.variant, model.config, steps=self.stage_steps, lr=self.lr,
                             batch_size=self.batch_size)
        datasets = {p.data_source: data for p in plans}
        self.reports_ = T.run_curriculum(model, plans, datasets, seed=self.seed)
        self.model_ = model
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.array([greedy_decode(self.model_, mm.check_image(img), self.prompt,
                                       self.max_new_tokens) for img in X], dtype=object)

    def score(self, X, y):
        """Exact-match accuracy."""
        pred = self.predict(X)
        return float(np.mean([p == str(t) for p, t in zip(pred, y)]))


class PatchTokenizer(TransformerMixin, BaseEstimator):
    """Images to flattened 28x28 patches under a patch budget.

    ``transform`` returns a list of ``(patches, grid)`` pairs since patch
    counts differ between images.
    """

    def __init__(self, budget=1280, thumbnail=True):
        self.budget = budget
        self.thumbnail = thumbnail

    def fit(self, X, y=None):
        if self.budget < 1:
            raise InputError(f"budget must be positive, got {self.budget}")
        self.patch_dim_ = mm.PATCH * mm.PATCH * 3
        return self

    def transform(self, X):
        check_is_fitted(self, "patch_dim_")
        return [mm.patchify(img, self.budget, self.thumbnail) for img in X]
