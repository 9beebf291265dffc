"""scikit-learn style wrappers so the pipeline composes with that ecosystem.

``RingGridGenerator`` is a fit/sample/score estimator over labeled token
grids; ``VqPatchTokenizer`` is a fit/transform/inverse_transform transformer
between images and token grids.  Both keep constructor arguments verbatim so
``get_params``/``set_params``/``clone`` behave as sklearn expects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .bench import nll_report
from .decode import SamplerConfig, decode
from .grids import make_schedule
from .model import ModelConfig, RingTransformer
from .synthetic import ArraySource, SequentialSource
from .train import TrainConfig, train_model
from .vq import VqConfig, vq_decode, vq_encode, vq_train


def check_grid_array(X, vocab_size: int | None = None) -> np.ndarray:
    """Validate a (n, H, W) integer token-grid array."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[0] == 0:
        raise ValueError(f"expected (n, H, W) token grids, got shape {X.shape}")
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(X == np.round(X)):
            raise ValueError("token grids must hold integers")
        X = X.astype(np.int64)
    if X.min() < 0:
        raise ValueError("token ids must be non-negative")
    if vocab_size is not None and X.max() >= vocab_size:
        raise ValueError(f"token id {X.max()} outside vocabulary of {vocab_size}")
    return X.astype(np.int64)


def check_class_array(y, n: int) -> np.ndarray:
    if y is None:
        return np.zeros(n, dtype=np.int64)
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} class labels, got shape {y.shape}")
    if y.min() < 0:
        raise ValueError("class labels must be non-negative")
    return y.astype(np.int64)


class RingGridGenerator(BaseEstimator):
    """Class-conditional generative model over discrete token grids.

    ``fit(X, y)`` trains the ring-parallel transformer on the given grids,
    ``sample`` generates new ones and ``score`` returns the negative held-out
    NLL per token (higher is better), sklearn-style.
    """

    def __init__(self, vocab_size=None, num_classes=None, dim=64, num_layers=2,
                 num_heads=2, mlp_ratio=4.0, max_steps=32, anchor="center",
                 thickness=1, lr=1e-3, weight_decay=0.05, epochs=5,
                 batch_size=8, step_drop_prob=0.25, interior_noise_prob=0.1,
                 interior_restriction=True, temperature=1.0, top_k=None,
                 seed=0):
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.dim = dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.max_steps = max_steps
        self.anchor = anchor
        self.thickness = thickness
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.step_drop_prob = step_drop_prob
        self.interior_noise_prob = interior_noise_prob
        self.interior_restriction = interior_restriction
        self.temperature = temperature
        self.top_k = top_k
        self.seed = seed

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")

    def fit(self, X, y=None):
        X = check_grid_array(X, self.vocab_size)
        y = check_class_array(y, len(X))
        vocab = self.vocab_size or int(X.max()) + 1
        classes = self.num_classes or int(y.max()) + 1
        h, w = X.shape[1], X.shape[2]
        self.source_ = ArraySource(X, y, vocab)
        self.schedule_ = make_schedule(h, w, self.anchor, self.thickness)
        cfg = ModelConfig(vocab_size=vocab, num_classes=classes, dim=self.dim,
                          num_layers=self.num_layers, num_heads=self.num_heads,
                          mlp_ratio=self.mlp_ratio, max_grid=(h, w),
                          max_steps=self.max_steps)
        self.model_ = RingTransformer(cfg)
        self.model_.init_parameters(self.seed)
        train_cfg = TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, grids_per_epoch=len(X),
            step_drop_prob=self.step_drop_prob,
            interior_noise_prob=self.interior_noise_prob,
            interior_restriction=self.interior_restriction, seed=self.seed)
        self.history_ = train_model(self.model_, self.source_, train_cfg,
                                    self.schedule_)
        return self

    def sample(self, n_samples=1, class_id=0, seed=None):
        """Generate (n_samples, H, W) token grids for one class."""
        self._check_fitted()
        base = self.seed if seed is None else seed
        out = []
        for i in range(n_samples):
            sampler = SamplerConfig(temperature=self.temperature,
                                    top_k=self.top_k, seed=base + i)
            grid, _ = decode(self.model_, class_id, self.schedule_, sampler)
            out.append(grid.cells)
        return np.stack(out)

    def score(self, X, y=None):
        """Mean negative NLL per token over the given grids (higher is better)."""
        self._check_fitted()
        X = check_grid_array(X, self.model_.cfg.vocab_size)
        y = check_class_array(y, len(X))
        src = SequentialSource(X, y, self.model_.cfg.vocab_size)
        rep = nll_report(self.model_, src, self.schedule_, len(X),
                         np.random.default_rng(0), self.interior_restriction)
        return -float(rep["nll"])


class VqPatchTokenizer(TransformerMixin, BaseEstimator):
    """Image <-> token-grid transformer around the patch VQ tokenizer."""

    def __init__(self, vocab_size=64, latent_dim=8, patch_size=4, channels=1,
                 commitment_weight=0.25, lr=5e-3, epochs=10, batch_size=64,
                 seed=0):
        self.vocab_size = vocab_size
        self.latent_dim = latent_dim
        self.patch_size = patch_size
        self.channels = channels
        self.commitment_weight = commitment_weight
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (3, 4):
            raise ValueError("expected (n, H, W) or (n, H, W, C) images")
        cfg = VqConfig(vocab_size=self.vocab_size, latent_dim=self.latent_dim,
                       patch_size=self.patch_size, channels=self.channels,
                       commitment_weight=self.commitment_weight, lr=self.lr,
                       epochs=self.epochs, batch_size=self.batch_size,
                       seed=self.seed)
        self.tokenizer_, self.history_ = vq_train(list(X), cfg)
        return self

    def transform(self, X):
        if not hasattr(self, "tokenizer_"):
            raise NotFittedError("call fit before transform")
        return np.stack([vq_encode(img, self.tokenizer_).cells for img in np.asarray(X)])

    def inverse_transform(self, T):
        if not hasattr(self, "tokenizer_"):
            raise NotFittedError("call fit before inverse_transform")
        from .grids import TokenGrid
        return np.stack([vq_decode(TokenGrid.from_array(t, self.vocab_size),
                                   self.tokenizer_)
                         for t in np.asarray(T, dtype=np.int64)])
