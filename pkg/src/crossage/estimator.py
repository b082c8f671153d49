"""Scikit-learn style wrapper around the embedding model so it composes with
sklearn pipelines and model selection: ``fit`` trains on labeled feature
matrices, ``transform`` extracts embeddings.
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, extract_embedding
from .training import InMemoryDataset, TrainConfig, TrainingSample, \
    build_model, train


def _validate_features(X, n_mels):
    """X: iterable of [n_mels, T] arrays with a shared frame count."""
    mats = [np.asarray(x, dtype=np.float64) for x in X]
    if not mats:
        raise ValueError("X is empty")
    for i, m in enumerate(mats):
        if m.ndim != 2 or m.shape[0] != n_mels:
            raise ValueError(f"X[{i}] must be [{n_mels}, T], got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError(f"X[{i}] contains non-finite values")
    if len({m.shape[1] for m in mats}) != 1:
        raise ValueError("all feature matrices must share the frame count")
    return mats


class AdalEmbedder(BaseEstimator, TransformerMixin):
    """Trainable speaker embedder with age decoupling.

    Parameters mirror the model/training configs; ``variant`` selects the
    architecture (baseline-softmax, baseline-arcface, grl, age-residual,
    are, adal). ``fit`` expects X as a sequence of [n_mels, T] feature
    matrices and y as an integer array of shape [n, 2] holding
    (speaker_index, age_group) per sample; ``transform`` returns the
    age-invariant embedding (z_id) row per input.
    """

    def __init__(self, variant="adal", embedding_dim=128,
                 block_widths=(32, 64, 128, 256), n_mels=80, epochs=30,
                 base_lr=0.1, batch_size=32, lambda_age=0.1, lambda_grl=0.1,
                 embedding="z_id", random_state=0):
        self.variant = variant
        self.embedding_dim = embedding_dim
        self.block_widths = block_widths
        self.n_mels = n_mels
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.lambda_age = lambda_age
        self.lambda_grl = lambda_grl
        self.embedding = embedding
        self.random_state = random_state

    def fit(self, X, y):
        mats = _validate_features(X, self.n_mels)
        y = np.asarray(y)
        if y.ndim != 2 or y.shape != (len(mats), 2):
            raise ValueError("y must be [n_samples, 2] of "
                             "(speaker_index, age_group)")
        n_speakers = int(y[:, 0].max()) + 1
        config = ModelConfig(
            n_speakers=n_speakers, variant=self.variant,
            block_widths=tuple(self.block_widths),
            embedding_dim=self.embedding_dim, n_mels=self.n_mels)
        self.model_ = build_model(config, seed=self.random_state)
        samples = [TrainingSample(m, int(s), int(a))
                   for m, (s, a) in zip(mats, y)]
        cfg = TrainConfig(base_lr=self.base_lr, batch_size=self.batch_size,
                          lambda_age=self.lambda_age,
                          lambda_grl=self.lambda_grl,
                          max_epochs=self.epochs, seed=self.random_state)
        self.loss_curve_ = train(self.model_, InMemoryDataset(samples), cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        mats = _validate_features(X, self.n_mels)
        feats = torch.tensor(np.stack(mats), dtype=torch.float32)
        return extract_embedding(self.model_, feats, self.embedding).numpy()
