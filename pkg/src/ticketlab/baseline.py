"""Linear sanity baseline: logistic regression on pooled, unaligned features.

Region features are mean-pooled and the question becomes a bag of words,
so the baseline sees both modalities but cannot bind a word to a region.
A transformer that scores well above it is doing cross-modal work.
"""

from __future__ import annotations

import numpy as np
from sklearn.linear_model import LogisticRegression

from .data import SynthDataset
from .trainer import EvalResult, score_predictions


def pooled_features(data: SynthDataset, vocab_size: int) -> np.ndarray:
    bow = np.zeros((len(data), vocab_size))
    rows = np.repeat(np.arange(len(data)), data.tokens.shape[1])
    np.add.at(bow, (rows, data.tokens.reshape(-1)), 1.0)
    bow[:, 0] = 0.0  # padding
    return np.concatenate([data.regions.mean(axis=1), bow], axis=1)


def logistic_baseline(train: SynthDataset, test: SynthDataset, vocab_size: int,
                      max_iter: int = 2000) -> EvalResult:
    clf = LogisticRegression(max_iter=max_iter)
    clf.fit(pooled_features(train, vocab_size), train.answers)
    pred = clf.predict(pooled_features(test, vocab_size))
    return score_predictions(pred, test.answers, test.categories)
