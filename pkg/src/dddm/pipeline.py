"""Dropout classifier + evidence accumulator as one estimator.

:func:`accumulate` is the batched form of the per-input protocol: draw
``n_trials`` trials of ``trial_length`` rows from each input's pool of
stochastic predictions, run the sequential test on each trial and combine
the trial winners by majority vote.
"""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from .evidence import (build_likelihood_table, run_trials_batch, sample_trial_indices,
                       vote_batch)
from .exceptions import ParameterError
from .validation import check_threshold


@dataclass(frozen=True)
class DDDMParams:
    k: int = 3
    smoothing: float = 1.0
    n_predictions: int = 100
    n_trials: int = 10
    trial_length: int = 25
    threshold: float = 0.99

    def __post_init__(self):
        check_threshold(self.threshold)
        if self.k < 1 or self.n_trials < 1:
            raise ParameterError("k and n_trials must be positive")
        if not 1 <= self.trial_length <= self.n_predictions:
            raise ParameterError("need 1 <= trial_length <= n_predictions")
        if self.smoothing < 0:
            raise ParameterError("smoothing must be nonnegative")


@dataclass
class AccumulationResult:
    predictions: np.ndarray      # (n,) aggregated labels
    trial_winners: np.ndarray    # (n, n_trials)
    rts: np.ndarray              # (n, n_trials), forward passes consumed
    forced: np.ndarray           # (n, n_trials)
    final_posteriors: np.ndarray  # (n, n_trials, C)

    @property
    def mean_rt(self):
        """Per-input mean response time over trials."""
        return self.rts.mean(axis=1)

    def accuracy(self, y):
        return float((self.predictions == np.asarray(y)).mean())

    def trial_accuracy(self, y):
        return float((self.trial_winners == np.asarray(y)[:, None]).mean())


def accumulate(predictions, table, params, seed=0, offset=0):
    """Run the multi-trial protocol on pools of stochastic predictions.

    Parameters
    ----------
    predictions : array (n, N, C)
        ``N`` stochastic predictions per input.
    table : LikelihoodTable
    params : DDDMParams
    seed : int
        Input ``offset + i`` draws its trials from ``default_rng([seed, offset + i])``,
        which matches ``sample_trials(pool, n_trials, L, seed=[seed, offset + i])``.
    """
    P = np.asarray(predictions, dtype=np.float64)
    if P.ndim != 3 or P.shape[2] != table.C:
        raise ParameterError(f"predictions must have shape (n, N, {table.C})")
    n, N, C = P.shape
    T, L = params.n_trials, params.trial_length
    idx = np.stack([sample_trial_indices(N, T, L, np.random.default_rng([int(seed), offset + i]))
                    for i in range(n)]) if n else np.zeros((0, T, L), dtype=np.int64)
    trials = np.take_along_axis(P[:, None, :, :], idx[..., None], axis=2)  # (n, T, L, C)
    lik = table.likelihoods(trials).reshape(n * T, L, C)
    winners, rts, forced, post = run_trials_batch(lik, params.threshold)
    winners, post = winners.reshape(n, T), post.reshape(n, T, C)
    return AccumulationResult(vote_batch(winners, post) if n else np.zeros(0, np.int64),
                              winners, rts.reshape(n, T), forced.reshape(n, T), post)


class DDDMClassifier(ClassifierMixin, BaseEstimator):
    """Wrap a stochastic classifier in the sequential evidence accumulator.

    ``base_estimator`` must expose ``fit`` and
    ``sample_proba(X, n_samples, random_state) -> (n, n_samples, C)``, such as
    :class:`~dddm.classifier.DropoutMLPClassifier`. ``fit`` trains a clone of
    it (unless ``prefit``) and estimates the likelihood table from
    ``table_passes`` stochastic predictions per training input.
    """

    def __init__(self, base_estimator=None, k=3, smoothing=1.0, n_predictions=100,
                 n_trials=10, trial_length=25, threshold=0.99, table_passes=10,
                 prefit=False, random_state=0):
        self.base_estimator = base_estimator
        self.k = k
        self.smoothing = smoothing
        self.n_predictions = n_predictions
        self.n_trials = n_trials
        self.trial_length = trial_length
        self.threshold = threshold
        self.table_passes = table_passes
        self.prefit = prefit
        self.random_state = random_state

    def _params(self):
        return DDDMParams(self.k, self.smoothing, self.n_predictions, self.n_trials,
                          self.trial_length, self.threshold)

    def fit(self, X, y):
        if self.base_estimator is None:
            from .classifier import DropoutMLPClassifier
            base = DropoutMLPClassifier(dropout_test=0.5)
        else:
            base = self.base_estimator
        self.params_ = self._params()
        self.estimator_ = base if self.prefit else clone(base).fit(X, y)
        self.classes_ = self.estimator_.classes_
        y_enc = np.searchsorted(self.classes_, np.asarray(y))
        seed = 0 if self.random_state is None else int(self.random_state)
        P = self.estimator_.sample_proba(X, self.table_passes, seed)
        self.table_ = build_likelihood_table(
            P.reshape(-1, P.shape[-1]), np.repeat(y_enc, self.table_passes),
            self.k, self.smoothing, len(self.classes_))
        return self

    def accumulate(self, X, random_state=None):
        """Full per-trial outcomes for ``X`` (see :class:`AccumulationResult`)."""
        check_is_fitted(self, "table_")
        seed = self.random_state if random_state is None else random_state
        seed = 0 if seed is None else int(seed)
        P = self.estimator_.sample_proba(X, self.n_predictions, seed + 1)
        return accumulate(P, self.table_, self._params(), seed + 2)

    def predict(self, X):
        return self.classes_[self.accumulate(X).predictions]

    def predict_proba(self, X):
        """Trial-averaged final posteriors."""
        return self.accumulate(X).final_posteriors.mean(axis=1)

    def response_time(self, X):
        """Mean number of forward passes consumed per input."""
        return self.accumulate(X).mean_rt
