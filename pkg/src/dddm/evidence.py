"""Bayesian multi-hypothesis sequential test over streams of probability vectors.

Each probability vector is reduced to its *signature*, the ordered tuple of
its ``k`` most confident labels. A :class:`LikelihoodTable` estimated on
clean training predictions gives ``Pr(signature | H_i)`` for every class
hypothesis ``H_i``; the posterior over hypotheses starts uniform and is
updated row by row until one hypothesis reaches the decision threshold.
"""
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BuildError, DegenerateEvidenceError, ParameterError
from .validation import check_labels, check_probabilities, check_threshold, check_trial

TABLE_FORMAT = "dddm-likelihood-table"
TABLE_VERSION = 1


def compute_signature(p, k):
    """Indices of the ``k`` largest entries of ``p``, most confident first.

    Ties are broken by ascending class index.

    >>> compute_signature([0, 0, 0.1, 0.3, 0.4, 0.15, 0.05, 0, 0, 0], 3)
    (4, 3, 5)
    """
    p = check_probabilities(p)
    if p.ndim != 1:
        raise ParameterError("compute_signature expects a single probability vector")
    return tuple(int(i) for i in signatures(p, k))


def signatures(P, k):
    """Vectorized :func:`compute_signature` over the last axis of ``P``."""
    P = np.asarray(P, dtype=np.float64)
    C = P.shape[-1]
    if not 1 <= k <= C:
        raise ParameterError(f"signature length k={k} must lie in [1, {C}]")
    # stable sort on the negated values: descending, ties by ascending index
    return np.argsort(-P, axis=-1, kind="stable")[..., :k]


def universe_size(C, k):
    """Number of ordered k-tuples of distinct labels, ``C!/(C-k)!``."""
    return math.perm(C, k)


def signature_universe(C, k):
    return list(itertools.permutations(range(C), k))


def encode_signatures(sigs, C):
    """Map signature tuples (last axis) to integers in base ``C``."""
    sigs = np.asarray(sigs, dtype=np.int64)
    k = sigs.shape[-1]
    weights = C ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return sigs @ weights


def format_signature(sig):
    return "-".join(str(int(i)) for i in sig)


def parse_signature(text):
    return tuple(int(i) for i in text.split("-"))


class LikelihoodTable:
    """Signature frequencies per class hypothesis, with add-``smoothing`` counts.

    ``Pr(sig | H_i) = (count_i(sig) + smoothing) / (n_i + smoothing * U)``
    where ``U`` is the size of the ordered-signature universe. Raw counts
    are the stored state; probabilities are derived from them.
    """

    def __init__(self, k, C, smoothing, counts):
        if not 1 <= k <= C:
            raise ParameterError(f"signature length k={k} must lie in [1, {C}]")
        if smoothing < 0:
            raise ParameterError("smoothing must be nonnegative")
        self.k = int(k)
        self.C = int(C)
        self.smoothing = float(smoothing)
        self.universe = universe_size(C, k)

        observed = sorted({sig for per_class in counts.values() for sig in per_class})
        for sig in observed:
            if len(sig) != k or len(set(sig)) != k or min(sig) < 0 or max(sig) >= C:
                raise ParameterError(f"invalid signature {sig} for C={C}, k={k}")
        matrix = np.zeros((len(observed), C), dtype=np.int64)
        row = {sig: r for r, sig in enumerate(observed)}
        for cls, per_class in counts.items():
            if not 0 <= int(cls) < C:
                raise ParameterError(f"class {cls} outside [0, {C})")
            for sig, n in per_class.items():
                matrix[row[tuple(sig)], int(cls)] = n
        totals = matrix.sum(axis=0)
        missing = np.flatnonzero(totals == 0)
        if missing.size:
            raise BuildError(f"no predictions for class {int(missing[0])}")

        denom = totals + self.smoothing * self.universe
        self._signatures = observed
        self._counts = matrix
        self._totals = totals
        self._codes = encode_signatures(np.array(observed, dtype=np.int64).reshape(-1, k), C)
        self._probs = (matrix + self.smoothing) / denom
        self._unseen = np.full(C, self.smoothing) / denom
        for arr in (self._counts, self._totals, self._codes, self._probs, self._unseen):
            arr.flags.writeable = False

    @property
    def totals(self):
        return self._totals

    @property
    def observed_signatures(self):
        return list(self._signatures)

    def count(self, sig, cls):
        sig = tuple(int(i) for i in sig)
        try:
            r = self._signatures.index(sig)
        except ValueError:
            return 0
        return int(self._counts[r, cls])

    def likelihood(self, sig):
        """Length-C vector ``Pr(sig | H_i)``."""
        sig = tuple(int(i) for i in sig)
        if len(sig) != self.k:
            raise ParameterError(f"signature length {len(sig)} != table k={self.k}")
        return self.likelihoods_from_signatures(np.array([sig]))[0]

    def likelihoods_from_signatures(self, sigs):
        sigs = np.asarray(sigs, dtype=np.int64)
        codes = encode_signatures(sigs, self.C)
        # a valid table has at least one observed signature per class
        pos = np.minimum(np.searchsorted(self._codes, codes), len(self._codes) - 1)
        hit = self._codes[pos] == codes
        return np.where(hit[..., None], self._probs[pos], self._unseen)

    def likelihoods(self, P):
        """Likelihood vectors for the signatures of probability rows ``P``."""
        return self.likelihoods_from_signatures(signatures(P, self.k))

    def probability_matrix(self):
        """Dense ``(U, C)`` likelihoods over the full signature universe, in
        :func:`signature_universe` order. Only sensible for small universes."""
        return self.likelihoods_from_signatures(np.array(signature_universe(self.C, self.k)))

    def to_dict(self):
        counts = {}
        for cls in range(self.C):
            rows = np.flatnonzero(self._counts[:, cls])
            counts[str(cls)] = {format_signature(self._signatures[r]): int(self._counts[r, cls])
                                for r in rows}
        return {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "k": self.k,
            "C": self.C,
            "smoothing": self.smoothing,
            "counts": counts,
            "totals": {str(c): int(n) for c, n in enumerate(self._totals)},
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != TABLE_FORMAT or doc.get("version") != TABLE_VERSION:
            raise ParameterError("not a version-1 likelihood table document")
        counts = {int(c): {parse_signature(s): int(n) for s, n in per.items()}
                  for c, per in doc["counts"].items()}
        table = cls(doc["k"], doc["C"], doc["smoothing"], counts)
        stored = [int(doc["totals"][str(c)]) for c in range(table.C)]
        if stored != table.totals.tolist():
            raise ParameterError("stored per-class totals disagree with the counts")
        return table

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        return (isinstance(other, LikelihoodTable) and self.to_dict() == other.to_dict())

    def __repr__(self):
        return (f"LikelihoodTable(k={self.k}, C={self.C}, smoothing={self.smoothing}, "
                f"n={self._totals.sum()}, observed={len(self._signatures)})")


def build_likelihood_table(probs, labels, k=3, smoothing=1.0, n_classes=None):
    """Count signatures of labelled predictions per true class.

    Parameters
    ----------
    probs : array (n, C)
        Probability vectors, typically stochastic forward passes on clean
        training inputs.
    labels : array (n,)
        True class of the input each prediction came from.
    k : int
        Signature length.
    smoothing : float
        Pseudo-count added to every signature of the universe.
    """
    probs = check_probabilities(probs)
    if probs.ndim != 2:
        raise ParameterError("probs must be an (n, C) matrix")
    C = n_classes or probs.shape[1]
    labels = check_labels(labels, len(probs), C)
    sigs = signatures(probs, k)
    codes = encode_signatures(sigs, C)
    counts = {c: {} for c in range(C)}
    for c in range(C):
        mask = labels == c
        if not mask.any():
            raise BuildError(f"no predictions for class {c}")
        uniq, first, n = np.unique(codes[mask], return_index=True, return_counts=True)
        class_sigs = sigs[mask][first]
        counts[c] = {tuple(int(i) for i in s): int(m) for s, m in zip(class_sigs, n)}
    return LikelihoodTable(k, C, smoothing, counts)


@dataclass(frozen=True)
class PosteriorState:
    posterior: np.ndarray
    steps: int = 0

    @classmethod
    def fresh(cls, C):
        """Equal priors over ``C`` hypotheses."""
        return cls(np.full(C, 1.0 / C), 0)


def _bayes_step(posterior, likelihood):
    unnorm = posterior * likelihood
    z = unnorm.sum(axis=-1, keepdims=True)
    if (z <= 0).any():
        raise DegenerateEvidenceError("all hypotheses assign zero likelihood to an observation")
    return unnorm / z


def posterior_update(state, sig, table):
    """Absorb one signature: multiply by ``Pr(sig | H_i)`` and renormalize."""
    post = _bayes_step(state.posterior, table.likelihood(sig))
    return PosteriorState(post, state.steps + 1)


@dataclass
class DecisionOutcome:
    winner: int
    rt: int
    forced: bool
    final_posterior: np.ndarray
    trace: np.ndarray = field(default=None, repr=False)


def run_trial(trial, table, A=0.99, trace=False):
    """Sequentially absorb the rows of an ``(L, C)`` trial.

    Stops at the first step whose largest posterior reaches ``A``; if that
    never happens the decision is forced to the step-L argmax.
    """
    A = check_threshold(A)
    trial = check_trial(trial, table.C)
    state = PosteriorState.fresh(table.C)
    history = []
    for row in trial:
        state = posterior_update(state, compute_signature(row, table.k), table)
        history.append(state.posterior)
        if state.posterior.max() >= A:
            return DecisionOutcome(int(np.argmax(state.posterior)), state.steps, False,
                                   state.posterior, np.array(history) if trace else None)
    return DecisionOutcome(int(np.argmax(state.posterior)), state.steps, True,
                           state.posterior, np.array(history) if trace else None)


def run_trials_batch(likelihoods, A=0.99):
    """Vectorized accumulator over many trials at once.

    Parameters
    ----------
    likelihoods : array (B, L, C)
        ``Pr(sig_t | H_i)`` for every trial row, e.g. from
        :meth:`LikelihoodTable.likelihoods`.

    Returns
    -------
    winners, rts, forced, final_posteriors
        Arrays of shapes (B,), (B,), (B,), (B, C) with the same semantics as
        :func:`run_trial`.
    """
    A = check_threshold(A)
    lik = np.asarray(likelihoods, dtype=np.float64)
    B, L, C = lik.shape
    post = np.full((B, C), 1.0 / C)
    rt = np.full(B, L, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for t in range(L):
        active = ~done
        if not active.any():
            break
        post[active] = _bayes_step(post[active], lik[active, t])
        crossed = active & (post.max(axis=1) >= A)
        rt[crossed] = t + 1
        done |= crossed
    return post.argmax(axis=1), rt, ~done, post


def sample_trial_indices(N, n_trials, L, rng):
    """``(n_trials, L)`` indices, each row drawn without replacement from range(N)."""
    if not 1 <= L <= N:
        raise ParameterError(f"trial length L={L} must lie in [1, N={N}]")
    if n_trials < 1:
        raise ParameterError("n_trials must be positive")
    return np.argsort(rng.random((n_trials, N)), axis=1, kind="stable")[:, :L]


def sample_trials(pool, n_trials=10, L=25, seed=None):
    """Draw ``n_trials`` independent trials of ``L`` rows from a prediction pool."""
    pool = check_probabilities(pool)
    if pool.ndim != 2:
        raise ParameterError("pool must be an (N, C) matrix")
    idx = sample_trial_indices(len(pool), n_trials, L, np.random.default_rng(seed))
    return pool[idx]


def aggregate_trials(outcomes):
    """Majority vote over trial winners plus the mean response time.

    Ties go to the label with the largest summed final posterior, then to the
    smallest label.
    """
    if not outcomes:
        raise ParameterError("cannot aggregate an empty list of outcomes")
    winners = np.array([o.winner for o in outcomes])
    posts = np.array([o.final_posterior for o in outcomes])
    rts = np.array([o.rt for o in outcomes], dtype=np.float64)
    return vote(winners, posts), float(rts.mean())


def vote(winners, final_posteriors):
    """Vectorizable core of :func:`aggregate_trials` for one input."""
    C = final_posteriors.shape[-1]
    votes = np.bincount(winners, minlength=C)
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    mass = final_posteriors[:, tied].sum(axis=0)
    return int(tied[np.argmax(mass)])


def vote_batch(winners, final_posteriors):
    """Apply :func:`vote` across inputs; shapes (n, T) and (n, T, C)."""
    n, T, C = final_posteriors.shape
    votes = np.zeros((n, C), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(n), T), winners.ravel()), 1)
    mass = final_posteriors.sum(axis=1)
    tied = votes == votes.max(axis=1, keepdims=True)
    # among tied labels, prefer larger mass; argmax picks the smallest index on equal mass
    score = np.where(tied, mass, -np.inf)
    return score.argmax(axis=1)
