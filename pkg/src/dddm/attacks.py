"""Adversarial example generators: FGSM, PGD, repeated uniform noise and
salt-and-pepper.

Gradient attacks take a dropout rate ``b``: with ``b = 0`` gradients come
from the deterministic (mask-free) pass, otherwise every gradient query
draws fresh dropout masks, i.e. the attack sees the stochastic classifier
it targets. Success always means the deterministic pass misclassifies.
Every function accepts a single input or a batch and returns an
:class:`AdversarialExample` with matching leading shape.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import forward_deterministic, input_gradient, stochastic_input_gradient
from .dataio import Dataset, save_dataset
from .exceptions import ParameterError
from .validation import check_inputs, check_labels

KINDS = ("fgsm", "pgd", "uniform", "salt_pepper")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 0.3
    steps: int = 40
    step_size: float = None  # pgd; None means epsilon * 2.5 / steps
    repeats: int = 100
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown attack {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be nonnegative")
        if self.steps < 1 or self.repeats < 1:
            raise ParameterError("steps and repeats must be positive")

    @classmethod
    def paper_default(cls, kind, seed=0):
        """MNIST settings: eps 0.3 (FGSM, PGD with 40 steps, uniform with 100
        repeats); salt-and-pepper with a 1000-candidate budget."""
        return {
            "fgsm": cls("fgsm", 0.3, seed=seed),
            "pgd": cls("pgd", 0.3, steps=40, seed=seed),
            "uniform": cls("uniform", 0.3, repeats=100, seed=seed),
            "salt_pepper": cls("salt_pepper", 0.0, steps=1000, seed=seed),
        }[kind]


@dataclass
class AdversarialExample:
    x_adv: np.ndarray
    success: np.ndarray
    queries: np.ndarray
    info: dict = field(default_factory=dict)


def _prepare(net, x, y):
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    if X.min() < 0 or X.max() > 1:
        raise ParameterError("attack inputs must lie in [0, 1]")
    return X, check_labels(y, len(X), net.n_classes), was_1d


def _misclassified(net, X, y):
    return forward_deterministic(net, X).argmax(axis=1) != y


def _result(x_adv, success, queries, was_1d, **info):
    if was_1d:
        return AdversarialExample(x_adv[0], bool(success[0]), int(queries[0]), info)
    return AdversarialExample(x_adv, success, queries, info)


def _gradient(net, X, y, b, rng):
    if b == 0:
        return input_gradient(net, X, y)
    return stochastic_input_gradient(net, X, y, b, rng)


def fgsm(net, x, y, epsilon=0.3, b=0.0, seed=None):
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1]."""
    X, y, was_1d = _prepare(net, x, y)
    g = _gradient(net, X, y, b, np.random.default_rng(seed))
    x_adv = np.clip(X + epsilon * np.sign(g), 0.0, 1.0)
    queries = np.full(len(X), 2)  # one gradient, one check
    return _result(x_adv, _misclassified(net, x_adv, y), queries, was_1d)


def pgd(net, x, y, epsilon=0.3, steps=40, step_size=None, seed=None, random_start=True,
        b=0.0):
    """Projected signed-gradient ascent inside the L-inf ball of radius ``epsilon``.

    Starts from a uniform random point of the ball (``random_start``) and
    takes ``steps`` steps of ``step_size`` (default ``2.5 * epsilon / steps``).
    """
    X, y, was_1d = _prepare(net, x, y)
    if step_size is None:
        step_size = epsilon * 2.5 / steps
    lo, hi = np.clip(X - epsilon, 0.0, 1.0), np.clip(X + epsilon, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    x_adv = X.copy()
    if random_start and epsilon > 0:
        x_adv = np.clip(X + rng.uniform(-epsilon, epsilon, X.shape), lo, hi)
    for _ in range(steps):
        g = _gradient(net, x_adv, y, b, rng)
        x_adv = np.clip(x_adv + step_size * np.sign(g), lo, hi)
    queries = np.full(len(X), steps + 1)
    return _result(x_adv, _misclassified(net, x_adv, y), queries, was_1d)


def uniform_noise(net, x, y, epsilon=0.3, repeats=100, seed=None):
    """Up to ``repeats`` i.i.d. uniform draws in ``[-eps, eps]^d``; keeps the
    first draw that causes a misclassification, otherwise the last one."""
    X, y, was_1d = _prepare(net, x, y)
    rng = np.random.default_rng(seed)
    x_adv = X.copy()
    success = np.zeros(len(X), dtype=bool)
    queries = np.zeros(len(X), dtype=np.int64)
    for _ in range(repeats):
        # draw for every row so the stream does not depend on earlier outcomes
        cand = np.clip(X + rng.uniform(-epsilon, epsilon, X.shape), 0.0, 1.0)
        open_ = ~success
        if not open_.any():
            break
        x_adv[open_] = cand[open_]
        queries[open_] += 1
        success[open_] = _misclassified(net, cand[open_], y[open_])
    return _result(x_adv, success, queries, was_1d)


def salt_pepper_pattern(d, seed):
    """Pixel corruption order and replacement values (0 or 1) for one input."""
    rng = np.random.default_rng(seed)
    return rng.permutation(d), rng.integers(0, 2, d).astype(np.float64)


def salt_pepper_counts(d, steps):
    """Flipped-pixel counts of the linear ramp, fraction j/steps for j=1..steps."""
    counts = np.rint(np.arange(1, steps + 1) * d / steps).astype(np.int64)
    return np.unique(np.maximum(counts, 1))


def salt_pepper(net, x, y, steps=1000, seed=None, chunk=64):
    """Replace a growing prefix of a random pixel order by salt/pepper values.

    Candidates follow a linear flip-fraction ramp with ``steps`` points.
    The first misclassified candidate is refined by bisection on the pixel
    count between it and its unsuccessful predecessor. Input ``i`` uses the
    pattern from ``salt_pepper_pattern(d, [seed, i])``.
    """
    X, y, was_1d = _prepare(net, x, y)
    n, d = X.shape
    seed = 0 if seed is None else int(seed)
    counts = salt_pepper_counts(d, steps)
    x_adv = X.copy()
    success = np.zeros(n, dtype=bool)
    queries = np.ones(n, dtype=np.int64)
    flipped = np.zeros(n, dtype=np.int64)
    already = _misclassified(net, X, y)
    success[already] = True

    def corrupt(i, order, values, m):
        img = X[i].copy()
        img[order[:m]] = values[order[:m]]
        return img

    for i in np.flatnonzero(~already):
        order, values = salt_pepper_pattern(d, [seed, i])
        prev = 0
        found = None
        for start in range(0, len(counts), chunk):
            batch = counts[start:start + chunk]
            cands = np.stack([corrupt(i, order, values, m) for m in batch])
            wrong = forward_deterministic(net, cands).argmax(axis=1) != y[i]
            hits = np.flatnonzero(wrong)
            queries[i] += len(batch) if not hits.size else hits[0] + 1
            if hits.size:
                found = int(batch[hits[0]])
                if hits[0] > 0:
                    prev = int(batch[hits[0] - 1])
                elif start > 0:
                    prev = int(counts[start - 1])
                break
        if found is None:
            x_adv[i] = corrupt(i, order, values, counts[-1])
            flipped[i] = counts[-1]
            continue
        lo, hi = prev, found  # lo unsuccessful (or zero), hi successful
        while hi - lo > 1:
            mid = (lo + hi) // 2
            queries[i] += 1
            if forward_deterministic(net, corrupt(i, order, values, mid)).argmax() != y[i]:
                hi = mid
            else:
                lo = mid
        x_adv[i] = corrupt(i, order, values, hi)
        flipped[i] = hi
        success[i] = True
    return _result(x_adv, success, queries, was_1d, flipped=flipped[0] if was_1d else flipped)


def run_attack(net, X, y, config, b=0.0):
    """Dispatch on ``config.kind``; ``b`` only affects the gradient attacks."""
    if config.kind == "fgsm":
        return fgsm(net, X, y, config.epsilon, b, config.seed)
    if config.kind == "pgd":
        return pgd(net, X, y, config.epsilon, config.steps, config.step_size, config.seed,
                   config.random_start, b)
    if config.kind == "uniform":
        return uniform_noise(net, X, y, config.epsilon, config.repeats, config.seed)
    return salt_pepper(net, X, y, config.steps, config.seed)


def save_adversarial(path, data, config, example):
    """Persist adversarial inputs as a dataset container plus a JSON sidecar
    recording the attack configuration and per-example success flags."""
    path = Path(path)
    adv = Dataset(example.x_adv, data.labels, {**data.meta, "attack": config.kind})
    save_dataset(path, adv)
    sidecar = {
        "attack_config": asdict(config),
        "success": np.asarray(example.success, dtype=bool).tolist(),
        "queries": np.asarray(example.queries).tolist(),
    }
    if config.kind == "salt_pepper":
        sidecar["note"] = "steps is a candidate budget along a linear flip-fraction ramp"
    sidecar_path = path.with_suffix(".attack.json")
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True))
    return sidecar_path
