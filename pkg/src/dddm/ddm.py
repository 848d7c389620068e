"""Drift-diffusion simulation and its closed-form first-passage oracles.

The two-choice model is ``tau * dX = mu * dt + sigma * dW`` with absorbing
bounds at ``+A`` and ``-A``, integrated with Euler-Maruyama. The
multi-choice race integrates ``dy_i = M_i dt + sigma dW_i`` and reports
``X_k = sum_{i<=k} y_i - k * y_{k+1}`` for ``k = 1 .. n-1``.
"""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import ParameterError

UPPER, LOWER, NONE = 1, -1, 0
_CHOICE_NAMES = {UPPER: "upper", LOWER: "lower", NONE: "none"}


@dataclass(frozen=True)
class DdmParams:
    mu: float = 0.0
    sigma: float = 1.0
    tau: float = 1.0
    A: float = 1.0
    dt: float = 1e-3
    t_max: float = None  # None: 100 x the analytic mean first-passage time

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0 and self.A > 0):
            raise ParameterError("sigma, tau and A must be positive")
        if not self.dt > 0:
            raise ParameterError("dt must be positive")
        if self.t_max is not None and self.t_max < self.dt:
            raise ParameterError("t_max must be at least dt")

    @property
    def horizon(self):
        if self.t_max is not None:
            return self.t_max
        return max(100.0 * mean_rt_analytic(self), self.dt)


@dataclass(frozen=True)
class RaceParams:
    means: tuple = (1.0, 0.0)
    sigma: float = 1.0
    dt: float = 1e-2
    t_max: float = 1.0

    def __post_init__(self):
        if len(self.means) < 2:
            raise ParameterError("a race needs at least two alternatives")
        if not self.sigma > 0:
            raise ParameterError("sigma must be positive")
        if not 0 < self.dt <= self.t_max:
            raise ParameterError("need 0 < dt <= t_max")

    @property
    def n(self):
        return len(self.means)

    @property
    def n_steps(self):
        return int(round(self.t_max / self.dt))


@dataclass
class PathResult:
    choice: str
    rt: float
    path: np.ndarray = None

    def __post_init__(self):
        if (self.choice == "none") != (self.rt is None or np.isnan(self.rt)):
            raise ParameterError("choice is 'none' exactly when rt is undefined")


def _unpack(params_or_mu, sigma, A, tau):
    if isinstance(params_or_mu, DdmParams):
        p = params_or_mu
        return p.mu, p.sigma, p.A, p.tau
    return float(params_or_mu), float(sigma), float(A), float(tau)


def hit_probability_analytic(params, sigma=1.0, A=1.0, tau=1.0):
    """Probability of absorbing at ``+A`` before ``-A`` from ``X(0) = 0``.

    Accepts a :class:`DdmParams` or ``mu`` followed by scalars. Dividing the
    equation by ``tau`` gives drift ``mu/tau`` and noise ``sigma/tau``; with
    ``tau = 1`` this is ``1 / (1 + exp(-2 mu A / sigma^2))``.
    """
    mu, sigma, A, tau = _unpack(params, sigma, A, tau)
    return float(expit(2.0 * mu * A * tau / sigma**2))


def mean_rt_analytic(params, sigma=1.0, A=1.0, tau=1.0):
    """Mean first-passage time ``(A/mu) tanh(mu A / sigma^2)`` (at ``tau = 1``);
    the zero-drift limit is ``A^2 / sigma^2``."""
    mu, sigma, A, tau = _unpack(params, sigma, A, tau)
    drift, noise = mu / tau, sigma / tau
    if drift == 0:
        return A**2 / noise**2
    return A / drift * np.tanh(drift * A / noise**2)


def simulate_ddm_path(params, seed=None, record_path=False, chunk=4096):
    """One Euler-Maruyama trajectory from ``X(0) = 0``.

    Increments are drawn in chunks and cumulated, which is the same
    recursion as stepping one ``dt`` at a time.
    """
    rng = np.random.default_rng(seed)
    n_max = int(np.ceil(params.horizon / params.dt))
    drift = params.mu * params.dt / params.tau
    scale = params.sigma * np.sqrt(params.dt) / params.tau
    x, done_steps = 0.0, 0
    pieces = [np.zeros(1)] if record_path else None
    while done_steps < n_max:
        m = min(chunk, n_max - done_steps)
        xs = x + np.cumsum(drift + scale * rng.standard_normal(m))
        hit = np.flatnonzero(np.abs(xs) >= params.A)
        if hit.size:
            j = hit[0]
            if record_path:
                pieces.append(xs[: j + 1])
            choice = "upper" if xs[j] >= params.A else "lower"
            return PathResult(choice, (done_steps + j + 1) * params.dt,
                              np.concatenate(pieces) if record_path else None)
        if record_path:
            pieces.append(xs)
        x = xs[-1]
        done_steps += m
    return PathResult("none", float("nan"), np.concatenate(pieces) if record_path else None)


def simulate_ddm_paths(params, n_paths, seed=None):
    """Vectorized first-passage simulation of ``n_paths`` independent paths.

    Returns ``(choices, rts)``: choices in {1 (upper), -1 (lower), 0 (none)}
    and first-passage times (NaN where the horizon was exhausted). All paths
    share one generator seeded by ``seed``, so results depend on ``n_paths``.
    """
    rng = np.random.default_rng(seed)
    n_max = int(np.ceil(params.horizon / params.dt))
    drift = params.mu * params.dt / params.tau
    scale = params.sigma * np.sqrt(params.dt) / params.tau
    choices = np.zeros(n_paths, dtype=np.int8)
    rts = np.full(n_paths, np.nan)
    idx = np.arange(n_paths)
    x = np.zeros(n_paths)
    for step in range(1, n_max + 1):
        x += drift + scale * rng.standard_normal(len(x))
        up = x >= params.A
        down = x <= -params.A
        hit = up | down
        if hit.any():
            choices[idx[up]] = UPPER
            choices[idx[down]] = LOWER
            rts[idx[hit]] = step * params.dt
            keep = ~hit
            idx, x = idx[keep], x[keep]
            if not len(idx):
                break
    return choices, rts


def choice_name(code):
    return _CHOICE_NAMES[int(code)]


def race_statistics(y):
    """``X_k = sum_{i<=k} y_i - k y_{k+1}`` along the last axis of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    k = np.arange(1, n)
    return np.cumsum(y, axis=-1)[..., :-1] - k * y[..., 1:]


def simulate_race(params, seed=None, n_paths=1):
    """Integrate the race accumulators and return the ``X_k`` trajectories.

    Returns ``(t, X)`` with ``t`` of length ``n_steps + 1`` and ``X`` of shape
    ``(n_paths, n_steps + 1, n - 1)``, starting from zero.
    """
    rng = np.random.default_rng(seed)
    means = np.asarray(params.means, dtype=np.float64)
    steps = params.n_steps
    dy = means * params.dt + params.sigma * np.sqrt(params.dt) * rng.standard_normal(
        (n_paths, steps, params.n))
    y = np.concatenate([np.zeros((n_paths, 1, params.n)), np.cumsum(dy, axis=1)], axis=1)
    t = np.arange(steps + 1) * params.dt
    return t, race_statistics(y)


def race_drift(means):
    """Expected drift of each ``X_k``: ``sum_{i<=k} M_i - k M_{k+1}``."""
    return race_statistics(np.asarray(means, dtype=np.float64))


def save_paths_csv(path, t, X):
    """Dump one trajectory as CSV with columns ``t, X`` or ``t, X_1 .. X_{n-1}``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        header, rows = ["t", "X"], X[:, None]
    else:
        header = ["t"] + [f"X_{k}" for k in range(1, X.shape[1] + 1)]
        rows = X
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ti, row in zip(t, rows):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in row])
