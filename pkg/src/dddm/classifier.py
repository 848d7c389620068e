"""Feedforward network with train-phase and test-phase dropout, in numpy.

Dropout follows every hidden layer and uses the inverted convention:
retained units are scaled by ``1 / (1 - rate)`` so that rate 0 is the exact
identity and the mask expectation equals the deterministic pass.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DivergenceError, ParameterError
from .validation import check_inputs, check_labels, check_rate

PAPER_RATES = (0.0, 0.2, 0.4, 0.6, 0.8)
CHECKPOINT_FORMAT = "dddm-checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, h: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, h: 1.0 - h**2),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda z, h: h * (1.0 - h)),
}


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple = (784, 256, 128, 10)
    dropout_train: float = 0.0
    dropout_test: float = 0.0
    activation: str = "relu"
    seed: int = 0
    paper_grid: bool = False

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ParameterError("layer_sizes needs an input and an output size")
        check_rate(self.dropout_train, "dropout_train")
        check_rate(self.dropout_test, "dropout_test")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.paper_grid and not {self.dropout_train, self.dropout_test} <= set(PAPER_RATES):
            raise ParameterError(f"paper-grid rates must come from {PAPER_RATES}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 10
    momentum: float = 0.9
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.loss != "cross_entropy":
            raise ParameterError("only cross_entropy loss is supported")


@dataclass
class NetworkState:
    """Trained weights (``W[l]`` has shape ``(fan_in, fan_out)``) and metadata."""
    weights: list
    biases: list
    activation: str = "relu"
    dropout_train: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        sizes = self.layer_sizes
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise ParameterError(f"layer {l}: inconsistent weight/bias shapes")

    @property
    def layer_sizes(self):
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def n_classes(self):
        return self.weights[-1].shape[1]


def init_network(config):
    """He-initialized weights for ReLU, Glorot-style scaling otherwise."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
        gain = 2.0 if config.activation == "relu" else 1.0
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
        biases.append(np.zeros(fan_out))
    return NetworkState(weights, biases, config.activation, config.dropout_train)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(net, X, rate=0.0, rng=None, masks=None):
    """Forward pass returning logits and the per-layer caches for backprop.

    Masks are drawn from ``rng`` layer by layer, shape ``(n, width)``, unless
    given explicitly.
    """
    act, _ = _ACTIVATIONS[net.activation]
    h = X
    cache = []
    n_hidden = len(net.weights) - 1
    for l in range(n_hidden):
        z = h @ net.weights[l] + net.biases[l]
        a = act(z)
        if masks is not None:
            m = masks[l]
        elif rate > 0:
            m = (rng.random(a.shape) < 1.0 - rate) / (1.0 - rate)
        else:
            m = None
        cache.append((h, z, a, m))
        h = a * m if m is not None else a
    logits = h @ net.weights[-1] + net.biases[-1]
    cache.append((h, logits, None, None))
    return logits, cache


def _backward(net, cache, dlogits):
    """Gradients of a loss w.r.t. weights, biases and the input."""
    _, dact = _ACTIVATIONS[net.activation]
    grads_w, grads_b = [None] * len(net.weights), [None] * len(net.weights)
    h_last = cache[-1][0]
    grads_w[-1] = h_last.T @ dlogits
    grads_b[-1] = dlogits.sum(axis=0)
    dh = dlogits @ net.weights[-1].T
    for l in range(len(net.weights) - 2, -1, -1):
        h_in, z, a, m = cache[l]
        if m is not None:
            dh = dh * m
        dz = dh * dact(z, a)
        grads_w[l] = h_in.T @ dz
        grads_b[l] = dz.sum(axis=0)
        dh = dz @ net.weights[l].T
    return grads_w, grads_b, dh


def forward_deterministic(net, x):
    """Mask-free softmax output for one input or a batch of inputs."""
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    logits, _ = _forward(net, X)
    p = softmax(logits)
    return p[0] if was_1d else p


def forward_stochastic(net, x, b, seed=None):
    """Softmax output under a fresh Bernoulli(1 - b) mask at every dropout site.

    ``seed`` may be anything accepted by ``np.random.default_rng``, including
    a Generator. In a batch every row gets its own masks.
    """
    check_rate(b, "b")
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    logits, _ = _forward(net, X, b, np.random.default_rng(seed))
    p = softmax(logits)
    return p[0] if was_1d else p


def sample_predictions(net, X, b, n_samples, seed=None, chunk=64, offset=0):
    """``n_samples`` stochastic forward passes for each row of ``X``.

    Returns an array of shape ``(n, n_samples, C)``. Row ``i`` uses the
    generator ``default_rng([seed, offset + i])``, so results do not depend on how
    inputs are chunked or ordered; they equal
    ``forward_stochastic(net, tile(X[i]), b, default_rng([seed, offset + i]))``.
    """
    check_rate(b, "b")
    X, _ = check_inputs(X, net.layer_sizes[0])
    seed = 0 if seed is None else int(seed)
    act, _ = _ACTIVATIONS[net.activation]
    n_hidden = len(net.weights) - 1
    out = np.empty((len(X), n_samples, net.n_classes))
    for start in range(0, len(X), chunk):
        rows = range(start, min(start + chunk, len(X)))
        if n_hidden == 0 or b == 0:
            logits, _ = _forward(net, X[start:rows.stop])
            out[start:rows.stop] = softmax(logits)[:, None, :]
            continue
        rngs = [np.random.default_rng([seed, offset + i]) for i in rows]
        # the first hidden layer's pre-mask output is shared by all samples of an input
        h = act(X[start:rows.stop] @ net.weights[0] + net.biases[0])
        h = np.repeat(h, n_samples, axis=0)
        for l in range(n_hidden):
            if l > 0:
                h = act(h @ net.weights[l] + net.biases[l])
            width = h.shape[1]
            keep = np.concatenate([g.random((n_samples, width)) for g in rngs]) < 1.0 - b
            h = h * (keep / (1.0 - b))
        logits = h @ net.weights[-1] + net.biases[-1]
        out[start:rows.stop] = softmax(logits).reshape(len(rows), n_samples, -1)
    return out


def hidden_activations(net, x):
    """Deterministic post-activation outputs of every layer (softmax last)."""
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    logits, cache = _forward(net, X)
    layers = [c[2] for c in cache[:-1]] + [softmax(logits)]
    return [a[0] for a in layers] if was_1d else layers


def cross_entropy(probs, y):
    return -np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))


def input_gradient(net, x, y):
    """Gradient of the cross-entropy loss w.r.t. the input, deterministic pass.

    For a batch, row ``i`` is the gradient of example ``i``'s own loss.
    """
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    y = check_labels(y, len(X), net.n_classes)
    logits, cache = _forward(net, X)
    dlogits = softmax(logits)
    dlogits[np.arange(len(X)), y] -= 1.0
    _, _, dx = _backward(net, cache, dlogits)
    return dx[0] if was_1d else dx


def stochastic_input_gradient(net, x, y, b, seed=None):
    """Input gradient of the cross-entropy through one dropout sample at rate ``b``.

    Each row gets its own mask; ``b = 0`` reduces to :func:`input_gradient`.
    """
    check_rate(b, "b")
    X, was_1d = check_inputs(x, net.layer_sizes[0])
    y = check_labels(y, len(X), net.n_classes)
    logits, cache = _forward(net, X, b, np.random.default_rng(seed))
    dlogits = softmax(logits)
    dlogits[np.arange(len(X)), y] -= 1.0
    _, _, dx = _backward(net, cache, dlogits)
    return dx[0] if was_1d else dx


def train(config, tc, data):
    """Minibatch SGD (with momentum) on cross-entropy under train-phase dropout.

    Raises
    ------
    DivergenceError
        If an epoch ends with a non-finite loss.
    """
    X, _ = check_inputs(data.features, config.layer_sizes[0])
    C = config.layer_sizes[-1]
    y = check_labels(data.labels, len(X), C)
    missing = set(range(C)) - set(np.unique(y).tolist())
    if missing:
        raise ParameterError(f"training data lacks classes {sorted(missing)}")

    net = init_network(config)
    rng = np.random.default_rng(tc.seed)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    history = []
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            logits, cache = _forward(net, X[idx], config.dropout_train, rng)
            p = softmax(logits)
            total += cross_entropy(p, y[idx]).sum()
            p[np.arange(len(idx)), y[idx]] -= 1.0
            gw, gb, _ = _backward(net, cache, p / len(idx))
            for l in range(len(net.weights)):
                vel_w[l] = tc.momentum * vel_w[l] - tc.learning_rate * gw[l]
                vel_b[l] = tc.momentum * vel_b[l] - tc.learning_rate * gb[l]
                net.weights[l] += vel_w[l]
                net.biases[l] += vel_b[l]
        loss = total / len(X)
        if not np.isfinite(loss):
            raise DivergenceError(epoch, loss)
        history.append(loss)
    net.meta = {"epochs": tc.epochs, "final_loss": history[-1], "loss_history": history,
                "train_config": asdict(tc), "network_config": asdict(config)}
    return net


def accuracy(probs, y):
    return float((np.asarray(probs).argmax(axis=-1) == np.asarray(y)).mean())


def save_checkpoint(path, net):
    """Versioned JSON checkpoint; floats are written with ``repr`` precision."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "dropout_train": net.dropout_train,
        "weights": [w.ravel(order="C").tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "meta": net.meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ParameterError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    sizes = doc["layer_sizes"]
    weights = [np.asarray(w, dtype=np.float64).reshape(sizes[l], sizes[l + 1])
               for l, w in enumerate(doc["weights"])]
    return NetworkState(weights, doc["biases"], doc["activation"], doc["dropout_train"],
                        doc.get("meta", {}))


class DropoutMLPClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around the dropout network.

    ``dropout_train`` is the rate ``a`` used during fitting and
    ``dropout_test`` the rate ``b`` of the stochastic predictions.
    ``predict``/``predict_proba`` use the deterministic (mask-free) pass;
    :meth:`predict_stochastic` and :meth:`sample_proba` apply test-phase
    dropout.
    """

    def __init__(self, hidden_layer_sizes=(256, 128), dropout_train=0.0, dropout_test=0.0,
                 activation="relu", learning_rate=0.05, momentum=0.9, batch_size=64,
                 epochs=10, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.dropout_train = dropout_train
        self.dropout_test = dropout_test
        self.activation = activation
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        from .dataio import Dataset
        X = np.asarray(X, dtype=np.float64)
        self.classes_, y_enc = np.unique(np.asarray(y), return_inverse=True)
        sizes = (X.shape[1], *self.hidden_layer_sizes, len(self.classes_))
        seed = 0 if self.random_state is None else int(self.random_state)
        config = NetworkConfig(sizes, self.dropout_train, self.dropout_test,
                               self.activation, seed)
        tc = TrainConfig(self.learning_rate, self.batch_size, self.epochs,
                         self.momentum, seed + 1)
        self.network_ = train(config, tc, Dataset(X, y_enc, {"source": "fit"}))
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_network(cls, net, dropout_test=0.0, classes=None):
        """Wrap an already trained :class:`NetworkState`."""
        sizes = net.layer_sizes
        est = cls(hidden_layer_sizes=tuple(sizes[1:-1]), dropout_train=net.dropout_train,
                  dropout_test=dropout_test, activation=net.activation)
        est.network_ = net
        est.classes_ = np.arange(sizes[-1]) if classes is None else np.asarray(classes)
        est.n_features_in_ = sizes[0]
        return est

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return forward_deterministic(self.network_, np.atleast_2d(X))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def sample_proba(self, X, n_samples=1, random_state=None):
        """``(n, n_samples, C)`` stochastic predictions at rate ``dropout_test``."""
        check_is_fitted(self, "network_")
        return sample_predictions(self.network_, X, self.dropout_test, n_samples, random_state)

    def predict_stochastic(self, X, random_state=None):
        """One-shot labels from a single dropout forward pass per input."""
        p = self.sample_proba(X, 1, random_state)[:, 0]
        return self.classes_[p.argmax(axis=1)]

    def input_gradient(self, X, y):
        check_is_fitted(self, "network_")
        y_enc = np.searchsorted(self.classes_, np.asarray(y))
        return input_gradient(self.network_, X, y_enc)
