"""Experiment orchestration: dropout-rate grid, attack evaluation, epsilon
sweeps and the layer-sensitivity diagnostic.

All randomness comes from one root seed through :func:`derive_seed`, keyed
by what is being computed (``"train", a`` or ``"attack", kind, a, b``), so
results do not depend on execution order or thread count.
"""
import csv
import dataclasses
import json
import logging
import platform
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn
from scipy.stats import spearmanr

from .attacks import run_attack
from .classifier import (NetworkConfig, forward_deterministic, hidden_activations,
                         sample_predictions, train)
from .dataio import SplitSpec, load_mnist, split, synthetic_blobs
from .evidence import build_likelihood_table
from .exceptions import DDDMError, ParameterError
from .pipeline import accumulate

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("a", "b", "attack", "epsilon", "acc_h", "acc_H", "acc_H_trial", "mean_rt",
                  "acc_undefended", "seed")
CURVE_COLUMNS = ("epsilon", "acc_undefended", "acc_dropout", "acc_dddm", "acc_dddm_trial",
                 "mean_rt")
LAYER_COLUMNS = ("layer", "width", "cos_mean", "cos_std", "l2_mean", "l2_std", "rel_l2_mean")


def derive_seed(root, *parts):
    """Stable 32-bit seed for ``parts`` under ``root``.

    Strings and floats are hashed through their text form, so
    ``derive_seed(0, "attack", "pgd", 0.2, 0.6)`` is the same in every run.
    """
    words = [int(root)]
    for p in parts:
        if isinstance(p, (int, np.integer)) and not isinstance(p, bool):
            words.append(int(p))
        else:
            words.append(zlib.crc32(repr(p).encode()))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns, rows):
    """Rows are dicts; floats are written with ``repr`` so reruns are byte-identical."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def environment_fingerprint():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
    }


def write_manifest(out_dir, config, command, outputs, extra=None):
    """JSON manifest with the resolved config and an environment fingerprint.
    No timestamps, so identical runs write identical manifests."""
    doc = {
        "command": command,
        "config": config.to_dict() if hasattr(config, "to_dict") else config,
        "environment": environment_fingerprint(),
        "outputs": sorted(outputs),
    }
    if extra:
        doc["results"] = extra
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- data and models ---------------------------------------------------------

def prepare_data(config):
    """``(train, val, eval)`` datasets; eval is capped at ``data.eval_size``."""
    spec = config.data
    if spec.source == "mnist":
        data = load_mnist(spec.data_dir)
    else:
        data = synthetic_blobs(spec.blobs_classes, spec.blobs_dim, spec.blobs_per_class,
                               spec.blobs_spread, derive_seed(config.seed, "blobs"))
    fr = spec.split
    tr, va, te = split(data, SplitSpec(fr[0], fr[1], fr[2], derive_seed(config.seed, "split")))
    if spec.eval_size and len(te) > spec.eval_size:
        te = te.subset(np.arange(spec.eval_size))
    return tr, va, te


def network_config(config, a, n_features, n_classes):
    sizes = (n_features,) + tuple(config.model.hidden_layer_sizes) + (n_classes,)
    return NetworkConfig(layer_sizes=sizes, dropout_train=float(a),
                         activation=config.model.activation,
                         seed=derive_seed(config.seed, "init", float(a)))


def train_model(config, data, a):
    tc = dataclasses.replace(config.train, seed=derive_seed(config.seed, "train", float(a)))
    net = train(network_config(config, a, data.features.shape[1], data.n_classes), tc, data)
    log.info("trained a=%.2f (final loss %.4f)", a, net.meta["loss_history"][-1])
    return net


def build_table_for(net, b, data, params, passes=10, seed=0, max_inputs=None):
    """Likelihood table from ``passes`` stochastic predictions per clean
    training input at test-phase rate ``b``."""
    if max_inputs is not None and len(data) > max_inputs:
        data = data.subset(np.arange(max_inputs))
    P = sample_predictions(net, data.features, b, passes, seed)
    return build_likelihood_table(P.reshape(-1, P.shape[-1]), np.repeat(data.labels, passes),
                                  params.k, params.smoothing, net.n_classes)


# -- evaluation --------------------------------------------------------------

def evaluate_dropout_classifier(net, b, data, seed=0):
    """One-shot accuracy: one stochastic forward pass per input."""
    P = sample_predictions(net, data.features, b, 1, seed)[:, 0]
    return float((P.argmax(axis=1) == data.labels).mean())


def evaluate_undefended(net, data):
    return float((forward_deterministic(net, data.features).argmax(axis=1) == data.labels).mean())


class DDDMEvaluation(tuple):
    """``(accuracy, mean_rt, outcomes)`` with attribute access."""

    def __new__(cls, accuracy, mean_rt, outcomes, trial_accuracy):
        self = super().__new__(cls, (accuracy, mean_rt, outcomes))
        self.trial_accuracy = trial_accuracy
        return self

    accuracy = property(lambda self: self[0])
    mean_rt = property(lambda self: self[1])
    outcomes = property(lambda self: self[2])


def evaluate_dddm(net, b, table, data, params, seed=0, chunk=250):
    """Accumulator accuracy and mean response time on ``data``.

    Predictions for input ``i`` come from ``default_rng([seed, i])`` and its
    trials from ``default_rng([seed + 1, i])``, so chunking does not matter.
    """
    parts = []
    for start in range(0, len(data), chunk):
        X = data.features[start:start + chunk]
        P = sample_predictions(net, X, b, params.n_predictions, seed, offset=start)
        parts.append(accumulate(P, table, params, seed + 1, offset=start))
    out = _concat_results(parts)
    return DDDMEvaluation(out.accuracy(data.labels), float(out.rts.mean()), out,
                          out.trial_accuracy(data.labels))


def _concat_results(parts):
    first = parts[0]
    return type(first)(*[np.concatenate([getattr(p, f.name) for p in parts])
                         for f in dataclasses.fields(first)])


# -- grid --------------------------------------------------------------------

@dataclass
class CellResult:
    a: float
    b: float
    clean_acc_dropout: float = float("nan")
    clean_acc_dddm: float = float("nan")
    clean_acc_dddm_trial: float = float("nan")
    mean_rt_clean: float = float("nan")
    attacks: dict = field(default_factory=dict)  # kind -> {acc_h, acc_H, acc_H_trial, mean_rt, epsilon}
    error: str = None

    @property
    def ok(self):
        return self.error is None

    @property
    def robust_acc_dropout(self):
        return float(np.mean([v["acc_h"] for v in self.attacks.values()]))

    @property
    def robust_acc_dddm(self):
        return float(np.mean([v["acc_H"] for v in self.attacks.values()]))

    @property
    def mean_rt_adv(self):
        return float(np.mean([v["mean_rt"] for v in self.attacks.values()]))


@dataclass
class GridResult:
    cells: list
    selected: tuple
    undefended: dict  # "clean" and attack kind -> accuracy
    models: dict = field(default_factory=dict, repr=False)
    tables: dict = field(default_factory=dict, repr=False)

    def cell(self, a, b):
        for c in self.cells:
            if np.isclose(c.a, a) and np.isclose(c.b, b):
                return c
        raise KeyError((a, b))

    def rows(self, seed):
        out = []
        for c in self.cells:
            if not c.ok:
                continue
            out.append(dict(a=c.a, b=c.b, attack="clean", epsilon=0.0, acc_h=c.clean_acc_dropout,
                            acc_H=c.clean_acc_dddm, acc_H_trial=c.clean_acc_dddm_trial,
                            mean_rt=c.mean_rt_clean, acc_undefended=self.undefended["clean"],
                            seed=seed))
            for kind, r in c.attacks.items():
                out.append(dict(a=c.a, b=c.b, attack=kind, epsilon=r["epsilon"], acc_h=r["acc_h"],
                                acc_H=r["acc_H"], acc_H_trial=r["acc_H_trial"],
                                mean_rt=r["mean_rt"], acc_undefended=self.undefended[kind],
                                seed=seed))
        return out


def select_cell(cells, margin=0.02):
    """Pick ``(a, b)`` with the best mean robust DDDM accuracy among cells whose
    clean DDDM accuracy is within ``margin`` of the best clean cell.

    Ties go to the earlier cell in ``cells``.
    """
    ok = [c for c in cells if c.ok]
    if not ok:
        raise DDDMError("no grid cell completed")
    best_clean = max(c.clean_acc_dddm for c in ok)
    eligible = [c for c in ok if c.clean_acc_dddm >= best_clean - margin - 1e-12]
    if not eligible[0].attacks:
        chosen = max(eligible, key=lambda c: c.clean_acc_dddm)
    else:
        chosen = max(eligible, key=lambda c: c.robust_acc_dddm)
    return (chosen.a, chosen.b)


def _attack_seed(config, attack, a, b):
    return dataclasses.replace(attack, seed=derive_seed(config.seed, "attack", attack.kind,
                                                        float(a), float(b)))


def _evaluate_cell(config, net, a, b, train_data, eval_data, shared_adv):
    root = config.seed
    params = config.dddm
    cell = CellResult(float(a), float(b))
    try:
        table = build_table_for(net, b, train_data, params, config.table_passes,
                                derive_seed(root, "table", float(a), float(b)),
                                config.table_inputs)
        cell.clean_acc_dropout = evaluate_dropout_classifier(
            net, b, eval_data, derive_seed(root, "oneshot", "clean", float(a), float(b)))
        ev = evaluate_dddm(net, b, table, eval_data, params,
                           derive_seed(root, "dddm", "clean", float(a), float(b)))
        cell.clean_acc_dddm, cell.mean_rt_clean = ev.accuracy, ev.mean_rt
        cell.clean_acc_dddm_trial = ev.trial_accuracy
        for attack in config.grid.attacks:
            if shared_adv is not None:
                adv = shared_adv[attack.kind]
            else:
                gb = b if config.grid.attack_gradient == "stochastic" else 0.0
                x = run_attack(net, eval_data.features, eval_data.labels,
                               _attack_seed(config, attack, a, b), b=gb).x_adv
                adv = type(eval_data)(x, eval_data.labels, eval_data.meta)
            acc_h = evaluate_dropout_classifier(
                net, b, adv, derive_seed(root, "oneshot", attack.kind, float(a), float(b)))
            ev = evaluate_dddm(net, b, table, adv, params,
                               derive_seed(root, "dddm", attack.kind, float(a), float(b)))
            cell.attacks[attack.kind] = dict(epsilon=float(attack.epsilon), acc_h=acc_h,
                                             acc_H=ev.accuracy, acc_H_trial=ev.trial_accuracy,
                                             mean_rt=ev.mean_rt)
        log.info("cell a=%.1f b=%.1f clean H=%.3f h=%.3f %s", a, b, cell.clean_acc_dddm,
                 cell.clean_acc_dropout,
                 " ".join(f"{k}: H={v['acc_H']:.3f} h={v['acc_h']:.3f}"
                          for k, v in cell.attacks.items()))
        return cell, table
    except (DDDMError, ArithmeticError, ValueError) as exc:
        log.warning("cell a=%s b=%s failed: %s", a, b, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell, None


def run_grid(config, data=None, models=None):
    """Train one model per training rate, evaluate every (a, b) cell under
    every configured attack and select ``(a*, b*)``.

    ``data`` is an optional ``(train, val, eval)`` triple and ``models`` an
    optional ``{a: NetworkState}`` of pre-trained networks.
    """
    train_data, _, eval_data = data if data is not None else prepare_data(config)
    models = dict(models or {})
    rates_a = sorted({float(a) for a in config.grid.rates_a} | {0.0})
    for a in rates_a:
        if a not in models:
            models[a] = train_model(config, train_data, a)

    base = models[0.0]
    undefended = {"clean": evaluate_undefended(base, eval_data)}
    shared = {} if config.grid.attack_mode == "shared" else None
    for attack in config.grid.attacks:
        ex = run_attack(base, eval_data.features, eval_data.labels,
                        _attack_seed(config, attack, 0.0, 0.0), b=0.0)
        adv = type(eval_data)(ex.x_adv, eval_data.labels, eval_data.meta)
        undefended[attack.kind] = evaluate_undefended(base, adv)
        if shared is not None:
            shared[attack.kind] = adv

    jobs = [(float(a), float(b)) for a in config.grid.rates_a for b in config.grid.rates_b]

    def work(ab):
        a, b = ab
        return _evaluate_cell(config, models[a], a, b, train_data, eval_data, shared)

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            done = list(pool.map(work, jobs))
    else:
        done = [work(ab) for ab in jobs]
    cells = [c for c, _ in done]
    tables = {(c.a, c.b): t for c, t in done if t is not None}
    selected = select_cell(cells, config.grid.selection_margin)
    log.info("selected (a*, b*) = %s", selected)
    return GridResult(cells, selected, undefended, models, tables)


# -- sweep -------------------------------------------------------------------

def epsilon_sweep(net, b, table, attack_kind, eps_list, data, params, seed=0,
                  baseline_net=None, attack_template=None, gradient="stochastic"):
    """Accuracy of the undefended, one-shot dropout and accumulator systems
    and the accumulator's mean response time for each ``epsilon``.

    The undefended system is ``baseline_net`` (default ``net``) without
    dropout, attacked with deterministic gradients. The dropout systems are
    attacked with gradients at rate ``b`` (``gradient="stochastic"``) or
    with deterministic gradients.
    """
    from .attacks import AttackConfig

    template = attack_template or AttackConfig.paper_default(attack_kind)
    base = baseline_net if baseline_net is not None else net
    gb = b if gradient == "stochastic" else 0.0
    rows = []
    for eps in eps_list:
        cfg = dataclasses.replace(template, epsilon=float(eps),
                                  seed=derive_seed(seed, "sweep-attack", float(eps)))
        x_base = run_attack(base, data.features, data.labels, cfg, b=0.0).x_adv
        x_adv = run_attack(net, data.features, data.labels, cfg, b=gb).x_adv
        adv = type(data)(x_adv, data.labels, data.meta)
        ev = evaluate_dddm(net, b, table, adv, params, derive_seed(seed, "sweep-dddm", float(eps)))
        rows.append(dict(
            epsilon=float(eps),
            acc_undefended=evaluate_undefended(base, type(data)(x_base, data.labels, data.meta)),
            acc_dropout=evaluate_dropout_classifier(net, b, adv,
                                                    derive_seed(seed, "sweep-oneshot", float(eps))),
            acc_dddm=ev.accuracy, acc_dddm_trial=ev.trial_accuracy, mean_rt=ev.mean_rt))
        log.info("eps=%.3f %s", eps, rows[-1])
    return rows


def rt_trend(rows):
    """Spearman correlation between epsilon and mean response time."""
    eps = [r["epsilon"] for r in rows]
    rt = [r["mean_rt"] for r in rows]
    if len(set(rt)) < 2:
        return float("nan")
    return float(spearmanr(eps, rt).statistic)


# -- layer sensitivity -------------------------------------------------------

def _pair_stats(H0, H1):
    n0 = np.linalg.norm(H0, axis=1)
    n1 = np.linalg.norm(H1, axis=1)
    denom = n0 * n1
    dot = np.einsum("ij,ij->i", H0, H1)
    both_zero = (n0 == 0) & (n1 == 0)
    cos = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), np.where(both_zero, 1.0, 0.0))
    l2 = np.linalg.norm(H0 - H1, axis=1)
    rel = l2 / np.where(n0 > 0, n0, 1.0)
    return cos, l2, rel


def layer_sensitivity(net, clean_inputs, adv_inputs):
    """Per-layer cosine similarity and L2 distance between hidden outputs on
    paired clean and adversarial inputs (deterministic pass).

    Returns one dict per layer (hidden layers then the softmax output) with
    keys from ``LAYER_COLUMNS``. ``cos`` and ``l2`` hold the raw per-input
    values for further tests.
    """
    A = np.atleast_2d(np.asarray(clean_inputs, dtype=np.float64))
    B = np.atleast_2d(np.asarray(adv_inputs, dtype=np.float64))
    if A.shape != B.shape:
        raise ParameterError("clean and adversarial inputs must be paired")
    return activation_sensitivity(hidden_activations(net, A), hidden_activations(net, B))


def activation_sensitivity(acts_clean, acts_adv):
    """Statistics for precomputed per-layer activation lists."""
    out = []
    for i, (H0, H1) in enumerate(zip(acts_clean, acts_adv), start=1):
        cos, l2, rel = _pair_stats(np.atleast_2d(H0), np.atleast_2d(H1))
        out.append(dict(layer=i, width=np.atleast_2d(H0).shape[1],
                        cos_mean=float(cos.mean()), cos_std=float(cos.std()),
                        l2_mean=float(l2.mean()), l2_std=float(l2.std()),
                        rel_l2_mean=float(rel.mean()), cos=cos, l2=l2))
    return out


# -- synthetic predictor -----------------------------------------------------

def synthetic_predictions(labels, n_samples, accuracy=0.7, n_classes=2, seed=0):
    """Stochastic predictor whose every draw is correct with probability
    ``accuracy``; wrong draws pick a uniformly random other class.

    Each draw puts mass ``u ~ U(0.5, 1)`` on its label and spreads the rest
    evenly, so the top-1 label is the drawn label.
    """
    y = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = len(y)
    correct = rng.random((n, n_samples)) < accuracy
    other = (y[:, None] + rng.integers(1, n_classes, (n, n_samples))) % n_classes
    lab = np.where(correct, y[:, None], other)
    u = rng.uniform(0.5, 1.0, (n, n_samples))
    P = np.broadcast_to(((1 - u) / (n_classes - 1))[..., None], (n, n_samples, n_classes)).copy()
    np.put_along_axis(P, lab[..., None], u[..., None], axis=2)
    return P
