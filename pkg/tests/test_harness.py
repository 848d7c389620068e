import dataclasses

import numpy as np
import pytest

from dddm import harness
from dddm.attacks import AttackConfig, pgd
from dddm.classifier import NetworkConfig, TrainConfig, train
from dddm.config import DataSpec, ExperimentConfig, GridSpec, ModelSpec
from dddm.dataio import Dataset, load_mnist
from dddm.evidence import build_likelihood_table, run_trial
from dddm.harness import CellResult, select_cell
from dddm.pipeline import DDDMParams, accumulate


def blobs_config(**grid):
    return ExperimentConfig(
        seed=1,
        data=DataSpec(source="blobs", eval_size=60, blobs_classes=3, blobs_dim=10,
                      blobs_per_class=60, blobs_spread=0.1),
        model=ModelSpec(hidden_layer_sizes=(16,)),
        train=TrainConfig(learning_rate=0.1, epochs=5),
        dddm=DDDMParams(n_predictions=30, n_trials=3, trial_length=10),
        table_passes=3,
        grid=GridSpec(rates_a=(0.0, 0.4), rates_b=(0.0, 0.4),
                      attacks=(AttackConfig("fgsm", 0.2), AttackConfig("pgd", 0.2, steps=5)),
                      **grid),
    )


def mock_cell(a, b, clean, robust):
    return CellResult(a, b, clean_acc_dddm=clean,
                      attacks={"fgsm": dict(acc_H=robust, acc_h=0, acc_H_trial=0, mean_rt=1,
                                            epsilon=0.3)})


def test_derive_seed_is_stable_and_distinct():
    assert harness.derive_seed(0, "attack", "pgd", 0.2) == harness.derive_seed(0, "attack", "pgd",
                                                                              0.2)
    seeds = {harness.derive_seed(r, "x", a) for r in (0, 1) for a in (0.0, 0.2, 0.4)}
    assert len(seeds) == 6


def test_selection_rule_on_mock_grid():
    cells = [
        mock_cell(0.0, 0.0, 0.98, 0.10),
        mock_cell(0.0, 0.8, 0.90, 0.60),  # most robust, but too much clean accuracy lost
        mock_cell(0.2, 0.6, 0.965, 0.40),  # within 2 points of 0.98
        mock_cell(0.4, 0.4, 0.97, 0.30),
    ]
    assert select_cell(cells, margin=0.02) == (0.2, 0.6)
    assert select_cell(cells, margin=0.10) == (0.0, 0.8)
    assert select_cell(cells, margin=0.0) == (0.0, 0.0)


def test_selection_skips_failed_cells():
    bad = mock_cell(0.0, 0.0, 0.99, 0.9)
    bad.error = "boom"
    assert select_cell([bad, mock_cell(0.2, 0.2, 0.9, 0.1)]) == (0.2, 0.2)


def test_two_by_two_grid_smoke(tmp_path):
    config = blobs_config()
    result = harness.run_grid(config)
    assert len(result.cells) == 4 and all(c.ok for c in result.cells)
    assert result.selected in {(c.a, c.b) for c in result.cells}
    for c in result.cells:
        for v in [c.clean_acc_dddm, c.clean_acc_dropout] + [r["acc_H"] for r in c.attacks.values()]:
            assert 0.0 <= v <= 1.0
        for r in c.attacks.values():
            assert 1 <= r["mean_rt"] <= config.dddm.trial_length
    rows = result.rows(config.seed)
    assert len(rows) == 4 * 3
    harness.write_csv(tmp_path / "r.csv", harness.RESULT_COLUMNS, rows)
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("a,b,attack,epsilon")


def test_grid_is_invariant_to_threads():
    one = harness.run_grid(blobs_config())
    config = blobs_config().replace(threads=3)
    many = harness.run_grid(config)
    assert one.rows(1) == many.rows(1)


def test_shared_attack_mode_runs():
    result = harness.run_grid(blobs_config(attack_mode="shared"))
    assert len(result.cells) == 4


def test_cell_failure_is_recorded(monkeypatch):
    real = harness.build_table_for

    def flaky(net, b, *args, **kwargs):
        if b == 0.4:
            from dddm.exceptions import BuildError
            raise BuildError("synthetic failure")
        return real(net, b, *args, **kwargs)

    monkeypatch.setattr(harness, "build_table_for", flaky)
    result = harness.run_grid(blobs_config())
    failed = [c for c in result.cells if not c.ok]
    assert len(failed) == 2 and all("synthetic failure" in c.error for c in failed)
    assert result.selected[1] == 0.0


@pytest.fixture(scope="module")
def blob_model():
    config = blobs_config()
    tr, _, te = harness.prepare_data(config)
    net = harness.train_model(config, tr, 0.0)
    return config, tr, te, net


def test_dropout_rate_zero_equals_deterministic(blob_model):
    _, _, te, net = blob_model
    assert harness.evaluate_dropout_classifier(net, 0.0, te, seed=3) == \
        harness.evaluate_undefended(net, te)


def test_noiseless_dddm_matches_deterministic(blob_model):
    config, tr, te, net = blob_model
    # with enough table mass the smoothing leaves the observed signature above A after one step
    table = harness.build_table_for(net, 0.0, tr, config.dddm, passes=20)
    ev = harness.evaluate_dddm(net, 0.0, table, te, config.dddm, seed=0)
    assert ev.accuracy == harness.evaluate_undefended(net, te)
    assert ev.mean_rt == 1.0


def test_evaluate_dddm_is_chunk_invariant(blob_model):
    config, tr, te, net = blob_model
    table = harness.build_table_for(net, 0.4, tr, config.dddm, passes=3, seed=1)
    a = harness.evaluate_dddm(net, 0.4, table, te, config.dddm, seed=5, chunk=7)
    b = harness.evaluate_dddm(net, 0.4, table, te, config.dddm, seed=5, chunk=1000)
    assert a.accuracy == b.accuracy and a.mean_rt == b.mean_rt
    np.testing.assert_array_equal(a.outcomes.rts, b.outcomes.rts)


def test_single_point_sweep_equals_direct_evaluation(blob_model):
    config, tr, te, net = blob_model
    table = harness.build_table_for(net, 0.4, tr, config.dddm, passes=3, seed=1)
    template = AttackConfig("pgd", 0.1, steps=3)
    rows = harness.epsilon_sweep(net, 0.4, table, "pgd", [0.1], te, config.dddm, seed=2,
                                 attack_template=template)
    cfg = dataclasses.replace(template, seed=harness.derive_seed(2, "sweep-attack", 0.1))
    x = pgd(net, te.features, te.labels, 0.1, 3, None, cfg.seed, True, 0.4).x_adv
    adv = Dataset(x, te.labels)
    ev = harness.evaluate_dddm(net, 0.4, table, adv, config.dddm,
                               harness.derive_seed(2, "sweep-dddm", 0.1))
    assert rows[0]["acc_dddm"] == ev.accuracy and rows[0]["mean_rt"] == ev.mean_rt


def test_zero_epsilon_sweep_row(blob_model):
    config, tr, te, net = blob_model
    table = harness.build_table_for(net, 0.4, tr, config.dddm, passes=3, seed=1)
    row = harness.epsilon_sweep(net, 0.4, table, "fgsm", [0.0], te, config.dddm)[0]
    assert row["acc_undefended"] == harness.evaluate_undefended(net, te)


def test_rt_trend():
    rows = [dict(epsilon=e, mean_rt=r) for e, r in [(0, 3), (0.1, 4), (0.2, 6), (0.3, 5.9)]]
    assert harness.rt_trend(rows) == pytest.approx(0.8)


def test_layer_sensitivity_identity(blob_model):
    _, _, te, net = blob_model
    stats = harness.layer_sensitivity(net, te.features, te.features)
    assert len(stats) == 2
    for s in stats:
        assert s["cos_mean"] == pytest.approx(1.0) and s["l2_mean"] == 0.0


def test_activation_sensitivity_orthogonal_fixture():
    clean = [np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])]
    adv = [np.array([[0.0, 3.0, 0.0], [0.0, 0.0, 1.0]])]
    s = harness.activation_sensitivity(clean, adv)[0]
    assert s["cos_mean"] == 0.0 and s["cos_std"] == 0.0
    np.testing.assert_allclose(s["l2"], [np.sqrt(10.0), np.sqrt(5.0)])


@pytest.fixture(scope="module")
def mnist_model():
    data = load_mnist()
    perm = np.random.default_rng(0).permutation(len(data))
    tr, te = data.subset(perm[:3000]), data.subset(perm[9000:9300])
    net = train(NetworkConfig(seed=0), TrainConfig(learning_rate=0.02, epochs=5, seed=1), tr)
    return net, te


def test_deeper_layers_are_less_similar_under_pgd(mnist_model):
    net, te = mnist_model
    adv = pgd(net, te.features, te.labels, 0.3, steps=10, seed=0).x_adv
    stats = harness.layer_sensitivity(net, te.features, adv)
    first = stats[0]["cos"]
    # paired sign test: the last hidden layer is less similar than the first for most inputs
    for deeper in stats[1:]:
        assert deeper["cos_mean"] < stats[0]["cos_mean"]
        assert (deeper["cos"] < first).mean() > 0.5


def test_synthetic_predictor_accuracy():
    y = np.random.default_rng(0).integers(0, 2, 4000)
    P = harness.synthetic_predictions(y, 50, accuracy=0.7, seed=1)
    np.testing.assert_allclose(P.sum(axis=2), 1.0)
    assert (P.argmax(axis=2) == y[:, None]).mean() == pytest.approx(0.7, abs=0.01)


def test_dddm_beats_single_observation_and_matches_brute_force():
    rng = np.random.default_rng(3)
    y_tab = rng.integers(0, 2, 2000)
    P_tab = harness.synthetic_predictions(np.repeat(y_tab, 5), 1, seed=4)[:, 0]
    table = build_likelihood_table(P_tab, np.repeat(y_tab, 5), k=1)
    params = DDDMParams(k=1, n_predictions=100, n_trials=1, trial_length=25, threshold=0.99)
    y = rng.integers(0, 2, 1000)
    P = harness.synthetic_predictions(y, 100, seed=5)
    res = accumulate(P, table, params, seed=6)
    assert res.accuracy(y) > 0.7
    # brute force: the same trials through the scalar sequential-Bayes loop
    from dddm.evidence import sample_trials
    brute = [run_trial(sample_trials(P[i], 1, 25, seed=[6, i])[0], table, 0.99).winner
             for i in range(len(y))]
    assert res.trial_winners[:, 0].tolist() == brute
