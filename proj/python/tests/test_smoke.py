import math

import numpy as np
import pytest

import intrafair


def small_config(**extra):
    cfg = {
        "data": {"synthetic": {"n": 1200, "seed": 2}},
        "arch": {"hidden": [6], "dropout": 0.0},
        "train": {"max_epochs": 3, "patience": 2},
        "random": {"iterations": 4},
        "seeds": [0],
    }
    cfg.update(extra)
    return cfg


def test_metrics_match_hand_counts():
    labels = [1, 0, 1, 0, 1, 0, 1, 0]
    preds = [1, 0, 1, 1, 0, 0, 0, 0]
    groups = [0, 0, 0, 0, 1, 1, 1, 1]
    assert intrafair.bias("spd", labels, preds, groups) == pytest.approx(0.75 - 0.0)
    assert intrafair.balanced_accuracy(labels, preds) == pytest.approx(0.5 * (2 / 4 + 3 / 4))
    assert intrafair.objective_value(0.01, 0.8, 0.05) == 0.8
    assert intrafair.objective_value(0.05, 0.8, 0.05) == 0.0


def test_threshold_selection_and_report():
    x, y, a = intrafair.generate_synthetic(n=800, seed=1)
    assert x.shape == (800, 8)
    assert set(y) <= {0, 1} and set(a) <= {0, 1}
    scores = 1.0 / (1.0 + np.exp(-x[:, 1]))
    choice = intrafair.select_threshold(y, scores, a, "spd", 0.05)
    report = intrafair.evaluate_scores(y, scores, a, choice["threshold"], "spd", 0.05)
    assert report["objective"] == pytest.approx(choice["objective"])


def test_network_round_trip(tmp_path):
    net = intrafair.Network(5, [4, 3], 0.0, 7)
    x = np.random.default_rng(0).normal(size=(10, 5))
    p = net.predict(x)
    assert p.shape == (10,)
    assert np.all((p > 0) & (p < 1))
    net.save(tmp_path / "net.json")
    back = intrafair.Network.load(tmp_path / "net.json")
    assert back == net
    np.testing.assert_array_equal(back.predict(x), p)
    with pytest.raises(intrafair.ShapeError):
        net.predict(np.zeros((2, 4)))


def test_config_and_errors():
    cfg = intrafair.default_config()
    assert cfg["objective"]["bias"] == "spd"
    with pytest.raises(intrafair.ValidationError):
        intrafair.run_method({"colour": 1}, "default")
    with pytest.raises(intrafair.Error):
        intrafair.bias("spd", [1], [1], [2])


def test_run_method_and_sweep():
    out = intrafair.run_method(small_config(), "random", 0)
    assert out["valid"]["objective"] >= 0.0
    sweep = intrafair.run_sweep(small_config(methods=["default", "random", "eqodds"]))
    assert [row["method"] for row in sweep["aggregate"]] == ["default", "random", "eqodds"]
    assert all(t["status"] == "ok" for t in sweep["trials"])


def test_postprocessing_rules():
    x, y, a = intrafair.generate_synthetic(n=2000, seed=3)
    scores = 1.0 / (1.0 + np.exp(-(x[:, 1] + 0.5 * a)))
    for method in ["reject_option", "eq_odds", "calibrated_eq_odds"]:
        rule = intrafair.fit_postproc(method, scores, y, a, seed=4)
        pred = intrafair.apply_postproc(rule, scores, a)
        assert pred == intrafair.apply_postproc(rule, scores, a)
        assert len(pred) == len(scores)


def test_minimize_with_python_objective():
    def sphere(p):
        return sum(v * v for v in p)

    res = intrafair.minimize(sphere, [-2.0, -2.0], [2.0, 2.0], budget=30, seed=1)
    assert len(res["values"]) == 30
    assert res["best_value"] == min(res["values"])
    rs = intrafair.random_search(sphere, [-2.0, -2.0], [2.0, 2.0], budget=30, seed=1)
    same = intrafair.minimize(sphere, [-2.0, -2.0], [2.0, 2.0], budget=30, seed=1, n_init=30)
    assert rs["values"] == same["values"]
    assert math.isfinite(res["best_value"])
