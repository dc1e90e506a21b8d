import json
import math

import numpy as np
import pytest

from gearcnn import model as M
from gearcnn.augment import AugmentConfig
from gearcnn.data import Dataset, SynthConfig, generate_synthetic
from gearcnn.exceptions import ConfigurationError, NumericalError, ParseError
from gearcnn.trainer import (
    ConfusionMatrix,
    Split,
    TrainConfig,
    TrainState,
    adam_step,
    crossval,
    crossval_splits,
    early_stop_decision,
    evaluate,
    fit,
    format_config,
    mean_accuracy,
    parse_config,
    plateau_lr_update,
    record_validation,
    scenario_subset,
    train,
)


def scalar_state(value, config):
    params = {"fc_w": np.array([value], np.float64)}
    return params, TrainState(m={"fc_w": np.zeros(1)}, v={"fc_w": np.zeros(1)}, lr=config.lr0)


# --------------------------------------------------------------------------- Adam


def test_adam_first_step_closed_form():
    cfg = TrainConfig(weight_decay=0.0)
    params, state = scalar_state(0.0, cfg)
    adam_step(params, {"fc_w": np.array([0.1])}, state, cfg)
    assert params["fc_w"][0] == pytest.approx(-0.001 * 0.1 / (0.1 + 1e-8), rel=1e-12)
    assert params["fc_w"][0] == pytest.approx(-0.000999999, abs=1e-9)


def test_adam_zero_gradient_no_decay():
    cfg = TrainConfig(weight_decay=0.0)
    params, state = scalar_state(0.5, cfg)
    adam_step(params, {"fc_w": np.array([0.0])}, state, cfg)
    assert params["fc_w"][0] == 0.5


def test_adam_decay_only_gradient():
    cfg = TrainConfig()
    params, state = scalar_state(1.0, cfg)
    adam_step(params, {"fc_w": np.array([0.0])}, state, cfg)
    # effective g = 5e-5, so the step is lr * g / (g + eps)
    assert 1.0 - params["fc_w"][0] == pytest.approx(0.001 * 5e-5 / (5e-5 + 1e-8), rel=1e-9)
    assert 1.0 - params["fc_w"][0] == pytest.approx(0.001, rel=1e-3)


def test_weight_decay_skips_bn_and_bias():
    cfg = TrainConfig(weight_decay=0.5)
    params = M.init_params(0)
    params["bn1.gamma"][:] = 2.0
    params["fc_b"][:] = 3.0
    before = M.copy_params(params)
    state = TrainState.fresh(params, cfg)
    zeros = {n: np.zeros_like(params[n]) for n in M.trainable_names(params)}
    adam_step(params, zeros, state, cfg)
    for name in M.trainable_names(params):
        moved = not np.array_equal(before[name], params[name])
        assert moved == (name in M.DECAYED and np.any(before[name] != 0)), name


def test_adam_rejects_non_finite():
    cfg = TrainConfig()
    params, state = scalar_state(0.0, cfg)
    with pytest.raises(NumericalError, match="fc_w"):
        adam_step(params, {"fc_w": np.array([np.nan])}, state, cfg)


# --------------------------------------------------------------------------- schedule and stopping


def run_schedule(accuracies, config=TrainConfig()):
    state = TrainState(m={}, v={}, lr=config.lr0)
    lrs = []
    for acc in accuracies:
        lrs.append(plateau_lr_update(state, acc, config))
    return lrs


def test_plateau_five_stagnant_epochs():
    lrs = run_schedule([50.0] + [50.0] * 5)
    assert lrs[:5] == [0.001] * 5
    assert lrs[5] == pytest.approx(0.0008)


def test_plateau_improvement_resets():
    lrs = run_schedule([50.0, 50.0, 50.0, 50.0, 50.02, 50.02, 50.02, 50.02, 50.02])
    assert lrs == [0.001] * 9


def test_plateau_sub_threshold_gain_is_stagnation():
    lrs = run_schedule([50.0, 50.005, 50.009, 50.01, 50.0, 50.0])
    assert lrs[-1] == pytest.approx(0.0008)


def test_plateau_two_reductions():
    lrs = run_schedule([50.0] + [50.0] * 10)
    assert lrs[5] == pytest.approx(0.0008)
    assert lrs[10] == pytest.approx(0.00064)


def test_lr_after_n_reductions_is_exact_power():
    cfg = TrainConfig()
    state = TrainState(m={}, v={}, lr=cfg.lr0)
    for _ in range(1 + 5 * 7):
        plateau_lr_update(state, 10.0, cfg)
    assert state.lr_reductions == 7
    assert state.lr == cfg.lr0 * cfg.lr_factor**7


def stop_after(accuracies, config=TrainConfig()):
    state = TrainState(m={}, v={})
    for epoch, acc in enumerate(accuracies, start=1):
        record_validation(state, epoch, acc)
        if early_stop_decision(state, config) == "stop":
            return epoch
    return None


def test_stop_25_stagnant_after_min_epochs():
    accs = [float(e) for e in range(1, 51)] + [50.0] * 100
    assert stop_after(accs) == 75


def test_min_epoch_rule():
    # best at epoch 30, 30 stagnant epochs by epoch 60: must continue until 65
    accs = [float(e) for e in range(1, 31)] + [30.0] * 100
    state = TrainState(m={}, v={})
    for epoch, acc in enumerate(accs[:60], start=1):
        record_validation(state, epoch, acc)
    assert state.epochs_since_best == 30
    assert early_stop_decision(state, TrainConfig()) == "continue"
    assert stop_after(accs) == 65


def test_hard_stop_at_120():
    assert stop_after([float(e) for e in range(1, 200)]) == 120


def test_best_accuracy_monotone():
    state = TrainState(m={}, v={})
    seen = []
    for epoch, acc in enumerate([10, 30, 20, 30, 40, 5], start=1):
        record_validation(state, epoch, acc)
        seen.append(state.best_val_acc)
    assert seen == sorted(seen)
    assert state.best_epoch == 5


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_factor=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(min_epochs=130)
    assert TrainConfig().capped(30).min_epochs == 30


# --------------------------------------------------------------------------- config file


def test_config_round_trip():
    cfg = TrainConfig(batch_size=16, seed=3, augment=AugmentConfig(p_awgn=0.5, snr_choices_db=(20.0, 30.0)))
    assert parse_config(format_config(cfg)) == cfg


def test_config_parse_comments_and_errors():
    cfg = parse_config("# reference settings\nmax_epochs = 30   # capped\nmin_epochs = 30\nbeta_range = 0.8, 1.2\n")
    assert cfg.max_epochs == 30 and cfg.augment.beta_range == (0.8, 1.2)
    with pytest.raises(ParseError, match="unknown"):
        parse_config("learning_rate = 0.1\n")
    with pytest.raises(ParseError):
        parse_config("max_epochs 30\n")
    with pytest.raises(ParseError):
        parse_config("max_epochs = thirty\n")


# --------------------------------------------------------------------------- evaluation


def test_confusion_perfect_predictor():
    y = np.repeat(np.arange(5), 2000)
    cm = ConfusionMatrix.from_predictions(y, y)
    assert np.array_equal(cm.counts, np.diag([2000] * 5))
    assert cm.accuracy == 100.0


# columns of the published figure are true labels; rows here are true labels
FIG4_COUNTS = np.array([
    [1984, 3, 12, 0, 1],
    [10, 1963, 21, 0, 6],
    [14, 5, 1962, 0, 19],
    [0, 0, 0, 2000, 0],
    [9, 3, 10, 0, 1978],
])


def test_fig4_counts_arithmetic():
    cm = ConfusionMatrix(FIG4_COUNTS)
    assert cm.counts.sum(axis=1).tolist() == [2000] * 5
    pct = cm.row_percentages()
    assert round(pct[0, 0], 2) == 99.20
    assert pct[3, 3] == 100.0
    assert round(cm.accuracy, 2) == 98.87


def test_mean_of_table_row():
    assert round(mean_accuracy([98.84, 98.74, 98.80, 98.85, 98.87]), 2) == 98.82
    with pytest.raises(ConfigurationError):
        mean_accuracy([])


def test_evaluate_row_sums_match_class_counts():
    ds = generate_synthetic(SynthConfig(frames_per_class=8, seed=0))
    acc, cm = evaluate(M.init_params(0), ds.frames, ds.labels)
    assert cm.counts.sum(axis=1).tolist() == [8] * 5
    assert acc == pytest.approx(100 * np.trace(cm.counts) / 40)


# --------------------------------------------------------------------------- training


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthConfig(frames_per_class=20, seed=2))


def test_train_single_epoch(small, tmp_path):
    splits = crossval_splits(small, 5, seed=0)
    cfg = TrainConfig(seed=1).capped(1)
    params, report = train(small, splits[0], cfg, checkpoint_path=tmp_path / "c.vck")
    assert report.epochs_trained == 1 and report.best_epoch == 1
    assert report.confusion.counts.sum() == len(splits[0].test)
    saved, opt = M.load_checkpoint(tmp_path / "c.vck")
    assert all(saved[k].tobytes() == params[k].tobytes() for k in params)
    assert opt["t"] == len(splits[0].train) // 32


def test_train_deterministic(small):
    split = crossval_splits(small, 5, seed=0)[1]
    cfg = TrainConfig(seed=4).capped(3)
    p1, r1 = train(small, split, cfg)
    p2, r2 = train(small, split, cfg)
    assert [h.val_accuracy for h in r1.history] == [h.val_accuracy for h in r2.history]
    assert r1.to_dict() == r2.to_dict()
    assert all(p1[k].tobytes() == p2[k].tobytes() for k in p1)


def test_best_checkpoint_matches_best_epoch(small, tmp_path):
    split = crossval_splits(small, 5, seed=0)[2]
    _, report = train(small, split, TrainConfig(seed=5).capped(6), checkpoint_path=tmp_path / "b.vck")
    best = max(h.val_accuracy for h in report.history)
    first_best = next(h.epoch for h in report.history if h.val_accuracy == best)
    assert report.best_epoch == first_best
    saved, _ = M.load_checkpoint(tmp_path / "b.vck")
    acc, _ = evaluate(saved, small.frames[split.val], small.labels[split.val])
    assert acc == best


def test_train_rejects_bad_splits(small):
    idx = np.arange(len(small))
    with pytest.raises(ConfigurationError):
        train(small, Split(idx[:50], idx[50:], np.array([], int)), TrainConfig().capped(1))
    with pytest.raises(ConfigurationError):
        train(small, Split(idx[:60], idx[50:80], idx[80:]), TrainConfig().capped(1))


def test_fit_needs_a_full_batch(small):
    with pytest.raises(ConfigurationError):
        fit(small.frames[:10], small.labels[:10], small.frames[10:20], small.labels[10:20], TrainConfig().capped(1))


def test_crossval_splits_are_disjoint(small):
    for split in crossval_splits(small, 5, seed=3):
        parts = [split.train, split.val, split.test]
        assert sum(map(len, parts)) == len(small)
        assert len(np.unique(np.concatenate(parts))) == len(small)


def test_scenario_selection():
    oc1 = generate_synthetic(SynthConfig(frames_per_class=10, oc=1, seed=0))
    oc2 = generate_synthetic(SynthConfig(frames_per_class=10, oc=2, seed=1))
    both = Dataset.concatenate([oc1, oc2])
    assert np.all(scenario_subset(both, "model2").oc == 2)
    assert len(scenario_subset(both, "model3")) == 100
    with pytest.raises(ConfigurationError):
        scenario_subset(oc1, "model2")
    with pytest.raises(ConfigurationError):
        scenario_subset(Dataset.concatenate([oc1, oc2.subset(np.arange(45))]), "model3")
    with pytest.raises(ConfigurationError):
        scenario_subset(both, "model4")


def test_model3_test_folds_balanced_per_oc():
    # scaled-down mirror of 2 x 50,000 frames -> 4,000 per class per test fold (2,000 per OC)
    n = 40
    labels = np.tile(np.repeat(np.arange(5), n), 2)
    oc = np.repeat([1, 2], 5 * n)
    ds = Dataset(np.zeros((len(labels), 3, 200), np.float32), labels, oc)
    for split in crossval_splits(ds, 5, seed=0, by_oc=True):
        for c in range(5):
            sel = split.test[ds.labels[split.test] == c]
            assert len(sel) == 2 * n // 5
            assert np.sum(ds.oc[sel] == 1) == np.sum(ds.oc[sel] == 2) == n // 5


def test_crossval_report_schema(small):
    report = crossval(small, "model1", TrainConfig(seed=0).capped(1))
    doc = json.loads(report.to_json())
    assert set(doc) == {"scenario", "folds", "mean_accuracy", "config_echo", "seed"}
    assert len(doc["folds"]) == 5
    assert set(doc["folds"][0]) == {"accuracy", "confusion_counts", "confusion_row_pct", "epochs_trained", "best_epoch"}
    assert doc["mean_accuracy"] == round(np.mean([f["accuracy"] for f in doc["folds"]]), 2)
    assert math.isclose(report.mean_accuracy, sum(report.fold_accuracies) / 5)
