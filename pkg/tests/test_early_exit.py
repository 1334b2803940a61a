import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from spikecal import calibrate, early_exit, engine, search


@pytest.fixture(scope="module")
def snn(trained_mlp, calibration):
    fits = calibrate.fit_all_thresholds(trained_mlp, calibration, timesteps=8)
    configs = calibrate.configs_from_fits(fits)
    model = calibrate.calibrate_biases(trained_mlp, configs, calibration, timesteps=8)
    return model, configs


# ---------------------------------------------------------------------------
# entropy and confidence


def test_entropy_hand_values():
    one_hot = np.array([1.0, 0.0, 0.0])
    assert early_exit.entropy(one_hot) == pytest.approx(0.0, abs=1e-9)
    uniform = np.full(10, 0.1)
    assert early_exit.entropy(uniform) == pytest.approx(np.log(10.0), abs=1e-9)
    half = np.array([0.5, 0.5])
    assert early_exit.entropy(half) == pytest.approx(np.log(2.0), abs=1e-9)


def test_entropy_matches_oracle(rng):
    for _ in range(50):
        p = rng.uniform(0.01, 1, size=7)
        p /= p.sum()
        assert early_exit.entropy(p) == pytest.approx(oracles.entropy_scalar(p), abs=1e-9)


def test_entropy_rejects_empty():
    with pytest.raises(ValueError):
        early_exit.entropy(np.zeros((0,)))


def test_confidence_hand_value():
    # scores that softmax to (0.9, 0.1): log(9) apart
    scores = np.array([[np.log(9.0), 0.0]])
    c = early_exit.confidence(scores, class_count=2)
    h = -(0.9 * np.log(0.9) + 0.1 * np.log(0.1))
    assert c[0] == pytest.approx(1.0 - h / np.log(2.0), abs=1e-6)
    assert c[0] == pytest.approx(0.5310, abs=1e-3)


def test_confidence_max_prob_variant():
    scores = np.array([[np.log(9.0), 0.0]])
    c = early_exit.confidence(scores, class_count=2, kind="max_prob")
    assert c[0] == pytest.approx(0.9, abs=1e-6)


def test_confidence_bounds(rng):
    scores = rng.standard_normal((50, 6)) * 10
    c = early_exit.confidence(scores, class_count=6)
    assert (c >= 0).all() and (c <= 1).all()
    # certain prediction -> 1, flat prediction -> 0
    sure = early_exit.confidence(np.array([[100.0, 0.0, 0.0]]), 3)
    flat = early_exit.confidence(np.array([[1.0, 1.0, 1.0]]), 3)
    assert sure[0] == pytest.approx(1.0, abs=1e-3)
    assert flat[0] == pytest.approx(0.0, abs=1e-9)


def test_confidence_requires_two_classes():
    with pytest.raises(ValueError):
        early_exit.confidence(np.zeros((1, 1)), class_count=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 32 - 1))
def test_confidence_monotone_under_sharpening(classes, seed):
    g = np.random.default_rng(seed)
    scores = g.standard_normal((1, classes))
    c1 = early_exit.confidence(scores, classes)
    c2 = early_exit.confidence(scores * 3.0, classes)  # sharper distribution
    assert c2[0] >= c1[0] - 1e-9


# ---------------------------------------------------------------------------
# boundary schedule


def test_boundary_formula_exact_values():
    policy = early_exit.ExitPolicy(
        alpha_base=0.6,
        beta=0.2,
        delta=1.0,
        t_max=3,
        mean_entropy=np.array([2.0, 1.5, 1.0]),
        confidence_kind="entropy",
    )
    bounds = policy.boundaries()
    # at the minimum mean entropy the boundary peaks at base + beta
    assert bounds[2] == pytest.approx(0.8, abs=1e-12)
    assert bounds[1] == pytest.approx(0.6 + 0.2 * np.exp(-0.5), abs=1e-12)
    assert bounds[0] == pytest.approx(0.6 + 0.2 * np.exp(-1.0), abs=1e-12)


def test_boundary_with_unit_gap_hits_e_minus_one():
    policy = early_exit.ExitPolicy(
        alpha_base=0.5, beta=0.3, delta=1.0, t_max=2,
        mean_entropy=np.array([2.0, 1.0]), confidence_kind="entropy",
    )
    bounds = policy.boundaries()
    assert bounds[0] == pytest.approx(0.5 + 0.3 * np.exp(-1.0), abs=1e-12)


def test_zero_beta_is_flat():
    policy = early_exit.ExitPolicy(
        alpha_base=0.7, beta=0.0, delta=2.0, t_max=4,
        mean_entropy=np.array([3.0, 2.0, 1.0, 0.5]), confidence_kind="entropy",
    )
    np.testing.assert_allclose(policy.boundaries(), 0.7, atol=1e-15)


def test_fit_policy_records_calibration_entropies(snn, calibration):
    model, configs = snn
    policy = early_exit.fit_exit_policy(model, configs, calibration, t_max=6)
    assert policy.t_max == 6
    assert policy.mean_entropy.shape == (6,)
    assert (policy.mean_entropy >= 0).all()
    # later readouts should not be wildly less certain than the first
    assert policy.mean_entropy[-1] <= policy.mean_entropy.max() + 1e-9


def test_fit_policy_rejects_bad_delta(snn, calibration):
    model, configs = snn
    with pytest.raises(ValueError):
        early_exit.fit_exit_policy(model, configs, calibration, t_max=4, delta=0.0)


# ---------------------------------------------------------------------------
# adaptive inference


def test_adaptive_never_exits_later_than_t_max(snn, calibration):
    model, configs = snn
    policy = early_exit.fit_exit_policy(model, configs, calibration, t_max=8)
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    assert trace.exit_t.min() >= 1
    assert trace.exit_t.max() <= 8
    assert trace.mean_exit_t <= 8.0


def test_unreachable_boundary_runs_full_horizon(snn, calibration):
    model, configs = snn
    policy = early_exit.ExitPolicy(
        alpha_base=1.1, beta=0.0, delta=1.0, t_max=6,
        mean_entropy=np.zeros(6), confidence_kind="entropy",
    )
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    assert (trace.exit_t == 6).all()


def test_zero_boundary_exits_immediately(snn, calibration):
    model, configs = snn
    policy = early_exit.ExitPolicy(
        alpha_base=0.0, beta=0.0, delta=1.0, t_max=6,
        mean_entropy=np.zeros(6), confidence_kind="entropy",
    )
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    assert (trace.exit_t == 1).all()


def test_flat_boundary_equals_manual_thresholding(snn, calibration):
    """With beta = 0 the adaptive run must reproduce a hand-rolled sweep."""
    model, configs = snn
    alpha = 0.8
    policy = early_exit.ExitPolicy(
        alpha_base=alpha, beta=0.0, delta=1.0, t_max=8,
        mean_entropy=np.zeros(8), confidence_kind="entropy",
    )
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    run = engine.run_snn(
        model, configs, calibration.inputs, 8, collect_steps=True
    )
    for i in range(calibration.sample_count):
        exit_t = 8
        for t in range(8):
            conf = early_exit.confidence(
                run.step_scores[t, i:i + 1], model.class_count
            )[0]
            if conf >= alpha:
                exit_t = t + 1
                break
        assert trace.exit_t[i] == exit_t
        np.testing.assert_allclose(
            trace.scores[i], run.step_scores[exit_t - 1, i], atol=1e-9
        )


def test_adaptive_matches_fixed_when_exits_disabled(snn, calibration):
    model, configs = snn
    policy = early_exit.ExitPolicy(
        alpha_base=1.1, beta=0.0, delta=1.0, t_max=8,
        mean_entropy=np.zeros(8), confidence_kind="entropy",
    )
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    run = engine.run_snn(model, configs, calibration.inputs, 8)
    np.testing.assert_allclose(trace.scores, run.scores, atol=1e-9)
    assert trace.stats.total_spikes == run.stats.total_spikes


def test_early_exits_save_spikes(snn, calibration):
    model, configs = snn
    eager = early_exit.ExitPolicy(
        alpha_base=0.2, beta=0.0, delta=1.0, t_max=8,
        mean_entropy=np.zeros(8), confidence_kind="entropy",
    )
    trace = early_exit.infer_adaptive(
        model, configs, eager, calibration.inputs, calibration.labels
    )
    full = engine.run_snn(model, configs, calibration.inputs, 8)
    assert trace.stats.total_spikes <= full.stats.total_spikes
    if (trace.exit_t < 8).any():
        assert trace.stats.total_spikes < full.stats.total_spikes
    # per-input spike spend is consistent with the exit step
    assert trace.spikes_per_input.shape == (calibration.sample_count,)
    assert (trace.spikes_per_input >= 0).all()


def test_accuracy_reported_when_labels_given(snn, calibration):
    model, configs = snn
    policy = early_exit.fit_exit_policy(model, configs, calibration, t_max=8)
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    manual = float(np.mean(trace.predicted == calibration.labels))
    assert trace.accuracy == pytest.approx(manual)


def test_policy_file_round_trip(tmp_path, snn, calibration):
    model, configs = snn
    policy = early_exit.fit_exit_policy(
        model, configs, calibration, t_max=5, alpha_base=0.65, beta=0.25, delta=1.5
    )
    path = tmp_path / "policy.txt"
    early_exit.save_policy(policy, path)
    back = early_exit.load_policy(path)
    assert back.alpha_base == policy.alpha_base
    assert back.beta == policy.beta
    assert back.delta == policy.delta
    assert back.t_max == policy.t_max
    assert back.confidence_kind == policy.confidence_kind
    np.testing.assert_array_equal(back.mean_entropy, policy.mean_entropy)
    np.testing.assert_allclose(back.boundaries(), policy.boundaries(), atol=0)


def test_exit_trace_csv(tmp_path, snn, calibration):
    model, configs = snn
    policy = early_exit.fit_exit_policy(model, configs, calibration, t_max=4)
    trace = early_exit.infer_adaptive(
        model, configs, policy, calibration.inputs, calibration.labels
    )
    path = tmp_path / "exits.csv"
    early_exit.write_exit_trace(path, trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "input_index,exit_t,confidence,predicted,label"
    assert len(lines) == 1 + calibration.sample_count
