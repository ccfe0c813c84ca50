import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab.continual import (
    Anchor,
    StrategyConfig,
    accumulate,
    build_strategy,
    check_importance,
    clip_separately,
    estimate_fisher,
    estimate_total_abs_signal,
    ewc_penalty,
    ewc_penalty_multi_anchor,
    make_wva_hook,
    max_normalize,
    safe_coefficient,
    wva_factor,
)
from forgetlab.data import TaskDataset
from forgetlab.model import (
    MlpParams,
    backward,
    flatten,
    forward,
    global_norm,
    init_params,
    map_blocks,
    zeros_like_params,
)
from forgetlab.numerics import RandomStream, ShapeError
from forgetlab.optim import AdamState, SgdConfig, apply

from helpers import ScalarAdam


def make_task(images, labels, task_id=0):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return TaskDataset(
        task_id=task_id,
        train_images=images,
        train_labels=labels,
        test_images=images.copy(),
        test_labels=labels.copy(),
        permutation=np.arange(images.shape[1]),
    )


def random_setup(seed, layer_sizes=(5, 4, 3), n=6):
    params = init_params(RandomStream(seed), layer_sizes)
    rs = RandomStream(seed + 1000)
    images = rs.uniform(0, 1, (n, layer_sizes[0]))
    labels = rs.permutation(n) % layer_sizes[-1]
    return params, make_task(images, labels)


def scalar_net(x=0.0):
    return MlpParams(weights=[np.array([[float(x)]])], biases=[np.zeros(1)])


def scalar_map(w, b=0.0):
    return MlpParams(weights=[np.array([[float(w)]])], biases=[np.array([float(b)])])


class TestFisher:
    def test_matches_per_sample_brute_force(self):
        params, task = random_setup(40, n=3)
        estimated = estimate_fisher(params, task)
        total = zeros_like_params(params)
        for i in range(3):
            trace = forward(params, task.train_images[i : i + 1])
            g = backward(params, trace, task.train_labels[i : i + 1])
            total = map_blocks(lambda t, gi: t + gi * gi, total, g)
        brute = map_blocks(lambda t: t / 3, total)
        assert np.max(np.abs(flatten(estimated) - flatten(brute))) < 1e-12

    def test_single_sample_is_squared_gradient(self):
        params, task = random_setup(41, n=1)
        estimated = estimate_fisher(params, task)
        trace = forward(params, task.train_images)
        g = backward(params, trace, task.train_labels)
        squared = map_blocks(lambda x: x * x, g)
        gap = np.abs(flatten(estimated) - flatten(squared))
        assert np.max(gap) <= 1e-14 * np.max(np.abs(flatten(squared)))

    def test_chunking_does_not_change_result(self):
        params, task = random_setup(42, n=7)
        whole = estimate_fisher(params, task, chunk_size=100)
        chunked = estimate_fisher(params, task, chunk_size=2)
        assert np.allclose(flatten(whole), flatten(chunked), rtol=0, atol=1e-15)

    def test_empty_dataset_rejected(self):
        params, task = random_setup(43)
        empty = TaskDataset(
            task_id=0,
            train_images=np.zeros((0, 5)),
            train_labels=np.zeros(0, dtype=np.int64),
            test_images=task.test_images,
            test_labels=task.test_labels,
            permutation=np.arange(5),
        )
        with pytest.raises(ValueError):
            estimate_fisher(params, empty)


class TestTotalAbsSignal:
    def test_zero_weights_zero_weight_importance(self):
        params, task = random_setup(44)
        params = MlpParams(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[b.copy() for b in params.biases],
        )
        omega = estimate_total_abs_signal(params, task)
        assert all(np.all(w == 0.0) for w in omega.weights)

    def test_halving_inputs_halves_first_layer_importance(self):
        params, task = random_setup(45)
        halved = make_task(0.5 * task.train_images, task.train_labels)
        omega_full = estimate_total_abs_signal(params, task)
        omega_half = estimate_total_abs_signal(params, halved)
        assert np.array_equal(omega_half.weights[0], 0.5 * omega_full.weights[0])

    def test_two_sample_hand_oracle(self):
        params = MlpParams(
            weights=[np.array([[0.5, -1.0], [2.0, 0.25]])],
            biases=[np.array([0.3, -0.7])],
        )
        task = make_task(np.array([[0.2, 0.8], [0.6, 0.4]]), np.array([0, 1]))
        omega = estimate_total_abs_signal(params, task)
        # Mean |a_j|: column 0 -> (0.2+0.6)/2 = 0.4, column 1 -> (0.8+0.4)/2 = 0.6.
        expected_w = np.array(
            [[0.5 * 0.4, 1.0 * 0.6], [2.0 * 0.4, 0.25 * 0.6]]
        )
        assert np.max(np.abs(omega.weights[0] - expected_w)) < 1e-15
        assert np.array_equal(omega.biases[0], np.array([0.3, 0.7]))

    def test_bias_importance_is_absolute_bias(self):
        params, task = random_setup(46)
        omega = estimate_total_abs_signal(params, task)
        for ob, b in zip(omega.biases, params.biases):
            assert np.array_equal(ob, np.abs(b))

    def test_empty_dataset_rejected(self):
        params, task = random_setup(47)
        empty = TaskDataset(
            task_id=0,
            train_images=np.zeros((0, 5)),
            train_labels=np.zeros(0, dtype=np.int64),
            test_images=task.test_images,
            test_labels=task.test_labels,
            permutation=np.arange(5),
        )
        with pytest.raises(ValueError):
            estimate_total_abs_signal(params, empty)


class TestEstimatorProperties:
    def test_nonnegative_and_congruent_for_many_random_pairs(self):
        for seed in range(100):
            params, task = random_setup(seed, layer_sizes=(4, 3, 2), n=4)
            for estimator in (estimate_fisher, estimate_total_abs_signal):
                omega = estimator(params, task)
                assert omega.layer_sizes == params.layer_sizes
                assert np.all(flatten(omega) >= 0.0)
                check_importance(omega)


class TestAccumulate:
    def test_gamma_one_is_plain_sum(self):
        a = init_params(RandomStream(48), (3, 2))
        b = init_params(RandomStream(49), (3, 2))
        absa, absb = map_blocks(np.abs, a), map_blocks(np.abs, b)
        total = accumulate(absa, absb, 1.0)
        assert np.array_equal(flatten(total), flatten(absa) + flatten(absb))

    def test_decay_halves_totals_when_nothing_new(self):
        a = map_blocks(np.abs, init_params(RandomStream(50), (3, 2)))
        zero = zeros_like_params(a)
        total = accumulate(a, zero, 0.5)
        assert np.array_equal(flatten(total), 0.5 * flatten(a))

    def test_three_tasks_sum(self):
        maps = [
            map_blocks(np.abs, init_params(RandomStream(s), (3, 2))) for s in (51, 52, 53)
        ]
        total = accumulate(accumulate(maps[0], maps[1], 1.0), maps[2], 1.0)
        expected = flatten(maps[0]) + flatten(maps[1]) + flatten(maps[2])
        assert np.allclose(flatten(total), expected, rtol=0, atol=1e-15)

    def test_gamma_validated(self):
        a = zeros_like_params(init_params(RandomStream(54), (2, 2)))
        with pytest.raises(ValueError):
            accumulate(a, a, 1.5)

    def test_shape_mismatch(self):
        a = init_params(RandomStream(55), (3, 2))
        b = init_params(RandomStream(55), (4, 2))
        with pytest.raises(ShapeError):
            accumulate(a, b, 1.0)


class TestEwcPenalty:
    def test_zero_at_anchor(self):
        params = init_params(RandomStream(56), (4, 3))
        omega = map_blocks(np.abs, init_params(RandomStream(57), (4, 3)))
        value, grad = ewc_penalty(params, Anchor(params.copy(), 0), omega, 3.0)
        assert value == 0.0
        assert np.all(flatten(grad) == 0.0)

    def test_single_weight_plug_in(self):
        params = scalar_net(1.0)
        anchor = Anchor(scalar_net(0.5), 0)
        omega = scalar_map(2.0)
        value, grad = ewc_penalty(params, anchor, omega, 3.0)
        assert abs(value - 0.75) < 1e-12
        assert abs(grad.weights[0][0, 0] - 3.0) < 1e-12

    def test_gradient_matches_finite_differences(self):
        params = init_params(RandomStream(58), (3, 3, 2))
        anchor = Anchor(init_params(RandomStream(59), (3, 3, 2)), 0)
        omega = map_blocks(np.abs, init_params(RandomStream(60), (3, 3, 2)))
        lam = 1.7
        _, grad = ewc_penalty(params, anchor, omega, lam)
        h = 1e-6
        for l in (0, 1):
            w = params.weights[l]
            for idx in ((0, 0), (1, 1)):
                original = w[idx]
                w[idx] = original + h
                up, _ = ewc_penalty(params, anchor, omega, lam)
                w[idx] = original - h
                down, _ = ewc_penalty(params, anchor, omega, lam)
                w[idx] = original
                numeric = (up - down) / (2 * h)
                assert abs(numeric - grad.weights[l][idx]) < 1e-8

    def test_translation_invariance(self):
        params = init_params(RandomStream(61), (3, 2))
        anchor_values = init_params(RandomStream(62), (3, 2))
        omega = map_blocks(np.abs, init_params(RandomStream(63), (3, 2)))
        base, _ = ewc_penalty(params, Anchor(anchor_values, 0), omega, 2.0)
        shifted, _ = ewc_penalty(
            map_blocks(lambda p: p + 7.25, params),
            Anchor(map_blocks(lambda a: a + 7.25, anchor_values), 0),
            omega,
            2.0,
        )
        assert abs(base - shifted) < 1e-12

    def test_gradient_lipschitz_in_theta(self):
        # Per coordinate the penalty gradient is lam*omega*(theta-anchor),
        # so moving theta by d moves the gradient by exactly lam*omega*d.
        params = scalar_net(0.3)
        anchor = Anchor(scalar_net(-0.2), 0)
        omega = scalar_map(1.75)
        lam = 4.0
        _, g1 = ewc_penalty(params, anchor, omega, lam)
        moved = scalar_net(0.3 + 0.01)
        _, g2 = ewc_penalty(moved, anchor, omega, lam)
        change = abs(g2.weights[0][0, 0] - g1.weights[0][0, 0])
        assert abs(change - lam * 1.75 * 0.01) < 1e-12


class TestMultiAnchor:
    def setup_instance(self, seed, k):
        sizes = (3, 3, 2)
        params = init_params(RandomStream(seed), sizes)
        anchors = [Anchor(init_params(RandomStream(seed + i + 1), sizes), i) for i in range(k)]
        omegas = [
            map_blocks(np.abs, init_params(RandomStream(seed + 100 + i), sizes))
            for i in range(k)
        ]
        lams = [0.5 + 0.25 * i for i in range(k)]
        return params, anchors, omegas, lams

    def test_empty_list_is_zero_penalty(self):
        params = init_params(RandomStream(64), (3, 2))
        value, grad = ewc_penalty_multi_anchor(params, [], [], [])
        assert value == 0.0
        assert np.all(flatten(grad) == 0.0)

    def test_single_anchor_reduces_to_plain_penalty(self):
        params, anchors, omegas, lams = self.setup_instance(65, 1)
        multi = ewc_penalty_multi_anchor(params, anchors, omegas, lams)
        single = ewc_penalty(params, anchors[0], omegas[0], lams[0])
        assert multi[0] == single[0]
        assert np.array_equal(flatten(multi[1]), flatten(single[1]))

    def test_duplicate_anchor_equals_double_lambda(self):
        params, anchors, omegas, _ = self.setup_instance(66, 1)
        doubled = ewc_penalty(params, anchors[0], omegas[0], 2 * 0.8)
        duplicated = ewc_penalty_multi_anchor(
            params, anchors * 2, omegas * 2, [0.8, 0.8]
        )
        assert abs(doubled[0] - duplicated[0]) < 1e-12
        assert np.max(np.abs(flatten(doubled[1]) - flatten(duplicated[1]))) < 1e-12

    def test_three_anchors_equal_sum_of_singles(self):
        params, anchors, omegas, lams = self.setup_instance(67, 3)
        value, grad = ewc_penalty_multi_anchor(params, anchors, omegas, lams)
        parts = [ewc_penalty(params, a, o, l) for a, o, l in zip(anchors, omegas, lams)]
        assert abs(value - sum(p[0] for p in parts)) < 1e-12
        summed = sum(flatten(p[1]) for p in parts)
        assert np.max(np.abs(flatten(grad) - summed)) < 1e-12

    def test_length_mismatch_rejected(self):
        params, anchors, omegas, lams = self.setup_instance(68, 2)
        with pytest.raises(ValueError):
            ewc_penalty_multi_anchor(params, anchors, omegas[:1], lams)


class TestSafeCoefficient:
    def test_zero_omega(self):
        assert safe_coefficient(0.0, 0.001, 10.0) == 0.0

    def test_bounded_by_inverse_alpha_lambda(self):
        alpha, lam = 0.001, 10.0
        assert safe_coefficient(1e12, alpha, lam) < 1.0 / (alpha * lam)

    def test_alpha_zero_reduces_to_omega(self):
        assert safe_coefficient(3.75, 0.0, 10.0) == 3.75

    @given(st.floats(min_value=0, max_value=1e15))
    @settings(max_examples=50, deadline=None)
    def test_penalty_step_never_overshoots_anchor(self, product):
        # product stands in for alpha*lam*omega; the per-coordinate SGD
        # move from the penalty alone is alpha*lam*coeff*(theta-anchor),
        # and alpha*lam*coeff = product/(product+1) < 1.
        assert product / (product + 1.0) <= 1.0

    def test_works_elementwise_on_arrays(self):
        arr = np.array([0.0, 1.0, 1e12])
        out = safe_coefficient(arr, 0.001, 10.0)
        assert out.shape == (3,)
        assert out[0] == 0.0 and out[2] < 100.0

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            safe_coefficient(1.0, -0.1, 1.0)


class TestClipSeparately:
    def test_small_gradients_pass_through_as_sum(self):
        a = init_params(RandomStream(69), (3, 2))
        b = init_params(RandomStream(70), (3, 2))
        combined = clip_separately(a, b, threshold=1e6)
        assert np.array_equal(flatten(combined), flatten(a) + flatten(b))

    def test_zero_penalty_leaves_clipped_task_gradient(self):
        a = init_params(RandomStream(71), (3, 2))
        zero = zeros_like_params(a)
        clipped = clip_separately(a, zero, threshold=0.1)
        assert abs(global_norm(clipped) - 0.1) < 1e-12

    def test_both_rescaled_to_unit_norm(self):
        rs = RandomStream(72)
        task = MlpParams(weights=[rs.normal(0, 1, (3, 3))], biases=[rs.normal(0, 1, 3)])
        task = map_blocks(lambda g: g * (10.0 / global_norm(task)), task)
        penalty = MlpParams(weights=[rs.normal(0, 1, (3, 3))], biases=[rs.normal(0, 1, 3)])
        penalty = map_blocks(lambda g: g * (1000.0 / global_norm(penalty)), penalty)
        combined = clip_separately(task, penalty, threshold=1.0)
        unit_task = flatten(task) / 10.0
        unit_penalty = flatten(penalty) / 1000.0
        assert np.max(np.abs(flatten(combined) - (unit_task + unit_penalty))) < 1e-12
        assert global_norm(combined) <= 2.0

    def test_threshold_validated(self):
        a = init_params(RandomStream(73), (2, 2))
        with pytest.raises(ValueError):
            clip_separately(a, a, 0.0)


class TestWvaFactor:
    def test_closed_forms(self):
        assert wva_factor(0.0, 5.0, "hyperbolic") == 1.0
        assert wva_factor(0.0, 5.0, "exponential") == 1.0
        assert abs(wva_factor(0.5, 2.0, "hyperbolic") - 0.5) < 1e-12
        assert abs(wva_factor(math.log(2.0), 1.0, "exponential") - 0.5) < 1e-12

    def test_strictly_decreasing_in_omega(self):
        # Strictness needs lam*omega below ~745 for the exponential kind:
        # past that exp underflows to exactly 0.0 and stays there.
        grids = {
            "hyperbolic": np.logspace(-6, 6, 40),
            "exponential": np.logspace(-6, 2.7, 40),
        }
        for kind, grid in grids.items():
            factors = [wva_factor(o, 1.0, kind) for o in grid]
            assert all(b < a for a, b in zip(factors, factors[1:]))

    @given(
        st.floats(min_value=1e-12, max_value=1e9),
        st.floats(min_value=1e-12, max_value=1e3),
        st.sampled_from(["hyperbolic", "exponential"]),
    )
    @settings(max_examples=200, deadline=None)
    def test_bounded_in_unit_interval(self, omega, lam, kind):
        factor = wva_factor(omega, lam, kind)
        assert 0.0 <= factor <= 1.0
        if kind == "hyperbolic" or lam * omega < 700.0:
            assert factor > 0.0

    def test_hyperbolic_dominates_exponential(self):
        for x in np.logspace(-6, 6, 60):
            hyp = wva_factor(x, 1.0, "hyperbolic")
            exp = wva_factor(x, 1.0, "exponential")
            assert hyp >= exp

    def test_validation(self):
        with pytest.raises(ValueError):
            wva_factor(1.0, 1.0, "linear")
        with pytest.raises(ValueError):
            wva_factor(-1.0, 1.0, "hyperbolic")
        with pytest.raises(ValueError):
            wva_factor(1.0, -1.0, "hyperbolic")


class TestWvaHook:
    def test_zero_importance_hook_is_identity(self):
        omega = zeros_like_params(init_params(RandomStream(74), (3, 2)))
        hook = make_wva_hook(omega, 5.0, "hyperbolic", "gradient")
        g = init_params(RandomStream(75), (3, 2))
        assert np.array_equal(flatten(hook.pre_optimizer(g)), flatten(g))

    def test_zero_lambda_returns_bare_hook(self):
        omega = map_blocks(np.abs, init_params(RandomStream(76), (3, 2)))
        hook = make_wva_hook(omega, 0.0, "hyperbolic", "step")
        assert hook.pre_optimizer is None and hook.post_optimizer is None

    def test_target_selects_hook_side(self):
        omega = map_blocks(np.abs, init_params(RandomStream(77), (3, 2)))
        grad_side = make_wva_hook(omega, 1.0, "hyperbolic", "gradient")
        step_side = make_wva_hook(omega, 1.0, "hyperbolic", "step")
        assert grad_side.pre_optimizer is not None and grad_side.post_optimizer is None
        assert step_side.post_optimizer is not None and step_side.pre_optimizer is None

    def test_sgd_trajectories_identical_for_both_targets(self):
        omega = map_blocks(np.abs, init_params(RandomStream(78), (4, 3, 2)))
        pre = make_wva_hook(omega, 2.5, "exponential", "gradient")
        post = make_wva_hook(omega, 2.5, "exponential", "step")
        p_pre = init_params(RandomStream(79), (4, 3, 2))
        p_post = p_pre.copy()
        stream = RandomStream(80)
        for _ in range(50):
            grads = MlpParams(
                weights=[stream.normal(0, 1, w.shape) for w in p_pre.weights],
                biases=[stream.normal(0, 1, b.shape) for b in p_pre.biases],
            )
            p_pre = apply(p_pre, grads, SgdConfig(), pre)
            p_post = apply(p_post, grads, SgdConfig(), post)
        assert np.array_equal(flatten(p_pre), flatten(p_post))

    def test_adam_targets_diverge_matching_scalar_oracle(self):
        lam, omega_value = 2.0, 0.75
        factor = 1.0 / (lam * omega_value + 1.0)
        omega = scalar_map(omega_value)
        grads = (0.4, 0.6)

        oracle_pre = ScalarAdam()
        oracle_post = ScalarAdam()
        expect_pre, expect_post = 0.0, 0.0
        for g in grads:
            expect_pre += oracle_pre.step(g * factor)
            expect_post += oracle_post.step(g) * factor

        results = {}
        for target in ("gradient", "step"):
            hook = make_wva_hook(omega, lam, "hyperbolic", target)
            params, state = scalar_net(0.0), AdamState()
            for g in grads:
                params = apply(params, scalar_map(g), state, hook)
            results[target] = params.weights[0][0, 0]
        assert abs(results["gradient"] - expect_pre) < 1e-12
        assert abs(results["step"] - expect_post) < 1e-12
        assert abs(results["gradient"] - results["step"]) > 1e-5

    def test_negative_importance_rejected(self):
        omega = init_params(RandomStream(81), (3, 2))
        with pytest.raises(ValueError):
            make_wva_hook(omega, 1.0, "hyperbolic", "step")


class TestStrategyConfig:
    def test_defaults_valid(self):
        StrategyConfig()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "replay"},
            {"lam": -1.0},
            {"online_decay": 2.0},
            {"attenuation": "linear"},
            {"target": "both"},
            {"estimator": "magnitude"},
            {"kind": "wva", "safe_coefficient": True},
            {"kind": "none", "separate_clip_threshold": 1.0},
            {"kind": "ewc", "separate_clip_threshold": -1.0},
            {"kind": "ewc_multi_anchor", "online_decay": 0.5},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            StrategyConfig(**kwargs)


class TestStrategies:
    def test_none_strategy_has_no_hook(self):
        strategy = build_strategy(StrategyConfig(kind="none"), 0.2)
        params, task = random_setup(82)
        assert strategy.step_hook(params) is None
        strategy.finish_task(params, task)
        assert strategy.step_hook(params) is None
        assert strategy.importance() is None

    def test_wva_inert_before_first_task(self):
        strategy = build_strategy(StrategyConfig(kind="wva", lam=1.0), 0.001)
        params, task = random_setup(83)
        assert strategy.step_hook(params) is None
        strategy.finish_task(params, task)
        assert strategy.step_hook(params) is not None

    def test_wva_zero_lambda_never_hooks(self):
        strategy = build_strategy(StrategyConfig(kind="wva", lam=0.0), 0.001)
        params, task = random_setup(84)
        strategy.finish_task(params, task)
        assert strategy.step_hook(params) is None

    def test_wva_accumulates_importance_across_tasks(self):
        config = StrategyConfig(kind="wva", lam=1.0, estimator="total_abs_signal")
        strategy = build_strategy(config, 0.001)
        params, task_a = random_setup(85)
        _, task_b = random_setup(86)
        strategy.finish_task(params, task_a)
        first = strategy.importance()
        strategy.finish_task(params, task_b)
        second = strategy.importance()
        omega_a = estimate_total_abs_signal(params, task_a)
        omega_b = estimate_total_abs_signal(params, task_b)
        assert np.array_equal(flatten(first), flatten(omega_a))
        assert np.allclose(
            flatten(second), flatten(omega_a) + flatten(omega_b), rtol=0, atol=1e-15
        )

    def test_wva_hook_scales_by_expected_factors(self):
        config = StrategyConfig(kind="wva", lam=2.0, attenuation="hyperbolic", target="step")
        strategy = build_strategy(config, 0.001)
        params, task = random_setup(87)
        strategy.finish_task(params, task)
        hook = strategy.step_hook(params)
        omega = estimate_total_abs_signal(params, task)
        step = init_params(RandomStream(88), params.layer_sizes)
        expected = flatten(step) / (2.0 * flatten(omega) + 1.0)
        assert np.max(np.abs(flatten(hook.post_optimizer(step)) - expected)) < 1e-15

    def test_wva_normalization_rescales_factors(self):
        config = StrategyConfig(
            kind="wva", lam=2.0, target="step", normalize_importance=True
        )
        strategy = build_strategy(config, 0.001)
        params, task = random_setup(89)
        strategy.finish_task(params, task)
        hook = strategy.step_hook(params)
        omega = flatten(estimate_total_abs_signal(params, task))
        step = init_params(RandomStream(90), params.layer_sizes)
        expected = flatten(step) / (2.0 * (omega / omega.max()) + 1.0)
        assert np.max(np.abs(flatten(hook.post_optimizer(step)) - expected)) < 1e-15

    def test_ewc_hook_adds_penalty_gradient(self):
        config = StrategyConfig(kind="ewc", lam=3.0, estimator="fisher")
        strategy = build_strategy(config, 0.2)
        anchor_params, task = random_setup(91)
        strategy.finish_task(anchor_params, task)
        current = init_params(RandomStream(92), anchor_params.layer_sizes)
        hook = strategy.step_hook(current)
        task_grad = init_params(RandomStream(93), anchor_params.layer_sizes)
        omega = estimate_fisher(anchor_params, task)
        _, penalty_grad = ewc_penalty(current, Anchor(anchor_params, 0), omega, 3.0)
        expected = flatten(task_grad) + flatten(penalty_grad)
        assert np.max(np.abs(flatten(hook.pre_optimizer(task_grad)) - expected)) < 1e-15

    def test_ewc_anchor_is_snapshot_not_reference(self):
        config = StrategyConfig(kind="ewc", lam=1.0)
        strategy = build_strategy(config, 0.2)
        params, task = random_setup(94)
        strategy.finish_task(params, task)
        params.weights[0][0, 0] += 100.0
        assert strategy.anchor.values.weights[0][0, 0] != params.weights[0][0, 0]

    def test_ewc_safe_coefficient_caps_effective_importance(self):
        lam, alpha = 10.0, 0.5
        config = StrategyConfig(kind="ewc", lam=lam, safe_coefficient=True)
        strategy = build_strategy(config, alpha)
        params, task = random_setup(95)
        strategy.finish_task(params, task)
        current = init_params(RandomStream(96), params.layer_sizes)
        hook = strategy.step_hook(current)
        zero = zeros_like_params(params)
        penalty_only = flatten(hook.pre_optimizer(zero))
        omega = flatten(strategy.omega_total)
        coeff = omega / (alpha * lam * omega + 1.0)
        diff = flatten(current) - flatten(params)
        assert np.max(np.abs(penalty_only - lam * coeff * diff)) < 1e-12

    def test_ewc_separate_clip_applied(self):
        config = StrategyConfig(kind="ewc", lam=1e6, separate_clip_threshold=1.0)
        strategy = build_strategy(config, 0.2)
        params, task = random_setup(97)
        strategy.finish_task(params, task)
        current = map_blocks(lambda p: p + 5.0, params)
        hook = strategy.step_hook(current)
        out = hook.pre_optimizer(zeros_like_params(params))
        assert global_norm(out) <= 1.0 + 1e-9

    def test_ewc_zero_lambda_never_hooks(self):
        strategy = build_strategy(StrategyConfig(kind="ewc", lam=0.0), 0.2)
        params, task = random_setup(98)
        strategy.finish_task(params, task)
        assert strategy.step_hook(params) is None

    def test_multi_anchor_matches_consolidated_after_one_task(self):
        params, task = random_setup(99)
        current = init_params(RandomStream(100), params.layer_sizes)
        task_grad = init_params(RandomStream(101), params.layer_sizes)
        outputs = {}
        for kind in ("ewc", "ewc_multi_anchor"):
            strategy = build_strategy(StrategyConfig(kind=kind, lam=2.0), 0.2)
            strategy.finish_task(params, task)
            hook = strategy.step_hook(current)
            outputs[kind] = flatten(hook.pre_optimizer(task_grad))
        assert np.array_equal(outputs["ewc"], outputs["ewc_multi_anchor"])

    def test_multi_anchor_keeps_separate_anchors(self):
        config = StrategyConfig(kind="ewc_multi_anchor", lam=1.0)
        strategy = build_strategy(config, 0.2)
        params_a, task_a = random_setup(102)
        params_b = init_params(RandomStream(103), params_a.layer_sizes)
        _, task_b = random_setup(104)
        strategy.finish_task(params_a, task_a)
        strategy.finish_task(params_b, make_task(task_b.train_images, task_b.train_labels, 1))
        assert len(strategy.anchors) == 2
        assert strategy.anchors[0].task_label == 0
        assert strategy.anchors[1].task_label == 1
        current = init_params(RandomStream(105), params_a.layer_sizes)
        hook = strategy.step_hook(current)
        out = flatten(hook.pre_optimizer(zeros_like_params(params_a)))
        _, expected = ewc_penalty_multi_anchor(
            current, strategy.anchors, strategy.omegas, [1.0, 1.0]
        )
        assert np.array_equal(out, flatten(expected))


class TestMaxNormalize:
    def test_peak_becomes_one(self):
        omega = map_blocks(np.abs, init_params(RandomStream(106), (3, 3, 2)))
        normalized = max_normalize(omega)
        assert abs(flatten(normalized).max() - 1.0) < 1e-15

    def test_zero_map_unchanged(self):
        omega = zeros_like_params(init_params(RandomStream(107), (2, 2)))
        assert np.all(flatten(max_normalize(omega)) == 0.0)
