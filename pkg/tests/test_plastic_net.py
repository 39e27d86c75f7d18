"""Templates, parameter counting, gated forward passes, folding and the joint training step"""

import itertools

import numpy as np
import pytest

from data_loader import batches
from gates import K_INFINITY
from lifecycle import RunMode, StagePlan, initialize_gates
from plastic_net import (ArchSpec, LayerKind, LossKind, build_model, count_params, evaluate_accuracy,
                         fold_masks, get_template, inference_masks, l0_objective, model_forward,
                         predict_proba, train_step)
from tensor_core import Adam, backward
from utils.errors import ConfigurationError, NumericFailure, UsageError


def _optimizer(model, lr=0.001):
    return Adam(model.parameters() + model.gate_parameters(), lr=lr)


class TestParameterCounting:

    @pytest.mark.parametrize('arch,expected', [
        ('7-9-109-30', 5320),
        ('8-8-53-8', 2304),
        ('3-3-48-3', 474),
        ('20-50-800-500', 430500),
    ])
    def test_lenet5_goldens(self, arch, expected):
        assert count_params(arch, 'lenet5') == expected

    @pytest.mark.parametrize('arch,expected', [([100, 80], 8160), ([3, 3], 15), ([0, 80], 160)])
    def test_moons_goldens(self, arch, expected):
        assert count_params(arch, 'moons-mlp') == expected

    def test_full_counts_match_templates(self):
        assert get_template('moons-mlp').full_param_count == 8160
        assert get_template('lenet5').full_param_count == 430500

    def test_accepts_arch_spec(self):
        assert count_params(ArchSpec(counts=[3, 3, 48, 3]), 'lenet5') == 474

    def test_wrong_length(self):
        with pytest.raises(UsageError):
            count_params('7-9-109', 'lenet5')

    def test_counts_above_bound(self):
        with pytest.raises(UsageError):
            count_params([101, 80], 'moons-mlp')

    def test_malformed_arch_string(self):
        with pytest.raises(ConfigurationError):
            count_params('7-x-109-30', 'lenet5')

    def test_unknown_template(self):
        with pytest.raises(ConfigurationError):
            get_template('alexnet')

    def test_moons_count_is_monotonic(self):
        for c1, c2 in itertools.product(range(0, 100, 9), range(0, 80, 7)):
            base = count_params([c1, c2], 'moons-mlp')
            assert count_params([c1 + 1, c2], 'moons-mlp') >= base
            assert count_params([c1, c2 + 1], 'moons-mlp') >= base

    def test_lenet5_count_is_monotonic(self, rng):
        bounds = np.array([20, 50, 800, 500])
        for _ in range(200):
            counts = [int(rng.integers(0, b)) for b in bounds]
            base = count_params(counts, 'lenet5')
            for layer in range(4):
                grown = list(counts)
                grown[layer] += 1
                assert count_params(grown, 'lenet5') >= base


class TestModelAssembly:

    def test_moons_layout(self, moons_model):
        kinds = [layer.kind for layer in moons_model.layers]
        assert kinds == [LayerKind.FIXED_PROJECTION, LayerKind.DENSE, LayerKind.DENSE]
        assert [bank.size for bank in moons_model.banks] == [100, 80]
        assert moons_model.layers[0].weight.frozen
        assert moons_model.layers[0].weight not in moons_model.parameters()

    def test_moons_needs_projection(self):
        with pytest.raises(ConfigurationError):
            build_model('moons-mlp')

    def test_lenet5_forward_shapes(self, rng):
        model = build_model('lenet5', k=7.0, seed_model=0, seed_gates=1)
        assert [bank.size for bank in model.banks] == [20, 50, 800, 500]
        logits = model_forward(model, rng.uniform(size=(2, 1, 28, 28)))
        assert logits.shape == (2, 10)

    def test_same_seeds_same_model(self, projection, rng):
        a = build_model('moons-mlp', seed_model=3, seed_gates=4, projection=projection)
        b = build_model('moons-mlp', seed_model=3, seed_gates=4, projection=projection)
        x = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(model_forward(a, x).data, model_forward(b, x).data)
        np.testing.assert_array_equal(a.banks[1].draw_uniforms(), b.banks[1].draw_uniforms())

    def test_bank_streams_are_independent(self, moons_model):
        first, second = moons_model.banks
        assert not np.array_equal(first.draw_uniforms()[:80], second.draw_uniforms())

    def test_mask_validation(self, moons_model, rng):
        x = rng.normal(size=(3, 2))
        with pytest.raises(ConfigurationError):
            model_forward(moons_model, x, [np.ones(100)])
        with pytest.raises(ConfigurationError):
            model_forward(moons_model, x, [np.ones(100), np.ones(79)])
        with pytest.raises(ConfigurationError):
            model_forward(moons_model, x, [np.ones(100), np.full(80, 1.5)])

    def test_mse_loss_kind(self, projection, rng):
        model = build_model('moons-mlp', projection=projection, loss_kind=LossKind.MSE)
        data, penalty = l0_objective(model, (rng.normal(size=(4, 2)), np.array([0, 1, 1, 0])), None, 0.0)
        assert data > 0 and penalty == 0.0


class TestFolding:

    def test_moons_fold_matches_masked_forward(self, moons_model, rng):
        masks = [rng.uniform(size=100) * (rng.uniform(size=100) > 0.3), rng.uniform(size=80)]
        x = rng.normal(size=(7, 2))
        folded = fold_masks(moons_model, masks)
        np.testing.assert_allclose(model_forward(folded, x).data, model_forward(moons_model, x, masks).data,
                                   rtol=1e-10, atol=1e-12)

    def test_lenet5_fold_matches_masked_forward(self, rng):
        model = build_model('lenet5', seed_model=2, seed_gates=3)
        masks = [rng.uniform(size=bank.size) * (rng.uniform(size=bank.size) > 0.5) for bank in model.banks]
        x = rng.uniform(size=(2, 1, 28, 28))
        folded = fold_masks(model, masks)
        np.testing.assert_allclose(model_forward(folded, x).data, model_forward(model, x, masks).data,
                                   rtol=1e-9, atol=1e-12)

    def test_fold_leaves_original_untouched(self, moons_model):
        before = moons_model.layers[1].weight.data.copy()
        fold_masks(moons_model, [np.zeros(100), np.zeros(80)])
        np.testing.assert_array_equal(moons_model.layers[1].weight.data, before)


class TestTrainStep:

    def test_pretrain_leaves_logits_untouched(self, sparsify_model, moons_split):
        train, _, _ = moons_split
        optimizer = _optimizer(sparsify_model)
        phis_before = [bank.phis.data.copy() for bank in sparsify_model.banks]
        weight_before = sparsify_model.layers[1].weight.data.copy()
        for batch in batches(train, 50, seed=0, epoch=0):
            step = train_step(sparsify_model, batch, [0.01, 0.01], optimizer)
            assert step.disagreement == 0
        for bank, before in zip(sparsify_model.banks, phis_before):
            np.testing.assert_array_equal(bank.phis.data, before)
        assert not np.array_equal(sparsify_model.layers[1].weight.data, weight_before)

    def test_ten_pretrain_epochs_with_mixed_logits(self, sparsify_model, moons_split):
        train, _, _ = moons_split
        for bank in sparsify_model.banks:
            bank.phis.data[::2] = -3.0 / 7.0
        optimizer = _optimizer(sparsify_model)
        phis_before = [bank.phis.data.copy() for bank in sparsify_model.banks]
        for epoch in range(10):
            for batch in batches(train, 50, seed=0, epoch=epoch):
                assert train_step(sparsify_model, batch, [0.01, 0.01], optimizer).disagreement == 0
        for bank, before in zip(sparsify_model.banks, phis_before):
            np.testing.assert_array_equal(bank.phis.data, before)

    def test_all_ones_masks_match_ungated_training(self, projection, moons_split):
        train, _, _ = moons_split
        gated = build_model('moons-mlp', seed_model=4, seed_gates=5, projection=projection)
        initialize_gates(gated, StagePlan(mode=RunMode.BASELINE))
        reference = build_model('moons-mlp', seed_model=4, seed_gates=5, projection=projection)
        ones = [np.ones(bank.size) for bank in reference.banks]
        gated_optimizer = _optimizer(gated)
        reference_optimizer = Adam(reference.parameters(), lr=0.001)
        for epoch in range(2):
            for batch in batches(train, 50, seed=0, epoch=epoch):
                train_step(gated, batch, [0.0, 0.0], gated_optimizer)
                reference_optimizer.zero_grad()
                backward(reference.data_loss(model_forward(reference, batch[0], ones), batch[1]))
                reference_optimizer.step()
        for ours, theirs in zip(gated.parameters(), reference.parameters()):
            np.testing.assert_array_equal(ours.data, theirs.data)

    def test_adapt_stage_moves_logits(self, sparsify_model, moons_split):
        train, _, _ = moons_split
        sparsify_model.set_k(7.0)
        optimizer = _optimizer(sparsify_model)
        before = sparsify_model.banks[0].phis.data.copy()
        for batch in batches(train, 50, seed=0, epoch=0):
            train_step(sparsify_model, batch, [0.01, 0.01], optimizer)
        assert not np.array_equal(sparsify_model.banks[0].phis.data, before)

    def test_positive_lambda_lowers_logits_without_data_signal(self, sparsify_model):
        sparsify_model.set_k(7.0)
        for layer in sparsify_model.layers[1:]:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        optimizer = _optimizer(sparsify_model)
        before = [bank.phis.data.copy() for bank in sparsify_model.banks]
        batch = (np.zeros((4, 2)), np.array([0, 1, 0, 1]))
        train_step(sparsify_model, batch, [1.0, 1.0], optimizer)
        for bank, phis in zip(sparsify_model.banks, before):
            assert np.all(bank.phis.data < phis)

    def test_frozen_banks_keep_their_mask(self, sparsify_model, moons_split):
        train, _, _ = moons_split
        for bank in sparsify_model.banks:
            bank.freeze(np.ones(bank.size))
        optimizer = _optimizer(sparsify_model)
        batch = next(batches(train, 50, seed=0, epoch=0))
        step = train_step(sparsify_model, batch, [5.0, 5.0], optimizer)
        assert step.penalty == 0.0 and step.gated_units == 0
        for bank in sparsify_model.banks:
            np.testing.assert_array_equal(bank.phis.data, 3.0 / 7.0)

    def test_non_finite_loss_raises(self, sparsify_model):
        sparsify_model.layers[1].weight.data[0, 0] = np.nan
        batch = (np.ones((3, 2)), np.array([0, 1, 0]))
        with pytest.raises(NumericFailure) as excinfo:
            train_step(sparsify_model, batch, 0.0, _optimizer(sparsify_model))
        assert 'active_counts' in excinfo.value.diagnostics

    def test_lambda_length_must_match(self, sparsify_model):
        batch = (np.ones((3, 2)), np.array([0, 1, 0]))
        with pytest.raises(ConfigurationError):
            train_step(sparsify_model, batch, [0.1, 0.1, 0.1], _optimizer(sparsify_model))


class TestInference:

    def test_inference_masks_prefer_frozen_mask(self, sparsify_model):
        sparsify_model.set_k(7.0)
        first = sparsify_model.banks[0]
        first.freeze(np.r_[np.ones(50), np.zeros(50)])
        masks = inference_masks(sparsify_model)
        np.testing.assert_array_equal(masks[0], first.fixed_mask)
        np.testing.assert_allclose(masks[1], sparsify_model.banks[1].probs())

    def test_probabilities_and_accuracy(self, sparsify_model, moons_split):
        _, test, _ = moons_split
        probs = predict_proba(sparsify_model, test.inputs)
        assert probs.shape == (len(test), 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        assert 0.0 <= evaluate_accuracy(sparsify_model, test.inputs, test.labels) <= 1.0

    def test_objective_reports_penalty(self, sparsify_model, moons_split):
        train, _, _ = moons_split
        sparsify_model.set_k(7.0)
        batch = (train.inputs[:10], train.labels[:10])
        data, penalty = l0_objective(sparsify_model, batch, sparsify_model.ones_masks(), [1.0, 2.0])
        g = sparsify_model.banks[0].probs()[0]
        assert data > 0
        assert penalty == pytest.approx(100 * g + 2.0 * 80 * g)


class TestObjectiveBound:
    """Enumerated over every mask of a six-gate model"""

    @pytest.fixture
    def small_model(self, projection, rng):
        model = build_model('moons-mlp', k=1.0, seed_model=6, seed_gates=7, projection=projection)
        initialize_gates(model, StagePlan(mode=RunMode.EXPAND, k_adapt=0.5), initial_arch=[3, 3])
        model.set_k(1.0)
        for bank in model.banks:
            bank.phis.data[bank.active] = rng.uniform(-2.0, 2.0, size=bank.active_count)
        return model

    def _enumerate(self, model, batch, lambdas):
        active = [np.flatnonzero(bank.active) for bank in model.banks]
        probs = [bank.probs()[idx] for bank, idx in zip(model.banks, active)]
        n_first = active[0].size
        losses, weights, counts, penalty = [], [], [], None
        for bits in itertools.product([0.0, 1.0], repeat=sum(idx.size for idx in active)):
            bits = np.array(bits)
            masks = [np.zeros(bank.size) for bank in model.banks]
            masks[0][active[0]] = bits[:n_first]
            masks[1][active[1]] = bits[n_first:]
            data, penalty = l0_objective(model, batch, masks, lambdas)
            g = np.concatenate(probs)
            losses.append(data)
            counts.append(bits.sum())
            weights.append(np.prod(np.where(bits == 1.0, g, 1.0 - g)))
        return np.array(losses), np.array(weights), np.array(counts), penalty

    def test_best_mask_is_below_the_expected_objective(self, small_model, moons_split):
        train, _, _ = moons_split
        batch = (train.inputs[:40], train.labels[:40])
        losses, weights, _, penalty = self._enumerate(small_model, batch, [0.3, 0.3])
        assert weights.sum() == pytest.approx(1.0)
        expected_objective = float(np.dot(weights, losses)) + penalty
        assert losses.min() + penalty <= expected_objective

    def test_penalty_is_expected_l0_and_bounds_the_best_mask(self, small_model, moons_split):
        train, _, _ = moons_split
        batch = (train.inputs[:40], train.labels[:40])
        losses, weights, counts, penalty = self._enumerate(small_model, batch, [0.3, 0.3])
        l0_objectives = losses + 0.3 * counts
        # lambda * sum g is lambda * E||z||_0
        assert float(np.dot(weights, l0_objectives)) == pytest.approx(float(np.dot(weights, losses)) + penalty)
        assert l0_objectives.min() <= float(np.dot(weights, losses)) + penalty


def test_expand_initialization_uses_hibernation(projection):
    model = build_model('moons-mlp', k=K_INFINITY, projection=projection)
    initialize_gates(model, StagePlan(mode=RunMode.EXPAND, k_adapt=0.5), initial_arch=[3, 3])
    assert model.active_counts() == [3, 3]
    for bank in model.banks:
        np.testing.assert_array_equal(bank.phis.data[~bank.active], -6.0)
        np.testing.assert_array_equal(bank.phis.data[bank.active], 6.0)
