"""Learning stage scheduler, expansion controller and architecture extraction"""

import numpy as np
import pytest

from data_loader import batches
from gates import K_INFINITY, threshold_mask
from lifecycle import (ExpansionPolicy, RunMode, Stage, StagePlan, current_stage, detect_plateau,
                       enter_finetune, expansion_step, expansion_terminated, finalize_architecture, finalize_masks,
                       initialize_gates, maybe_expand, midband_fraction, thresholded_arch)
from plastic_net import build_model, train_step
from tensor_core import Adam
from utils.errors import ConfigurationError, UsageError


@pytest.fixture
def expand_model(projection):
    model = build_model('moons-mlp', k=0.5, seed_model=0, seed_gates=1, projection=projection)
    initialize_gates(model, StagePlan(mode=RunMode.EXPAND, k_adapt=0.5), initial_arch=[3, 3])
    return model


FLAT = [1.0] * 6


class TestStagePlan:

    @pytest.mark.parametrize('epoch,stage,k', [
        (0, Stage.PRETRAIN, K_INFINITY),
        (99, Stage.PRETRAIN, K_INFINITY),
        (100, Stage.ADAPT, 7.0),
        (349, Stage.ADAPT, 7.0),
        (350, Stage.FINETUNE, K_INFINITY),
        (499, Stage.FINETUNE, K_INFINITY),
    ])
    def test_default_boundaries(self, epoch, stage, k):
        assert current_stage(StagePlan(), epoch) == (stage, k)

    @pytest.mark.parametrize('epoch', [-1, 500])
    def test_epoch_outside_plan(self, epoch):
        with pytest.raises(UsageError):
            current_stage(StagePlan(), epoch)

    def test_empty_stage_is_skipped(self):
        plan = StagePlan(pretrain_epochs=3, adapt_epochs=0, finetune_epochs=2)
        assert current_stage(plan, 3)[0] is Stage.FINETUNE
        assert [span[0] for span in plan.boundaries()] == [Stage.PRETRAIN, Stage.FINETUNE]

    def test_k_zero_adapt_is_allowed(self):
        assert current_stage(StagePlan(k_adapt=0.0), 150) == (Stage.ADAPT, 0.0)

    @pytest.mark.parametrize('field', ['pretrain_epochs', 'k_adapt'])
    def test_negative_values_rejected(self, field):
        with pytest.raises(ConfigurationError):
            StagePlan(**{field: -1})


class TestInitialization:

    def test_sparsify_starts_every_unit_active(self, sparsify_model):
        for bank in sparsify_model.banks:
            assert bank.active_count == bank.size
            np.testing.assert_allclose(bank.phis.data, 3.0 / 7.0)

    def test_baseline_freezes_all_ones(self, moons_model):
        initialize_gates(moons_model, StagePlan(mode=RunMode.BASELINE))
        for bank in moons_model.banks:
            assert bank.frozen
            np.testing.assert_array_equal(bank.fixed_mask, 1.0)

    def test_expand_needs_initial_arch(self, moons_model):
        with pytest.raises(ConfigurationError):
            initialize_gates(moons_model, StagePlan(mode=RunMode.EXPAND, k_adapt=0.5))
        with pytest.raises(ConfigurationError):
            initialize_gates(moons_model, StagePlan(mode=RunMode.EXPAND, k_adapt=0.5), initial_arch=[3, 81])


class TestPlateau:

    def test_short_history(self):
        assert not detect_plateau([1.0] * 5, window=5, rel_tol=1e-3)

    def test_improving_history(self):
        assert not detect_plateau(list(np.linspace(2.0, 1.0, 10)), window=5, rel_tol=1e-3)

    def test_flat_history(self):
        assert detect_plateau(FLAT, window=5, rel_tol=1e-3)

    def test_flat_negative_history(self):
        assert detect_plateau([-0.2] * 6, window=5, rel_tol=1e-3)

    def test_rising_history(self):
        assert detect_plateau([1.0, 1.0, 1.1, 1.2, 1.3, 1.4], window=5, rel_tol=1e-3)

    def test_improvement_below_tolerance_is_a_plateau(self):
        # each window mean is rel_tol/2 below the one before it
        history = list(0.995 ** np.arange(12))
        assert detect_plateau(history, window=5, rel_tol=1e-2)

    def test_improvement_above_tolerance_is_not(self):
        history = list(0.98 ** np.arange(12))
        assert not detect_plateau(history, window=5, rel_tol=1e-2)


class TestExpansion:

    def test_no_growth_without_plateau(self, expand_model):
        assert maybe_expand(expand_model, ExpansionPolicy(), [3.0, 2.0]) == []
        assert expand_model.active_counts() == [3, 3]

    def test_plateau_wakes_one_unit_per_layer(self, expand_model):
        activations = maybe_expand(expand_model, ExpansionPolicy(k_adapt=0.5), FLAT)
        assert [layer for layer, _ in activations] == [0, 1]
        assert expand_model.active_counts() == [4, 4]
        for (layer, units), bank in zip(activations, expand_model.banks):
            assert bank.active[units].all()
            np.testing.assert_array_equal(bank.phis.data[units], 6.0)

    def test_growth_per_event(self, expand_model):
        maybe_expand(expand_model, ExpansionPolicy(growth_per_event=4, k_adapt=0.5), FLAT)
        assert expand_model.active_counts() == [7, 7]

    def test_redundant_layer_does_not_grow(self, expand_model):
        first = expand_model.banks[0]
        first.phis.data[np.flatnonzero(first.active)[0]] = -1.0
        maybe_expand(expand_model, ExpansionPolicy(k_adapt=0.5), FLAT)
        assert expand_model.active_counts() == [3, 4]

    def test_upper_bound_caps_growth(self, expand_model):
        policy = ExpansionPolicy(upper_bound=[3, 5], growth_per_event=10, k_adapt=0.5)
        maybe_expand(expand_model, policy, FLAT)
        assert expand_model.active_counts() == [3, 5]
        assert expansion_terminated(expand_model, policy, FLAT)

    def test_not_terminated_while_layers_can_grow(self, expand_model):
        assert not expansion_terminated(expand_model, ExpansionPolicy(k_adapt=0.5), FLAT)
        assert not expansion_terminated(expand_model, ExpansionPolicy(k_adapt=0.5), [2.0, 1.0])

    def test_redundant_units_end_growth_below_the_bound(self, expand_model):
        policy = ExpansionPolicy(k_adapt=0.5)
        for _ in range(3):
            maybe_expand(expand_model, policy, FLAT)
        assert expand_model.active_counts() == [6, 6]
        assert not expansion_terminated(expand_model, policy, FLAT)
        for bank in expand_model.banks:
            bank.phis.data[np.flatnonzero(bank.active)[-1]] = -0.5
        assert maybe_expand(expand_model, policy, FLAT) == []
        assert expansion_terminated(expand_model, policy, FLAT)
        arch = thresholded_arch(expand_model)
        assert arch.counts == [5, 5]
        assert arch.param_count < 8160

    def test_growth_restarts_the_plateau_window(self, expand_model):
        policy = ExpansionPolicy(plateau_window=5, k_adapt=0.5)
        history, grown = [], []
        for _ in range(18):
            activated, terminated = expansion_step(expand_model, policy, history, 1.0)
            grown.append(bool(activated))
            assert not terminated
        # a fresh window needs six flat epochs
        assert [i for i, g in enumerate(grown) if g] == [5, 11, 17]
        assert expand_model.active_counts() == [6, 6]

    def test_growth_without_restart_fires_every_flat_epoch(self, expand_model):
        policy = ExpansionPolicy(plateau_window=5, k_adapt=0.5, restart_after_growth=False)
        history = []
        for _ in range(8):
            expansion_step(expand_model, policy, history, 1.0)
        assert expand_model.active_counts() == [6, 6]
        assert len(history) == 8

    def test_active_counts_never_decrease_between_events(self, expand_model, moons_split):
        train, _, _ = moons_split
        policy = ExpansionPolicy(plateau_window=1, plateau_rel_tol=1.0, k_adapt=0.5)
        optimizer = Adam(expand_model.parameters() + expand_model.gate_parameters())
        history, counts = [], [expand_model.active_counts()]
        for epoch in range(4):
            for batch in batches(train, 100, seed=0, epoch=epoch):
                step = train_step(expand_model, batch, [-0.001, -0.001], optimizer)
            history.append(step.data_loss + step.penalty)
            maybe_expand(expand_model, policy, history)
            counts.append(expand_model.active_counts())
        assert np.all(np.diff(np.array(counts), axis=0) >= 0)
        assert counts[-1][0] > 3


class TestFinalize:

    def test_finetune_support_equals_threshold_support(self, sparsify_model, rng):
        sparsify_model.set_k(7.0)
        for bank in sparsify_model.banks:
            bank.phis.data[:] = rng.normal(0.0, 0.5, size=bank.size)
        before = [threshold_mask(bank, 0.5) > 0 for bank in sparsify_model.banks]
        masks = enter_finetune(sparsify_model)
        for support, mask in zip(before, masks):
            np.testing.assert_array_equal(support, mask > 0)
        after = [mask > 0 for mask in finalize_masks(sparsify_model, 0.5)]
        for support, mask in zip(before, after):
            np.testing.assert_array_equal(support, mask)

    def test_full_model_prunes_nothing(self, sparsify_model):
        sparsify_model.set_k(7.0)
        result = finalize_architecture(sparsify_model)
        assert result.arch.counts == [100, 80]
        assert result.arch.param_count == 8160
        assert result.pruned_fraction == 0.0

    def test_pruned_fraction(self, sparsify_model):
        sparsify_model.set_k(7.0)
        sparsify_model.banks[1].phis.data[40:] = -1.0
        result = finalize_architecture(sparsify_model)
        assert result.arch.to_string() == '100-40'
        assert result.arch.param_count == 4080
        assert result.pruned_fraction == pytest.approx(0.5)
        assert result.per_layer[1] == {'layer': 1, 'allocated': 80, 'active': 80, 'kept': 40}

    def test_tau_changes_threshold(self, sparsify_model):
        sparsify_model.set_k(7.0)
        assert thresholded_arch(sparsify_model, tau=0.96).counts == [0, 0]

    def test_midband_fraction(self, sparsify_model):
        sparsify_model.set_k(1.0)
        first, second = sparsify_model.banks
        first.phis.data[:] = 0.0
        second.phis.data[:] = 5.0
        assert midband_fraction(sparsify_model) == pytest.approx(100 / 180)
