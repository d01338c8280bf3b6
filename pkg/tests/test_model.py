import logging
import math

import numpy as np
import pytest

from priorgate import model as mdl
from priorgate.autodiff import Tensor, grad_check
from priorgate.gating import PriorVector
from priorgate.model import (
    CurriculumSchedule,
    ModelConfig,
    TrainConfig,
    TrainingDivergedError,
    curriculum_weight,
    forward,
    init_model_params,
    loss,
    predict,
    train,
)
from priorgate.pipeline import with_priors

from conftest import tiny_model_config


def _fit_params(samples, mode, seed=0):
    normalizer = mdl.fit_normalizer_from_samples(samples)
    rng = np.random.default_rng(seed)
    return init_model_params(tiny_model_config(), mode, normalizer, rng)


class TestForward:
    def test_zero_head_gives_half(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "none")
        for label in params.config.labels:
            params.heads[label].w = Tensor(np.zeros_like(params.heads[label].w.data), requires_grad=True)
            params.heads[label].b = Tensor(0.0, requires_grad=True)
        probs = forward(params, train_s[0])
        for label, p in probs.items():
            assert p.item() == 0.5

    def test_none_mode_ignores_priors_exactly(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "none")
        sample = train_s[0]
        base = {k: v.item() for k, v in forward(params, sample).items()}
        perturbed_priors = {
            label: PriorVector(pv.label, pv.values * 7.3 + 11.0, pv.features)
            for label, pv in sample.priors.items()
        }
        perturbed = with_priors(sample, perturbed_priors)
        after = {k: v.item() for k, v in forward(params, perturbed).items()}
        assert base == after  # bitwise: priors never enter the graph

    def test_gated_open_gate_limit_equals_none(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        gated = _fit_params(train_s, "gated", seed=3)
        none = _fit_params(train_s, "none", seed=3)
        # identical trunk and heads by construction only if seeded identically;
        # force them equal explicitly
        for label in gated.config.labels:
            none.pools[label].scorer_w = Tensor(gated.pools[label].scorer_w.data.copy(), requires_grad=True)
            none.pools[label].log_temp = Tensor(gated.pools[label].log_temp.data.copy(), requires_grad=True)
            none.heads[label].w = Tensor(gated.heads[label].w.data.copy(), requires_grad=True)
            none.heads[label].b = Tensor(gated.heads[label].b.data.copy(), requires_grad=True)
            gated.gates[label].w = Tensor(np.zeros_like(gated.gates[label].w.data), requires_grad=True)
            gated.gates[label].b = Tensor(np.full_like(gated.gates[label].b.data, 1e9), requires_grad=True)
        none.encoder = gated.encoder
        sample = train_s[1]
        p_gated = forward(gated, sample)
        p_none = forward(none, sample)
        for label in gated.config.labels:
            assert p_gated[label].item() == pytest.approx(p_none[label].item(), abs=1e-9)

    def test_probabilities_in_open_interval(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        for mode in mdl.MODES:
            params = _fit_params(train_s, mode, seed=4)
            for sample in train_s[:4]:
                for p in forward(params, sample).values():
                    assert 0.0 < p.item() < 1.0

    def test_zero_gate_column_makes_feature_inert(self, tiny_model_samples):
        # scaling a prior feature whose gate weight column is zero cannot move p
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "gated", seed=6)
        sample = train_s[0]
        label = params.config.labels[0]
        w = params.gates[label].w.data.copy()
        w[:, 0] = 0.0
        params.gates[label].w = Tensor(w, requires_grad=True)
        base = forward(params, sample)[label].item()
        pv = sample.priors[label]
        scaled = dict(sample.priors)
        values = pv.values.copy()
        values[0] *= 17.0
        scaled[label] = PriorVector(pv.label, values, pv.features)
        after = forward(params, with_priors(sample, scaled))[label].item()
        assert base == after  # exact


class TestCurriculum:
    def test_reference_epochs(self):
        assert curriculum_weight(5) == 0.0
        assert curriculum_weight(15) == pytest.approx(0.15, abs=1e-15)
        assert curriculum_weight(25) == 0.3

    def test_boundaries(self):
        assert curriculum_weight(10) == 0.0
        assert curriculum_weight(20) == 0.3

    def test_monotone_nondecreasing(self):
        values = [curriculum_weight(e) for e in range(40)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            curriculum_weight(-1)


def _prob_dict(values):
    return {f"l{i}": Tensor(v) for i, v in enumerate(values)}


class TestLoss:
    def test_all_observed_is_mean_bce_any_epoch(self):
        probs = _prob_dict([0.8, 0.3, 0.6])
        targets = {"l0": 1, "l1": 0, "l2": 1}
        expected = np.mean([-np.log(0.8), -np.log(0.7), -np.log(0.6)])
        for epoch in (0, 5, 15, 25):
            value = loss(_prob_dict([0.8, 0.3, 0.6]), targets, epoch).item()
            assert value == pytest.approx(expected, abs=1e-12)
        # epoch independence is exact, not approximate
        assert loss(probs, targets, 0).item() == loss(_prob_dict([0.8, 0.3, 0.6]), targets, 25).item()

    def test_all_missing_after_ramp_is_weak_negative_mean(self):
        targets = {"l0": None, "l1": None}
        value = loss(_prob_dict([0.6, 0.2]), targets, 25).item()
        expected = np.mean([-np.log(0.4), -np.log(0.8)])
        assert value == pytest.approx(expected, abs=1e-12)

    def test_hand_mixed_case(self):
        # one observed positive at 0.8, one missing at 0.6, epoch 15
        targets = {"l0": 1, "l1": None}
        value = loss(_prob_dict([0.8, 0.6]), targets, 15).item()
        expected = (-np.log(0.8) + 0.15 * -np.log(0.4)) / 1.15
        assert value == pytest.approx(expected, abs=1e-12)

    def test_zero_denominator_contributes_zero(self, caplog):
        targets = {"l0": None, "l1": None}
        with caplog.at_level(logging.WARNING):
            value = loss(_prob_dict([0.6, 0.2]), targets, 5).item()
        assert value == 0.0
        assert any("zero curriculum" in r.message for r in caplog.records)

    def test_label_permutation_invariance(self):
        probs_a = {"a": Tensor(0.7), "b": Tensor(0.4), "c": Tensor(0.9)}
        probs_b = {"c": Tensor(0.9), "a": Tensor(0.7), "b": Tensor(0.4)}
        targets = {"a": 1, "b": None, "c": 0}
        assert loss(probs_a, targets, 15).item() == loss(probs_b, targets, 15).item()

    def test_clamp_guards_extreme_probabilities(self):
        value = loss({"l0": Tensor(1.0)}, {"l0": 0}, 0).item()
        assert math.isfinite(value)


class TestGradients:
    @pytest.mark.parametrize("mode", mdl.MODES)
    def test_full_loss_gradient_check(self, tiny_model_samples, mode):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, mode, seed=5)
        sample = train_s[2]

        def f():
            return loss(forward(params, sample), sample.targets, epoch=15)

        named = params.named_tensors()
        err = grad_check(f, [t for _, t in named], eps=1e-5)
        assert err < 1e-4


class TestTraining:
    def test_overfits_single_sample(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        sample = train_s[0]
        observed = {k: (v if v is not None else 1) for k, v in sample.targets.items()}
        sample = with_priors(sample, sample.priors)
        sample.targets = observed
        cfg = TrainConfig(epochs=200, batch_size=1, lr=0.3, seed=0, mode="none", stride=3)
        params, log = train([sample], [], tiny_model_config(), cfg)
        assert log[-1]["loss"] < 0.1 * log[0]["loss"]

    def test_epoch_zero_loss_bitwise_deterministic(self, tiny_model_samples):
        train_s, val_s = tiny_model_samples
        cfg = TrainConfig(epochs=2, batch_size=4, lr=0.1, seed=7, mode="gated", stride=3)
        _, log_a = train(train_s, [], tiny_model_config(), cfg)
        _, log_b = train(train_s, [], tiny_model_config(), cfg)
        assert log_a[0]["loss"] == log_b[0]["loss"]
        assert log_a == log_b

    def test_log_schema_and_curriculum_column(self, tiny_model_samples):
        train_s, val_s = tiny_model_samples
        cfg = TrainConfig(epochs=3, batch_size=4, lr=0.1, seed=8, mode="none", stride=3)
        _, log = train(train_s, val_s, tiny_model_config(), cfg)
        assert len(log) == 3
        for row in log:
            assert row["w_curriculum"] == curriculum_weight(row["epoch"])
            assert "val_auroc" in row

    def test_divergence_aborts_with_diagnostics(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        cfg = TrainConfig(epochs=5, batch_size=4, lr=1e12, seed=9, mode="none", stride=3)
        with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
            train(train_s, [], tiny_model_config(), cfg)

    def test_validation_auroc_reported_and_sane(self, tiny_model_samples):
        train_s, val_s = tiny_model_samples
        cfg = TrainConfig(epochs=2, batch_size=4, lr=0.15, seed=10, mode="gated", stride=3)
        _, log = train(train_s, val_s, tiny_model_config(), cfg)
        assert 0.0 <= log[-1]["val_auroc"] <= 1.0


class TestPredict:
    def test_inference_is_pure_and_repeatable(self, tiny_model_samples):
        train_s, val_s = tiny_model_samples
        params = _fit_params(train_s, "gated", seed=11)
        a = predict(params, val_s)
        b = predict(params, val_s)
        np.testing.assert_array_equal(a.p, b.p)
        assert ((a.p > 0) & (a.p < 1)).all()

    def test_matches_forward_on_single_sample(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "concat", seed=12)
        sample = train_s[3]
        pset = predict(params, [sample])
        probs = forward(params, sample)
        for j, label in enumerate(pset.labels):
            assert pset.p[0, j] == probs[label].item()

    def test_missing_targets_become_nan(self, tiny_model_samples):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "none", seed=13)
        with_missing = [s for s in train_s if any(v is None for v in s.targets.values())]
        assert with_missing, "tiny train split should contain missing labels"
        pset = predict(params, with_missing[:1])
        assert np.isnan(pset.y).any()


class TestCheckpoint:
    def test_roundtrip_identical_predictions(self, tiny_model_samples, tmp_path):
        train_s, val_s = tiny_model_samples
        for mode in mdl.MODES:
            params = _fit_params(train_s, mode, seed=14)
            base = str(tmp_path / f"ckpt_{mode}")
            mdl.save_model(base, params)
            back = mdl.load_model(base)
            a = predict(params, val_s)
            b = predict(back, val_s)
            np.testing.assert_array_equal(a.p, b.p)

    def test_mode_and_config_restored(self, tiny_model_samples, tmp_path):
        train_s, _ = tiny_model_samples
        params = _fit_params(train_s, "concat", seed=15)
        base = str(tmp_path / "ckpt")
        mdl.save_model(base, params)
        back = mdl.load_model(base)
        assert back.mode == "concat"
        assert back.config.to_dict() == params.config.to_dict()
        assert back.normalizer.stats == params.normalizer.stats
