import math

import numpy as np
import pytest

from pinchgate.autodiff import Tensor
from pinchgate.data import CorpusSpec, generate, pack
from pinchgate.model import Encoder, EncoderConfig, attach_gates, overall_sparsity
from pinchgate.training import (
    AdamState,
    SparsityBudget,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    anneal_at,
    lr_at,
    run_one_pass,
    total_loss,
    update_budget,
)

TINY = EncoderConfig(blocks=1, d_model=16, d_ff=32, heads=2)
QUICK = TrainConfig(lr=3e-3, epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def corpus():
    return generate(CorpusSpec(train_size=48, dev_size=8, test_size=8, seed=2))


@pytest.fixture(scope="module")
def batch(corpus):
    return pack(corpus["train"][:6])


class TestSchedules:
    def test_lr_examples(self):
        cfg = TrainConfig()
        assert lr_at(0, 1000, cfg) == 0
        assert lr_at(100, 1000, cfg) == pytest.approx(2e-4)
        assert lr_at(1000, 1000, cfg) == 0
        assert lr_at(50, 1000, cfg) == pytest.approx(1e-4)
        assert lr_at(550, 1000, cfg) == pytest.approx(1e-4)

    def test_lr_out_of_range(self):
        for step in (-1, 1001):
            with pytest.raises(ValueError):
                lr_at(step, 1000, TrainConfig())

    def test_anneal_examples(self):
        assert anneal_at(0, 100) == pytest.approx(0.5)
        assert anneal_at(100, 100) == pytest.approx(0.01)
        assert anneal_at(50, 100) == pytest.approx(0.255)
        values = [anneal_at(s, 100) for s in range(101)]
        assert values == sorted(values, reverse=True)

    @pytest.mark.parametrize("kwargs", [dict(warmup_frac=0.0), dict(warmup_frac=1.0),
                                        dict(anneal_start=0.01, anneal_end=0.5), dict(anneal_end=0.0)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestAdamW:
    def test_zero_gradient_no_decay_is_noop(self):
        p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
        p.grad = np.zeros(2)
        adamw_step([("p", p, True)], AdamState(), 1e-2, TrainConfig(weight_decay=0.0))
        assert p.data.tolist() == [0.3, -1.2]

    def test_first_step_opposes_gradient(self):
        cfg = TrainConfig(weight_decay=0.0)
        for g in (0.7, -3.0):
            p = Tensor(np.array(1.0), requires_grad=True)
            p.grad = np.array(g)
            adamw_step([("p", p, True)], AdamState(), 0.1, cfg)
            assert float(p.data) - 1.0 == pytest.approx(-0.1 * g / (abs(g) + cfg.eps), rel=1e-12)

    def test_two_step_hand_trace(self):
        cfg = TrainConfig(weight_decay=0.1)
        lr, b1, b2, eps, wd = 0.01, cfg.beta1, cfg.beta2, cfg.eps, 0.1
        theta, m, v = 0.5, 0.0, 0.0
        p = Tensor(np.array(theta), requires_grad=True)
        state = AdamState()
        for t, g in enumerate((0.2, -0.4), start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta *= 1 - lr * wd
            theta -= (lr / (1 - b1**t)) * m / (math.sqrt(v) / math.sqrt(1 - b2**t) + eps)
            p.grad = np.array(g)
            adamw_step([("p", p, True)], state, lr, cfg)
            assert float(p.data) == pytest.approx(theta, abs=1e-12)

    def test_excluded_from_decay(self):
        p = Tensor(np.array(2.0), requires_grad=True)
        p.grad = np.array(0.0)
        adamw_step([("t", p, False)], AdamState(), 0.1, TrainConfig(weight_decay=0.5))
        assert float(p.data) == 2.0

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.zeros(2)
        with pytest.raises(ValueError):
            adamw_step([("p", p, True)], AdamState(), 0.1, TrainConfig())


class TestBudget:
    def test_rule_pointwise(self):
        budget = SparsityBudget(0.5, 1e-3, 1e-3)
        trace = [0.1, 0.45, 0.5, 0.52, 0.49, 0.51, 0.3]
        for s in trace:
            budget = update_budget(budget, s)
            assert budget.eta_active == (0.0 if s >= 0.5 else 1e-3)

    def test_oneshot_stays_off(self):
        budget = SparsityBudget(0.5, 1e-3, 1e-3)
        for s in (0.2, 0.6, 0.4):
            budget = update_budget(budget, s, oneshot=True)
        assert budget.eta_active == 0.0

    def test_accepts_model(self):
        model = attach_gates(Encoder(TINY), t=10.0)
        assert update_budget(SparsityBudget(0.5, 1e-3, 1e-3), model).eta_active == 0.0

    @pytest.mark.parametrize("kwargs", [dict(target=1.0), dict(target=-0.1), dict(eta_preset=-1.0),
                                        dict(eta_preset=1e-3, eta_active=5e-4)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SparsityBudget(**kwargs)


class TestTotalLoss:
    def test_eta_zero_is_ctc(self, batch):
        model = attach_gates(Encoder(TINY))
        loss, ctc = total_loss(*batch, model, SparsityBudget(0.5, 1e-3, 0.0))
        assert float(loss.data) == float(ctc.data)

    def test_all_ones_penalty(self, batch):
        model = attach_gates(Encoder(TINY), t=0.0)
        n = sum(layer.W.size for layer in model.prunable_layers())
        loss, ctc = total_loss(*batch, model, SparsityBudget(0.5, 1e-3, 1e-3))
        assert float(loss.data) - float(ctc.data) == pytest.approx(1e-3 * n, rel=1e-12)

    def test_penalty_drops_when_entry_flips(self, batch):
        model = attach_gates(Encoder(TINY), t=0.05)
        budget = SparsityBudget(0.5, 1.0, 1.0)
        before = total_loss(*batch, model, budget)
        layer = model.prunable_layers()[0]
        w = layer.W.data
        idx = np.unravel_index(np.argmax(np.abs(w) < 0.2 * (np.abs(w) >= 0.05)), w.shape)
        w[idx] = 0.01
        after = total_loss(*batch, model, budget)
        pen = lambda pair: float(pair[0].data) - float(pair[1].data)
        assert pen(after) == pytest.approx(pen(before) - 1.0, abs=1e-9)


class TestRunOnePass:
    def test_self_pinch_trace(self, corpus):
        budget = SparsityBudget(0.3, 5e-3, 5e-3)
        model, trace = run_one_pass(QUICK, budget, "self-pinch", corpus, encoder_config=TINY)
        assert len(trace.epochs) == QUICK.epochs
        assert len(trace.steps) == QUICK.epochs * 3
        for row in trace.steps:
            assert 0 <= row["overall_sparsity"] <= 1
            assert row["eta_active"] == (0.0 if row["overall_sparsity"] >= 0.3 else 5e-3)
        for row in trace.epochs:
            assert all(0 <= row[k] <= 1 for k in row if k.startswith("sparsity["))
        assert trace.steps[-1]["overall_sparsity"] >= trace.steps[0]["overall_sparsity"]
        assert trace.epochs[-1]["overall_sparsity"] == pytest.approx(overall_sparsity(model))

    def test_ump_masks_fixed(self, corpus):
        _, trace = run_one_pass(QUICK, SparsityBudget(0.6), "ump", corpus, encoder_config=TINY)
        cols = [c for c in trace.columns() if c.startswith("sparsity[")]
        first = [trace.epochs[0][c] for c in cols]
        assert all([row[c] for c in cols] == first for row in trace.epochs)
        assert all(abs(s - 0.6) <= 1 / 256 for s in first)

    def test_mixed_single_row(self, corpus):
        profile = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
        model, trace = run_one_pass(QUICK, SparsityBudget(0.35), "mixed", corpus, encoder_config=TINY,
                                    layer_sparsity_profile=profile)
        assert len(trace.epochs) == 1
        assert [round(trace.epochs[0][f"sparsity[{layer.name}]"], 2) for layer in model.prunable_layers()] == profile

    def test_nascp_returns_finalized(self, corpus):
        model, trace = run_one_pass(QUICK, SparsityBudget(0.5, 1e-2, 1e-2), "nascp", corpus, encoder_config=TINY)
        assert all(layer.kind == "fixed" for layer in model.prunable_layers())
        assert trace.steps[0]["T"] == pytest.approx(0.5)

    def test_deterministic(self, corpus):
        runs = [run_one_pass(QUICK, SparsityBudget(0.3, 5e-3, 5e-3), "self-pinch", corpus, encoder_config=TINY)
                for _ in range(2)]
        assert runs[0][1].steps == runs[1][1].steps
        for (_, a), (_, b) in zip(runs[0][0].named_parameters(), runs[1][0].named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_divergence_reports_step(self, corpus):
        model = Encoder(TINY)
        model.w_out.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            run_one_pass(QUICK, SparsityBudget(), "dense", corpus, init_model=model)
        assert err.value.step == 0

    def test_unknown_mode(self, corpus):
        with pytest.raises(ValueError):
            run_one_pass(QUICK, SparsityBudget(), "lottery", corpus, encoder_config=TINY)
