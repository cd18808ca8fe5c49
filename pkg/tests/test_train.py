import math

import numpy as np
import pytest

from lesionseg.data import generate_dataset
from lesionseg.errors import ContractError, NumericalError
from lesionseg.segnet import ModelConfig, init_model, load_model
from lesionseg.tensor import DiffTensor
from lesionseg.train import (
    AdamState,
    LogRow,
    TrainConfig,
    adam_step,
    cosine_lr,
    fold_job,
    read_log,
    run_jobs,
    train,
    write_log,
)

TINY = ModelConfig(base_channels=2, depth=1, cascade=False, seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(8, 0, size=(16, 16), seed=0)


class TestCosine:
    cfg = TrainConfig()

    def test_start(self):
        assert cosine_lr(0, self.cfg) == 3e-4

    def test_end(self):
        assert abs(cosine_lr(2000, self.cfg)) <= 1e-18

    def test_midpoint(self):
        assert cosine_lr(1000, self.cfg) == pytest.approx(1.5e-4, rel=1e-12)

    def test_nonincreasing(self):
        lrs = [cosine_lr(s, self.cfg) for s in range(2001)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            cosine_lr(2001, self.cfg)
        with pytest.raises(ContractError):
            cosine_lr(-1, self.cfg)


class TestAdam:
    def test_one_step_closed_form(self):
        p = DiffTensor.param(np.ones((1, 1, 1, 1)))
        p.grad[...] = 0.5
        state = AdamState.zeros_like({"w": p})
        adam_step({"w": p}, state, lr=1e-3)
        # m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
        assert p.item() == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert state.t == 1

    def test_second_step_closed_form(self):
        p = DiffTensor.param(np.zeros((1, 1, 1, 1)))
        state = AdamState.zeros_like({"w": p})
        for g in (1.0, -2.0):
            p.grad[...] = g
            adam_step({"w": p}, state, lr=0.1)
        m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
        second = 0.1 * (m / (1 - 0.9**2)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p.item() == pytest.approx(-0.1 / (1 + 1e-8) - second, abs=1e-14)

    def test_zero_gradient_leaves_parameters(self):
        data = np.random.default_rng(0).standard_normal((2, 1, 3, 3))
        p = DiffTensor.param(data.copy())
        adam_step({"w": p}, AdamState.zeros_like({"w": p}), lr=1e-2)
        assert np.array_equal(p.data, data)

    def test_nan_gradient_names_parameter(self):
        p = DiffTensor.param(np.zeros((1, 1, 1, 1)))
        p.grad[...] = np.nan
        with pytest.raises(NumericalError, match="enc0"):
            adam_step({"enc0.w": p}, AdamState.zeros_like({"enc0.w": p}), lr=1e-3)


class TestTrain:
    def test_bce_smoke_run_reduces_loss(self, tiny_data):
        cfg = TrainConfig(total_steps=50, steps_per_epoch=5, lr_max=1e-2, log_every=1, schedule="bce")
        _, rows = train(tiny_data, init_model(TINY), cfg)
        assert rows[-1].loss < rows[0].loss
        losses = [r.loss for r in rows]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_deterministic(self, tiny_data):
        cfg = TrainConfig(total_steps=10, steps_per_epoch=5, schedule="add")
        a, rows_a = train(tiny_data, init_model(TINY), cfg)
        b, rows_b = train(tiny_data, init_model(TINY), cfg)
        assert rows_a == rows_b
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_hard_finetune_switch_in_log(self, tiny_data):
        cfg = TrainConfig(total_steps=2000, steps_per_epoch=50, schedule="hard_ft", augment=False, batch_size=1)
        tiny = ModelConfig(base_channels=1, depth=1, cascade=False)
        _, rows = train(tiny_data[:2], init_model(tiny), cfg)
        switch = math.floor(0.9 * cfg.total_epochs) * cfg.steps_per_epoch
        assert switch == 1800
        assert all((r.w_bce, r.w_dice) == ((1.0, 0.0) if r.step < switch else (0.0, 1.0)) for r in rows)
        assert {r.step for r in rows} >= {1790, 1800, 1999}

    def test_soft_finetune_weights_sum_to_one(self, tiny_data):
        cfg = TrainConfig(total_steps=40, steps_per_epoch=4, schedule="soft_ft", log_every=1)
        _, rows = train(tiny_data, init_model(TINY), cfg)
        assert all(abs(r.w_bce + r.w_dice - 1.0) <= 1e-12 for r in rows)
        assert rows[0].w_dice == 0.0 and rows[-1].w_dice == 0.9

    def test_lr_trace(self, tiny_data):
        cfg = TrainConfig(total_steps=20, steps_per_epoch=5, log_every=1)
        _, rows = train(tiny_data, init_model(TINY), cfg)
        assert rows[0].lr == cfg.lr_max
        assert all(a.lr >= b.lr for a, b in zip(rows, rows[1:]))

    def test_empty_split(self):
        with pytest.raises(ContractError):
            train([], init_model(TINY), TrainConfig())

    def test_divergence_saves_last_good(self, tiny_data, tmp_path):
        model = init_model(TINY)
        for p in model.params.values():
            p.data[...] = np.nan
        path = tmp_path / "last.ckpt"
        with pytest.raises(NumericalError):
            train(tiny_data, model, TrainConfig(total_steps=5, steps_per_epoch=5), last_good_path=path)
        assert path.exists()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_max=0.0)
        with pytest.raises(ValueError):
            TrainConfig(total_steps=10, steps_per_epoch=50)
        with pytest.raises(ValueError):
            TrainConfig(schedule="bogus")
        assert TrainConfig().total_epochs == 40


def test_log_round_trip(tmp_path):
    rows = [LogRow(0, 3e-4, 1.0, 0.0, 0.6931471805599453), LogRow(10, 1e-4, 0.25, 0.75, 0.1)]
    write_log(rows, tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,lr,w_bce,w_dice,loss"
    assert read_log(tmp_path / "log.csv") == rows


def test_fold_jobs_reproducible_and_parallel_safe(tiny_data, tmp_path):
    cfg = TrainConfig(total_steps=5, steps_per_epoch=5)
    jobs_a = [fold_job(tiny_data, f, TINY, cfg, tmp_path / "a") for f in range(2)]
    jobs_b = [fold_job(tiny_data, f, TINY, cfg, tmp_path / "b") for f in range(2)]
    run_jobs(jobs_a, workers=1)
    run_jobs(jobs_b, workers=2)
    for f in range(2):
        assert (tmp_path / "a" / f"fold_{f}.ckpt").read_bytes() == (tmp_path / "b" / f"fold_{f}.ckpt").read_bytes()
        assert (tmp_path / "a" / f"fold_{f}_log.csv").exists()
    assert jobs_a[0].model_cfg.seed != jobs_a[1].model_cfg.seed
    assert load_model(jobs_a[0].ckpt_path).config == jobs_a[0].model_cfg
