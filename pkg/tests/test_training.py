import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convae.data import HEALTHY, DriveCycle, normalize
from convae.errors import ConfigurationError, ContractError, DimensionError
from convae.model import ArchitectureSpec, build, forward
from convae.tensor import Tensor
from convae.training import (
    OptimizerState, StagePlan, TrainPlan, adam_step, cost_terms, loss_and_gradients, loss_J, lr_schedule, train,
    write_log,
)

from oracles import central_difference, max_rel_error


def _cycles(n=4, T=300, F=5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        t = np.arange(T)[:, None]
        m = 0.5 + 0.3 * np.sin(t / (20 + 5 * i) + np.arange(F)) + 0.01 * rng.normal(size=(T, F))
        out.append(normalize(DriveCycle(f"c{i}", HEALTHY, m, tuple(f"f{j}" for j in range(F)), np.ones(F))))
    return out


# ---------------------------------------------------------------------------
# loss J
# ---------------------------------------------------------------------------


def test_J_of_identical_inputs_is_exactly_zero():
    x = np.random.default_rng(0).random((2, 128, 64, 1))
    lb = loss_J(x, x.copy(), 58)
    assert (lb.mse, lb.mae, lb.std_abs, lb.total) == (0.0, 0.0, 0.0, 0.0)


def test_J_worked_example():
    lb = loss_J(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
    assert (lb.mse, lb.mae, lb.std_abs, lb.total) == (2.5, 1.5, 0.5, 4.5)


def test_J_constant_offset():
    x = np.random.default_rng(1).random((1, 16, 8, 1))
    for c in (0.25, -0.5, 2.0):
        lb = loss_J(x, x + c)
        assert lb.mse == pytest.approx(c * c, abs=1e-12)
        assert lb.mae == pytest.approx(abs(c), abs=1e-12)
        assert lb.std_abs == pytest.approx(0.0, abs=1e-7)


def test_J_brute_force_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(50):
        x, y = rng.normal(size=(3, 6, 5, 1)), rng.normal(size=(3, 6, 5, 1))
        d = [abs(a - b) for a, b in zip(x[:, :, :4].ravel().tolist(), y[:, :, :4].ravel().tolist())]
        n = len(d)
        mae = sum(d) / n
        mse = sum(v * v for v in d) / n
        sd = (sum((v - mae) ** 2 for v in d) / n) ** 0.5
        lb = loss_J(x, y, n_features=4)
        assert lb.total == pytest.approx(mse + mae + sd, rel=1e-12)


def test_J_excludes_padding_columns():
    x = np.zeros((1, 4, 6, 1))
    y = x.copy()
    y[:, :, 4:] = 9.0
    assert loss_J(x, y, n_features=4).total == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_J_symmetric(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 5, 4, 1)), rng.normal(size=(2, 5, 4, 1))
    assert loss_J(x, y).total == loss_J(y, x).total


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), i=st.integers(0, 19))
def test_J_zero_only_for_equal_inputs(seed, i):
    x = np.random.default_rng(seed).normal(size=(1, 4, 5, 1))
    y = x.copy()
    y.reshape(-1)[i] += 1e-3
    assert loss_J(x, y).total > 0


def test_J_parts_sum_and_shape_errors():
    rng = np.random.default_rng(3)
    lb = loss_J(rng.random((2, 8, 8, 1)), rng.random((2, 8, 8, 1)))
    assert lb.total == pytest.approx(lb.mse + lb.mae + lb.std_abs, rel=1e-15)
    with pytest.raises(DimensionError):
        loss_J(np.zeros((1, 4, 4, 1)), np.zeros((1, 4, 5, 1)))


def test_rows_sigma_mode():
    d = np.array([[[[1.0], [3.0]], [[2.0], [2.0]]]])  # (1, 2, 2, 1)
    lb = loss_J(d, np.zeros_like(d), sigma="rows")
    # per-row std: [1, 0] summed over rows -> 1
    assert lb.std_abs == 1.0
    with pytest.raises(ConfigurationError):
        loss_J(d, d, sigma="columns")


def test_per_sample_terms():
    rng = np.random.default_rng(4)
    x, y = rng.random((3, 8, 6, 1)), rng.random((3, 8, 6, 1))
    *_, total = cost_terms(Tensor(x), Tensor(y), 5, per_sample=True)
    for i in range(3):
        assert total.numpy()[i] == pytest.approx(loss_J(x[i : i + 1], y[i : i + 1], 5).total, rel=1e-12)


# ---------------------------------------------------------------------------
# gradient of J through the stage-1 network
# ---------------------------------------------------------------------------


def test_stage1_network_gradient_matches_finite_differences():
    arch = ArchitectureSpec.desk(8, input_shape=(8, 8, 1))
    params = build(1, np.random.default_rng(0), arch)
    params = params.with_tensors({
        k: Tensor(t.numpy() + 0.05 * np.random.default_rng(i).normal(size=t.shape))
        for i, (k, t) in enumerate(params.tensors().items())
    })
    x = Tensor(np.random.default_rng(1).random((1, 8, 8, 1)))
    _, grads = loss_and_gradients(params, x, 8)
    for key, t in params.tensors().items():
        def J(v, key=key):
            return loss_J(x, forward(params.with_tensors({key: Tensor(v)}), x)[0], 8).total
        num = central_difference(J, t.numpy())
        assert max_rel_error(grads[key], num, floor=1e-6) < 1e-4, key


# ---------------------------------------------------------------------------
# Adam and schedule
# ---------------------------------------------------------------------------


def test_adam_first_step_closed_form():
    params = {"w": Tensor([0.0])}
    out, state = adam_step(params, {"w": Tensor([1.0])}, OptimizerState())
    assert out["w"].numpy()[0] == pytest.approx(-8e-4 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    params = {"w": Tensor([0.3, -0.2])}
    p1, s1 = adam_step(params, {"w": Tensor([0.5, 0.5])}, OptimizerState())
    p2, s2 = adam_step(p1, {"w": Tensor([0.0, 0.0])}, s1)
    np.testing.assert_allclose(s2.m["w"], 0.9 * s1.m["w"])
    np.testing.assert_allclose(s2.v["w"], 0.999 * s1.v["w"])
    p3, _ = adam_step(params, {"w": Tensor([0.0, 0.0])}, OptimizerState())
    assert p3["w"].numpy().tolist() == [0.3, -0.2]


def test_adam_frozen_parameter_bitwise_unchanged():
    params = {"a": Tensor([1.0]), "b": Tensor([2.0])}
    state = OptimizerState()
    for _ in range(5):
        params, state = adam_step(params, {"a": Tensor([3.0]), "b": Tensor([3.0])}, state, frozen=frozenset({"b"}))
    assert params["b"].numpy().tobytes() == np.array([2.0]).tobytes()
    assert params["a"].numpy()[0] < 1.0


def test_adam_missing_gradient_is_contract_error():
    with pytest.raises(ContractError, match="w2"):
        adam_step({"w1": Tensor([1.0]), "w2": Tensor([1.0])}, {"w1": Tensor([1.0])}, OptimizerState())


def test_lr_schedule_values():
    s = OptimizerState()
    assert lr_schedule(0, s) == 8e-4
    assert lr_schedule(49, s) == 8e-4
    assert lr_schedule(50, s) == 4e-4
    assert lr_schedule(149, s) == 2e-4
    assert lr_schedule(999, OptimizerState(decay=1.0)) == 8e-4


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _tiny_plan(**kw):
    base = dict(stages=(StagePlan(1, 1),), seed=3, windows_per_cycle=2)
    base.update(kw)
    return TrainPlan(**base)


def test_one_epoch_one_batch_gives_one_log_row():
    res = train(_tiny_plan(), _cycles(4))
    assert len(res.log) == 1
    assert res.epochs_done == 1


def test_training_is_deterministic(tmp_path):
    cycles = _cycles(5)
    plan = _tiny_plan(stages=(StagePlan(1, 2), StagePlan(2, 1, 1)))
    a, b = train(plan, cycles), train(plan, cycles)
    write_log(a.log, tmp_path / "a.csv")
    write_log(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(x.numpy().tobytes() == y.numpy().tobytes()
               for x, y in zip(a.params.tensors().values(), b.params.tensors().values()))


def test_lr_log_matches_schedule_and_stages_run_in_order():
    plan = _tiny_plan(stages=(StagePlan(1, 2), StagePlan(2, 1, 1)), decay_interval=2)
    res = train(plan, _cycles(4))
    assert [r.stage for r in res.log] == [1, 1, 2, 2]
    assert [r.lr for r in res.log] == [lr_schedule(r.epoch, OptimizerState(decay_interval=2)) for r in res.log]
    assert res.params.stage == 2 and all(res.params.trainable.values())


def test_frozen_phase_keeps_transferred_layers_constant():
    cycles = _cycles(4)
    stage1 = train(_tiny_plan(stages=(StagePlan(1, 1),)), cycles).params
    plan = _tiny_plan(stages=(StagePlan(1, 1), StagePlan(2, 2)))
    res = train(plan, cycles)
    for name in ("enc1", "enc2", "dec1", "dec2"):
        assert res.params.layer(name).weights.numpy().tobytes() == stage1.layer(name).weights.numpy().tobytes()


def test_resume_continues_the_schedule():
    cycles = _cycles(4)
    plan = _tiny_plan(stages=(StagePlan(1, 3),))
    full = train(plan, cycles)
    head = train(_tiny_plan(stages=(StagePlan(1, 1),)), cycles)
    tail = train(plan, cycles, resume=(head.params, 1))
    assert [r.epoch for r in tail.log] == [1, 2]
    # windows are keyed by the global epoch, so data matches the uninterrupted run
    assert tail.epochs_done == full.epochs_done == 3


def test_plan_validation_names_the_key():
    with pytest.raises(ConfigurationError, match="stages"):
        TrainPlan(stages=(StagePlan(2, 1), StagePlan(1, 1)))
    with pytest.raises(ConfigurationError, match="stages"):
        TrainPlan(stages=(StagePlan(1, 0, 0),))
    with pytest.raises(ConfigurationError, match="windows_per_cycle"):
        TrainPlan(windows_per_cycle=0)


def test_train_needs_cycles():
    with pytest.raises(ContractError):
        train(_tiny_plan(), [])
