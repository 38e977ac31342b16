import pytest
import torch
from scipy import stats

from dynamic_controller import ControllerTrace, new_controller, sample_t, update
from errors import ControllerError


def test_twelve_confident_updates():
    state = new_controller(T_init=10, lam=0.1, T_min=0, T_max=999)
    for _ in range(12):
        state = update(state, 0.9)
    # r reaches 1.0 on the 10th step; T grows by 1 on steps 10, 11 and 12
    assert state.r == 1.2
    assert state.T == 13
    assert state.update_count == 12


def test_t_is_clamped_to_t_max():
    state = new_controller(T_init=10, lam=0.1, T_min=0, T_max=11)
    for _ in range(12):
        state = update(state, 0.9)
    assert state.T == 11
    assert state.r == 1.2


def test_score_of_exactly_half_decreases_r():
    state = update(new_controller(T_init=5, lam=0.1, T_min=0, T_max=10), 0.5)
    assert state.r == -0.1
    assert state.T == 5


def test_low_scores_drive_t_down_to_t_min():
    state = new_controller(T_init=3, lam=0.5, T_min=0, T_max=10)
    for _ in range(10):
        state = update(state, 0.1)
    assert state.T == 0
    assert state.r == -5.0


def test_r_persists_after_t_saturates():
    state = new_controller(T_init=2, lam=1.0, T_min=0, T_max=3)
    for _ in range(3):
        state = update(state, 0.99)
    assert state.T == 3
    state = update(state, 0.01)
    # r = 2 still pushes T up, so the clamp holds it at 3
    assert state.r == 2.0
    assert state.T == 3


def test_update_returns_new_state():
    state = new_controller(T_init=10, lam=0.1, T_min=0, T_max=999)
    updated = update(state, 0.9)
    assert state.r == 0.0 and state.update_count == 0
    assert updated is not state


@pytest.mark.parametrize("score", [float("nan"), -0.01, 1.5, float("inf")])
def test_invalid_scores_are_rejected(score):
    state = new_controller(T_init=10, lam=0.1, T_min=0, T_max=999)
    with pytest.raises(ControllerError):
        update(state, score)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(T_init=20, lam=0.1, T_min=0, T_max=10),
        dict(T_init=5, lam=0.0, T_min=0, T_max=10),
        dict(T_init=5, lam=-0.1, T_min=0, T_max=10),
    ],
)
def test_invalid_configuration(kwargs):
    with pytest.raises(ControllerError):
        new_controller(**kwargs)


def test_sample_t_with_t_zero_is_always_zero():
    state = new_controller(T_init=0, lam=0.1, T_min=0, T_max=999)
    draws = sample_t(state, torch.Generator().manual_seed(0), size=1000)
    assert draws.eq(0).all()
    assert sample_t(state) == 0


def test_sample_t_is_uniform():
    state = new_controller(T_init=9, lam=0.1, T_min=0, T_max=999)
    draws = sample_t(state, torch.Generator().manual_seed(123), size=100_000)
    assert draws.min().item() == 0 and draws.max().item() == 9
    counts = torch.bincount(draws, minlength=10).numpy()
    _, p_value = stats.chisquare(counts)
    assert p_value > 0.001


def test_sample_t_reproducible_under_seed():
    state = new_controller(T_init=50, lam=0.1, T_min=0, T_max=999)
    a = sample_t(state, torch.Generator().manual_seed(9), size=64)
    b = sample_t(state, torch.Generator().manual_seed(9), size=64)
    assert torch.equal(a, b)
    assert isinstance(sample_t(state, torch.Generator().manual_seed(9)), int)


def test_trace_records_every_update(tmp_path):
    trace = ControllerTrace(tmp_path / "trace.txt")
    trace.initialize()
    state = new_controller(T_init=10, lam=0.1, T_min=0, T_max=999)
    for score in (0.9, 0.2, 0.9):
        state = update(state, score)
        trace.append(state, score)

    records = trace.read()
    assert [r[0] for r in records] == [1, 2, 3]
    assert records[-1][2] == pytest.approx(0.1)
    assert records[-1][3] == 10
    assert (tmp_path / "trace.txt").read_text().splitlines()[0] == ControllerTrace.header
