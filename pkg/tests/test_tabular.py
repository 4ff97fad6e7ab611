import numpy as np
import pytest

from resmppi.nn import BadMagicError, TruncatedPayloadError
from resmppi.oracle import random_mdp
from resmppi.tabular import (DiscreteMDP, SoftQConvergenceError, StateGrid, bellman_residual, soft_q_iteration,
                             solution_from_bytes, solution_to_bytes)


def two_state_mdp(vol=1.0):
    # action 0 stays, action 1 switches; reward 1 for being in state 1
    return DiscreteMDP([[0, 1], [1, 0]], [[0.0, 0.0], [1.0, 1.0]], vol)


def test_one_step_soft_value_closed_form():
    mdp = DiscreteMDP([[0, 0]], [[1.0, 2.0]], action_cell_volume=0.5)
    sol = soft_q_iteration(mdp, alpha=0.7, horizon=1)
    assert sol.v[0, 0] == pytest.approx(0.7 * np.log(0.5 * (np.exp(1 / 0.7) + np.exp(2 / 0.7))))
    np.testing.assert_allclose(sol.probabilities(0).sum(axis=1), 1.0)


def test_finite_horizon_probabilities_and_residual():
    rng = np.random.default_rng(0)
    for _ in range(5):
        mdp = random_mdp(rng, 5, 3, 0.5)
        sol = soft_q_iteration(mdp, 0.8, horizon=4)
        assert sol.q.shape == (4, 5, 3) and sol.v.shape == (5, 5)
        assert bellman_residual(mdp, sol) < 1e-12
        for t in range(4):
            np.testing.assert_allclose(sol.probabilities(t).sum(axis=1), 1.0, atol=1e-12)


def test_infinite_horizon_fixed_point():
    mdp = two_state_mdp()
    sol = soft_q_iteration(mdp, 1.0, gamma=0.9, tol=1e-12)
    assert sol.horizon is None
    assert bellman_residual(mdp, sol, gamma=0.9) < 1e-10
    assert sol.probabilities()[1, 0] > 0.5
    assert sol.probabilities()[0, 1] > 0.5


def test_infinite_horizon_needs_discount():
    with pytest.raises(ValueError):
        soft_q_iteration(two_state_mdp(), 1.0, gamma=1.0)


def test_convergence_error_is_reported():
    with pytest.raises(SoftQConvergenceError) as exc:
        soft_q_iteration(two_state_mdp(), 1.0, gamma=0.999, max_iter=5)
    assert exc.value.iterations == 5


def test_small_alpha_approaches_hard_max():
    mdp = two_state_mdp()
    sol = soft_q_iteration(mdp, 1e-3, horizon=3)
    # from state 0 the best plan switches once and collects 1 twice
    assert sol.v[0, 0] == pytest.approx(2.0, abs=1e-2)


def test_stage_rewards():
    mdp = two_state_mdp()
    staged = mdp.with_reward(np.stack([mdp.reward, 2 * mdp.reward]))
    sol = soft_q_iteration(staged, 1.0, horizon=2)
    np.testing.assert_allclose(sol.q[1], 2 * mdp.reward)
    with pytest.raises(ValueError):
        soft_q_iteration(staged, 1.0, horizon=3)


def test_mdp_validation():
    with pytest.raises(ValueError):
        DiscreteMDP([[0, 2]], [[0.0, 0.0]])
    with pytest.raises(ValueError):
        DiscreteMDP([[0, 0]], [[0.0]])
    with pytest.raises(ValueError):
        DiscreteMDP([[0, 0]], [[0.0, np.nan]])
    with pytest.raises(ValueError):
        DiscreteMDP([[0, 0]], [[0.0, 0.0]], action_cell_volume=0.0)
    with pytest.raises(ValueError):
        soft_q_iteration(two_state_mdp(), 0.0, horizon=1)


def test_grid_snap_and_clamp_count():
    grid = StateGrid((0,), [np.linspace(-1, 1, 5)], np.zeros(2))
    assert grid.cell_index(np.array([0.26, 9.0])) == 3
    assert grid.clamp_count == 0
    assert grid.cell_index(np.array([5.0, 0.0])) == 4
    assert grid.clamp_count == 1
    assert grid.centers().shape == (5, 2)


def test_solution_bytes_round_trip():
    mdp = random_mdp(np.random.default_rng(2), 4, 2)
    for sol in (soft_q_iteration(mdp, 0.5, horizon=3), soft_q_iteration(mdp, 0.5, gamma=0.5)):
        data = solution_to_bytes(sol)
        back = solution_from_bytes(data)
        np.testing.assert_array_equal(back.q, sol.q)
        assert back.horizon == sol.horizon
        with pytest.raises(TruncatedPayloadError):
            solution_from_bytes(data[:-1])
        with pytest.raises(BadMagicError):
            solution_from_bytes(b"NOPE" + data[4:])
