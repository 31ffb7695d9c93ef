import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coded_cache.per_slot import (
    PerSlotProblem,
    allocation_weights,
    brute_force_oracle,
    build_epigraph_lp,
    capacity_ok,
    grid_resolution,
    objective,
    solve_per_slot,
    write_lp,
)
from instances import random_problem, toy_topology


def single_node_problem(predicted, beta, capacity=1.0, prev=None):
    """One user, one cache at delay 1, MBS at delay 3."""
    topo = toy_topology((1.0, 2.0, 3.0))
    topo.per_bit_delay = np.array([[3.0, 1.0, 0.0]])[:, :2]
    topo.cache_positions = topo.cache_positions[:1]
    topo.reachable_sets = [[1, 0]]
    F = len(predicted)
    prev = np.zeros((1, F)) if prev is None else np.asarray(prev, float)
    return PerSlotProblem(topo, prev, np.asarray(predicted, float), np.ones((1, F)), beta, capacity)


# ------------------------------------------------------------------ weights


def test_allocation_weights_hand_example():
    w = allocation_weights(np.array([[3, 0], [1, 0]]))
    np.testing.assert_allclose(w, [[0.75, 0.5], [0.25, 0.5]])


@given(st.lists(st.lists(st.integers(0, 9), min_size=3, max_size=3), min_size=1, max_size=5))
def test_allocation_weights_columns_sum_to_one(rows):
    w = allocation_weights(np.array(rows))
    np.testing.assert_allclose(w.sum(axis=0), 1.0)
    assert w.min() >= 0


# ------------------------------------------------------------------ hand LPs


@pytest.mark.parametrize(
    "beta, expected_cache, expected_obj",
    [
        (0.0, 1.0, 2.0),  # demand 2 at delay 1
        (1.0, 1.0, 3.0),  # saving 4 per unit beats replacement 1
        (10.0, 0.0, 6.0),  # replacement too dear, fetch from MBS
    ],
)
def test_single_file_hand_examples(beta, expected_cache, expected_obj):
    sol = solve_per_slot(single_node_problem([2.0], beta))
    assert sol.success
    assert sol.cache[0, 0] == pytest.approx(expected_cache, abs=1e-9)
    assert sol.objective == pytest.approx(expected_obj, abs=1e-9)


def test_capacity_goes_to_the_busier_file():
    sol = solve_per_slot(single_node_problem([3.0, 1.0], 0.0))
    np.testing.assert_allclose(sol.cache, [[1.0, 0.0]], atol=1e-9)
    assert sol.objective == pytest.approx(3.0 + 3.0)


def test_keeping_a_cached_file_is_free():
    sol = solve_per_slot(single_node_problem([1.0], 100.0, prev=[[0.4]]))
    assert sol.cache[0, 0] == pytest.approx(0.4, abs=1e-9)
    assert sol.objective == pytest.approx(0.4 + 0.6 * 3)


def test_two_nodes_split_the_file():
    # user reaches nodes at delays 1 and 2, MBS 6, capacity 0.5 each
    topo = toy_topology()
    p = PerSlotProblem(topo, np.zeros((2, 1)), np.array([1.0]), np.ones((1, 1)), 0.0, 0.5)
    sol = solve_per_slot(p)
    np.testing.assert_allclose(sol.cache, [[0.5], [0.5]], atol=1e-9)
    assert sol.objective == pytest.approx(0.5 * 1 + 0.5 * 2)


def test_zero_capacity_means_empty_cache():
    sol = solve_per_slot(single_node_problem([2.0], 0.0, capacity=0.0))
    np.testing.assert_array_equal(sol.cache, 0.0)
    assert sol.objective == pytest.approx(6.0)


def test_problem_rejects_non_finite_inputs():
    with pytest.raises(ValueError):
        single_node_problem([np.nan], 0.0)


# --------------------------------------------------------------- structure


def test_lp_dimensions():
    p = single_node_problem([1.0, 2.0], 1.0)
    lp = build_epigraph_lp(p)
    assert (lp.n_lambda, lp.n_epigraph, lp.n_replacement) == (2, 2, 2)
    assert lp.n_epigraph_rows == 2 * 2  # one row per reachable rank and file
    assert lp.A_ub.shape == (4 + 2 + 1, 6)
    assert build_epigraph_lp(p, include_replacement=False).n_replacement == 0


def test_write_lp_is_readable_text(tmp_path):
    lp = build_epigraph_lp(single_node_problem([1.0], 1.0))
    write_lp(lp, tmp_path / "p.lp")
    text = (tmp_path / "p.lp").read_text()
    assert text.startswith("\\") and "Subject To" in text and text.rstrip().endswith("End")
    assert "u_0_0 free" in text


# ------------------------------------------------------------------ oracle


def test_oracle_hand_example():
    sol = brute_force_oracle(single_node_problem([3.0, 1.0], 0.0), grid_step=0.5)
    np.testing.assert_allclose(sol.cache, [[1.0, 0.0]])
    assert sol.objective == pytest.approx(6.0)


def test_oracle_objective_matches_direct_evaluation():
    p = random_problem(np.random.default_rng(4))
    sol = brute_force_oracle(p, 0.25)
    assert sol.objective == pytest.approx(objective(p, sol.cache), rel=1e-9)
    assert capacity_ok(sol.cache, p.capacity)


def test_oracle_rejects_large_instances():
    with pytest.raises(ValueError):
        brute_force_oracle(single_node_problem(np.ones(7), 0.0))
    with pytest.raises(ValueError):
        brute_force_oracle(single_node_problem([1.0], 0.0), grid_step=0.3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lp_matches_grid_oracle(seed):
    p = random_problem(np.random.default_rng(seed))
    lp = solve_per_slot(p)
    grid = brute_force_oracle(p, 0.05)
    assert lp.success and capacity_ok(lp.cache, p.capacity)
    assert lp.objective <= grid.objective + 1e-7 * max(1.0, grid.objective)
    assert grid.objective - lp.objective <= grid_resolution(p, 0.05)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_lp_objective_is_evaluated_exactly(seed):
    p = random_problem(np.random.default_rng(seed))
    sol = solve_per_slot(p)
    assert sol.objective == pytest.approx(objective(p, sol.cache), rel=1e-12)
    assert sol.objective <= objective(p, p.prev_cache) + 1e-7 * max(1.0, sol.objective)
