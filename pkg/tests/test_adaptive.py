import math

import numpy as np
import pytest

from conftest import pad_with_null_terms
from sgct.adaptive import (
    AdaptiveError,
    AdaptiveState,
    Checkpointer,
    CostModel,
    Profit,
    StoppingRule,
    cost,
    expand,
    profit,
    run,
    select,
)
from sgct.combination import (
    EvalCache,
    MultiIndex,
    Problem,
    full_grid_eval,
    is_downward_closed,
    unit,
)
from sgct.fem import MeshLevel, assemble_solve, l2_norm, prolong
from sgct.random_field import KLExpansion

M = MultiIndex
TINY = StoppingRule(eps=1e-300, max_iterations=40)


@pytest.fixture(scope="module")
def padded_one_term(toy_kl):
    """One active KL term plus ten null terms (the buffer can grow without running out)."""
    single = KLExpansion(toy_kl.n_side, toy_kl.eigenvalues[:1], toy_kl.modes[:, :1], toy_kl.mean_field, toy_kl.spec)
    return pad_with_null_terms(single, 10)


@pytest.fixture(scope="module")
def wide_kl():
    from sgct.random_field import CovarianceSpec, compute_kl

    return compute_kl(CovarianceSpec(nu=2.5, xi=0.4), 17, 60)


def _problem(kl, **kw):
    return Problem(kl, mesh_offset=1, **kw)


# -- cost, profit, select --------------------------------------------------------------


def test_cost_examples():
    hi, cnt = CostModel("highest_active"), CostModel("count_active")
    assert cost(M(0), hi) == 25
    assert cost(M(0, (1,)), hi) == 50
    assert cost(M(0, (0, 0, 1)), hi) == 150
    assert cost(M(0, (0, 0, 1)), cnt) == 50
    assert cost(M(1, (2, 0, 1)), hi) == 81 * 8 * 3
    assert cost(M(1, (2, 0, 1)), cnt) == 81 * 8 * 2
    assert cost(M(0), hi, offset=1) == 9
    assert cost(M(0), hi, offset=2, level_shift=2) == 17**2


def test_cost_model_and_stopping_validation():
    with pytest.raises(ValueError):
        CostModel("cheapest")
    with pytest.raises(ValueError):
        StoppingRule(mode="never")
    with pytest.raises(ValueError):
        StoppingRule(max_iterations=0)
    with pytest.raises(ValueError):
        StoppingRule(mode="work_budget")
    with pytest.raises(ValueError):
        StoppingRule(eps=0.0)


def test_profit_scaling():
    assert Profit(1.0, 4.0).eta == 0.25
    assert Profit(1.0, 8.0).eta == pytest.approx(0.5 * Profit(1.0, 4.0).eta)


def test_profit_examples(padded_one_term):
    problem = _problem(padded_one_term)
    cache = EvalCache()
    e, c, eta = profit(M(0), problem, cache, CostModel())
    assert e == pytest.approx(l2_norm(cache.get(M(0)).values[0])) and e > 0
    assert c == 9 and eta == e / c
    e2, _, eta2 = profit(M(0, (0, 1)), problem, cache, CostModel())  # null direction
    assert e2 <= 1e-12 and eta2 <= 1e-12


def _state_with(profits: dict) -> AdaptiveState:
    s = AdaptiveState()
    for idx, eta in profits.items():
        s.active.add(idx)
        s.profits[idx] = Profit(eta, 1.0)
    return s


def test_select_examples():
    assert select(_state_with({M(1): 2.0})) == M(1)
    assert select(_state_with({M(0, (1,)): 1.0, M(1): 1.0})) == M(0, (1,))
    assert select(_state_with({M(1): 3.0, M(0, (1,)): 5.0, M(0, (0, 1)): 1.0})) == M(0, (1,))
    assert select(AdaptiveState()) is None


# -- expand ----------------------------------------------------------------------------------


def _root_state(problem, cache):
    state = AdaptiveState(buffer=5)
    e, c, _ = profit(M(0), problem, cache, CostModel())
    state.active.add(M(0))
    state.profits[M(0)] = Profit(e, c)
    state.eta_global = state.profits[M(0)].eta
    return state


def _retire(state, idx):
    state.active.remove(idx)
    state.old.add(idx)
    state.eta_global -= state.profits[idx].eta


def test_first_expansion(wide_kl):
    problem, cache = _problem(wide_kl), EvalCache()
    state = _root_state(problem, cache)
    _retire(state, M(0))
    expand(state, M(0), problem, cache)
    assert state.active == {unit(k) for k in range(6)}
    assert state.tracked_dims == 5 and state.num_activated == 0
    assert state.eta_global == pytest.approx(sum(state.profits[i].eta for i in state.active), rel=1e-12)


def test_activation_grows_buffer(wide_kl):
    problem, cache = _problem(wide_kl), EvalCache()
    state = _root_state(problem, cache)
    _retire(state, M(0))
    expand(state, M(0), problem, cache)
    _retire(state, unit(1))
    expand(state, unit(1), problem, cache)
    assert state.act[0] and state.num_activated == 1
    assert state.tracked_dims == 6 == state.num_activated + state.buffer
    assert unit(6) in state.active
    assert M(0, (2,)) in state.active
    # e_x + e_y1 needs e_x in the old set first
    assert M(1, (1,)) not in state.active
    _retire(state, unit(0))
    expand(state, unit(0), problem, cache)
    assert M(1, (1,)) in state.active and M(2) in state.active


def test_spatial_cap_respected(wide_kl):
    problem, cache = _problem(wide_kl), EvalCache()
    state = _root_state(problem, cache)
    _retire(state, M(0))
    expand(state, M(0), problem, cache, max_spatial_level=0)
    assert unit(0) not in state.active


# -- run -----------------------------------------------------------------------------------------


def test_huge_tolerance_returns_anchor(toy_kl):
    problem = _problem(toy_kl)
    res = run(problem, stopping=StoppingRule(eps=1e6))
    assert len(res.records) == 1 and res.indices == [M(0)]
    anchor = assemble_solve(MeshLevel(0, 1), lambda p: math.exp(3.0), lambda p: 1.0)
    np.testing.assert_allclose(res.result.values, anchor.values, rtol=1e-12, atol=1e-16)
    assert res.records[0].index == (0, 0, 0, 0, 0, 0)


def test_invariants_every_iteration(wide_kl):
    problem = _problem(wide_kl)
    seen = []

    def check(rec, state):
        assert not (state.old & state.active)
        assert is_downward_closed(state.index_set)
        assert len(state.old) == state.iteration == rec.iteration
        assert state.tracked_dims == state.num_activated + state.buffer
        exact = math.fsum(state.profits[i].eta for i in state.active)
        assert state.eta_global == pytest.approx(exact, rel=1e-12, abs=1e-300)
        seen.append(rec)

    res = run(problem, stopping=StoppingRule(eps=1e-300, max_iterations=120), callback=check)
    assert [r.iteration for r in seen] == list(range(121))
    costs = [r.cumulative_cost for r in seen]
    assert all(b >= a for a, b in zip(costs, costs[1:]))
    assert len(set(res.state.selected)) == len(res.state.selected)
    # cache soundness across the run
    assert res.cache.solves == sum(2 ** sum(i.ly) for i in res.cache.indices())


def test_first_activated_dimension_is_leading(wide_kl):
    res = run(_problem(wide_kl), stopping=StoppingRule(eps=1e-300, max_iterations=30))
    first = next(i for i in res.state.selected if i.ly)
    assert first.active_dims == (1,)


def test_matches_full_tensor_oracle(padded_one_term):
    problem = _problem(padded_one_term)
    cap = 3
    res = run(problem, stopping=StoppingRule(eps=1e-16, max_iterations=400), max_spatial_level=cap)
    assert res.records[-1].iteration < 400  # stopped on the tolerance, not the cap
    oracle = full_grid_eval(M(cap, (6,)), problem, EvalCache()).values[0]
    assert res.result.mesh == oracle.mesh
    diff = l2_norm(res.result - oracle)
    assert diff <= 1e-6 * l2_norm(oracle)
    # only the one informative parameter was ever refined
    assert all(i.effective_truncation <= 1 for i in res.state.old)


def test_running_sum_matches_final_combination(wide_kl):
    problem = _problem(wide_kl)
    res = run(problem, stopping=StoppingRule(eps=1e-300, max_iterations=60))
    comb = res.state.combined
    np.testing.assert_allclose(prolong(comb, res.result.mesh).values, res.result.values, atol=1e-14)


def test_reference_column(wide_kl):
    problem = _problem(wide_kl)
    first = run(problem, stopping=StoppingRule(eps=1e-300, max_iterations=25))
    second = run(problem, stopping=StoppingRule(eps=1e-300, max_iterations=25), reference=first.result)
    assert second.records[-1].l2_error <= 1e-14
    assert second.records[0].l2_error > 0
    assert first.records[0].l2_error is None


def test_determinism_and_threads(wide_kl):
    rows = []
    for threads in (1, 1, 2):
        res = run(_problem(wide_kl, threads=threads), stopping=StoppingRule(eps=1e-300, max_iterations=50))
        rows.append([r.row(timing=False) for r in res.records])
    assert rows[0] == rows[1] == rows[2]


def test_checkpoint_resume(tmp_path, wide_kl):
    stop = lambda n: StoppingRule(eps=1e-300, max_iterations=n)
    full = run(_problem(wide_kl), stopping=stop(45))
    ck = Checkpointer(tmp_path / "ck", every=10)
    run(_problem(wide_kl), stopping=stop(25), checkpoint=ck)  # last checkpoint at iteration 20
    resumed = run(_problem(wide_kl), stopping=stop(45), checkpoint=Checkpointer(tmp_path / "ck", every=10),
                  resume=True, cache=EvalCache())
    assert [r.row(False) for r in resumed.records] == [r.row(False) for r in full.records]
    np.testing.assert_array_equal(resumed.result.values, full.result.values)


def test_stopping_modes(wide_kl):
    problem = _problem(wide_kl)
    budget = 3000.0
    res = run(problem, stopping=StoppingRule(mode="work_budget", budget=budget))
    costs = [r.cumulative_cost for r in res.records]
    assert costs[-1] >= budget and costs[-2] < budget

    res = run(problem, stopping=StoppingRule(mode="global_error", eps=1e6))
    assert len(res.records) == 1

    res = run(problem, stopping=StoppingRule(mode="successive_diff", eps=1e6, zeta=4))
    assert res.records[-1].iteration == 4

    res = run(problem, stopping=StoppingRule(mode="global_profit", eps=1e-300, max_iterations=7))
    assert res.records[-1].iteration == 7


def test_count_active_model_runs(wide_kl):
    res = run(_problem(wide_kl), CostModel("count_active"), StoppingRule(eps=1e-300, max_iterations=30))
    assert len(res.records) == 31


def test_buffer_must_be_positive(toy_kl):
    with pytest.raises(ValueError):
        run(_problem(toy_kl), buffer=0)


def test_evaluation_failure_reports_iteration(toy_kl):
    # only 6 KL terms: the buffer eventually asks for a 7th
    with pytest.raises(AdaptiveError, match=r"iteration \d+, index"):
        run(_problem(toy_kl), stopping=StoppingRule(eps=1e-300, max_iterations=500))
