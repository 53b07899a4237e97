import numpy as np
import pytest

from routerefine import feaseval as F
from routerefine.errors import (CapacityExceededError, ParameterError,
                                StructureError)
from routerefine.feaseval import (PenaltyConfig, diversity, evaluate,
                                  refinement_reward, tsptw_global_feasible)
from routerefine.instances import Instance, Variant, generate
from routerefine.masks import ConstructState, MaskMode, step_mask
from routerefine.solution import from_permutation, from_routes

from conftest import enumerate_tsptw_feasibility


def tsptw_by_hand(coords, tw, time_scale=1.0):
    coords = np.asarray(coords, dtype=float)
    return Instance(variant=Variant.TSPTW_HARD, n=len(coords), coords=coords,
                    tw=np.asarray(tw, dtype=float), seed=0, time_scale=time_scale)


def test_tw_violation_hand_arithmetic():
    # unit-speed travel along (0,0) -> (1,0) -> (1,1); node 1 closes at 0.5
    inst = tsptw_by_hand([(0, 0), (1, 0), (1, 1)],
                         [(0, 100), (0, 0.5), (0, 100)])
    rep = evaluate(inst, from_permutation([0, 1, 2], 3))
    assert rep.violations["tw"].magnitude == pytest.approx(0.5)
    assert rep.violations["tw"].count == 1
    assert rep.length == pytest.approx(2.0 + np.sqrt(2.0))
    assert rep.relaxed_cost == pytest.approx(rep.length + 0.5 + 1.0)
    assert not rep.feasible


def test_waiting_is_free():
    # wide windows but a late opener at node 1: arrival must wait, no penalty
    inst = tsptw_by_hand([(0, 0), (1, 0), (1, 1)],
                         [(0, 100), (2.0, 100), (0, 100)])
    rep = evaluate(inst, from_permutation([0, 1, 2], 3), with_per_node=True)
    assert rep.feasible
    assert rep.relaxed_cost == pytest.approx(rep.length)
    # arrival at node 2 leaves node 1 at its opening time 2.0
    assert rep.per_node["arrival"][2] == pytest.approx(3.0)


def test_feasible_tour_relaxed_equals_length():
    inst = generate("tsptw_hard", 8, 4)
    ok, mask, perms = enumerate_tsptw_feasibility(inst)
    assert ok
    sol = from_permutation(perms[np.flatnonzero(mask)[0]], 8)
    rep = evaluate(inst, sol)
    assert rep.feasible
    assert rep.relaxed_cost == pytest.approx(rep.length, abs=1e-12)


def test_cvrp_capacity_violation():
    inst = generate("cvrp", 50, 9)
    assert inst.capacity == 40
    # single route collecting demand just above capacity
    order = np.argsort(-inst.demand[1:]) + 1
    route, total = [], 0
    for c in order:
        route.append(int(c))
        total += int(inst.demand[c])
        if total >= 41:
            break
    rest = [c for c in range(1, 51) if c not in route]
    sol = from_routes([route, rest[:25], rest[25:]], 50)
    rep = evaluate(inst, sol)
    over = total - 40
    assert rep.violations["cap"].magnitude >= over
    # nodes on the overloaded route seeing load > Q on arrival
    expect = 0
    load = total
    for c in route:
        if load > 40:
            expect += 1
        load -= int(inst.demand[c])
    others = sum(inst.demand[c] for c in rest[:25]), sum(inst.demand[c] for c in rest[25:])
    if max(others) <= 40:
        assert rep.violations["cap"].count == expect


def test_structure_error_not_scored():
    inst = generate("cvrp", 5, 1)
    with pytest.raises(StructureError):
        evaluate(inst, from_permutation([0, 1, 2, 3, 4], 5))  # missing depot copies


def test_evaluate_relabel_equivariance():
    inst = generate("tsptw_hard", 9, 13)
    perm_sol = from_permutation(np.array([0, 3, 1, 4, 2, 5, 7, 8, 6]), 9)
    rep = evaluate(inst, perm_sol)
    swap = np.arange(9)
    swap[[1, 5]] = swap[[5, 1]]  # relabel nodes 1 and 5 everywhere
    inst2 = Instance(variant=inst.variant, n=9, coords=inst.coords[swap],
                     tw=inst.tw[swap], seed=0, time_scale=inst.time_scale)
    inv = np.empty(9, dtype=int)
    inv[swap] = np.arange(9)
    relabeled = from_permutation(inv[perm_sol.seq], 9)
    rep2 = evaluate(inst2, relabeled)
    assert rep2.length == pytest.approx(rep.length)
    assert rep2.relaxed_cost == pytest.approx(rep.relaxed_cost)
    assert rep2.feasible == rep.feasible


def test_penalty_weights_configurable():
    inst = tsptw_by_hand([(0, 0), (1, 0), (1, 1)],
                         [(0, 100), (0, 0.5), (0, 100)])
    rep = evaluate(inst, from_permutation([0, 1, 2], 3),
                   PenaltyConfig(weights={"tw": 2.0}, rho=3.0))
    assert rep.relaxed_cost == pytest.approx(rep.length + 2.0 * 0.5 + 3.0)
    with pytest.raises(ParameterError):
        PenaltyConfig(rho=-1.0)


# -- masks -------------------------------------------------------------------


def test_cvrp_fresh_state_none_equals_strict():
    inst = generate("cvrp", 10, 3)
    state = ConstructState(inst, 1)
    none = state.candidate_mask(MaskMode.NONE)
    strict = state.candidate_mask(MaskMode.STRICT)
    assert np.array_equal(none.mask, strict.mask)
    assert none.masked_count[0] == 0


def test_mask_monotone_random_cvrpbltw_rollouts():
    rng = np.random.Generator(np.random.Philox(key=5))
    for seed in range(20):
        inst = generate("cvrpbltw", 12, seed)
        state = ConstructState(inst, 1)
        while not bool(state.done()[0]):
            none = state.candidate_mask(MaskMode.NONE)
            relaxed = state.candidate_mask(MaskMode.RELAXED)
            strict = state.candidate_mask(MaskMode.STRICT)
            assert np.all(none.mask <= relaxed.mask)
            assert np.all(relaxed.mask <= strict.mask)
            allowed = np.flatnonzero(~relaxed.mask[0])
            state.advance(np.array([int(rng.choice(allowed))]))


def test_strict_masks_depot_return_lookahead():
    # customer 1 opens so late that serving anyone else afterwards cannot
    # return to the depot by its closing time 3.0
    coords = np.array([[0.0, 0.0], [0.5, 0.5], [0.6, 0.5], [0.05, 0.0]])
    tw = np.array([[0.0, 3.0], [2.6, 2.9], [0.0, 3.0], [0.0, 3.0]])
    inst = Instance(variant=Variant.CVRPBLTW, n=3, coords=coords, tw=tw,
                    demand=np.array([0, 1, 1, 1]), capacity=40,
                    backhaul=np.zeros(4, dtype=bool), service_time=0.2,
                    duration_limit=3.0, seed=0)
    res = step_mask(inst, [0, 1], MaskMode.STRICT)
    base = step_mask(inst, [0, 1], MaskMode.NONE)
    # node 2: arrival 2.9 is inside its window, but 2.9 + 0.2 + dist(2, depot)
    # overruns the depot close; node 3: arrival alone is already too late
    assert not base.mask[0, 2] and not base.mask[0, 3]
    assert res.mask[0, 2] and res.mask[0, 3]
    assert not res.mask[0, 0]  # the depot return stays open
    assert res.dead_end[0]


def test_dead_end_signalled():
    inst = generate("tsptw_hard", 6, 2)
    # visiting the window-latest node first tends to doom the rest; find a
    # prefix whose strict mask blocks everything
    ok, mask, perms = enumerate_tsptw_feasibility(inst)
    dead_prefix = None
    for k in range(1, 6):
        if not any(mask[perms[:, 1] == k]):
            dead_prefix = [0, k]
            break
    if dead_prefix is None:
        pytest.skip("all prefixes recoverable for this seed")
    assert not tsptw_global_feasible(inst, dead_prefix).feasible


# -- TSPTW oracle ---------------------------------------------------------------


def test_oracle_empty_partial_on_generated():
    for seed in range(10):
        inst = generate("tsptw_hard", 8, seed)
        assert tsptw_global_feasible(inst).feasible


def test_oracle_agrees_with_enumeration_small():
    for seed in range(15):
        inst = generate("tsptw_medium", 7, seed + 100)
        truth, _, _ = enumerate_tsptw_feasibility(inst)
        assert tsptw_global_feasible(inst).feasible == truth


def test_oracle_partial_consistency():
    for seed in range(5):
        inst = generate("tsptw_hard", 7, seed + 40)
        _, mask, perms = enumerate_tsptw_feasibility(inst)
        for k in range(1, 7):
            truth = bool(mask[perms[:, 1] == k].any())
            assert tsptw_global_feasible(inst, [0, k]).feasible == truth


def test_oracle_cap_enforced():
    inst = generate("tsptw_hard", 20, 1)
    with pytest.raises(CapacityExceededError):
        tsptw_global_feasible(inst, cap=12)
    assert tsptw_global_feasible(inst, cap=20) is not None


def test_oracle_expansion_grows():
    sizes = [5, 7, 9]
    med = []
    for n in sizes:
        counts = [tsptw_global_feasible(generate("tsptw_medium", n, s)).nodes_expanded
                  for s in range(12)]
        med.append(np.median(counts))
    assert med[0] < med[1] < med[2]


# -- reward ------------------------------------------------------------------------


def test_refinement_reward_values():
    assert refinement_reward(10.0, 9.2) == pytest.approx(0.8)
    assert refinement_reward(10.0, 11.0) == 0.0


def test_reward_telescopes():
    rng = np.random.Generator(np.random.Philox(key=9))
    costs = 50 + rng.random(30) * 10
    best = costs[0]
    total = 0.0
    for c in costs[1:]:
        total += refinement_reward(best, c)
        best = min(best, c)
    assert total == pytest.approx(costs[0] - best)


# -- diversity -----------------------------------------------------------------------


def test_diversity_identity_and_hand_case():
    a = from_permutation([0, 1, 2], 3)
    b = from_permutation([0, 2, 1], 3)
    assert diversity(a, a) == (0.0, 0.0, 0.0)
    hd, pjd, ktd = diversity(a, b)
    assert hd == pytest.approx(2 / 3)
    assert ktd == pytest.approx(1 / 3)
    assert 0.0 <= pjd <= 1.0


def test_diversity_symmetry():
    rng = np.random.Generator(np.random.Philox(key=3))
    for _ in range(10):
        pa = np.concatenate([[0], rng.permutation(np.arange(1, 8))])
        pb = np.concatenate([[0], rng.permutation(np.arange(1, 8))])
        a, b = from_permutation(pa, 8), from_permutation(pb, 8)
        assert diversity(a, b) == diversity(b, a)


def test_diversity_domain_error():
    with pytest.raises(ParameterError):
        diversity(from_permutation([0, 1, 2], 3), from_permutation([0, 1, 2, 3], 4))
