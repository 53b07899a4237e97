import itertools

import numpy as np
import pytest

from routerefine.errors import ActionError, CapacityExceededError
from routerefine.feaseval import evaluate
from routerefine.instances import Instance, Variant, generate
from routerefine.solution import Solution, from_permutation, from_routes
from routerefine.tourops import (RefineAction, apply_kopt, apply_rr,
                                 brute_force, greedy_construct, random_action,
                                 reconstruct_with_mask)


def cycle_edges(sol):
    seq = sol.seq
    return {frozenset((int(a), int(b))) for a, b in zip(seq, np.roll(seq, -1))}


def test_kopt_identity_move():
    sol = from_permutation([0, 1, 2, 3], 4)
    out = apply_kopt(sol, RefineAction(operator="kopt", picks=(2, 2)))
    assert out == sol


def test_kopt_square_two_opt():
    sol = from_permutation([0, 1, 2, 3], 4)
    out = apply_kopt(sol, RefineAction(operator="kopt", picks=(0, 3)))
    assert out.seq.tolist() == [0, 2, 1, 3]


def undirected_canon(seq):
    seq = np.asarray(seq)
    fwd = np.roll(seq, -int(np.argmin(seq)))
    rev = seq[::-1]
    rev = np.roll(rev, -int(np.argmin(rev)))
    return min(tuple(fwd.tolist()), tuple(rev.tolist()))


def test_kopt_matches_classical_two_opt_exhaustive():
    # family equality over resulting tours (orientation-free)
    for n in (4, 5):
        for perm in itertools.permutations(range(1, n)):
            sol = from_permutation((0,) + perm, n)
            classical = set()
            seq = sol.seq
            for i in range(n):
                for j in range(i + 1, n):
                    new = seq.copy()
                    new[i + 1:j + 1] = new[i + 1:j + 1][::-1]
                    classical.add(undirected_canon(new))
            ours = set()
            for a in range(n):
                for b in range(n):
                    if a == b:
                        continue
                    out = apply_kopt(sol, RefineAction(operator="kopt", picks=(a, b)))
                    ours.add(undirected_canon(out.seq))
            assert ours == classical


def test_kopt_hamiltonicity_property():
    rng = np.random.Generator(np.random.Philox(key=4))
    inst = generate("cvrpbltw", 10, 0)
    sol = from_routes([[1, 2, 3, 4], [5, 6, 7], [8, 9, 10]], 10)
    for _ in range(500):
        act = random_action(sol, "kopt", rng)
        sol = apply_kopt(sol, act)
        sol.validate()
    rep = evaluate(inst, sol)
    assert rep.length > 0


def test_kopt_action_validation():
    with pytest.raises(ActionError):
        RefineAction(operator="kopt", picks=(1, 2, 2))
    with pytest.raises(ActionError):
        RefineAction(operator="kopt", picks=(1, 1, 2))
    with pytest.raises(ActionError):
        RefineAction(operator="kopt", picks=())
    with pytest.raises(ActionError):
        apply_kopt(from_permutation([0, 1, 2], 3),
                   RefineAction(operator="kopt", picks=(0, 7)))


def test_rr_identity_and_hand_trace():
    sol = from_permutation([0, 1, 2, 3], 4)
    same = apply_rr(sol, RefineAction(operator="rr", remove_pos=2, insert_after=1))
    assert same == sol
    out = apply_rr(sol, RefineAction(operator="rr", remove_pos=1, insert_after=1))
    assert out.seq.tolist() == [0, 2, 1, 3]


def test_rr_depot_guard():
    sol = from_routes([[1, 2], [3]], 3)
    depot_pos = int(np.flatnonzero(sol.seq < sol.n_dep)[0])
    with pytest.raises(ActionError):
        apply_rr(sol, RefineAction(operator="rr", remove_pos=depot_pos,
                                   insert_after=0))


def test_rr_property_multiset_and_delta():
    rng = np.random.Generator(np.random.Philox(key=8))
    inst = generate("cvrp", 9, 5)
    sol = from_routes([[1, 2, 3], [4, 5, 6], [7, 8, 9]], 9)
    coords = np.concatenate([np.repeat(inst.coords[:1], sol.n_dep, axis=0),
                             inst.coords[1:]], axis=0)
    for _ in range(500):
        act = random_action(sol, "rr", rng)
        node = sol.seq[act.remove_pos]
        prev_len = evaluate(inst, sol).length
        # edge-delta formula: removal closes one gap, insertion opens one
        pos = sol.pos()
        L = sol.size
        def dist(a, b):
            return float(np.linalg.norm(coords[a] - coords[b]))
        p = act.remove_pos
        before, after = sol.seq[(p - 1) % L], sol.seq[(p + 1) % L]
        delta = dist(before, after) - dist(before, node) - dist(node, after)
        shrunk = np.delete(sol.seq, p)
        x, y = shrunk[act.insert_after], shrunk[(act.insert_after + 1) % (L - 1)]
        delta += dist(x, node) + dist(node, y) - dist(x, y)
        sol = apply_rr(sol, act)
        sol.validate()
        assert np.array_equal(np.sort(sol.labels()[sol.seq][sol.seq >= 0]),
                              np.sort(sol.label_seq()))
        assert evaluate(inst, sol).length == pytest.approx(prev_len + delta, abs=1e-9)


def test_greedy_l_collinear():
    coords = np.array([[0.0, 0.0], [0.2, 0.0], [0.5, 0.0], [0.9, 0.0]])
    inst = Instance(variant=Variant.TSPTW_HARD, n=4, coords=coords,
                    tw=np.tile([0.0, 100.0], (4, 1)), seed=0, time_scale=1.0)
    sol = greedy_construct(inst, "L")
    assert sol.seq.tolist() == [0, 1, 2, 3]


def test_greedy_c_window_order():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.1, 0.4], [0.7, 0.9]])
    # disjoint ordered windows force 0 -> 3 -> 1 -> 2
    tw = np.array([[0.0, 100.0], [20.0, 29.0], [30.0, 100.0], [0.0, 9.0]])
    inst = Instance(variant=Variant.TSPTW_HARD, n=4, coords=coords, tw=tw,
                    seed=0, time_scale=1.0)
    sol = greedy_construct(inst, "C")
    assert sol.seq.tolist() == [0, 3, 1, 2]


def test_greedy_deterministic_and_total():
    for variant in ("tsptw_hard", "cvrpbltw", "tspdl", "sop", "cvrp"):
        kwargs = {"sigma": 50} if variant == "tspdl" else {}
        inst = generate(variant, 12, 77, **kwargs)
        a = greedy_construct(inst, "L")
        b = greedy_construct(inst, "L")
        c = greedy_construct(inst, "C")
        assert a == b
        evaluate(inst, c)  # structurally valid


def test_brute_force_unit_square():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    inst = Instance(variant=Variant.TSPTW_HARD, n=4, coords=coords,
                    tw=np.tile([0.0, 1.0], (4, 1)), seed=0, time_scale=10.0)
    sol, rep = brute_force(inst)
    assert rep.feasible
    assert rep.length == pytest.approx(4.0)


def test_brute_force_generated_tsptw_feasible():
    for seed in range(5):
        inst = generate("tsptw_hard", 7, seed)
        _, rep = brute_force(inst)
        assert rep.feasible


def test_brute_force_dominates_greedy():
    for seed in range(10):
        inst = generate("tsptw_hard", 7, seed + 50)
        _, rep = brute_force(inst)
        greedy_rep = evaluate(inst, greedy_construct(inst, "C"))
        if greedy_rep.feasible:
            assert rep.length <= greedy_rep.length + 1e-9
        else:
            assert rep.feasible  # generator guarantees a witness


def test_brute_force_multi_route_optimal():
    inst = generate("cvrp", 5, 6)
    sol, rep = brute_force(inst)
    assert rep.feasible
    # exhaustive cross-check over all orderings with all split patterns
    best = np.inf
    for perm in itertools.permutations(range(1, 6)):
        for splits in range(1 << 4):
            routes, cur = [], [perm[0]]
            for k in range(4):
                if splits >> k & 1:
                    routes.append(cur)
                    cur = []
                cur.append(perm[k + 1])
            routes.append(cur)
            r = evaluate(inst, from_routes(routes, 5))
            if r.feasible:
                best = min(best, r.length)
    assert rep.length == pytest.approx(best, abs=1e-9)


def test_brute_force_cap():
    with pytest.raises(CapacityExceededError):
        brute_force(generate("tsptw_hard", 12, 0))
    with pytest.raises(CapacityExceededError):
        brute_force(generate("cvrp", 9, 0))


def test_reconstruct_identity_on_feasible_guide():
    inst = generate("cvrpbltw", 8, 3)
    guide = from_routes([[c] for c in range(1, 9)], 8)  # singletons: feasible
    assert evaluate(inst, guide).feasible
    out = reconstruct_with_mask(inst, guide)
    assert out == guide
    assert reconstruct_with_mask(inst, out) == out  # idempotent


def test_reconstruct_splits_overloaded_route():
    inst = generate("cvrp", 8, 11)
    guide = from_routes([[1, 2, 3, 4, 5, 6, 7, 8]], 8)
    assert not evaluate(inst, guide).feasible  # demand always exceeds 30
    out = reconstruct_with_mask(inst, guide)
    rep = evaluate(inst, out)
    assert rep.feasible
    assert out.route_count > 1


def test_reconstruct_random_guides_feasible():
    rng = np.random.Generator(np.random.Philox(key=15))
    for seed in range(25):
        inst = generate("cvrpbltw", 10, seed + 200)
        perm = rng.permutation(np.arange(1, 11))
        k = int(rng.integers(1, 4))
        routes = [list(chunk) for chunk in np.array_split(perm, k)]
        guide = from_routes(routes, 10)
        out = reconstruct_with_mask(inst, guide)
        assert evaluate(inst, out).feasible
