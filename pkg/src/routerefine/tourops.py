"""Tour operators, greedy baselines, exhaustive optimum, and mask repair.

k-opt action grammar: an anchor chain of node picks (a_1, ..., a_m).  Each
consecutive pair applies one basis move to the current cycle: the open
segment strictly between a_j and a_{j+1} is reversed, which removes edges
(a_j, succ(a_j)) and (pred(a_{j+1}), a_{j+1}) and reconnects into a single
Hamiltonian cycle.  Re-picking the anchor terminates the chain (applying the
closing pair); picking the anchor as the second node is the identity move.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ActionError, CapacityExceededError, ParameterError
from .feaseval import DEFAULT_PENALTIES, EvalReport, evaluate
from .instances import Instance, Variant
from .masks import ConstructState, MaskMode, unmask_fallback
from .solution import Solution, canonical_rotation, from_permutation, from_routes

KOPT_MAX_PICKS = 4


@dataclass(frozen=True)
class RefineAction:
    operator: str                                # "kopt" or "rr"
    picks: tuple[int, ...] | None = None         # kopt anchor chain
    remove_pos: int | None = None                # rr: position of the customer
    insert_after: int | None = None              # rr: position in the shrunken tour

    def __post_init__(self):
        if self.operator not in ("kopt", "rr"):
            raise ActionError(f"unknown operator {self.operator!r}")
        if self.operator == "kopt":
            if not self.picks:
                raise ActionError("kopt action needs at least one pick")
            if len(self.picks) > KOPT_MAX_PICKS + 1:
                raise ActionError("kopt chain exceeds the pick cap")
            anchor = self.picks[0]
            seen = {anchor}
            for j, p in enumerate(self.picks[1:], start=1):
                if p == anchor:
                    if j != len(self.picks) - 1:
                        raise ActionError("anchor re-pick must terminate the chain")
                elif p in seen:
                    raise ActionError("duplicate non-anchor pick")
                seen.add(p)
        else:
            if self.remove_pos is None or self.insert_after is None:
                raise ActionError("rr action needs remove and insert positions")


def _basis_move(seq: np.ndarray, a: int, b: int) -> np.ndarray:
    """Reverse the open segment between a and b along the cycle."""
    if a == b:
        return seq
    pos = np.empty(len(seq), dtype=np.int64)
    pos[seq] = np.arange(len(seq))
    rolled = np.roll(seq, -pos[a])      # place a at index 0
    pb = int(np.flatnonzero(rolled == b)[0])
    rolled[1:pb] = rolled[1:pb][::-1]
    return rolled


def apply_kopt(solution: Solution, action: RefineAction) -> Solution:
    if action.operator != "kopt":
        raise ActionError("apply_kopt requires a kopt action")
    size = solution.size
    for p in action.picks:
        if not 0 <= p < size:
            raise ActionError(f"pick {p} out of range")
    seq = solution.seq
    for a, b in zip(action.picks[:-1], action.picks[1:]):
        seq = _basis_move(seq, a, b)
    return solution.replace_seq(seq)


def apply_rr(solution: Solution, action: RefineAction) -> Solution:
    if action.operator != "rr":
        raise ActionError("apply_rr requires an rr action")
    size = solution.size
    rp, ia = action.remove_pos, action.insert_after
    if not 0 <= rp < size:
        raise ActionError(f"remove position {rp} out of range")
    if not 0 <= ia < size - 1:
        raise ActionError(f"insert position {ia} out of range")
    node = solution.seq[rp]
    if node < solution.n_dep:
        raise ActionError("depot copies cannot be removed")
    shrunk = np.delete(solution.seq, rp)
    out = np.insert(shrunk, ia + 1, node)
    return solution.replace_seq(out)


def random_action(solution: Solution, operator: str,
                  rng: np.random.Generator) -> RefineAction:
    """Uniform random valid action; used by property tests and smoke runs."""
    size = solution.size
    if operator == "kopt":
        m = int(rng.integers(2, KOPT_MAX_PICKS + 1))
        picks = [int(rng.integers(size))]
        for _ in range(m - 1):
            allowed = [x for x in range(size) if x == picks[0] or x not in picks]
            nxt = int(rng.choice(allowed))
            picks.append(nxt)
            if nxt == picks[0]:
                break
        return RefineAction(operator="kopt", picks=tuple(picks))
    customers = np.flatnonzero(solution.seq >= solution.n_dep)
    rp = int(rng.choice(customers))
    ia = int(rng.integers(size - 1))
    return RefineAction(operator="rr", remove_pos=rp, insert_after=ia)


# -- greedy baselines ---------------------------------------------------------


def greedy_construct(instance: Instance, rule: str = "L") -> Solution:
    """Deterministic rollout under NONE masking.

    Rule "L" takes the nearest node; rule "C" takes the node with minimal
    incremental constraint violation, tie-broken by earliest time-window end
    and then by node index.
    """
    rule = rule.upper()
    if rule not in ("L", "C"):
        raise ParameterError(f"unknown greedy rule {rule!r}")
    state = ConstructState(instance, 1)
    d = instance.dist_matrix()
    tw_end = instance.tw[:, 1] if instance.tw is not None else np.zeros(
        instance.num_nodes)
    while not bool(state.done()[0]):
        res = state.candidate_mask(MaskMode.NONE)
        mask = res.mask[0]
        if rule == "L":
            score = d[int(state.current[0])].copy()
        else:
            inc = state.incremental_violation()[0]
            # exact lexicographic ordering: violation, window end, index
            order = np.lexsort((np.arange(instance.num_nodes), tw_end, inc))
            score = np.empty(instance.num_nodes)
            score[order] = np.arange(instance.num_nodes)
        score = np.where(mask, np.inf, score)
        state.advance(np.array([int(np.argmin(score))]))
    return state.solutions()[0]


# -- brute force ----------------------------------------------------------------

BRUTE_SINGLE_CAP = 10
BRUTE_MULTI_CAP = 8


def brute_force(instance: Instance,
                penalties=DEFAULT_PENALTIES) -> tuple[Solution, EvalReport]:
    """Exhaustive optimum at desk scale.

    Returns the feasible solution of minimum length when one exists,
    otherwise the minimum-relaxed-cost solution (report.feasible is False).
    """
    if instance.has_depot:
        if instance.n > BRUTE_MULTI_CAP:
            raise CapacityExceededError(
                f"n={instance.n} exceeds the multi-route cap {BRUTE_MULTI_CAP}")
        return _brute_routes(instance, penalties)
    if instance.n > BRUTE_SINGLE_CAP:
        raise CapacityExceededError(
            f"n={instance.n} exceeds the single-tour cap {BRUTE_SINGLE_CAP}")
    return _brute_single(instance, penalties)


def _brute_single(instance, penalties):
    n = instance.n
    fixed_end = instance.variant is Variant.SOP
    middle = range(1, n - 1) if fixed_end else range(1, n)
    best = None
    for perm in itertools.permutations(middle):
        seq = (0,) + perm + ((n - 1,) if fixed_end else ())
        sol = from_permutation(np.array(seq), n)
        rep = evaluate(instance, sol, penalties)
        key = (not rep.feasible, rep.length if rep.feasible else rep.relaxed_cost)
        if best is None or key < best[0]:
            best = (key, sol, rep)
    return best[1], best[2]


def _brute_routes(instance, penalties):
    """Exact multi-route optimum via subset-permutation route costs plus a
    set-partition sweep over route assignments."""
    from .feaseval import route_relaxed_cost

    n = instance.n
    full = (1 << n) - 1
    feas_cost: dict[int, float] = {}
    feas_route: dict[int, tuple] = {}
    relax_cost: dict[int, float] = {}
    relax_route: dict[int, tuple] = {}
    customers = list(range(1, n + 1))
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            bits = 0
            for s in subset:
                bits |= 1 << s
            nodes = [customers[s] for s in subset]
            for perm in itertools.permutations(nodes):
                length, relaxed, feasible = route_relaxed_cost(
                    instance, list(perm), penalties)
                if feasible and length < feas_cost.get(bits, np.inf):
                    feas_cost[bits] = length
                    feas_route[bits] = perm
                if relaxed < relax_cost.get(bits, np.inf):
                    relax_cost[bits] = relaxed
                    relax_route[bits] = perm

    def partition(best_route, best_cost):
        dp = np.full(full + 1, np.inf)
        choice = [-1] * (full + 1)
        dp[0] = 0.0
        for mask in range(1, full + 1):
            low = mask & (-mask)
            sub = mask
            while sub:
                if sub & low and sub in best_cost:
                    cand = dp[mask ^ sub] + best_cost[sub]
                    if cand < dp[mask]:
                        dp[mask] = cand
                        choice[mask] = sub
                sub = (sub - 1) & mask
        if not np.isfinite(dp[full]):
            return None
        routes = []
        mask = full
        while mask:
            sub = choice[mask]
            routes.append(list(best_route[sub]))
            mask ^= sub
        return from_routes(routes, n)

    sol = partition(feas_route, feas_cost)
    if sol is None:
        sol = partition(relax_route, relax_cost)
    rep = evaluate(instance, sol, penalties)
    return sol, rep


# -- reconstruction repair -------------------------------------------------------


def reconstruct_with_mask(instance: Instance, guide: Solution,
                          penalties=DEFAULT_PENALTIES) -> Solution:
    """Rebuild a multi-route solution under STRICT masking, following the
    guide's customer order wherever feasible.

    When the guided next customer is masked, the earliest strictly-feasible
    customer in the guide's remaining order is taken instead (minimum
    displacement); if none is feasible the vehicle returns to the depot and
    opens a new route.  A dead end from a fresh route falls back to the
    minimum-incremental-violation node.
    """
    if instance.variant not in (Variant.CVRP, Variant.CVRPBLTW):
        raise ParameterError("reconstruction applies to multi-route variants")
    # Guide order including its depot returns (0 markers), so a feasible
    # guide replays verbatim.
    remaining: list[int] = []
    for route in guide.routes():
        remaining.extend(route)
        remaining.append(0)
    state = ConstructState(instance, 1)
    while any(c != 0 for c in remaining):
        while remaining and remaining[0] == 0:
            marker = remaining.pop(0)
            if int(state.current[0]) != 0:
                state.advance(np.array([0]))
        if not remaining:
            break
        res = state.candidate_mask(MaskMode.STRICT)
        mask = res.mask[0]
        pick = next((c for c in remaining if c != 0 and not mask[c]), None)
        if pick is None:
            if int(state.current[0]) != 0:
                state.advance(np.array([0]))  # dead end opens a new route
                continue
            unmask_fallback(state, res)
            mask = res.mask[0]
            pick = next(c for c in remaining if c != 0 and not mask[c])
        state.advance(np.array([pick]))
        remaining.remove(pick)
    if int(state.current[0]) != 0:
        state.advance(np.array([0]))
    return state.solutions()[0]
