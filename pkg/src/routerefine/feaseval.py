"""Solution evaluation: length, violations, relaxed cost, rewards, diversity.

The relaxed cost adds, per constraint type, a weighted violation magnitude
plus a weighted count of violating nodes to the tour length, so it equals
the length exactly on feasible solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityExceededError, ParameterError, StructureError
from .instances import Instance, Variant
from .solution import Solution


@dataclass(frozen=True)
class Violation:
    magnitude: float
    count: int


@dataclass
class PenaltyConfig:
    """Per-constraint magnitude weights and the violating-node-count weight."""

    weights: dict[str, float] = field(default_factory=dict)
    default_weight: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.rho < 0 or self.default_weight < 0 or any(
            w < 0 for w in self.weights.values()
        ):
            raise ParameterError("penalty weights must be nonnegative")

    def weight(self, constraint: str) -> float:
        return self.weights.get(constraint, self.default_weight)


DEFAULT_PENALTIES = PenaltyConfig()


@dataclass
class EvalReport:
    length: float
    violations: dict[str, Violation]
    relaxed_cost: float
    feasible: bool
    per_node: dict[str, np.ndarray] | None = None

    @property
    def total_violation(self) -> float:
        return sum(v.magnitude for v in self.violations.values())


def evaluate(instance: Instance, solution: Solution,
             penalties: PenaltyConfig = DEFAULT_PENALTIES,
             with_per_node: bool = False) -> EvalReport:
    """Score one solution; raises StructureError on malformed input."""
    _check_structure(instance, solution)
    v = instance.variant
    if v in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
        parts = _eval_tsptw(instance, solution, with_per_node)
    elif v is Variant.TSPDL:
        parts = _eval_tspdl(instance, solution, with_per_node)
    elif v is Variant.SOP:
        parts = _eval_sop(instance, solution, with_per_node)
    else:
        parts = _eval_routes(instance, solution, with_per_node)
    length, violations, per_node = parts
    relaxed = length
    for name, viol in violations.items():
        relaxed += penalties.weight(name) * viol.magnitude + penalties.rho * viol.count
    feasible = all(v.magnitude == 0.0 and v.count == 0 for v in violations.values())
    return EvalReport(length=float(length), violations=violations,
                      relaxed_cost=float(relaxed), feasible=feasible,
                      per_node=per_node)


def _check_structure(instance: Instance, solution: Solution):
    if solution.n_customers != (instance.n if not instance.has_depot else instance.n):
        raise StructureError("customer count does not match the instance")
    if instance.has_depot:
        if solution.n_dep < 1:
            raise StructureError("multi-route variants need at least one depot copy")
    elif solution.n_dep != 0:
        raise StructureError("single-tour variants carry no depot copies")
    solution.validate()


def _eval_tsptw(instance, solution, with_per_node):
    seq = solution.seq
    d = instance.dist_matrix()
    scale = instance.time_scale if instance.time_scale else 1.0
    lo = instance.tw[seq, 0]
    hi = instance.tw[seq, 1]
    edge = d[seq, np.roll(seq, -1)]
    length = float(edge.sum())
    step = edge / scale
    # arrival_k = cumdist_k + max(0, running max of (l_j - cumdist_j), j < k)
    cum = np.concatenate([[0.0], np.cumsum(step)])          # size n + 1
    slack = np.maximum.accumulate(np.maximum(lo - cum[:-1], 0.0))
    arrival = np.empty(len(seq) + 1)
    arrival[0] = 0.0
    arrival[1:-1] = cum[1:-1] + slack[:-1]
    arrival[-1] = cum[-1] + slack[-1]                       # return to start
    bounds = np.concatenate([hi, [instance.tw[seq[0], 1]]])
    late = np.maximum(arrival - bounds, 0.0)
    violations = {"tw": Violation(float(late.sum()), int((late > 0).sum()))}
    per_node = None
    if with_per_node:
        per_node = {
            "arrival": arrival[:-1],
            "violation": late[:-1].copy(),
            "cum_length": cum[:-1] * scale,
            "load": np.zeros(len(seq)),
            "return_arrival": np.array([arrival[-1]]),
            "return_violation": np.array([late[-1]]),
        }
    return length, violations, per_node


def _eval_tspdl(instance, solution, with_per_node):
    seq = solution.seq
    d = instance.dist_matrix()
    length = float(d[seq, np.roll(seq, -1)].sum())
    q = instance.demand[seq].astype(np.float64)
    onboard = q.sum() - np.concatenate([[0.0], np.cumsum(q[:-1])])
    over = np.maximum(onboard - instance.draft_limit[seq], 0.0)
    over[0] = 0.0  # the tour begins at the start port, no arrival there
    violations = {"draft": Violation(float(over.sum()), int((over > 0).sum()))}
    per_node = None
    if with_per_node:
        cum = np.concatenate([[0.0], np.cumsum(d[seq[:-1], seq[1:]])])
        per_node = {"arrival": cum, "violation": over.copy(), "cum_length": cum,
                    "load": onboard}
    return length, violations, per_node


def _eval_sop(instance, solution, with_per_node):
    seq = solution.seq
    d = instance.dist_matrix()
    length = float(d[seq[:-1], seq[1:]].sum())  # path objective, no closing edge
    pos = solution.pos()
    bad_pairs = [(a, b) for a, b in instance.precedence if pos[a] > pos[b]]
    count = len({b for _, b in bad_pairs})
    violations = {"precedence": Violation(float(len(bad_pairs)), count)}
    per_node = None
    if with_per_node:
        cum = np.concatenate([[0.0], np.cumsum(d[seq[:-1], seq[1:]])])
        viol = np.zeros(len(seq))
        for _, b in bad_pairs:
            viol[pos[b]] += 1.0
        per_node = {"arrival": cum, "violation": viol, "cum_length": cum,
                    "load": np.zeros(len(seq))}
    return length, violations, per_node


@dataclass
class RouteScore:
    length: float
    cap_mag: float
    cap_cnt: int
    tw_mag: float
    tw_cnt: int
    dur_mag: float
    dur_cnt: int
    arrival: np.ndarray      # per customer, arrival time
    load: np.ndarray         # per customer, load after service
    cum_length: np.ndarray   # per customer, distance driven so far
    node_viol: np.ndarray    # per customer, violation magnitude incurred there
    return_arrival: float
    return_viol: float
    departure_load: float


def score_route(instance: Instance, route, penalties=None) -> RouteScore:
    """Score one depot-to-depot route of a multi-route variant."""
    d = instance.dist_matrix()
    timed = instance.variant is Variant.CVRPBLTW
    Q = float(instance.capacity)
    s = instance.service_time or 0.0
    ell = instance.duration_limit
    back = instance.backhaul
    k = len(route)
    arrival = np.zeros(k)
    load_arr = np.zeros(k)
    cum_arr = np.zeros(k)
    viol_arr = np.zeros(k)
    linehaul_total = float(sum(instance.demand[c] for c in route
                               if not (back is not None and back[c])))
    load = linehaul_total  # departure: every delivery on board
    peak = load
    t = 0.0
    cum = 0.0
    prev = 0
    cap_cnt = 0
    tw_mag = tw_cnt = 0.0
    dur_mag = 0.0
    dur_cnt = 0
    for i, c in enumerate(route):
        cum += d[prev, c]
        arr = t + d[prev, c]
        node_viol = 0.0
        if timed:
            late = max(arr - instance.tw[c, 1], 0.0)
            tw_mag += late
            tw_cnt += late > 0
            node_viol += late
            t = max(arr, instance.tw[c, 0]) + s
            if cum > ell:
                dur_cnt += 1
                node_viol += cum - ell
        before = load
        if back is not None and back[c]:
            load = before + float(instance.demand[c])   # pickup
        else:
            load = before - float(instance.demand[c])   # delivery
        node_load = max(before, load)
        peak = max(peak, node_load)
        if node_load > Q:
            cap_cnt += 1
            node_viol += node_load - Q
        arrival[i] = arr
        load_arr[i] = load
        cum_arr[i] = cum
        viol_arr[i] = node_viol
        prev = c
    cum += d[prev, 0]
    ret = t + d[prev, 0]
    ret_viol = 0.0
    if timed:
        late = max(ret - instance.tw[0, 1], 0.0)
        tw_mag += late
        tw_cnt += late > 0
        dur_mag = max(cum - ell, 0.0)
        if cum > ell:
            dur_cnt += 1
        ret_viol = late + dur_mag
    return RouteScore(length=cum, cap_mag=max(peak - Q, 0.0), cap_cnt=cap_cnt,
                      tw_mag=float(tw_mag), tw_cnt=int(tw_cnt),
                      dur_mag=float(dur_mag), dur_cnt=int(dur_cnt),
                      arrival=arrival, load=load_arr, cum_length=cum_arr,
                      node_viol=viol_arr, return_arrival=float(ret),
                      return_viol=float(ret_viol),
                      departure_load=linehaul_total)


def route_relaxed_cost(instance: Instance, route,
                       penalties: PenaltyConfig = DEFAULT_PENALTIES
                       ) -> tuple[float, float, bool]:
    """(length, relaxed cost, feasible) of one stand-alone route."""
    rs = score_route(instance, route)
    relaxed = rs.length
    relaxed += penalties.weight("cap") * rs.cap_mag + penalties.rho * rs.cap_cnt
    feasible = rs.cap_mag == 0.0 and rs.cap_cnt == 0
    if instance.variant is Variant.CVRPBLTW:
        relaxed += penalties.weight("tw") * rs.tw_mag + penalties.rho * rs.tw_cnt
        relaxed += penalties.weight("dur") * rs.dur_mag + penalties.rho * rs.dur_cnt
        feasible &= rs.tw_mag == 0.0 and rs.dur_mag == 0.0 and rs.tw_cnt == 0
    return rs.length, relaxed, feasible


def _eval_routes(instance, solution, with_per_node):
    """CVRP / CVRPBLTW: giant tour split at depot copies, one vehicle each."""
    timed = instance.variant is Variant.CVRPBLTW
    L = solution.size
    arrival = np.zeros(L)
    load_arr = np.zeros(L)
    cum_arr = np.zeros(L)
    viol_arr = np.zeros(L)
    length = 0.0
    cap_mag, cap_cnt = 0.0, 0
    tw_mag, tw_cnt = 0.0, 0
    dur_mag, dur_cnt = 0.0, 0
    labels = solution.label_seq()
    depot_positions = np.flatnonzero(solution.seq < solution.n_dep)
    for idx, start in enumerate(depot_positions):
        end = depot_positions[idx + 1] if idx + 1 < len(depot_positions) else L
        route = labels[start + 1:end]
        rs = score_route(instance, route)
        length += rs.length
        cap_mag += rs.cap_mag
        cap_cnt += rs.cap_cnt
        tw_mag += rs.tw_mag
        tw_cnt += rs.tw_cnt
        dur_mag += rs.dur_mag
        dur_cnt += rs.dur_cnt
        sl = slice(start + 1, end)
        arrival[sl] = rs.arrival
        load_arr[sl] = rs.load
        cum_arr[sl] = rs.cum_length
        viol_arr[sl] = rs.node_viol
        load_arr[start] = rs.departure_load
        ret_pos = int(end % L)
        arrival[ret_pos] = rs.return_arrival
        viol_arr[ret_pos] += rs.return_viol
    violations = {"cap": Violation(float(cap_mag), int(cap_cnt))}
    if timed:
        violations["tw"] = Violation(float(tw_mag), int(tw_cnt))
        violations["dur"] = Violation(float(dur_mag), int(dur_cnt))
    per_node = None
    if with_per_node:
        per_node = {"arrival": arrival, "violation": viol_arr,
                    "cum_length": cum_arr, "load": load_arr}
    return length, violations, per_node


# -- refinement reward -------------------------------------------------------


def refinement_reward(prev_best_cost: float, new_cost: float) -> float:
    """Cost reduction of the best-so-far relaxed cost, clamped at zero."""
    return max(prev_best_cost - new_cost, 0.0)


def better_solution(cost_a: float, feas_a: bool, cost_b: float, feas_b: bool) -> bool:
    """True when (cost_a, feas_a) beats (cost_b, feas_b): lower relaxed cost
    wins; at equal cost a feasible solution beats an infeasible one."""
    if cost_a != cost_b:
        return cost_a < cost_b
    return feas_a and not feas_b


def improved_lexicographic(cost_new: float, feas_new: bool,
                           cost_old: float, feas_old: bool) -> bool:
    """Feasibility-first improvement test used for the supervision gate."""
    if feas_new != feas_old:
        return feas_new
    return cost_new < cost_old


# -- TSPTW global feasibility oracle ------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    nodes_expanded: int

    def __bool__(self) -> bool:
        return self.feasible


def tsptw_global_feasible(instance: Instance, partial=(), cap: int = 12) -> OracleResult:
    """Exact check whether some completion of ``partial`` meets all windows.

    Depth-first search over completions ordered by earliest deadline, with
    direct-arrival pruning and dominance memoization on (visited set, last
    node, earliest departure time).  Exponential in the worst case; refuses
    more than ``cap`` remaining nodes.
    """
    if instance.variant not in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
        raise ParameterError("oracle applies to TSPTW variants only")
    d = instance.dist_matrix()
    scale = instance.time_scale if instance.time_scale else 1.0
    lo, hi = instance.tw[:, 0], instance.tw[:, 1]
    n = instance.n
    partial = [int(x) for x in partial]
    if not partial:
        partial = [0]
    if partial[0] != 0:
        raise ParameterError("partial tours start at the designated start node 0")
    if len(set(partial)) != len(partial):
        raise StructureError("partial tour repeats a node")
    remaining = frozenset(range(n)) - set(partial)
    if len(remaining) > cap:
        raise CapacityExceededError(
            f"{len(remaining)} remaining nodes exceed the cap of {cap}")
    # replay the prefix
    t = 0.0
    for i, j in zip(partial[:-1], partial[1:]):
        arr = t + d[i, j] / scale
        if arr > hi[j]:
            return OracleResult(False, 0)
        t = max(arr, lo[j])
    expanded = 0
    memo: dict[tuple[int, int], float] = {}
    order = np.argsort(hi)  # earliest-deadline child ordering

    def rec(cur: int, t: float, rem: frozenset) -> bool:
        nonlocal expanded
        expanded += 1
        if not rem:
            return t + d[cur, 0] / scale <= hi[0]
        mask = 0
        for k in rem:
            if t + d[cur, k] / scale > hi[k]:
                return False  # k can never be reached in time
            mask |= 1 << k
        key = (mask, cur)
        best = memo.get(key)
        if best is not None and t >= best:
            return False  # dominated: a no-later visit of this state failed
        memo[key] = t
        for k in order:
            k = int(k)
            if k not in rem:
                continue
            arr = t + d[cur, k] / scale
            if rec(k, max(arr, lo[k]), rem - {k}):
                return True
        return False

    return OracleResult(rec(partial[-1], t, remaining), expanded)


# -- solution diversity --------------------------------------------------------


def diversity(a, b) -> tuple[float, float, float]:
    """(HD, PJD, KTD) between two single-tour solutions; all in [0, 1]."""
    seq_a = a.seq if isinstance(a, Solution) else np.asarray(a, dtype=np.int64)
    seq_b = b.seq if isinstance(b, Solution) else np.asarray(b, dtype=np.int64)
    if len(seq_a) != len(seq_b) or not np.array_equal(np.sort(seq_a), np.sort(seq_b)):
        raise ParameterError("solutions must be permutations of the same node set")
    L = len(seq_a)
    matches = int((seq_a == seq_b).sum())
    hd = 1.0 - matches / L
    pjd = 1.0 - matches / (2 * L - matches) if L else 0.0
    pos_a = np.empty(L, dtype=np.int64)
    pos_b = np.empty(L, dtype=np.int64)
    pos_a[seq_a] = np.arange(L)
    pos_b[seq_b] = np.arange(L)
    da = np.sign(pos_a[:, None] - pos_a[None, :])
    db = np.sign(pos_b[:, None] - pos_b[None, :])
    discordant = int((da != db).sum()) // 2
    ktd = discordant / (L * (L - 1) / 2) if L > 1 else 0.0
    return hd, pjd, ktd
