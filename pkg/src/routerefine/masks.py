"""Construction states and feasibility masks in three regimes.

NONE masks only visited customers plus malformed depot re-selection; RELAXED
additionally masks single-step capacity overflows that can never be repaired;
STRICT additionally masks every selection that violates any constraint
immediately, including selections whose forced depot return would violate the
depot window or the route duration limit.  The mask sets are nested by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParameterError
from .instances import Instance, Variant
from .solution import Solution, from_permutation, from_routes


class MaskMode(str, Enum):
    NONE = "none"
    RELAXED = "relaxed"
    STRICT = "strict"


@dataclass
class MaskResult:
    mask: np.ndarray           # (R, num_nodes) bool, True = forbidden
    masked_count: np.ndarray   # (R,) unvisited customers masked under the mode
    candidates: np.ndarray     # (R,) unvisited customers remaining

    @property
    def dead_end(self) -> np.ndarray:
        """Rows whose every remaining customer is masked."""
        return (self.masked_count == self.candidates) & (self.candidates > 0)


class ConstructState:
    """Vectorized construction state: ``rollouts`` parallel rollouts on each
    of a batch of same-shape instances (same variant and node count).

    Node indexing uses instance labels; multi-route variants place the depot
    at label 0.  Single-tour rollouts begin at the designated start node 0,
    multi-route rollouts at the depot.  Row r belongs to instance
    r // rollouts.
    """

    def __init__(self, instances: Instance | list[Instance], rollouts: int):
        if isinstance(instances, Instance):
            instances = [instances]
        self.instances = instances
        self.B = len(instances)
        self.S = rollouts
        R = self.B * rollouts
        self.R = R
        first = instances[0]
        if any(i.variant is not first.variant or i.n != first.n
               for i in instances):
            raise ParameterError("batched states need same-shape instances")
        self.variant = first.variant
        self.multi = first.has_depot
        self.num_nodes = first.num_nodes
        self.n = first.n
        self.ii = np.repeat(np.arange(self.B), rollouts)
        self.dstack = np.stack([i.dist_matrix() for i in instances])
        self.scale = np.array([i.time_scale if i.time_scale else 1.0
                               for i in instances])[self.ii]
        self.service = first.service_time or 0.0
        if first.tw is not None:
            self.tw_lo = np.stack([i.tw[:, 0] for i in instances])
            self.tw_hi = np.stack([i.tw[:, 1] for i in instances])
        if first.demand is not None:
            self.demand = np.stack([i.demand for i in instances]).astype(np.float64)
        if first.capacity is not None:
            self.capacity = np.array([float(i.capacity) for i in instances])[self.ii]
        if first.backhaul is not None:
            self.backhaul = np.stack([i.backhaul for i in instances])
        if first.draft_limit is not None:
            self.draft = np.stack([i.draft_limit for i in instances])
        self.duration_limit = first.duration_limit
        self.visited = np.zeros((R, self.num_nodes), dtype=bool)
        self.current = np.zeros(R, dtype=np.int64)
        self.time = np.zeros(R)          # departure-ready time at current
        self.route_len = np.zeros(R)
        self.n_visited = np.zeros(R, dtype=np.int64)
        self.history: list[np.ndarray] = []
        if not self.multi:
            self.visited[:, 0] = True
            self.n_visited[:] = 1
        if self.variant in (Variant.CVRP, Variant.CVRPBLTW):
            self.lt = np.zeros(R)        # linehaul total this route
            self.val = np.zeros(R)       # pickups minus deliveries this route
            self.mval = np.zeros(R)      # running max of val (and 0)
        if self.variant is Variant.TSPDL:
            self.onboard = np.array([float(i.demand.sum())
                                     for i in instances])[self.ii]
        if self.variant is Variant.SOP:
            self.remaining_pred = np.zeros((R, self.n), dtype=np.int64)
            self._succ_of: list[list[list[int]]] = []
            for b_idx, inst in enumerate(instances):
                succ = [[] for _ in range(self.n)]
                for a, b in inst.precedence:
                    succ[a].append(b)
                    self.remaining_pred[self.ii == b_idx, b] += 1
                self._succ_of.append(succ)

    # -- bookkeeping --------------------------------------------------------

    def done(self) -> np.ndarray:
        # single-tour rollouts count the start node as visited from the outset
        all_seen = self.n_visited >= self.n
        if self.multi:
            return all_seen & (self.current == 0)
        return all_seen

    def arrivals_to(self) -> np.ndarray:
        """(R, num_nodes) arrival time at each node if selected next."""
        step = self.dstack[self.ii, self.current]
        return self.time[:, None] + step / self.scale[:, None]

    # -- masks ---------------------------------------------------------------

    def candidate_mask(self, mode: MaskMode | str) -> MaskResult:
        mode = MaskMode(mode)
        mask = self.visited.copy()
        if self.multi:
            mask[:, 0] = self.current == 0   # no empty routes, no self-loop
            finished = self.n_visited >= self.n
            mask[finished, 1:] = True        # terminal: depot only
            mask[finished, 0] = self.current[finished] == 0
        elif self.variant is Variant.SOP:
            not_last = self.n_visited < self.num_nodes - 1
            mask[not_last, self.num_nodes - 1] = True  # fixed end node
        base_unvisited = ~self.visited
        if self.multi:
            base_unvisited = base_unvisited.copy()
            base_unvisited[:, 0] = False
        candidates = base_unvisited.sum(axis=1)
        if mode is not MaskMode.NONE:
            if self.variant in (Variant.CVRP, Variant.CVRPBLTW):
                q = self.demand[self.ii]
                linehaul = np.ones((self.R, self.num_nodes), dtype=bool)
                if self.variant is Variant.CVRPBLTW:
                    linehaul = ~self.backhaul[self.ii]
                peak_lh = self.lt[:, None] + q + self.mval[:, None]
                over = (peak_lh > self.capacity[:, None]) & linehaul
                over[:, 0] = False
                mask |= over
        if mode is MaskMode.STRICT:
            mask |= self._strict_extra()
        masked_count = (mask & base_unvisited).sum(axis=1)
        return MaskResult(mask=mask, masked_count=masked_count,
                          candidates=candidates)

    def _strict_extra(self) -> np.ndarray:
        extra = np.zeros((self.R, self.num_nodes), dtype=bool)
        if self.variant in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
            extra |= self.arrivals_to() > self.tw_hi[self.ii]
        elif self.variant is Variant.CVRPBLTW:
            arr = self.arrivals_to()
            hi = self.tw_hi[self.ii]
            extra |= arr > hi
            q = self.demand[self.ii]
            back = self.backhaul[self.ii]
            peak_bh = self.lt[:, None] + np.maximum(
                self.mval[:, None], self.val[:, None] + q)
            extra |= (peak_bh > self.capacity[:, None]) & back
            step = self.dstack[self.ii, self.current]
            ret = self.dstack[self.ii, :, 0]
            ell = self.duration_limit
            extra |= (self.route_len[:, None] + step + ret) > ell
            depart = np.maximum(arr, self.tw_lo[self.ii]) + self.service
            extra |= (depart + ret / self.scale[:, None]) > hi[:, 0:1]
            extra[:, 0] = False  # the depot return stays available
        elif self.variant is Variant.TSPDL:
            extra |= self.onboard[:, None] > self.draft[self.ii]
        elif self.variant is Variant.SOP:
            extra |= self.remaining_pred > 0
        return extra

    def incremental_violation(self) -> np.ndarray:
        """(R, num_nodes) violation magnitude added by selecting each node."""
        out = np.zeros((self.R, self.num_nodes))
        if self.variant in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
            out += np.maximum(self.arrivals_to() - self.tw_hi[self.ii], 0.0)
        elif self.variant in (Variant.CVRP, Variant.CVRPBLTW):
            q = self.demand[self.ii]
            back = (self.backhaul[self.ii] if self.variant is Variant.CVRPBLTW
                    else np.zeros((self.R, self.num_nodes), dtype=bool))
            cap = self.capacity[:, None]
            new_peak = np.where(
                back,
                self.lt[:, None] + np.maximum(self.mval[:, None],
                                              self.val[:, None] + q),
                self.lt[:, None] + q + self.mval[:, None])
            old_over = np.maximum(self.lt + self.mval - self.capacity, 0.0)
            out += np.maximum(new_peak - cap, 0.0) - old_over[:, None]
            out[:, 0] = 0.0
            if self.variant is Variant.CVRPBLTW:
                arr = self.arrivals_to()
                out += np.maximum(arr - self.tw_hi[self.ii], 0.0)
                step = self.dstack[self.ii, self.current]
                ell = self.duration_limit
                old_dur = np.maximum(self.route_len - ell, 0.0)
                out += (np.maximum(self.route_len[:, None] + step - ell, 0.0)
                        - old_dur[:, None])
        elif self.variant is Variant.TSPDL:
            out += np.maximum(self.onboard[:, None] - self.draft[self.ii], 0.0)
        elif self.variant is Variant.SOP:
            out += self.remaining_pred
        return out

    def step_features(self) -> np.ndarray:
        """(R, k) step context features, min-max normalized by instance constants."""
        if self.variant in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
            return np.stack([self.time, self.n_visited / self.num_nodes], axis=1)
        if self.variant is Variant.CVRP:
            return np.stack([(self.capacity - self.lt - self.val) / self.capacity],
                            axis=1)
        if self.variant is Variant.CVRPBLTW:
            onboard = self.lt + self.val
            return np.stack([
                (self.capacity - onboard) / self.capacity,
                self.time / self.tw_hi[self.ii, 0],
                self.route_len / self.duration_limit,
            ], axis=1)
        if self.variant is Variant.TSPDL:
            total = np.maximum(self.demand[self.ii].sum(axis=1), 1.0)
            return np.stack([self.onboard / total], axis=1)
        return np.stack([self.n_visited / self.num_nodes], axis=1)

    # -- transitions -----------------------------------------------------------

    def advance(self, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.int64)
        rows = np.arange(self.R)
        step = self.dstack[self.ii, self.current, actions]
        arrival = self.time + step / self.scale
        if self.variant in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
            self.time = np.maximum(arrival, self.tw_lo[self.ii, actions])
        elif self.variant is Variant.CVRPBLTW:
            self.time = np.maximum(arrival, self.tw_lo[self.ii, actions]) + self.service
        self.route_len = self.route_len + step
        if self.variant in (Variant.CVRP, Variant.CVRPBLTW):
            q = self.demand[self.ii, actions]
            back = np.zeros(self.R, dtype=bool)
            if self.variant is Variant.CVRPBLTW:
                back = self.backhaul[self.ii, actions]
            is_cust = actions != 0
            lh = is_cust & ~back
            bh = is_cust & back
            self.lt = self.lt + np.where(lh, q, 0.0)
            self.val = self.val + np.where(bh, q, 0.0) - np.where(lh, q, 0.0)
            self.mval = np.maximum(self.mval, self.val)
            ret = actions == 0
            if ret.any():
                self.lt[ret] = 0.0
                self.val[ret] = 0.0
                self.mval[ret] = 0.0
                self.time[ret] = 0.0
                self.route_len[ret] = 0.0
        if self.variant is Variant.TSPDL:
            self.onboard = self.onboard - self.demand[self.ii, actions]
        if self.variant is Variant.SOP:
            for r in range(self.R):
                for b in self._succ_of[self.ii[r]][int(actions[r])]:
                    self.remaining_pred[r, b] -= 1
        is_customer = actions != 0 if self.multi else np.ones(self.R, dtype=bool)
        self.visited[rows, actions] |= is_customer
        self.n_visited = self.n_visited + is_customer
        self.current = actions
        self.history.append(actions.copy())

    def solutions(self) -> list[Solution]:
        """Assemble finished rollouts into Solution values."""
        acts = np.stack(self.history, axis=1) if self.history else np.zeros(
            (self.R, 0), dtype=np.int64)
        out = []
        for r in range(self.R):
            labels = acts[r]
            if self.multi:
                routes, cur = [], []
                for a in labels:
                    if a == 0:
                        routes.append(cur)
                        cur = []
                    else:
                        cur.append(int(a))
                if cur:
                    routes.append(cur)
                routes = [x for x in routes if x]
                out.append(from_routes(routes, self.n))
            else:
                out.append(from_permutation(np.concatenate([[0], labels]), self.n))
        return out


def unmask_fallback(state: ConstructState, result: MaskResult) -> np.ndarray:
    """Resolve dead ends by unmasking the minimum-incremental-violation node.

    Ties break by earliest time-window end, then by node index.  Returns the
    updated mask (also updated in place).
    """
    dead = result.dead_end
    if not dead.any():
        return result.mask
    inc = state.incremental_violation()
    if state.instances[0].tw is not None:
        tw_end = state.tw_hi[state.ii]
    else:
        tw_end = np.zeros((state.R, state.num_nodes))
    score = inc + 1e-9 * tw_end
    score = np.where(state.visited, np.inf, score)
    if state.multi:
        score[:, 0] = np.inf
    pick = np.argmin(score, axis=1)
    rows = np.flatnonzero(dead)
    result.mask[rows, pick[rows]] = False
    return result.mask


def step_mask(instance: Instance, partial, mode: MaskMode | str) -> MaskResult:
    """Mask over node labels for a single partial tour.

    ``partial`` is the visit sequence so far as node labels, starting at the
    designated start (single-tour) or the depot (multi-route, label 0 marks
    each return).  An all-masked result with customers remaining is the
    dead-end signal; the caller decides the fallback.
    """
    partial = [int(x) for x in partial]
    state = ConstructState(instance, 1)
    if partial:
        if partial[0] != 0:
            raise ParameterError("partial tours start at node 0")
        for a in partial[1:]:
            state.advance(np.array([a]))
    return state.candidate_mask(mode)
