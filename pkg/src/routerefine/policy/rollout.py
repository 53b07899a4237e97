"""Batched construction and refinement rollouts.

Rollouts are vectorized over B instances x S starts.  Sampling draws from one
generator per instance so results do not depend on how instances are grouped
into batches.  Graph tensors for the losses are recorded only when requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nncore as nn
from ..errors import ParameterError
from ..feaseval import (DEFAULT_PENALTIES, EvalReport, better_solution,
                        evaluate, refinement_reward)
from ..instances import Instance, Variant
from ..masks import ConstructState, MaskMode, unmask_fallback
from ..solution import Solution
from ..tourops import RefineAction, apply_kopt, apply_rr
from .features import HISTORY_LEN, expanded_node_features, node_features, refine_features
from .network import CONSTRUCT, REFINE, Policy


@dataclass
class Trajectory:
    actions: list
    log_probs: np.ndarray
    entropies: np.ndarray
    rewards: np.ndarray
    best_costs: np.ndarray
    best_feasible: np.ndarray


@dataclass
class ConstructResult:
    solutions: list[Solution]
    reports: list[EvalReport]
    trajectories: list[Trajectory]
    logp_sum: "nn.Tensor | None"
    entropy_sum: "nn.Tensor | None"
    masked_fraction: float
    instance_of: np.ndarray    # row -> instance index


@dataclass
class RefineResult:
    start_solutions: list[Solution]
    best_solutions: list[Solution]
    best_reports: list[EvalReport]
    trajectories: list[Trajectory]
    step_logps: list
    step_entropies: list
    rewards: np.ndarray        # (T_R, P)
    instance_of: np.ndarray


def _sample_rows(log_probs: np.ndarray, rows: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    probs = np.exp(log_probs[rows])
    probs = probs / probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random((len(rows), 1))
    return np.minimum((cum < u).sum(axis=1), probs.shape[1] - 1)


def choose_actions(log_probs: np.ndarray, instance_of: np.ndarray,
                   rngs, greedy: bool) -> np.ndarray:
    if greedy:
        return np.argmax(log_probs, axis=1)
    actions = np.empty(log_probs.shape[0], dtype=np.int64)
    for b in np.unique(instance_of):
        rows = np.flatnonzero(instance_of == b)
        actions[rows] = _sample_rows(log_probs, rows, rngs[b])
    return actions


def rollout_construct(policy: Policy, instances: list[Instance], S: int,
                      mask_mode: MaskMode | str, rngs=None, greedy: bool = False,
                      multistart: bool = False, record: bool = True,
                      penalties=DEFAULT_PENALTIES) -> ConstructResult:
    """S solutions per instance with per-step log-probabilities and entropies.

    Multi-start (CVRP) forces S distinct first customers with no probability
    contribution; sampling variants draw every step.  Dead ends under strict
    masking fall back to the minimum-incremental-violation node.
    """
    if isinstance(instances, Instance):
        instances = [instances]
    B = len(instances)
    variant = instances[0].variant
    if multistart:
        if variant is not Variant.CVRP:
            raise ParameterError("multi-start applies to CVRP")
        if S != instances[0].n:
            raise ParameterError("multi-start needs S == n forced first moves")
    if rngs is None:
        rngs = [np.random.Generator(np.random.Philox(key=17 + 13 * b))
                for b in range(B)]
    R = B * S
    ii = np.repeat(np.arange(B), S)
    feats = np.stack([node_features(i) for i in instances])
    ctx = nn.no_grad() if not record else _null_context()
    with ctx:
        emb_B = policy.encode(feats, CONSTRUCT)
        emb = nn.take(emb_B, ii, axis=0) if B > 1 or S > 1 else emb_B
        state = ConstructState(instances, S)
        if multistart:
            first = np.tile(np.arange(1, S + 1), B)
            state.advance(first)
        logp_terms = []
        ent_terms = []
        step_logs: list[np.ndarray] = []
        step_ents: list[np.ndarray] = []
        step_acts: list[np.ndarray] = []
        masked_frac_num = 0.0
        masked_frac_den = 0
        while True:
            done = state.done()
            if done.all():
                break
            res = state.candidate_mask(mask_mode)
            unmask_fallback(state, res)
            mask = res.mask
            if state.multi and done.any():
                mask[done] = True
                mask[done, 0] = False  # finished rows idle at the depot
            live = ~done
            masked_frac_num += float((res.masked_count[live] /
                                      np.maximum(res.candidates[live], 1)).sum())
            masked_frac_den += int(live.sum())
            logp = policy.construct_log_probs(emb, state.current,
                                              state.step_features(), mask)
            actions = choose_actions(logp.data, ii, rngs, greedy)
            active = live.astype(np.float64)
            chosen = nn.mul(nn.gather_scalars(logp, actions), nn.Tensor(active))
            ent = nn.mul(nn.entropy_from_log_probs(logp), nn.Tensor(active))
            logp_terms.append(chosen)
            ent_terms.append(ent)
            step_logs.append(chosen.data.copy())
            step_ents.append(ent.data.copy())
            step_acts.append(actions.copy())
            state.advance(actions)
        logp_sum = _accumulate(logp_terms)
        entropy_sum = _accumulate(ent_terms)
    solutions = state.solutions()
    reports = [evaluate(instances[ii[r]], solutions[r], penalties)
               for r in range(R)]
    trajectories = []
    acts = np.stack(step_acts, axis=1) if step_acts else np.zeros((R, 0), int)
    logs = np.stack(step_logs, axis=1) if step_logs else np.zeros((R, 0))
    ents = np.stack(step_ents, axis=1) if step_ents else np.zeros((R, 0))
    for r in range(R):
        cost = reports[r].relaxed_cost
        trajectories.append(Trajectory(
            actions=acts[r].tolist(), log_probs=logs[r], entropies=ents[r],
            rewards=np.array([-cost]), best_costs=np.array([cost]),
            best_feasible=np.array([reports[r].feasible])))
    frac = masked_frac_num / masked_frac_den if masked_frac_den else 0.0
    return ConstructResult(solutions=solutions, reports=reports,
                           trajectories=trajectories, logp_sum=logp_sum,
                           entropy_sum=entropy_sum, masked_fraction=frac,
                           instance_of=ii)


def _accumulate(terms):
    total = None
    for t in terms:
        total = t if total is None else nn.add(total, t)
    return total


class _null_context:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def pad_routes(solution: Solution, n_dep: int) -> Solution:
    """Append empty routes so the expanded size matches ``n_dep`` copies."""
    if solution.n_dep == n_dep:
        return solution
    if solution.n_dep > n_dep:
        raise ParameterError("cannot shrink the depot-copy count")
    extra = n_dep - solution.n_dep
    old = solution.seq
    seq = np.where(old >= solution.n_dep, old + extra, old)
    seq = np.concatenate([seq, np.arange(solution.n_dep, n_dep)])
    return Solution(seq=seq, n_customers=solution.n_customers, n_dep=n_dep)


def teacher_forced_log_prob(policy: Policy, instance: Instance,
                            solution: Solution, mask_mode: MaskMode | str,
                            emb: "nn.Tensor | None" = None):
    """Graph log-probability of reproducing ``solution`` step by step under
    the construction policy (forced moves excluded, masks as in rollout)."""
    if emb is None:
        emb = policy.encode(node_features(instance)[None], CONSTRUCT)
    state = ConstructState(instance, 1)
    seq = solution.label_seq().tolist()
    if not instance.has_depot:
        actions = seq[1:]
    else:
        actions = seq[1:] + [0]
    terms = []
    for a in actions:
        res = state.candidate_mask(mask_mode)
        unmask_fallback(state, res)
        mask = res.mask
        if mask[0, a]:
            mask[0, a] = False  # teacher forcing may leave the mask set
        logp = policy.construct_log_probs(emb, state.current,
                                          state.step_features(), mask)
        terms.append(nn.gather_scalars(logp, np.array([a])))
        state.advance(np.array([a]))
    return _accumulate(terms)


def rollout_refine(policy: Policy, instances: list[Instance],
                   starts: list[list[Solution]], T_R: int, rngs=None,
                   greedy: bool = False, record: bool = True,
                   penalties=DEFAULT_PENALTIES) -> RefineResult:
    """T_R refinement steps on p start solutions per instance.

    Maintains the feasibility-preferred best-so-far chain; rewards are the
    clamped reductions of the best relaxed cost.  Multi-route starts are
    padded to a common route count so the whole batch shares one cycle size.
    """
    if isinstance(instances, Instance):
        instances = [instances]
    B = len(instances)
    p = len(starts[0])
    if any(len(s) != p for s in starts):
        raise ParameterError("every instance needs the same start count")
    if rngs is None:
        rngs = [np.random.Generator(np.random.Philox(key=23 + 29 * b))
                for b in range(B)]
    ii = np.repeat(np.arange(B), p)
    P = B * p
    flat = [s for group in starts for s in group]
    n_dep = max(s.n_dep for s in flat)
    flat = [pad_routes(s, n_dep) for s in flat]
    L = flat[0].size
    base_feats = np.stack([expanded_node_features(instances[b], n_dep)
                           for b in range(B)])[ii]            # (P, L, k_n)
    operator = policy.config.operator
    current = list(flat)
    reports = [evaluate(instances[ii[r]], current[r], penalties,
                        with_per_node=True) for r in range(P)]
    best_sol = list(current)
    best_cost = np.array([rep.relaxed_cost for rep in reports])
    best_feas = np.array([rep.feasible for rep in reports])
    start_cost = best_cost.copy()
    history = np.tile(np.array([r.feasible for r in reports], dtype=np.float64)
                      [:, None], (1, HISTORY_LEN))
    step_logps = []
    step_entropies = []
    rewards = np.zeros((T_R, P))
    all_actions: list[list[RefineAction]] = [[] for _ in range(P)]
    ctx = nn.no_grad() if not record else _null_context()
    with ctx:
        for t in range(T_R):
            rfeats = np.stack([refine_features(instances[ii[r]], current[r],
                                               reports[r]) for r in range(P)])
            positions = np.stack([s.pos() for s in current])
            emb = policy.encode(base_feats, REFINE, positions=positions)
            if operator == "kopt":
                logp_t, ent_t, actions = _decode_kopt(policy, emb, rfeats,
                                                      history, ii, rngs,
                                                      greedy, L)
                current = [apply_kopt(current[r], actions[r]) for r in range(P)]
            else:
                logp_t, ent_t, actions = _decode_rr(policy, emb, rfeats,
                                                    history, current, ii,
                                                    rngs, greedy, n_dep)
                current = [apply_rr(current[r], actions[r]) for r in range(P)]
            reports = [evaluate(instances[ii[r]], current[r], penalties,
                                with_per_node=True) for r in range(P)]
            for r in range(P):
                rep = reports[r]
                rewards[t, r] = refinement_reward(best_cost[r], rep.relaxed_cost)
                if better_solution(rep.relaxed_cost, rep.feasible,
                                   best_cost[r], best_feas[r]):
                    best_cost[r] = rep.relaxed_cost
                    best_feas[r] = rep.feasible
                    best_sol[r] = current[r]
                all_actions[r].append(actions[r])
            history = np.roll(history, 1, axis=1)
            history[:, 0] = [r.feasible for r in reports]
            step_logps.append(logp_t)
            step_entropies.append(ent_t)
    trajectories = []
    for r in range(P):
        logs = np.array([lp.data[r] for lp in step_logps])
        ents = np.array([e.data[r] for e in step_entropies])
        chain = start_cost[r] - np.concatenate([[0.0], np.cumsum(rewards[:, r])])
        trajectories.append(Trajectory(
            actions=all_actions[r], log_probs=logs, entropies=ents,
            rewards=rewards[:, r].copy(), best_costs=chain,
            best_feasible=np.array([best_feas[r]])))
    best_reports = [evaluate(instances[ii[r]], best_sol[r], penalties)
                    for r in range(P)]
    return RefineResult(start_solutions=flat, best_solutions=best_sol,
                        best_reports=best_reports, trajectories=trajectories,
                        step_logps=step_logps, step_entropies=step_entropies,
                        rewards=rewards, instance_of=ii)


def _decode_kopt(policy, emb, rfeats, history, ii, rngs, greedy, L):
    P = emb.shape[0]
    k_max = policy.config.k_max
    picked = np.zeros((P, L), dtype=bool)
    anchor = None
    prev = None
    active = np.ones(P)
    logp_total = None
    ent_total = None
    picks = [[] for _ in range(P)]
    for kappa in range(k_max):
        mask = picked.copy()
        if anchor is not None:
            mask[np.arange(P), anchor] = False  # anchor re-pick terminates
        logp = policy.kopt_pick_log_probs(emb, rfeats, history, prev, anchor, mask)
        acts = choose_actions(logp.data, ii, rngs, greedy)
        act_t = nn.Tensor(active.copy())
        chosen = nn.mul(nn.gather_scalars(logp, acts), act_t)
        ent = nn.mul(nn.entropy_from_log_probs(logp), act_t)
        logp_total = chosen if logp_total is None else nn.add(logp_total, chosen)
        ent_total = ent if ent_total is None else nn.add(ent_total, ent)
        for r in range(P):
            if active[r]:
                picks[r].append(int(acts[r]))
        if anchor is None:
            anchor = acts.copy()
        else:
            active = active * (acts != anchor)
        picked[np.arange(P), acts] = True
        prev = acts
        if not active.any():
            break
    actions = [RefineAction(operator="kopt", picks=tuple(pk)) for pk in picks]
    return logp_total, ent_total, actions


def _decode_rr(policy, emb, rfeats, history, current, ii, rngs, greedy, n_dep):
    P = emb.shape[0]
    L = current[0].size
    depot_mask = np.zeros((P, L), dtype=bool)
    depot_mask[:, :n_dep] = True
    (logp_rem, mix) = policy.rr_removal_log_probs(emb, rfeats, history, depot_mask)
    removed = choose_actions(logp_rem.data, ii, rngs, greedy)
    ins_mask = np.zeros((P, L), dtype=bool)
    ins_mask[np.arange(P), removed] = True
    logp_ins = policy.rr_insertion_log_probs(mix, removed, ins_mask)
    target = choose_actions(logp_ins.data, ii, rngs, greedy)
    logp_total = nn.add(nn.gather_scalars(logp_rem, removed),
                        nn.gather_scalars(logp_ins, target))
    ent_total = nn.add(nn.entropy_from_log_probs(logp_rem),
                       nn.entropy_from_log_probs(logp_ins))
    actions = []
    for r in range(P):
        pos = current[r].pos()
        rp = int(pos[removed[r]])
        tp = int(pos[target[r]])
        ia = tp - 1 if tp > rp else tp
        actions.append(RefineAction(operator="rr", remove_pos=rp,
                                    insert_after=ia))
    return logp_total, ent_total, actions
