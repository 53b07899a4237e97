"""Per-variant feature builders for the encoder and the refinement decoder."""

from __future__ import annotations

import numpy as np

from ..feaseval import EvalReport
from ..instances import Instance, Variant
from ..solution import Solution

NODE_FEATURE_WIDTH = {
    Variant.TSPTW_HARD: 4,
    Variant.TSPTW_MEDIUM: 4,
    Variant.CVRPBLTW: 6,
    Variant.CVRP: 3,
    Variant.TSPDL: 4,
    Variant.SOP: 4,
}

STEP_FEATURE_WIDTH = {
    Variant.TSPTW_HARD: 2,
    Variant.TSPTW_MEDIUM: 2,
    Variant.CVRPBLTW: 3,
    Variant.CVRP: 1,
    Variant.TSPDL: 1,
    Variant.SOP: 1,
}

REFINE_FEATURE_WIDTH = {
    Variant.TSPTW_HARD: 4,
    Variant.TSPTW_MEDIUM: 4,
    Variant.CVRPBLTW: 8,
    Variant.CVRP: 4,
    Variant.TSPDL: 4,
    Variant.SOP: 3,
}

HISTORY_LEN = 3


def node_features(instance: Instance) -> np.ndarray:
    """(num_nodes, k) static per-node inputs, normalized to the unit scale."""
    v = instance.variant
    xy = instance.coords
    if v in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
        return np.concatenate([xy, instance.tw], axis=1)
    if v is Variant.CVRPBLTW:
        q = instance.demand / instance.capacity
        q = np.where(instance.backhaul, -q, q)  # backhaul demand enters signed
        u0 = instance.tw[0, 1]
        ell = np.full((instance.num_nodes, 1),
                      instance.duration_limit / u0)
        return np.concatenate([xy, q[:, None], instance.tw / u0, ell], axis=1)
    if v is Variant.CVRP:
        q = instance.demand / instance.capacity
        return np.concatenate([xy, q[:, None]], axis=1)
    if v is Variant.TSPDL:
        total = max(float(instance.demand.sum()), 1.0)
        return np.concatenate([xy, instance.demand[:, None] / total,
                               instance.draft_limit[:, None] / total], axis=1)
    deg_in = np.zeros(instance.n)
    deg_out = np.zeros(instance.n)
    for a, b in instance.precedence:
        deg_out[a] += 1
        deg_in[b] += 1
    scale = max(instance.n - 1, 1)
    return np.concatenate([xy, deg_in[:, None] / scale,
                           deg_out[:, None] / scale], axis=1)


def expanded_node_features(instance: Instance, n_dep: int) -> np.ndarray:
    """Node features per expanded id (depot row repeated for each copy)."""
    feats = node_features(instance)
    if n_dep == 0:
        return feats
    return np.concatenate([np.repeat(feats[:1], n_dep, axis=0), feats[1:]],
                          axis=0)


def _length_scale(instance: Instance) -> float:
    if instance.variant is Variant.CVRPBLTW:
        return instance.duration_limit
    return float(np.sqrt(instance.num_nodes))


def refine_features(instance: Instance, solution: Solution,
                    report: EvalReport) -> np.ndarray:
    """(size, k) node-level refinement inputs aligned with expanded ids.

    Built from the evaluation's per-node records: arrival times, loads,
    cumulative route length, the violation incurred at the node, and suffix
    or prefix infeasibility flags.
    """
    v = instance.variant
    per = report.per_node
    L = solution.size
    viol_seq = per["violation"].copy()
    if "return_violation" in per:
        viol_seq[0] += per["return_violation"][0]  # the wrap ends at the start
    pre_bad = (np.cumsum(viol_seq) > 0).astype(np.float64)
    post_bad = (np.cumsum(viol_seq[::-1])[::-1] > 0).astype(np.float64)
    if v in (Variant.TSPTW_HARD, Variant.TSPTW_MEDIUM):
        last_arrival = np.full(L, per["arrival"][-1])
        cols = np.stack([per["arrival"], viol_seq, last_arrival, post_bad], axis=1)
    elif v is Variant.CVRPBLTW:
        u0 = instance.tw[0, 1]
        depot_flag = (solution.seq < solution.n_dep).astype(np.float64)
        labels = solution.label_seq()
        back_flag = instance.backhaul[labels].astype(np.float64)
        cols = np.stack([
            depot_flag, back_flag, viol_seq,
            per["arrival"] / u0,
            per["cum_length"] / instance.duration_limit,
            per["load"] / instance.capacity,
            pre_bad, post_bad,
        ], axis=1)
    elif v is Variant.CVRP:
        depot_flag = (solution.seq < solution.n_dep).astype(np.float64)
        cols = np.stack([depot_flag, viol_seq,
                         per["load"] / instance.capacity,
                         per["cum_length"] / _length_scale(instance)], axis=1)
    elif v is Variant.TSPDL:
        total = max(float(instance.demand.sum()), 1.0)
        cols = np.stack([per["load"] / total, viol_seq,
                         per["cum_length"] / _length_scale(instance),
                         post_bad], axis=1)
    else:
        cols = np.stack([np.arange(L) / L, viol_seq, post_bad], axis=1)
    # reorder from visit order to expanded-id order
    out = np.empty_like(cols)
    out[solution.seq] = cols
    return out
