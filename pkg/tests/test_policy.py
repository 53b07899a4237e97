import numpy as np
import pytest

from routerefine import nncore as nn
from routerefine.errors import ManifestError, ParameterError
from routerefine.instances import generate
from routerefine.masks import MaskMode
from routerefine.policy import (CONSTRUCT, REFINE, Policy, PolicyConfig,
                                node_features, rollout_construct,
                                rollout_refine, teacher_forced_log_prob,
                                pad_routes)
from routerefine.solution import Solution, from_routes


@pytest.fixture(scope="module")
def desk_policy():
    return Policy(PolicyConfig.desk("tsptw_hard", seed=3))


@pytest.fixture(scope="module")
def tsptw8():
    return [generate("tsptw_hard", 8, s) for s in range(4)]


def make_rngs(B, base=0):
    return [np.random.Generator(np.random.Philox(key=1000 + base + b))
            for b in range(B)]


def test_encoder_permutation_equivariance(desk_policy, tsptw8):
    inst = tsptw8[0]
    feats = node_features(inst)[None]
    with nn.no_grad():
        h = desk_policy.encode(feats, CONSTRUCT).data
        perm = np.random.Generator(np.random.Philox(key=5)).permutation(8)
        h_perm = desk_policy.encode(feats[:, perm], CONSTRUCT).data
    assert np.allclose(h[:, perm], h_perm, atol=1e-6)


def test_refine_rotation_invariance(desk_policy, tsptw8):
    # rotations of the same cycle canonicalize to identical positions,
    # hence identical refinement embeddings
    from routerefine.solution import from_permutation
    inst = tsptw8[0]
    seq = np.array([0, 3, 1, 5, 2, 7, 4, 6])
    a = from_permutation(seq, 8)
    b = from_permutation(np.roll(seq, -3), 8)  # same cycle, rotated input
    feats = node_features(inst)[None]
    with nn.no_grad():
        ha = desk_policy.encode(feats, REFINE, positions=a.pos()[None]).data
        hb = desk_policy.encode(feats, REFINE, positions=b.pos()[None]).data
    assert np.allclose(ha, hb, atol=1e-5)


def test_construct_and_refine_embeddings_differ(desk_policy, tsptw8):
    inst = tsptw8[0]
    feats = node_features(inst)[None]
    pos = np.arange(8)[None]
    with nn.no_grad():
        hc = desk_policy.encode(feats, CONSTRUCT).data
        hr = desk_policy.encode(feats, REFINE, positions=pos).data
    assert not np.allclose(hc, hr, atol=1e-3)


def test_refine_mode_requires_positions(desk_policy, tsptw8):
    with pytest.raises(ParameterError):
        desk_policy.encode(node_features(tsptw8[0])[None], REFINE)


def test_construct_probabilities_valid(desk_policy, tsptw8):
    res = rollout_construct(desk_policy, tsptw8, S=2,
                            mask_mode=MaskMode.RELAXED, rngs=make_rngs(4))
    assert all(np.isfinite(t.log_probs).all() for t in res.trajectories)
    # inspect one decoder call directly
    feats = np.stack([node_features(i) for i in tsptw8])
    with nn.no_grad():
        emb = desk_policy.encode(feats, CONSTRUCT)
        mask = np.zeros((4, 8), dtype=bool)
        mask[:, 0] = True
        logp = desk_policy.construct_log_probs(
            emb, np.zeros(4, dtype=np.int64), np.zeros((4, 2)), mask)
    probs = np.exp(logp.data)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert probs[:, 0].max() < 1e-12


def test_zeta_zero_gives_uniform(tsptw8):
    pol = Policy(PolicyConfig.desk("tsptw_hard", seed=3, zeta=0.0))
    feats = np.stack([node_features(i) for i in tsptw8])
    mask = np.zeros((4, 8), dtype=bool)
    mask[:, 0] = True
    mask[:, 3] = True
    with nn.no_grad():
        emb = pol.encode(feats, CONSTRUCT)
        logp = pol.construct_log_probs(emb, np.zeros(4, dtype=np.int64),
                                       np.zeros((4, 2)), mask)
    probs = np.exp(logp.data)
    assert np.allclose(probs[:, ~mask[0]], 1.0 / 6, atol=1e-9)


def test_greedy_rollout_deterministic(desk_policy, tsptw8):
    a = rollout_construct(desk_policy, tsptw8, S=1, mask_mode=MaskMode.NONE,
                          greedy=True, record=False)
    b = rollout_construct(desk_policy, tsptw8, S=1, mask_mode=MaskMode.NONE,
                          greedy=True, record=False)
    for x, y in zip(a.solutions, b.solutions):
        assert x == y


def test_sampling_batch_invariant(desk_policy, tsptw8):
    rngs = make_rngs(4)
    full = rollout_construct(desk_policy, tsptw8, S=2,
                             mask_mode=MaskMode.RELAXED, rngs=rngs,
                             record=False)
    rngs2 = make_rngs(4)
    half1 = rollout_construct(desk_policy, tsptw8[:2], S=2,
                              mask_mode=MaskMode.RELAXED, rngs=rngs2[:2],
                              record=False)
    half2 = rollout_construct(desk_policy, tsptw8[2:], S=2,
                              mask_mode=MaskMode.RELAXED, rngs=rngs2[2:],
                              record=False)
    combined = half1.solutions + half2.solutions
    for x, y in zip(full.solutions, combined):
        assert x == y


def test_multistart_distinct_first_customers():
    pol = Policy(PolicyConfig.desk("cvrp", seed=2))
    inst = generate("cvrp", 5, 4)
    res = rollout_construct(pol, [inst], S=5, mask_mode=MaskMode.RELAXED,
                            rngs=make_rngs(1), multistart=True)
    firsts = [sol.label_seq()[1] for sol in res.solutions]
    assert sorted(firsts) == [1, 2, 3, 4, 5]
    with pytest.raises(ParameterError):
        rollout_construct(pol, [inst], S=3, mask_mode=MaskMode.NONE,
                          multistart=True)


def test_log_prob_factorization(desk_policy, tsptw8):
    res = rollout_construct(desk_policy, tsptw8[:2], S=2,
                            mask_mode=MaskMode.RELAXED, rngs=make_rngs(2))
    for r, sol in enumerate(res.solutions):
        stored = res.trajectories[r].log_probs.sum()
        assert stored == pytest.approx(float(res.logp_sum.data[r]), abs=1e-9)
        inst = tsptw8[res.instance_of[r]]
        redo = teacher_forced_log_prob(desk_policy, inst, sol, MaskMode.RELAXED)
        assert float(redo.data[0]) == pytest.approx(stored, abs=1e-9)


def test_construct_gradient_finite_difference(tsptw8):
    pol = Policy(PolicyConfig.desk("tsptw_hard", seed=9))
    inst = tsptw8[0]
    rngs = make_rngs(1, base=50)
    res = rollout_construct(pol, [inst], S=1, mask_mode=MaskMode.NONE, rngs=rngs)
    pol.store.zero_grads()
    res.logp_sum.backward()
    w = pol.store["enc.init.w"]
    auto = w.grad.copy()
    sol = res.solutions[0]
    base = w.data.copy()
    eps = 1e-5
    num = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            w.data[i, j] = base[i, j] + eps
            with nn.no_grad():
                pass
            hi = float(teacher_forced_log_prob(pol, inst, sol, MaskMode.NONE).data[0])
            w.data[i, j] = base[i, j] - eps
            lo = float(teacher_forced_log_prob(pol, inst, sol, MaskMode.NONE).data[0])
            w.data[i, j] = base[i, j]
            num[i, j] = (hi - lo) / (2 * eps)
    denom = np.maximum(np.abs(num), 1e-6)
    assert np.max(np.abs(auto - num) / denom) <= 1e-4


def test_kopt_picks_never_repeat_nonanchor(desk_policy, tsptw8):
    res = rollout_construct(desk_policy, tsptw8, S=1, mask_mode=MaskMode.NONE,
                            rngs=make_rngs(4), record=False)
    starts = [[res.solutions[b]] for b in range(4)]
    ref = rollout_refine(desk_policy, tsptw8, starts, T_R=6,
                         rngs=make_rngs(4, base=9), record=False)
    checked = 0
    for traj in ref.trajectories:
        for act in traj.actions:
            picks = act.picks
            non_anchor = [p for p in picks[1:] if p != picks[0]]
            assert len(set(non_anchor)) == len(non_anchor)
            checked += 1
    assert checked > 0


def test_refine_t0_returns_start(desk_policy, tsptw8):
    res = rollout_construct(desk_policy, tsptw8[:1], S=1,
                            mask_mode=MaskMode.NONE, rngs=make_rngs(1),
                            record=False)
    ref = rollout_refine(desk_policy, tsptw8[:1], [[res.solutions[0]]], T_R=0,
                         record=False)
    assert ref.best_solutions[0] == res.solutions[0]


def test_refine_telescoping_and_monotone(desk_policy, tsptw8):
    res = rollout_construct(desk_policy, tsptw8, S=2,
                            mask_mode=MaskMode.NONE, rngs=make_rngs(4),
                            record=False)
    starts = [[res.solutions[2 * b], res.solutions[2 * b + 1]] for b in range(4)]
    ref = rollout_refine(desk_policy, tsptw8, starts, T_R=5,
                         rngs=make_rngs(4, base=77), record=False)
    for r, traj in enumerate(ref.trajectories):
        assert np.all(np.diff(traj.best_costs) <= 1e-12)
        assert traj.rewards.min() >= 0.0
        assert traj.rewards.sum() == pytest.approx(
            traj.best_costs[0] - traj.best_costs[-1], abs=1e-9)
        assert ref.best_reports[r].relaxed_cost == pytest.approx(
            traj.best_costs[-1], abs=1e-9)


def test_rr_rollout_and_joint_logprob():
    pol = Policy(PolicyConfig.desk("cvrpbltw", operator="rr", seed=5))
    insts = [generate("cvrpbltw", 8, s) for s in range(2)]
    res = rollout_construct(pol, insts, S=2, mask_mode=MaskMode.RELAXED,
                            rngs=make_rngs(2), record=False)
    starts = [[res.solutions[2 * b], res.solutions[2 * b + 1]] for b in range(2)]
    ref = rollout_refine(pol, insts, starts, T_R=4, rngs=make_rngs(2, base=3))
    assert ref.rewards.shape == (4, 4)
    for lp in ref.step_logps:
        assert np.all(np.isfinite(lp.data))
    # customers preserved through rr moves
    for sol in ref.best_solutions:
        assert np.array_equal(np.sort(sol.label_seq()),
                              np.sort(starts[0][0].label_seq()))


def test_pad_routes():
    sol = from_routes([[1, 2], [3]], 3)
    padded = pad_routes(sol, 5)
    assert padded.n_dep == 5
    assert padded.routes() == sol.routes()
    assert padded.routes(keep_empty=True).count([]) == 3


def test_encoder_sharing_and_ablation_flag():
    shared = Policy(PolicyConfig.desk("tsptw_hard", seed=1))
    assert shared.r_layers is shared.layers
    assert not any(n.startswith("renc.") for n in shared.store.params)
    split = Policy(PolicyConfig.desk("tsptw_hard", seed=1, shared_encoder=False))
    assert any(n.startswith("renc.") for n in split.store.params)
    assert split.param_count() > shared.param_count()


def test_param_counts():
    desk = Policy(PolicyConfig.desk("tsptw_hard", seed=0))
    assert desk.param_count() == 53153  # desk-profile regression value
    full_kopt = Policy(PolicyConfig("tsptw_hard", operator="kopt"))
    full_rr = Policy(PolicyConfig("tsptw_hard", operator="rr"))
    assert abs(full_kopt.param_count() - 1.64e6) / 1.64e6 <= 0.05
    assert abs(full_rr.param_count() - 1.72e6) / 1.72e6 <= 0.05


def test_checkpoint_roundtrip_and_manifest_guard(tmp_path, desk_policy, tsptw8):
    path = tmp_path / "pol.ckpt"
    desk_policy.save(path)
    loaded = Policy.load(path)
    feats = node_features(tsptw8[0])[None]
    with nn.no_grad():
        a = desk_policy.encode(feats, CONSTRUCT).data
        b = loaded.encode(feats, CONSTRUCT).data
    assert np.array_equal(a, b)
    other = generate("cvrp", 5, 1)
    with pytest.raises(ManifestError):
        loaded.require_variant(other)
