"""Unified encoder with two decoding heads: next-node construction and
short-horizon refinement (anchor-chain k-opt or remove-and-reinsert)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import nncore as nn
from ..errors import ManifestError, ParameterError
from ..instances import Instance, Variant
from ..nncore import (Dense, EncoderLayer, MultiHeadAttention, ParamStore,
                      ScoreFusion, Tensor)
from .features import (NODE_FEATURE_WIDTH, REFINE_FEATURE_WIDTH,
                       STEP_FEATURE_WIDTH, HISTORY_LEN)

CONSTRUCT = "construct"
REFINE = "refine"


@dataclass
class PolicyConfig:
    variant: Variant
    operator: str = "kopt"            # refinement backbone: "kopt" | "rr"
    d: int = 128
    d_ff: int = 512
    n_layers: int = 6
    heads: int = 8
    fusion_hidden: int = 8
    zeta: float = 10.0                # logit clipping scale
    k_max: int = 4                    # k-opt pick cap
    shared_encoder: bool = True
    profile: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.operator not in ("kopt", "rr"):
            raise ParameterError(f"unknown operator {self.operator!r}")

    @classmethod
    def desk(cls, variant, operator="kopt", seed=0, **kw):
        """Small dimensions so the full stack trains in minutes on a CPU."""
        return cls(variant=variant, operator=operator, d=32, d_ff=128,
                   n_layers=2, heads=4, profile="desk", seed=seed, **kw)

    def manifest(self) -> dict:
        return {
            "variant": self.variant.value,
            "operator": self.operator,
            "d": self.d,
            "d_ff": self.d_ff,
            "n_layers": self.n_layers,
            "heads": self.heads,
            "fusion_hidden": self.fusion_hidden,
            "zeta": self.zeta,
            "k_max": self.k_max,
            "shared_encoder": self.shared_encoder,
            "profile": self.profile,
            "node_features": NODE_FEATURE_WIDTH[self.variant],
            "step_features": STEP_FEATURE_WIDTH[self.variant],
            "refine_features": REFINE_FEATURE_WIDTH[self.variant],
        }


class Policy:
    """All learnable tensors plus the forward passes of both paradigms."""

    def __init__(self, config: PolicyConfig):
        self.config = config
        self.variant = config.variant
        rng = np.random.Generator(np.random.Philox(key=np.uint64(config.seed)))
        d = config.d
        store = ParamStore()
        self.store = store
        k_n = NODE_FEATURE_WIDTH[config.variant]
        k_s = STEP_FEATURE_WIDTH[config.variant]
        k_r = REFINE_FEATURE_WIDTH[config.variant]
        self.init_proj = Dense(store, "enc.init", k_n, d, rng)
        self.layers = [EncoderLayer(store, f"enc.l{j}", d, config.d_ff,
                                    config.heads, rng)
                       for j in range(config.n_layers)]
        if not config.shared_encoder:
            self.r_init_proj = Dense(store, "renc.init", k_n, d, rng)
            self.r_layers = [EncoderLayer(store, f"renc.l{j}", d, config.d_ff,
                                          config.heads, rng)
                             for j in range(config.n_layers)]
        else:
            self.r_init_proj = self.init_proj
            self.r_layers = self.layers
        # positional side of the refinement encoder
        self.pos_q = store.new("pos.wq", (d, d), rng)
        self.pos_k = store.new("pos.wk", (d, d), rng)
        self.fusion = ScoreFusion(store, "pos.fusion", rng, config.fusion_hidden)
        # construction decoder
        self.cdec_ctx = Dense(store, "cdec.ctx", d + k_s, d, rng, bias=False)
        self.cdec_glimpse = MultiHeadAttention(store, "cdec.glimpse", d,
                                               config.heads, rng)
        # refinement decoder
        if config.operator == "kopt":
            self.rdec_feat = Dense(store, "rdec.feat", k_r, d, rng)
            self.rdec_hist = Dense(store, "rdec.hist", HISTORY_LEN, d, rng)
            self.rdec_q1 = Dense(store, "rdec.q1", 4 * d, 3 * d, rng)
            self.rdec_q2 = Dense(store, "rdec.q2", 3 * d, d, rng)
            self.rdec_glimpse = MultiHeadAttention(store, "rdec.glimpse", d,
                                                   config.heads, rng)
            self.rdec_key = store.new("rdec.key", (d, d), rng)
        else:
            self.rdec_feat = Dense(store, "rdec.feat", k_r, d, rng)
            self.rdec_hist = Dense(store, "rdec.hist", HISTORY_LEN, d, rng)
            self.rem_q1 = Dense(store, "rdec.rem.q1", 2 * d, 3 * d, rng)
            self.rem_q2 = Dense(store, "rdec.rem.q2", 3 * d, d, rng)
            self.rem_glimpse = MultiHeadAttention(store, "rdec.rem.glimpse", d,
                                                  config.heads, rng)
            self.rem_key = store.new("rdec.rem.key", (d, d), rng)
            self.ins_q1 = Dense(store, "rdec.ins.q1", 2 * d, 3 * d, rng)
            self.ins_q2 = Dense(store, "rdec.ins.q2", 3 * d, d, rng)
            self.ins_glimpse = MultiHeadAttention(store, "rdec.ins.glimpse", d,
                                                  config.heads, rng)
            self.ins_key = store.new("rdec.ins.key", (d, d), rng)

    # -- encoder ---------------------------------------------------------------

    def encode(self, node_feats: np.ndarray, mode: str = CONSTRUCT,
               positions: np.ndarray | None = None) -> Tensor:
        """(B, N, k) features -> (B, N, d) embeddings.

        REFINE mode also needs ``positions`` (B, N): the cycle position of
        each expanded node, turned into cyclic positional-attention scores and
        fused with the node scores at every layer.
        """
        if mode == CONSTRUCT:
            h = self.init_proj(Tensor(node_feats))
            for layer in self.layers:
                h = layer(h)
            return h
        if positions is None:
            raise ParameterError("refinement encoding needs node positions")
        B, N, _ = node_feats.shape
        d = self.config.d
        table = nn.cpe_table(N, d)
        pos_emb = Tensor(table[np.asarray(positions, dtype=np.int64)])
        pq = nn.matmul(pos_emb, self.pos_q)            # (B, N, d)
        pk = nn.matmul(pos_emb, self.pos_k)
        pos_scores = nn.matmul(pq, nn.swapaxes(pk, -1, -2))  # (B, N, N)
        pos_scores = nn.reshape(pos_scores, (B, 1, N, N))
        ones = np.ones((1, self.config.heads, 1, 1))
        pos_scores = nn.mul(pos_scores, Tensor(ones))  # broadcast over heads
        h = self.r_init_proj(Tensor(node_feats))
        for layer in self.r_layers:
            h = layer(h, pos_scores=pos_scores, fusion=self.fusion)
        return h

    # -- construction decoder ----------------------------------------------------

    def construct_log_probs(self, emb: Tensor, last_idx: np.ndarray,
                            step_feats: np.ndarray,
                            mask: np.ndarray) -> Tensor:
        """(R, N, d) embeddings + state -> (R, N) next-node log-probabilities."""
        R, N, d = emb.shape
        h_last = nn.gather_rows(emb, last_idx)                 # (R, d)
        ctx = nn.concat([h_last, Tensor(step_feats)], axis=1)
        q = nn.reshape(self.cdec_ctx(ctx), (R, 1, d))
        add_mask = nn.additive_mask_from_bool(mask).reshape(R, 1, 1, N)
        glimpse = self.cdec_glimpse(q, emb, emb, additive_mask=add_mask)
        h_a = nn.reshape(glimpse, (R, d))
        compat = nn.reshape(nn.matmul(nn.reshape(h_a, (R, 1, d)),
                                      nn.swapaxes(emb, -1, -2)), (R, N))
        logits = nn.mul(nn.tanh(compat / math.sqrt(d)), self.config.zeta)
        logits = nn.add(logits, nn.additive_mask_from_bool(mask))
        return nn.log_softmax(logits, axis=-1)

    # -- refinement decoders -------------------------------------------------------

    def _node_mix(self, emb: Tensor, refine_feats: np.ndarray) -> Tensor:
        return nn.add(emb, self.rdec_feat(Tensor(refine_feats)))

    def _pointer(self, q: Tensor, mix: Tensor, key_w, glimpse: MultiHeadAttention,
                 mask: np.ndarray) -> Tensor:
        R, N, d = mix.shape
        add_mask = nn.additive_mask_from_bool(mask).reshape(R, 1, 1, N)
        h_a = nn.reshape(glimpse(nn.reshape(q, (R, 1, d)), mix, mix,
                                 additive_mask=add_mask), (R, d))
        keys = nn.matmul(mix, key_w)                            # (R, N, d)
        compat = nn.reshape(nn.matmul(nn.reshape(h_a, (R, 1, d)),
                                      nn.swapaxes(keys, -1, -2)), (R, N))
        logits = nn.mul(nn.tanh(compat / math.sqrt(d)), self.config.zeta)
        logits = nn.add(logits, nn.additive_mask_from_bool(mask))
        return nn.log_softmax(logits, axis=-1)

    def kopt_pick_log_probs(self, emb: Tensor, refine_feats: np.ndarray,
                            history: np.ndarray, prev_idx: np.ndarray | None,
                            anchor_idx: np.ndarray | None,
                            mask: np.ndarray) -> Tensor:
        """One autoregressive pick of the anchor chain: (P, N) log-probs."""
        mix = self._node_mix(emb, refine_feats)
        pooled = nn.tmean(mix, axis=1)                          # (P, d)
        h_prev = pooled if prev_idx is None else nn.gather_rows(mix, prev_idx)
        h_anchor = pooled if anchor_idx is None else nn.gather_rows(mix, anchor_idx)
        hist = self.rdec_hist(Tensor(history))
        q_in = nn.concat([pooled, h_prev, h_anchor, hist], axis=1)
        q = self.rdec_q2(nn.relu(self.rdec_q1(q_in)))
        return self._pointer(q, mix, self.rdec_key, self.rdec_glimpse, mask)

    def rr_removal_log_probs(self, emb: Tensor, refine_feats: np.ndarray,
                             history: np.ndarray, mask: np.ndarray) -> Tensor:
        mix = self._node_mix(emb, refine_feats)
        pooled = nn.tmean(mix, axis=1)
        hist = self.rdec_hist(Tensor(history))
        q = self.rem_q2(nn.relu(self.rem_q1(nn.concat([pooled, hist], axis=1))))
        return self._pointer(q, mix, self.rem_key, self.rem_glimpse, mask), mix

    def rr_insertion_log_probs(self, mix: Tensor, removed_idx: np.ndarray,
                               mask: np.ndarray) -> Tensor:
        pooled = nn.tmean(mix, axis=1)
        h_rem = nn.gather_rows(mix, removed_idx)
        q = self.ins_q2(nn.relu(self.ins_q1(nn.concat([h_rem, pooled], axis=1))))
        return self._pointer(q, mix, self.ins_key, self.ins_glimpse, mask)

    # -- persistence ------------------------------------------------------------------

    def save(self, path):
        nn.save_checkpoint(path, self.store, self.config.manifest())

    @classmethod
    def load(cls, path) -> "Policy":
        manifest, tensors = nn.load_checkpoint(path)
        config = PolicyConfig(
            variant=manifest["variant"], operator=manifest["operator"],
            d=manifest["d"], d_ff=manifest["d_ff"],
            n_layers=manifest["n_layers"], heads=manifest["heads"],
            fusion_hidden=manifest["fusion_hidden"], zeta=manifest["zeta"],
            k_max=manifest["k_max"], shared_encoder=manifest["shared_encoder"],
            profile=manifest["profile"])
        policy = cls(config)
        expected = {"node_features": NODE_FEATURE_WIDTH[config.variant],
                    "step_features": STEP_FEATURE_WIDTH[config.variant],
                    "refine_features": REFINE_FEATURE_WIDTH[config.variant]}
        for key, want in expected.items():
            if manifest.get(key) != want:
                raise ManifestError(f"checkpoint {key}={manifest.get(key)} "
                                    f"does not match this build ({want})")
        nn.restore_into(policy.store, tensors)
        return policy

    def require_variant(self, instance: Instance):
        if instance.variant is not self.variant:
            raise ManifestError(
                f"checkpoint is for {self.variant.value}, dataset is "
                f"{instance.variant.value}")

    def param_count(self) -> int:
        return self.store.count()
