"""Attention-based next-POI base model.

One self-attention layer over embedded check-ins, with spatiotemporal gap
matrices added to the attention logits, candidate scoring against the
encoded sequence, and a sigmoid cross-entropy prediction loss. All forward
math is written against the numerics graph primitives so the same code
path serves evaluation and gradient-based training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import PoiCatalog, Trajectory, discretize_time
from .exceptions import ContractError
from .geo import haversine_km, pairwise_haversine_km

N_TIME_SLOTS = 168

# The exchangeable parameter set: everything devices share with neighbors.
CORE_KEYS = ("poi_emb", "time_emb", "unit_spatial", "unit_temporal",
             "w_query", "w_key", "w_value")


def init_core_params(n_pois: int, d: int, rng: np.random.Generator) -> nm.ParamStore:
    """Fresh model parameters, i.i.d. uniform in [-0.1, 0.1]."""
    u = lambda *shape: rng.uniform(-0.1, 0.1, shape)
    return nm.ParamStore({
        "poi_emb": u(n_pois, d),
        "time_emb": u(N_TIME_SLOTS, d),
        "unit_spatial": u(d),
        "unit_temporal": u(d),
        "w_query": u(d, d),
        "w_key": u(d, d),
        "w_value": u(d, d),
    })


def latent_dim(params) -> int:
    return params["poi_emb"].shape[1]


@dataclass
class TrajectoryContext:
    """Precomputed index/geometry arrays for one trajectory."""

    poi_idx: np.ndarray      # (M,) catalog row per check-in
    slot_idx: np.ndarray     # (M,) weekly hour slot per check-in
    coords: np.ndarray       # (M, 2) lon/lat per check-in
    times: np.ndarray        # (M,) seconds
    spatial_gaps: np.ndarray  # (M, M) km
    temporal_gaps: np.ndarray  # (M, M) hours

    @classmethod
    def build(cls, traj: Trajectory, catalog: PoiCatalog) -> "TrajectoryContext":
        poi_idx = np.array([catalog.index(c.poi) for c in traj.checkins])
        slot_idx = np.array([discretize_time(c.timestamp) for c in traj.checkins])
        coords = catalog.coords[poi_idx]
        times = np.array([c.timestamp for c in traj.checkins], dtype=float)
        spatial = pairwise_haversine_km(coords, coords)
        temporal = np.abs(times[:, None] - times[None, :]) / 3600.0
        return cls(poi_idx, slot_idx, coords, times, spatial, temporal)

    def __len__(self):
        return len(self.poi_idx)

    def prefix(self, m: int) -> "TrajectoryContext":
        return TrajectoryContext(
            self.poi_idx[:m], self.slot_idx[:m], self.coords[:m], self.times[:m],
            self.spatial_gaps[:m, :m], self.temporal_gaps[:m, :m])


# ---------------------------------------------------------------------------
# Graph builders (operate on a dict of Vars or raw arrays)
# ---------------------------------------------------------------------------

def sequence_input_graph(p, ctx: TrajectoryContext, dropout=None):
    """Embedded sequence: row m = poi_emb[p_m] + time_emb[slot_m]."""
    x = nm.gather(nm.lift(p["poi_emb"]), ctx.poi_idx) + \
        nm.gather(nm.lift(p["time_emb"]), ctx.slot_idx)
    if dropout is not None:
        x = x * nm.lift(dropout)
    return x


def relation_graph(p, spatial_gaps, temporal_gaps):
    """Gap matrix: entry(a,b) = s_ab * sum(unit_spatial) + t_ab * sum(unit_temporal)."""
    us = nm.sum_(nm.lift(p["unit_spatial"]))
    ut = nm.sum_(nm.lift(p["unit_temporal"]))
    return nm.lift(spatial_gaps) * us + nm.lift(temporal_gaps) * ut


def attention_graph(p, x, rel):
    """One self-attention layer; rows of the softmax normalize over keys."""
    d = nm.lift(p["w_query"]).value.shape[0]
    q = x @ nm.lift(p["w_query"])
    k = x @ nm.lift(p["w_key"])
    v = x @ nm.lift(p["w_value"])
    scores = (q @ k.T + rel) / float(np.sqrt(d))
    return nm.softmax(scores, axis=1) @ v


def candidate_scores_graph(p, encoded, cand_idx, cand_spatial, cand_temporal):
    """Visit likelihood per candidate.

    The softmax runs across the candidate axis at each visited position
    (a row-wise softmax over positions would give every candidate the same
    total mass); scores then sum over the positions.
    """
    d = nm.lift(p["w_query"]).value.shape[0]
    e_cand = nm.gather(nm.lift(p["poi_emb"]), cand_idx)
    rel = relation_graph(p, cand_spatial, cand_temporal)
    logits = (e_cand @ encoded.T + rel) / float(np.sqrt(d))
    return nm.sum_(nm.softmax(logits, axis=0), axis=1)


def poi_loss_graph(alpha, n_neg: int):
    """-log sigmoid(pos) - (1/n_neg) * sum log(1 - sigmoid(neg)).

    `alpha` holds the positive's score first, then n_neg negative scores.
    Sigmoid outputs are clamped to [1e-12, 1-1e-12] before the log.
    """
    sig = nm.clip(nm.sigmoid(alpha), 1e-12, 1.0 - 1e-12)
    pos_mask = np.zeros(alpha.value.shape)
    pos_mask[0] = 1.0
    neg_mask = (1.0 - pos_mask) / float(n_neg)
    pos_term = nm.sum_(nm.lift(pos_mask) * nm.log(sig))
    neg_term = nm.sum_(nm.lift(neg_mask) * nm.log(1.0 - sig))
    return -1.0 * (pos_term + neg_term)


def _candidate_gaps(catalog, cand_idx, ctx, query_time):
    cand_coords = catalog.coords[np.asarray(cand_idx)]
    spatial = pairwise_haversine_km(cand_coords, ctx.coords)
    temporal = np.abs(float(query_time) - ctx.times)[None, :] / 3600.0
    temporal = np.broadcast_to(temporal, spatial.shape).copy()
    return spatial, temporal


# ---------------------------------------------------------------------------
# Numeric wrappers
# ---------------------------------------------------------------------------

def embed_sequence(traj: Trajectory, catalog: PoiCatalog, params) -> np.ndarray:
    ctx = TrajectoryContext.build(traj, catalog)
    return sequence_input_graph(params, ctx).value


def relation_matrix(traj: Trajectory, catalog: PoiCatalog, params) -> np.ndarray:
    ctx = TrajectoryContext.build(traj, catalog)
    return relation_graph(params, ctx.spatial_gaps, ctx.temporal_gaps).value


def self_attention(x: np.ndarray, rel: np.ndarray, params) -> np.ndarray:
    if x.shape[0] != rel.shape[0] or rel.shape[0] != rel.shape[1]:
        raise ContractError("sequence/relation shapes disagree")
    return attention_graph(params, nm.lift(x), nm.lift(rel)).value


def score_candidates(traj: Trajectory, catalog: PoiCatalog, params,
                     candidates: list[str], query_time: int) -> np.ndarray:
    """Scores for `candidates` given the full visited sequence.

    The candidate-side temporal gap uses `query_time` (the target check-in's
    timestamp during training, the held-out timestamp at evaluation).
    """
    if not candidates:
        raise ContractError("candidate list is empty")
    ctx = TrajectoryContext.build(traj, catalog)
    cand_idx = np.array([catalog.index(c) for c in candidates])
    x = sequence_input_graph(params, ctx)
    rel = relation_graph(params, ctx.spatial_gaps, ctx.temporal_gaps)
    encoded = attention_graph(params, x, rel)
    sp, tp = _candidate_gaps(catalog, cand_idx, ctx, query_time)
    return candidate_scores_graph(params, encoded, cand_idx, sp, tp).value


def poi_loss(alpha_pos: float, alpha_negs) -> float:
    """Prediction loss for one positive and its negative scores."""
    alpha_negs = np.atleast_1d(np.asarray(alpha_negs, dtype=float))
    if alpha_negs.size < 1:
        raise ContractError("need at least one negative score")
    alpha = np.concatenate([[float(alpha_pos)], alpha_negs])
    return float(poi_loss_graph(nm.lift(alpha), alpha_negs.size).value)


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def _sample_loss_graph(p, ctx, target_pos, cand_idx, catalog, n_neg, dropout):
    prefix = ctx.prefix(target_pos)
    x = sequence_input_graph(p, prefix, dropout)
    rel = relation_graph(p, prefix.spatial_gaps, prefix.temporal_gaps)
    encoded = attention_graph(p, x, rel)
    sp, tp = _candidate_gaps(catalog, cand_idx, prefix, ctx.times[target_pos])
    alpha = candidate_scores_graph(p, encoded, cand_idx, sp, tp)
    return poi_loss_graph(alpha, n_neg)


def draw_negatives(ctx: TrajectoryContext, n_pois: int, n_neg: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniform negatives from the user's unvisited POIs, no replacement."""
    unvisited = np.setdiff1d(np.arange(n_pois), ctx.poi_idx)
    if unvisited.size == 0:
        raise ContractError("user visited every POI; cannot sample negatives")
    take = min(n_neg, unvisited.size)
    return rng.choice(unvisited, size=take, replace=False)


def train_local_epoch(traj: Trajectory, catalog: PoiCatalog, params, cfg,
                      rng: np.random.Generator):
    """One pass of sliding next-POI targets in mini-batches of cfg.batch.

    Every prefix x_1..x_m predicts x_{m+1}; negatives are redrawn from the
    user's unvisited POIs each epoch. Returns (updated params, mean loss
    per positive).
    """
    if len(traj) < 2:
        raise ContractError("need at least two check-ins to train")
    ctx = TrajectoryContext.build(traj, catalog)
    targets = list(range(1, len(ctx)))
    negatives = {
        t: draw_negatives(ctx, len(catalog), cfg.n_neg, rng) for t in targets
    }
    total = 0.0
    for start in range(0, len(targets), cfg.batch):
        batch = targets[start:start + cfg.batch]
        masks = {}
        if cfg.dropout > 0.0:
            for t in batch:
                masks[t] = nm.dropout_mask((t, latent_dim(params)), cfg.dropout, rng)

        def batch_loss(p):
            loss = None
            for t in batch:
                cand_idx = np.concatenate([[ctx.poi_idx[t]], negatives[t]])
                term = _sample_loss_graph(p, ctx, t, cand_idx, catalog,
                                          len(negatives[t]), masks.get(t))
                loss = term if loss is None else loss + term
            return loss

        loss, g = nm.grad(batch_loss, params)
        params = nm.sgd_step(params, g, cfg.lr)
        total += loss
    return params, total / len(targets)
