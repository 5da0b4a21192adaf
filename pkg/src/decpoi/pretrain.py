"""Server-side self-supervised pretraining of POI embeddings.

Two signals over the public catalog only: a 3-class pairwise distance
prediction objective and a contrastive POI/category objective. Both train
the shared poi_emb table plus throwaway heads that never leave the server.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numerics as nm
from .data import PoiCatalog
from .exceptions import ConfigError, ContractError
from .geo import haversine_km, pairwise_haversine_km
from .recommender import init_core_params

SMALL_KM = 5.0
MEDIUM_KM = 10.0
PAIR_SAMPLE_CAP = 500

HEAD_KEYS = ("dp_weight", "dp_bias", "cp_bilinear", "cat_emb")


class DistanceLabel(Enum):
    SMALL = 0
    MEDIUM = 1
    LARGE = 2


def distance_label(km: float) -> DistanceLabel:
    """Small iff km <= 5, medium iff 5 < km <= 10, large beyond."""
    if km < 0:
        raise ContractError(f"distance must be >= 0, got {km}")
    if km <= SMALL_KM:
        return DistanceLabel.SMALL
    if km <= MEDIUM_KM:
        return DistanceLabel.MEDIUM
    return DistanceLabel.LARGE


def init_pretrain_heads(n_categories: int, d: int, rng: np.random.Generator) -> nm.ParamStore:
    """Learnable heads used only during pretraining, then discarded.

    dp_weight follows the 3-vector shape scaling the pair dot product; a
    3-vector bias is added so all three decision regions are attainable.
    """
    u = lambda *shape: rng.uniform(-0.1, 0.1, shape)
    return nm.ParamStore({
        "dp_weight": u(3),
        "dp_bias": u(3),
        "cp_bilinear": u(d, d),
        "cat_emb": u(n_categories, d),
    })


# ---------------------------------------------------------------------------
# Distance prediction
# ---------------------------------------------------------------------------

def sample_dp_pairs(catalog: PoiCatalog, rng: np.random.Generator):
    """Training pairs per anchor: every small-distance partner plus up to
    500 randomly chosen medium- and 500 large-distance partners each.

    Returns (i_idx, j_idx, labels) index arrays into the catalog.
    """
    if len(catalog) < 2:
        raise ContractError("need at least two POIs to sample pairs")
    dist = pairwise_haversine_km(catalog.coords, catalog.coords)
    i_list, j_list, y_list = [], [], []
    n = len(catalog)
    for i in range(n):
        others = np.arange(n) != i
        row = dist[i]
        small = np.flatnonzero(others & (row <= SMALL_KM))
        medium = np.flatnonzero(others & (row > SMALL_KM) & (row <= MEDIUM_KM))
        large = np.flatnonzero(others & (row > MEDIUM_KM))
        chosen = [(small, DistanceLabel.SMALL)]
        for pool, label in ((medium, DistanceLabel.MEDIUM), (large, DistanceLabel.LARGE)):
            if pool.size > PAIR_SAMPLE_CAP:
                pool = rng.choice(pool, size=PAIR_SAMPLE_CAP, replace=False)
            chosen.append((np.sort(pool), label))
        for pool, label in chosen:
            i_list.append(np.full(pool.size, i))
            j_list.append(pool)
            y_list.append(np.full(pool.size, label.value))
    return (np.concatenate(i_list), np.concatenate(j_list),
            np.concatenate(y_list))


def dp_loss_graph(p, i_idx, j_idx, labels):
    """Cross-entropy over the three distance classes, summed over pairs."""
    ei = nm.gather(nm.lift(p["poi_emb"]), i_idx)
    ej = nm.gather(nm.lift(p["poi_emb"]), j_idx)
    dots = nm.sum_(ei * ej, axis=1)
    logits = nm.reshape(dots, (-1, 1)) * nm.lift(p["dp_weight"]) + nm.lift(p["dp_bias"])
    probs = nm.clip(nm.softmax(logits, axis=1), 1e-12, 1.0)
    onehot = np.zeros((len(labels), 3))
    onehot[np.arange(len(labels)), labels] = 1.0
    return -1.0 * nm.sum_(nm.lift(onehot) * nm.log(probs))


def dp_loss(pairs, params, heads) -> float:
    i_idx, j_idx, labels = pairs
    if len(i_idx) == 0:
        raise ContractError("no distance pairs supplied")
    merged = dict(params) | {k: heads[k] for k in ("dp_weight", "dp_bias")}
    return float(dp_loss_graph(merged, i_idx, j_idx, labels).value)


# ---------------------------------------------------------------------------
# Category prediction
# ---------------------------------------------------------------------------

def draw_cp_negatives(catalog: PoiCatalog, n_cp: int, rng: np.random.Generator) -> np.ndarray:
    """(|P|, n_cp) negative category indices, excluding each POI's own."""
    if catalog.n_categories <= n_cp:
        raise ConfigError(
            f"need more than {n_cp} categories for {n_cp} negatives")
    negs = np.empty((len(catalog), n_cp), dtype=np.intp)
    for i, own in enumerate(catalog.poi_categories):
        pool = np.delete(np.arange(catalog.n_categories), own)
        negs[i] = rng.choice(pool, size=n_cp, replace=False)
    return negs


def cp_loss_graph(p, poi_idx, pos_cat, neg_cat):
    """Contrastive POI/category loss with a negatives-only denominator.

    f(p, c) = sigmoid(e_p^T W e_c); per anchor the loss is
    -log( exp(f_pos) / sum_n exp(f_neg_n) ).
    """
    e_p = nm.gather(nm.lift(p["poi_emb"]), poi_idx)
    proj = e_p @ nm.lift(p["cp_bilinear"])
    f_pos = nm.sigmoid(nm.sum_(proj * nm.gather(nm.lift(p["cat_emb"]), pos_cat), axis=1))
    denom = None
    for k in range(neg_cat.shape[1]):
        e_c = nm.gather(nm.lift(p["cat_emb"]), neg_cat[:, k])
        f_neg = nm.sigmoid(nm.sum_(proj * e_c, axis=1))
        term = nm.exp(f_neg)
        denom = term if denom is None else denom + term
    return nm.sum_(nm.log(denom) - f_pos)


def cp_loss(catalog: PoiCatalog, params, heads, n_cp: int, rng: np.random.Generator) -> float:
    if n_cp < 1:
        raise ConfigError("n_cp must be >= 1")
    neg_cat = draw_cp_negatives(catalog, n_cp, rng)
    poi_idx = np.arange(len(catalog))
    merged = dict(params) | {k: heads[k] for k in ("cp_bilinear", "cat_emb")}
    return float(cp_loss_graph(merged, poi_idx, catalog.poi_categories, neg_cat).value)


def info_nce_negonly(f_pos: float, f_negs) -> float:
    """Reference form of the per-anchor contrastive loss above."""
    f_negs = np.asarray(f_negs, dtype=float)
    return float(np.log(np.exp(f_negs).sum()) - f_pos)


# ---------------------------------------------------------------------------
# Pretraining loop
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: nm.ParamStore           # poi_emb trained; other core params at init
    heads: nm.ParamStore            # server-only, discarded after this stage
    dp_history: list = field(default_factory=list)   # epoch-mean loss per pair
    cp_history: list = field(default_factory=list)   # epoch-mean loss per POI
    epochs_run: int = 0


def pretrain(catalog: PoiCatalog, cfg, rng: np.random.Generator) -> PretrainResult:
    """Alternating epochs of distance-prediction and category steps.

    Each epoch takes mini-batched gradient steps on the batch-mean of one
    loss, then the other; stops when the combined epoch-mean loss changes
    by less than cfg.pretrain_tol relatively, or at cfg.pretrain_epochs.
    The pair set, negative categories and batch partitions are all drawn
    once up front, so the per-epoch means track a fixed descent target.
    """
    params = init_core_params(len(catalog), cfg.d, rng)
    heads = init_pretrain_heads(catalog.n_categories, cfg.d, rng)
    result = PretrainResult(params, heads)
    if cfg.pretrain_epochs == 0:
        return result

    use_dp = "DP" not in cfg.ablations
    use_cp = "CP" not in cfg.ablations
    cp_lr = cfg.pretrain_lr_cp if cfg.pretrain_lr_cp is not None else cfg.pretrain_lr
    poi_idx = np.arange(len(catalog))
    bs = cfg.pretrain_batch
    if use_dp:
        i_idx, j_idx, labels = sample_dp_pairs(catalog, rng)
        dp_order = rng.permutation(len(i_idx))
    if use_cp:
        neg_cat = draw_cp_negatives(catalog, cfg.n_cp, rng)
        cp_order = rng.permutation(len(catalog))
    prev = None
    for epoch in range(cfg.pretrain_epochs):
        if use_dp:
            dp_total = 0.0
            for start in range(0, len(dp_order), bs):
                sel = dp_order[start:start + bs]

                def batch_dp(p):
                    return dp_loss_graph(p, i_idx[sel], j_idx[sel], labels[sel]) / float(len(sel))

                merged = dict(params) | {k: heads[k] for k in ("dp_weight", "dp_bias")}
                loss, g = nm.grad(batch_dp, merged)
                stepped = nm.sgd_step(nm.ParamStore(merged), g, cfg.pretrain_lr)
                params, heads = _split_back(stepped, params, heads)
                dp_total += loss * len(sel)
            result.dp_history.append(dp_total / len(i_idx))
        if use_cp:
            cp_total = 0.0
            for start in range(0, len(cp_order), bs):
                sel = cp_order[start:start + bs]

                def batch_cp(p):
                    return cp_loss_graph(p, poi_idx[sel], catalog.poi_categories[sel],
                                         neg_cat[sel]) / float(len(sel))

                merged = dict(params) | {k: heads[k] for k in ("cp_bilinear", "cat_emb")}
                loss, g = nm.grad(batch_cp, merged)
                stepped = nm.sgd_step(nm.ParamStore(merged), g, cp_lr)
                params, heads = _split_back(stepped, params, heads)
                cp_total += loss * len(sel)
            result.cp_history.append(cp_total / len(catalog))
        result.epochs_run = epoch + 1
        current = (result.dp_history[-1] if use_dp else 0.0) + \
                  (result.cp_history[-1] if use_cp else 0.0)
        if prev is not None and abs(prev - current) < cfg.pretrain_tol * max(abs(prev), 1e-12):
            break
        prev = current
    result.params = params
    result.heads = heads
    return result


def _split_back(stepped: nm.ParamStore, params: nm.ParamStore, heads: nm.ParamStore):
    new_params = nm.ParamStore({k: stepped[k] if k in stepped else params[k] for k in params})
    new_heads = nm.ParamStore({k: stepped[k] if k in stepped else heads[k] for k in heads})
    return new_params, new_heads
