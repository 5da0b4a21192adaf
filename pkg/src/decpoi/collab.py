"""Decentralized round engine.

Each round: (1) every device takes a local training pass, (2) publishes one
privacy-perturbed parameter snapshot to an in-memory mailbox, (3) builds two
affinity-weighted enhanced models from its geographical and semantic
neighbors, aligns them with a contrastive fusion objective and merges.
Phases are barrier-synchronized; devices touch only their own RNG stream so
serial and parallel execution produce identical results.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .data import Dataset, PoiCatalog, Trajectory
from .exceptions import ConfigError, ContractError, ProtocolError
from .neighbors import NeighborSet
from .privacy import PrivacyBudget, perturb_weights
from .recommender import train_local_epoch

DEVICE_STREAM = 4  # rng namespace tag for per-device streams


@dataclass
class DeviceState:
    """One simulated client; the trajectory never leaves this object."""

    user: str
    trajectory: Trajectory
    params: nm.ParamStore
    fusion: nm.ParamStore          # contrastive fusion head, never exchanged
    rng: np.random.Generator
    round: int = 0

    @property
    def n_pos(self) -> int:
        """Positive samples per local epoch (one per sliding target)."""
        return max(len(self.trajectory) - 1, 1)


@dataclass(frozen=True)
class ParamSnapshot:
    """What a device publishes: perturbed weights only, plus routing header."""

    sender: str
    round: int
    params: nm.ParamStore


def init_devices(train: Dataset, pretrained: nm.ParamStore, cfg, seed: int) -> dict:
    """Every device starts from the same pretrained parameter snapshot."""
    devices = {}
    for idx, user in enumerate(train.users()):
        devices[user] = DeviceState(
            user=user,
            trajectory=train.trajectories[user],
            params=pretrained,
            fusion=nm.ParamStore({
                "comb_bilinear": np.random.default_rng(
                    [seed, DEVICE_STREAM, idx, 1]).uniform(-0.1, 0.1, (cfg.d, cfg.d))}),
            rng=np.random.default_rng([seed, DEVICE_STREAM, idx, 0]),
        )
    return devices


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def affinity(dist: float) -> float:
    """Similarity of a neighbor at the given distance: 1 / (1 + dist)."""
    if dist < 0:
        raise ContractError("distance must be >= 0")
    return 1.0 / (1.0 + dist)


def neighbor_weights(nbrs: NeighborSet) -> np.ndarray:
    """Affinities normalized to sum 1 over the neighbor list."""
    if not nbrs.entries:
        raise ContractError("neighbor set is empty")
    s = np.array([affinity(d) for _, d in nbrs.entries])
    return s / s.sum()


def aggregate(own: nm.ParamStore, snapshots: list, mu: float) -> nm.ParamStore:
    """(1 - mu) * own + mu * weighted sum of neighbor snapshots."""
    if not snapshots:
        raise ContractError("no snapshots to aggregate")
    weights = np.array([w for _, w in snapshots])
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ContractError("aggregation weights must sum to 1")
    out = {}
    for key in own:
        acc = np.zeros_like(own[key])
        for snap, w in snapshots:
            if snap.params[key].shape != own[key].shape:
                raise ContractError(f"snapshot shape mismatch for '{key}'")
            acc += w * snap.params[key]
        out[key] = (1.0 - mu) * own[key] + mu * acc
    return nm.ParamStore(out)


# ---------------------------------------------------------------------------
# Mutual-information fusion of the two enhanced models
# ---------------------------------------------------------------------------

def draw_comb_negatives(anchors: np.ndarray, n_pois: int, n_per_side: int,
                        rng: np.random.Generator):
    """Per anchor: n negatives from the semantic side, n from the geographic."""
    if n_pois <= n_per_side:
        raise ConfigError("need more POIs than negatives per side")
    neg_cat = np.empty((len(anchors), n_per_side), dtype=np.intp)
    neg_geo = np.empty((len(anchors), n_per_side), dtype=np.intp)
    for row, anchor in enumerate(anchors):
        pool = np.delete(np.arange(n_pois), anchor)
        neg_cat[row] = rng.choice(pool, size=n_per_side, replace=False)
        neg_geo[row] = rng.choice(pool, size=n_per_side, replace=False)
    return neg_cat, neg_geo


def _bilinear_sim(a, w, b):
    return nm.sigmoid(nm.sum_((a @ w) * b, axis=1))


def comb_loss_graph(p, anchors, neg_cat, neg_geo):
    """Contrastive alignment of the two POI embedding tables.

    Positives pair the same POI across models; the denominator holds the
    exponentiated similarities of both negative sides.
    """
    w = nm.lift(p["comb_bilinear"])
    geo_anchor = nm.gather(nm.lift(p["geo_poi_emb"]), anchors)
    cat_anchor = nm.gather(nm.lift(p["cat_poi_emb"]), anchors)
    f_pos = _bilinear_sim(geo_anchor, w, cat_anchor)
    denom = None
    for k in range(neg_cat.shape[1]):
        f = _bilinear_sim(geo_anchor, w, nm.gather(nm.lift(p["cat_poi_emb"]), neg_cat[:, k]))
        denom = nm.exp(f) if denom is None else denom + nm.exp(f)
    for k in range(neg_geo.shape[1]):
        f = _bilinear_sim(nm.gather(nm.lift(p["geo_poi_emb"]), neg_geo[:, k]), w, cat_anchor)
        denom = denom + nm.exp(f)
    return nm.sum_(nm.log(denom) - f_pos)


def comb_loss(geo: nm.ParamStore, cat: nm.ParamStore, fusion: nm.ParamStore,
              anchors, neg_cat, neg_geo) -> float:
    merged = {"geo_poi_emb": geo["poi_emb"], "cat_poi_emb": cat["poi_emb"],
              "comb_bilinear": fusion["comb_bilinear"]}
    return float(comb_loss_graph(merged, np.asarray(anchors), neg_cat, neg_geo).value)


def finetune_and_merge(geo: nm.ParamStore, cat: nm.ParamStore, fusion: nm.ParamStore,
                       anchors, cfg, rng: np.random.Generator):
    """Gradient steps on the fusion loss, then the entrywise model average.

    Negatives are drawn once per call. Returns (merged params, updated
    fusion head, fusion loss before the first step or None when skipped).
    """
    mim_steps = 0 if "MIM" in cfg.ablations else cfg.mim_steps
    anchors = np.asarray(anchors)
    loss_before = None
    if mim_steps > 0 and len(anchors) > 0:
        neg_cat, neg_geo = draw_comb_negatives(anchors, len(geo["poi_emb"]),
                                               cfg.n_comb, rng)
        merged = {"geo_poi_emb": geo["poi_emb"], "cat_poi_emb": cat["poi_emb"],
                  "comb_bilinear": fusion["comb_bilinear"]}
        store = nm.ParamStore(merged)
        for step in range(mim_steps):
            loss, g = nm.grad(
                lambda p: comb_loss_graph(p, anchors, neg_cat, neg_geo) / float(len(anchors)),
                store)
            if step == 0:
                loss_before = loss * len(anchors)
            store = nm.sgd_step(store, g, cfg.lr)
        geo = nm.ParamStore(dict(geo) | {"poi_emb": store["geo_poi_emb"]})
        cat = nm.ParamStore(dict(cat) | {"poi_emb": store["cat_poi_emb"]})
        fusion = nm.ParamStore({"comb_bilinear": store["comb_bilinear"]})
    merged_params = nm.ParamStore({k: (geo[k] + cat[k]) / 2.0 for k in geo})
    return merged_params, fusion, loss_before


# ---------------------------------------------------------------------------
# Round protocol
# ---------------------------------------------------------------------------

def _map_devices(fn, devices: dict, workers: int):
    users = sorted(devices)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, (devices[u] for u in users)))
    else:
        results = [fn(devices[u]) for u in users]
    return dict(zip(users, results))


def _enhanced(dev, nbrs: NeighborSet | None, snapshots: dict, mu: float):
    if nbrs is None or not nbrs.entries:
        return None
    picked = []
    for (nid, _), w in zip(nbrs.entries, neighbor_weights(nbrs)):
        if nid not in snapshots:
            raise ProtocolError(f"missing snapshot from neighbor {nid}")
        picked.append((snapshots[nid], w))
    return aggregate(dev.params, picked, mu)


def run_round(devices: dict, geo_sets: dict, cat_sets: dict, catalog: PoiCatalog,
              budget: PrivacyBudget, cfg, workers: int = 1):
    """One barrier-synchronized round over every device.

    Returns (new devices, per-device records with local/fusion losses).
    """
    skip_neighbors = "AN" in cfg.ablations
    use_geo = "GN" not in cfg.ablations and not skip_neighbors
    use_cat = "SN" not in cfg.ablations and not skip_neighbors
    timers: dict = {}

    def local_phase(dev: DeviceState):
        t0 = time.perf_counter()
        params, loss = train_local_epoch(dev.trajectory, catalog, dev.params, cfg, dev.rng)
        timers[dev.user] = time.perf_counter() - t0
        return replace(dev, params=params, round=dev.round + 1), loss

    phase1 = _map_devices(local_phase, devices, workers)
    devices = {u: dev for u, (dev, _) in phase1.items()}
    local_losses = {u: loss for u, (_, loss) in phase1.items()}

    snapshots = {}
    if use_geo or use_cat:
        def publish(dev: DeviceState):
            return ParamSnapshot(dev.user, dev.round,
                                 perturb_weights(dev.params, budget, dev.n_pos, dev.rng))

        snapshots = _map_devices(publish, devices, workers)

    def combine_phase(dev: DeviceState):
        t0 = time.perf_counter()
        geo_model = _enhanced(dev, geo_sets.get(dev.user) if use_geo else None,
                              snapshots, cfg.mu)
        cat_model = _enhanced(dev, cat_sets.get(dev.user) if use_cat else None,
                              snapshots, cfg.mu)
        comb = None
        if geo_model is not None and cat_model is not None:
            anchors = np.unique([catalog.index(p) for p in dev.trajectory.poi_ids()])
            merged, fusion, comb = finetune_and_merge(
                geo_model, cat_model, dev.fusion, anchors, cfg, dev.rng)
            dev = replace(dev, params=merged, fusion=fusion)
        elif geo_model is not None:
            dev = replace(dev, params=geo_model)
        elif cat_model is not None:
            dev = replace(dev, params=cat_model)
        timers[dev.user] += time.perf_counter() - t0
        return dev, comb

    if use_geo or use_cat:
        phase3 = _map_devices(combine_phase, devices, workers)
        devices = {u: dev for u, (dev, _) in phase3.items()}
        comb_losses = {u: c for u, (_, c) in phase3.items()}
    else:
        comb_losses = {u: None for u in devices}

    records = [
        {"user": u, "round": devices[u].round, "local_loss": local_losses[u],
         "comb_loss": comb_losses[u], "wall_time": timers[u]}
        for u in sorted(devices)
    ]
    return devices, records


@dataclass
class TrainResult:
    devices: dict
    history: list = field(default_factory=list)   # mean local loss per round
    records: list = field(default_factory=list)   # per-device round log rows
    rounds_run: int = 0


def run_training(devices: dict, geo_sets: dict, cat_sets: dict, catalog: PoiCatalog,
                 budget: PrivacyBudget, cfg, workers: int = 1) -> TrainResult:
    """Rounds until cfg.max_epochs or the mean local loss plateaus."""
    result = TrainResult(devices)
    prev = None
    for _ in range(cfg.max_epochs):
        devices, records = run_round(devices, geo_sets, cat_sets, catalog,
                                     budget, cfg, workers)
        mean_loss = float(np.mean([r["local_loss"] for r in records]))
        result.devices = devices
        result.history.append(mean_loss)
        result.records.extend(records)
        result.rounds_run += 1
        if prev is not None and cfg.conv_tol > 0 and \
                abs(prev - mean_loss) < cfg.conv_tol * max(abs(prev), 1e-12):
            break
        prev = mean_loss
    return result
