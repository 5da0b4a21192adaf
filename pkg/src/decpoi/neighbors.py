"""Server-side neighbor identification.

Devices upload (perturbed) activity centroids and category distributions;
the server builds geographical and categorical distance matrices and hands
each user its top-q neighbor lists. Raw trajectories never reach here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import PoiCatalog, Trajectory
from .exceptions import ContractError
from .geo import haversine_km, pairwise_haversine_km
from .privacy import PrivacyBudget, perturb_centroids, perturb_counts

KL_FLOOR = 1e-6
MAX_CENTROIDS = 20
KMEANS_TOL_KM = 1e-6
KMEANS_MAX_ITER = 100
NEIGHBOR_STREAM = 3  # rng namespace tag for per-device upload streams


@dataclass(frozen=True)
class CentroidSet:
    user: str
    centroids: np.ndarray  # (v, 2) lon/lat degrees

    def __len__(self):
        return len(self.centroids)


@dataclass(frozen=True)
class NeighborSet:
    user: str
    kind: str  # "geographical" | "semantic"
    entries: tuple  # ((neighbor id, distance), ...) ascending by distance

    def ids(self):
        return [nid for nid, _ in self.entries]

    def distances(self):
        return np.array([d for _, d in self.entries])


# ---------------------------------------------------------------------------
# Device-side feature extraction
# ---------------------------------------------------------------------------

def _kmeans(coords: np.ndarray, k: int, rng: np.random.Generator):
    """Haversine k-means with k-means++ seeding; centroids in lon/lat.

    Assumes activity zones away from the antimeridian (synthetic data and
    the bundled city coordinates satisfy this).
    """
    n = len(coords)
    centers = np.empty((k, 2))
    first = int(rng.integers(n))
    centers[0] = coords[first]
    for j in range(1, k):
        d2 = np.min(pairwise_haversine_km(coords, centers[:j]), axis=1) ** 2
        total = d2.sum()
        if total <= 0:
            centers[j] = coords[int(rng.integers(n))]
            continue
        centers[j] = coords[int(rng.choice(n, p=d2 / total))]
    assign = None
    for _ in range(KMEANS_MAX_ITER):
        dist = pairwise_haversine_km(coords, centers)
        assign = dist.argmin(axis=1)
        moved = 0.0
        for j in range(k):
            members = coords[assign == j]
            if len(members) == 0:
                # Re-seed an empty cluster at the point farthest from its center.
                worst = int(dist[np.arange(n), assign].argmax())
                centers[j] = coords[worst]
                moved = np.inf
                continue
            new = members.mean(axis=0)
            moved = max(moved, haversine_km(centers[j], new))
            centers[j] = new
        if moved <= KMEANS_TOL_KM:
            break
    dist = pairwise_haversine_km(coords, centers)
    return centers, float(dist.min(axis=1).max())


def user_centroids(traj: Trajectory, catalog: PoiCatalog, threshold_km: float,
                   rng: np.random.Generator) -> CentroidSet:
    """Adaptive multi-centroid summary of a user's activity zones.

    k grows from 1 until every visited POI sits within threshold_km of its
    nearest centroid (capped at min(#distinct POIs, 20)).
    """
    if len(traj) < 1:
        raise ContractError("empty trajectory")
    coords = np.array([
        [catalog.poi(c.poi).lon, catalog.poi(c.poi).lat] for c in traj.checkins
    ])
    distinct = len(np.unique(coords, axis=0))
    k_max = min(distinct, MAX_CENTROIDS)
    centers = coords[:1]
    for k in range(1, k_max + 1):
        centers, worst = _kmeans(coords, k, rng)
        if worst <= threshold_km:
            break
    return CentroidSet(traj.user, centers)


def category_distribution(traj: Trajectory, catalog: PoiCatalog) -> np.ndarray:
    """Per-category visit fractions over the full category set."""
    if len(traj) < 1:
        raise ContractError("empty trajectory")
    counts = np.zeros(catalog.n_categories)
    for c in traj.checkins:
        counts[catalog.poi_categories[catalog.index(c.poi)]] += 1
    return counts / counts.sum()


def category_counts(traj: Trajectory, catalog: PoiCatalog) -> np.ndarray:
    counts = np.zeros(catalog.n_categories)
    for c in traj.checkins:
        counts[catalog.poi_categories[catalog.index(c.poi)]] += 1
    return counts


# ---------------------------------------------------------------------------
# Server-side distances
# ---------------------------------------------------------------------------

def geo_distance(a: CentroidSet, b: CentroidSet) -> float:
    """Minimum Haversine distance over all cross pairs of centroids."""
    if len(a) == 0 or len(b) == 0:
        raise ContractError("centroid sets must be non-empty")
    return float(pairwise_haversine_km(a.centroids, b.centroids).min())


def cat_distance(a, b) -> float:
    """KL divergence (nats) after flooring both distributions at 1e-6."""
    pa = _floor(np.asarray(a, dtype=float))
    pb = _floor(np.asarray(b, dtype=float))
    mask = pa > 0
    return float(np.sum(pa[mask] * np.log(pa[mask] / pb[mask])))


def _floor(p: np.ndarray) -> np.ndarray:
    q = np.maximum(p, KL_FLOOR)
    return q / q.sum()


def build_matrices(centroid_sets: dict, distributions: dict):
    """(users, D_geo, D_cat) from every user's uploaded summaries.

    D_geo is symmetric with zero diagonal; D_cat has zero diagonal but is
    asymmetric (row n holds d_cat(u_n, .)).
    """
    users = sorted(centroid_sets)
    if sorted(distributions) != users:
        raise ContractError("centroid and distribution user sets differ")
    n = len(users)
    d_geo = np.zeros((n, n))
    d_cat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d_geo[i, j] = d_geo[j, i] = geo_distance(
                centroid_sets[users[i]], centroid_sets[users[j]])
        for j in range(n):
            if i != j:
                d_cat[i, j] = cat_distance(distributions[users[i]],
                                           distributions[users[j]])
    return users, d_geo, d_cat


def top_q_neighbors(matrix: np.ndarray, users: list, n: int, q: int, kind: str) -> NeighborSet:
    """q nearest users by row n, self excluded, ties by ascending user id."""
    if q < 1:
        raise ContractError("q must be >= 1")
    order = sorted(
        (i for i in range(len(users)) if i != n),
        key=lambda i: (matrix[n, i], users[i]))
    picked = order[:min(q, len(users) - 1)]
    return NeighborSet(users[n], kind,
                       tuple((users[i], float(matrix[n, i])) for i in picked))


def identify_neighbors(centroid_sets: dict, distributions: dict, q: int):
    """Both NeighborSets per user, keyed by user id."""
    users, d_geo, d_cat = build_matrices(centroid_sets, distributions)
    geo = {u: top_q_neighbors(d_geo, users, i, q, "geographical")
           for i, u in enumerate(users)}
    cat = {u: top_q_neighbors(d_cat, users, i, q, "semantic")
           for i, u in enumerate(users)}
    return geo, cat


def collect_uploads(train, catalog: PoiCatalog, threshold_km: float,
                    budget: PrivacyBudget, seed: int):
    """Device-side summaries as the server receives them.

    Each device extracts its activity centroids and category counts from its
    own training trajectory, perturbs both under the privacy budget, and
    uploads only the perturbed values.
    """
    centroid_sets, distributions = {}, {}
    for idx, user in enumerate(sorted(train.trajectories)):
        rng = np.random.default_rng([seed, NEIGHBOR_STREAM, idx])
        traj = train.trajectories[user]
        raw = user_centroids(traj, catalog, threshold_km, rng)
        centroid_sets[user] = CentroidSet(
            user, perturb_centroids(raw.centroids, budget, rng))
        counts = category_counts(traj, catalog)
        distributions[user] = perturb_counts(counts, budget, rng)
    return centroid_sets, distributions


# ---------------------------------------------------------------------------
# Export format
# ---------------------------------------------------------------------------

def neighbors_to_json(geo: dict, cat: dict, header: dict | None = None) -> dict:
    payload = {"header": dict(header or {}), "users": {}}
    for user in sorted(geo):
        payload["users"][user] = {
            "geo": [[nid, d] for nid, d in geo[user].entries],
            "cat": [[nid, d] for nid, d in cat[user].entries],
        }
    return payload


def neighbors_from_json(payload: dict):
    geo, cat = {}, {}
    for user, entry in payload["users"].items():
        geo[user] = NeighborSet(user, "geographical",
                                tuple((nid, float(d)) for nid, d in entry["geo"]))
        cat[user] = NeighborSet(user, "semantic",
                                tuple((nid, float(d)) for nid, d in entry["cat"]))
    return geo, cat


def save_neighbors(path, geo: dict, cat: dict, header: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(neighbors_to_json(geo, cat, header), fh)


def load_neighbors(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    geo, cat = neighbors_from_json(payload)
    return geo, cat, payload.get("header", {})
