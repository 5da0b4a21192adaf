"""Leave-one-out evaluation with location-constrained candidate sampling.

Each user's held-out check-in is ranked against the unvisited POIs nearest
to their last training location; hit ratio and NDCG are reported at k in
{5, 10}. Rank ties break against the ground truth.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import CheckIn, PoiCatalog, Trajectory
from .exceptions import ContractError
from .geo import haversine_km
from .recommender import score_candidates

DEFAULT_KS = (5, 10)


def candidate_set(train_traj: Trajectory, truth: CheckIn, catalog: PoiCatalog,
                  n_cand: int) -> list[str]:
    """Ground truth first, then the n_cand nearest unvisited POIs.

    Distance is Haversine to the user's last training check-in; ties break
    by ascending POI id. Fewer than n_cand unvisited POIs means all of them.
    """
    visited = set(train_traj.poi_ids())
    last = catalog.poi(train_traj.checkins[-1].poi)
    pool = [p for p in catalog.pois if p.id not in visited and p.id != truth.poi]
    pool.sort(key=lambda p: (haversine_km((last.lon, last.lat), (p.lon, p.lat)), p.id))
    return [truth.poi] + [p.id for p in pool[:n_cand]]


def rank_truth(scores, truth_index: int = 0) -> int:
    """1-based rank of the truth under descending score, ties pessimistic."""
    s = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    t = s[truth_index]
    better = int(np.sum(s > t))
    tied = int(np.sum(s == t)) - 1
    return 1 + better + tied


def hr_at_k(rank: int, k: int) -> float:
    if rank < 1 or k < 1:
        raise ContractError("rank and k must be >= 1")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if rank < 1 or k < 1:
        raise ContractError("rank and k must be >= 1")
    return 1.0 / np.log2(rank + 1) if rank <= k else 0.0


@dataclass
class MetricsReport:
    ks: tuple = DEFAULT_KS
    per_user: dict = field(default_factory=dict)  # user -> {"rank", "hr", "ndcg"}

    def add(self, user: str, rank: int):
        self.per_user[user] = {
            "rank": rank,
            "hr": {k: hr_at_k(rank, k) for k in self.ks},
            "ndcg": {k: ndcg_at_k(rank, k) for k in self.ks},
        }

    def mean_hr(self, k: int) -> float:
        return float(np.mean([u["hr"][k] for u in self.per_user.values()]))

    def mean_ndcg(self, k: int) -> float:
        return float(np.mean([u["ndcg"][k] for u in self.per_user.values()]))

    def summary(self) -> dict:
        return {f"hr@{k}": self.mean_hr(k) for k in self.ks} | \
               {f"ndcg@{k}": self.mean_ndcg(k) for k in self.ks}

    def to_json_dict(self, header: dict | None = None) -> dict:
        return {
            "header": dict(header or {}),
            "summary": self.summary(),
            "per_user": {
                user: {"rank": row["rank"]}
                | {f"hr@{k}": row["hr"][k] for k in self.ks}
                | {f"ndcg@{k}": row["ndcg"][k] for k in self.ks}
                for user, row in sorted(self.per_user.items())
            },
        }

    def save_json(self, path, header: dict | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(header), fh, indent=1, sort_keys=True)

    def save_csv(self, path):
        cols = ["user", "rank"] + [f"hr@{k}" for k in self.ks] + \
               [f"ndcg@{k}" for k in self.ks]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for user, row in sorted(self.per_user.items()):
                writer.writerow([user, row["rank"]]
                                + [row["hr"][k] for k in self.ks]
                                + [row["ndcg"][k] for k in self.ks])
            summary = self.summary()
            writer.writerow(["MEAN", ""]
                            + [summary[f"hr@{k}"] for k in self.ks]
                            + [summary[f"ndcg@{k}"] for k in self.ks])


def evaluate(devices: dict, test: dict, catalog: PoiCatalog, cfg,
             scorer=None, ks=DEFAULT_KS) -> MetricsReport:
    """Rank every user's held-out check-in with their own device model.

    `scorer(device, candidates, query_time) -> scores` defaults to the
    recommender's candidate scoring; tests can inject an oracle.
    """
    if scorer is None:
        def scorer(dev, cands, query_time):
            return score_candidates(dev.trajectory, catalog, dev.params,
                                    cands, query_time)

    report = MetricsReport(ks=tuple(ks))
    for user in sorted(devices):
        dev = devices[user]
        truth = test[user]
        cands = candidate_set(dev.trajectory, truth, catalog, cfg.n_cand)
        scores = scorer(dev, cands, truth.timestamp)
        report.add(user, rank_truth(scores, truth_index=0))
    return report
