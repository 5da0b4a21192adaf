"""Candidate sampling, ranking, HR/NDCG and the evaluation loop."""

import json

import numpy as np
import pytest

from decpoi import numerics as nm
from decpoi.collab import DeviceState, init_devices
from decpoi.config import ExperimentConfig
from decpoi.data import (CheckIn, Poi, PoiCatalog, SynthConfig, Trajectory,
                         generate_synthetic, split_leave_one_out)
from decpoi.evaluation import (candidate_set, evaluate, hr_at_k, ndcg_at_k,
                               rank_truth)
from decpoi.geo import haversine_km
from decpoi.recommender import init_core_params


def line_catalog(n=30):
    """POIs on a line so nearest-neighbor order is the index order."""
    return PoiCatalog([Poi(f"p{i:02d}", 10.0 + 0.001 * i, 0.0, "c0")
                       for i in range(n)])


class TestCandidateSet:
    def test_truth_first_then_nearest_unvisited(self):
        catalog = line_catalog()
        traj = Trajectory("u", (CheckIn("u", "p00", 0), CheckIn("u", "p01", 3600)))
        truth = CheckIn("u", "p10", 7200)
        cands = candidate_set(traj, truth, catalog, n_cand=3)
        assert cands[0] == "p10"
        # nearest unvisited to p01, excluding visited and the truth
        assert cands[1:] == ["p02", "p03", "p04"]

    def test_exhausts_small_catalogs(self):
        catalog = line_catalog(n=6)
        traj = Trajectory("u", (CheckIn("u", "p00", 0), CheckIn("u", "p01", 3600)))
        truth = CheckIn("u", "p02", 7200)
        cands = candidate_set(traj, truth, catalog, n_cand=200)
        assert len(cands) == 4  # truth + the 3 remaining unvisited

    def test_matches_brute_force_distance_sort(self):
        rng = np.random.default_rng(0)
        pois = [Poi(f"p{i:02d}", float(lon), float(lat), "c0")
                for i, (lon, lat) in enumerate(rng.uniform(-1, 1, size=(40, 2)))]
        catalog = PoiCatalog(pois)
        traj = Trajectory("u", (CheckIn("u", "p00", 0),))
        truth = CheckIn("u", "p01", 3600)
        cands = candidate_set(traj, truth, catalog, n_cand=10)
        last = catalog.poi("p00")
        pool = [p for p in pois if p.id not in ("p00", "p01")]
        pool.sort(key=lambda p: (haversine_km((last.lon, last.lat), (p.lon, p.lat)), p.id))
        assert cands == ["p01"] + [p.id for p in pool[:10]]


class TestRankTruth:
    def test_strictly_best_is_rank_one(self):
        assert rank_truth([5.0, 1.0, 2.0]) == 1

    def test_tie_is_pessimistic(self):
        assert rank_truth([2.0, 2.0, 1.0]) == 2

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            scores = rng.choice(np.arange(10) / 4.0, size=8)
            got = rank_truth(scores, truth_index=0)
            oracle = 1 + sum(1 for s in scores[1:] if s >= scores[0])
            assert got == oracle


class TestMetricFormulas:
    def test_rank_one_is_ideal(self):
        assert hr_at_k(1, 5) == 1.0
        assert ndcg_at_k(1, 5) == 1.0

    def test_rank_three_closed_form(self):
        assert ndcg_at_k(3, 5) == pytest.approx(0.5)

    def test_rank_seven_across_cutoffs(self):
        assert hr_at_k(7, 5) == 0.0
        assert ndcg_at_k(7, 5) == 0.0
        assert hr_at_k(7, 10) == 1.0
        assert ndcg_at_k(7, 10) == pytest.approx(1.0 / 3.0)

    def test_monotone_in_k(self):
        for rank in range(1, 15):
            hrs = [hr_at_k(rank, k) for k in range(1, 15)]
            ndcgs = [ndcg_at_k(rank, k) for k in range(1, 15)]
            assert hrs == sorted(hrs)
            assert ndcgs == sorted(ndcgs)
            for h, n in zip(hrs, ndcgs):
                assert n <= h


@pytest.fixture
def trained_world():
    ds = generate_synthetic(SynthConfig(users=8, pois=60, categories=6,
                                        checkins_per_user=8, seed=21))
    train, test = split_leave_one_out(ds)
    cfg = ExperimentConfig(d=8, n_cand=20)
    params = init_core_params(ds.n_pois, cfg.d, np.random.default_rng(0))
    devices = init_devices(train, params, cfg, seed=0)
    return ds, devices, test, cfg


class TestEvaluate:
    def test_oracle_scorer_gives_perfect_metrics(self, trained_world):
        ds, devices, test, cfg = trained_world

        def oracle(dev, cands, query_time):
            scores = np.zeros(len(cands))
            scores[0] = 1.0  # truth always wins
            return scores

        report = evaluate(devices, test, ds.catalog, cfg, scorer=oracle)
        assert report.mean_hr(5) == 1.0
        assert report.mean_ndcg(5) == 1.0

    def test_deterministic(self, trained_world):
        ds, devices, test, cfg = trained_world
        a = evaluate(devices, test, ds.catalog, cfg)
        b = evaluate(devices, test, ds.catalog, cfg)
        assert a.to_json_dict() == b.to_json_dict()

    def test_means_equal_average_of_per_user(self, trained_world):
        ds, devices, test, cfg = trained_world
        report = evaluate(devices, test, ds.catalog, cfg)
        for k in report.ks:
            manual = np.mean([row["hr"][k] for row in report.per_user.values()])
            assert report.mean_hr(k) == pytest.approx(manual)
            manual = np.mean([row["ndcg"][k] for row in report.per_user.values()])
            assert report.mean_ndcg(k) == pytest.approx(manual)

    def test_report_invariants(self, trained_world):
        ds, devices, test, cfg = trained_world
        report = evaluate(devices, test, ds.catalog, cfg)
        summary = report.summary()
        assert 0.0 <= summary["hr@5"] <= summary["hr@10"] <= 1.0
        assert summary["ndcg@5"] <= summary["hr@5"]
        assert summary["ndcg@10"] <= summary["hr@10"]

    def test_json_and_csv_outputs(self, trained_world, tmp_path):
        ds, devices, test, cfg = trained_world
        report = evaluate(devices, test, ds.catalog, cfg)
        report.save_json(tmp_path / "m.json", header={"seed": 0})
        report.save_csv(tmp_path / "m.csv")
        payload = json.loads((tmp_path / "m.json").read_text())
        assert payload["header"] == {"seed": 0}
        assert set(payload["summary"]) == {"hr@5", "hr@10", "ndcg@5", "ndcg@10"}
        lines = (tmp_path / "m.csv").read_text().strip().splitlines()
        assert lines[0].startswith("user,rank")
        assert lines[-1].startswith("MEAN")
        assert len(lines) == 2 + len(devices)
