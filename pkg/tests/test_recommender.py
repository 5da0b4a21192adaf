"""Base model: embeddings, relation matrices, attention, scoring, loss."""

import numpy as np
import pytest

from decpoi import numerics as nm
from decpoi.config import ExperimentConfig
from decpoi.data import CheckIn, Poi, PoiCatalog, Trajectory
from decpoi.exceptions import ContractError
from decpoi.geo import haversine_km
from decpoi.recommender import (TrajectoryContext, embed_sequence, init_core_params,
                                poi_loss, relation_matrix, score_candidates,
                                self_attention, train_local_epoch)


@pytest.fixture
def small_world():
    pois = [Poi(f"p{i}", -74.0 + 0.01 * i, 40.7 + 0.005 * i, f"c{i % 3}")
            for i in range(8)]
    catalog = PoiCatalog(pois)
    checkins = tuple(CheckIn("u", f"p{i}", 1000 + i * 7200) for i in range(4))
    return catalog, Trajectory("u", checkins)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


class TestEmbedSequence:
    def test_zero_embeddings_give_zero_matrix(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(0))
        params = nm.ParamStore(dict(params) | {
            "poi_emb": np.zeros_like(params["poi_emb"]),
            "time_emb": np.zeros_like(params["time_emb"])})
        assert np.all(embed_sequence(traj, catalog, params) == 0.0)

    def test_single_checkin_row(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(1))
        single = Trajectory("u", traj.checkins[:1])
        row = embed_sequence(single, catalog, params)
        ctx = TrajectoryContext.build(single, catalog)
        expected = params["poi_emb"][ctx.poi_idx[0]] + params["time_emb"][ctx.slot_idx[0]]
        np.testing.assert_allclose(row, expected[None, :])

    def test_matches_two_lookup_oracle(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(2))
        got = embed_sequence(traj, catalog, params)
        ctx = TrajectoryContext.build(traj, catalog)
        for m in range(len(traj)):
            naive = params["poi_emb"][ctx.poi_idx[m]] + params["time_emb"][ctx.slot_idx[m]]
            np.testing.assert_allclose(got[m], naive)


class TestRelationMatrix:
    def test_diagonal_is_zero(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(3))
        rel = relation_matrix(traj, catalog, params)
        np.testing.assert_allclose(np.diag(rel), 0.0)

    def test_uniform_units_give_gap_total(self, small_world):
        catalog, traj = small_world
        d = 6
        params = init_core_params(len(catalog), d, np.random.default_rng(4))
        params = nm.ParamStore(dict(params) | {
            "unit_spatial": np.full(d, 1.0 / d),
            "unit_temporal": np.full(d, 1.0 / d)})
        rel = relation_matrix(traj, catalog, params)
        ctx = TrajectoryContext.build(traj, catalog)
        np.testing.assert_allclose(rel, ctx.spatial_gaps + ctx.temporal_gaps)

    def test_symmetric_and_matches_double_loop(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(5))
        rel = relation_matrix(traj, catalog, params)
        np.testing.assert_allclose(rel, rel.T, atol=1e-12)
        # naive oracle
        pois = [catalog.poi(c.poi) for c in traj.checkins]
        for a in range(len(traj)):
            for b in range(len(traj)):
                ds = haversine_km((pois[a].lon, pois[a].lat), (pois[b].lon, pois[b].lat))
                dt = abs(traj.checkins[a].timestamp - traj.checkins[b].timestamp) / 3600.0
                vec = ds * params["unit_spatial"] + dt * params["unit_temporal"]
                assert rel[a, b] == pytest.approx(vec.sum(), rel=1e-12, abs=1e-12)


class TestSelfAttention:
    def test_single_position_reduces_to_value_projection(self):
        rng = np.random.default_rng(6)
        params = init_core_params(4, 5, rng)
        x = rng.normal(size=(1, 5))
        out = self_attention(x, np.zeros((1, 1)), params)
        np.testing.assert_allclose(out, x @ params["w_value"])

    def test_large_negative_offdiagonal_collapses_to_self(self):
        rng = np.random.default_rng(7)
        params = init_core_params(4, 5, rng)
        x = rng.normal(size=(3, 5))
        rel = np.full((3, 3), -1e6)
        np.fill_diagonal(rel, 0.0)
        out = self_attention(x, rel, params)
        np.testing.assert_allclose(out, x @ params["w_value"], atol=1e-8)

    def test_matches_three_loop_oracle(self):
        rng = np.random.default_rng(8)
        d, m = 8, 4
        params = init_core_params(4, d, rng)
        x = rng.normal(size=(m, d))
        rel = rng.normal(size=(m, m))
        got = self_attention(x, rel, params)
        q, k, v = x @ params["w_query"], x @ params["w_key"], x @ params["w_value"]
        expected = np.zeros((m, d))
        for a in range(m):
            logits = np.array([(q[a] @ k[b] + rel[a, b]) / np.sqrt(d) for b in range(m)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for b in range(m):
                expected[a] += weights[b] * v[b]
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_rows_of_attention_softmax_sum_to_one(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 6))
        logits = nm.lift(rng.normal(size=(5, 5)))
        s = nm.softmax(logits, axis=1).value
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


class TestScoreCandidates:
    def test_single_candidate_scores_sequence_length(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(10))
        alpha = score_candidates(traj, catalog, params, ["p7"], query_time=99999)
        assert alpha.shape == (1,)
        assert alpha[0] == pytest.approx(len(traj))

    def test_identical_candidates_tie(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(11))
        alpha = score_candidates(traj, catalog, params, ["p6", "p6"], query_time=99999)
        assert alpha[0] == pytest.approx(alpha[1], rel=1e-12)

    def test_permutation_equivariant(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(12))
        cands = ["p4", "p5", "p6", "p7"]
        alpha = score_candidates(traj, catalog, params, cands, query_time=12345)
        perm = [2, 0, 3, 1]
        alpha_p = score_candidates(traj, catalog, params,
                                   [cands[i] for i in perm], query_time=12345)
        np.testing.assert_allclose(alpha_p, alpha[perm], rtol=1e-12)

    def test_matches_naive_loop_oracle(self, small_world):
        catalog, traj = small_world
        d = 8
        params = init_core_params(len(catalog), d, np.random.default_rng(13))
        cands = ["p3", "p4", "p5", "p6", "p7"]
        query_time = 54321
        alpha = score_candidates(traj, catalog, params, cands, query_time)

        ctx = TrajectoryContext.build(traj, catalog)
        x = embed_sequence(traj, catalog, params)
        rel = relation_matrix(traj, catalog, params)
        encoded = self_attention(x, rel, params)
        h, m = len(cands), len(traj)
        logits = np.zeros((h, m))
        us, ut = params["unit_spatial"].sum(), params["unit_temporal"].sum()
        for i, cid in enumerate(cands):
            poi = catalog.poi(cid)
            e_c = params["poi_emb"][catalog.index(cid)]
            for j in range(m):
                visited = catalog.poi(traj.checkins[j].poi)
                ds = haversine_km((poi.lon, poi.lat), (visited.lon, visited.lat))
                dt = abs(query_time - traj.checkins[j].timestamp) / 3600.0
                logits[i, j] = (e_c @ encoded[j] + ds * us + dt * ut) / np.sqrt(d)
        expected = np.zeros(h)
        for j in range(m):
            col = np.exp(logits[:, j] - logits[:, j].max())
            expected += col / col.sum()
        np.testing.assert_allclose(alpha, expected, atol=1e-10)

    def test_empty_candidates_rejected(self, small_world):
        catalog, traj = small_world
        params = init_core_params(len(catalog), 6, np.random.default_rng(14))
        with pytest.raises(ContractError):
            score_candidates(traj, catalog, params, [], query_time=0)


class TestPoiLoss:
    def test_perfect_separation_tends_to_zero(self):
        assert poi_loss(50.0, [-50.0, -50.0]) == pytest.approx(0.0, abs=1e-9)

    def test_zero_scores_give_two_log_two(self):
        assert poi_loss(0.0, [0.0]) == pytest.approx(2 * np.log(2), rel=1e-12)

    def test_random_scores_match_formula_transcription(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            pos = rng.normal()
            negs = rng.normal(size=5)
            expected = -(np.log(sigmoid(pos))
                         + np.mean(np.log(1.0 - sigmoid(negs))))
            assert poi_loss(pos, negs) == pytest.approx(expected, rel=1e-12)


class TestTrainLocalEpoch:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        pois = [Poi(f"p{i}", -74.0 + 0.01 * i, 40.7, "c0") for i in range(10)]
        catalog = PoiCatalog(pois)
        checkins = tuple(CheckIn("u", f"p{i % 6}", i * 3600) for i in range(6))
        return catalog, Trajectory("u", checkins), init_core_params(10, 6, rng)

    def test_lr_zero_keeps_params(self):
        catalog, traj, params = self.make()
        cfg = ExperimentConfig(d=6, lr=0.0, dropout=0.0, batch=4)
        out, _ = train_local_epoch(traj, catalog, params, cfg, np.random.default_rng(1))
        assert out.equal(params)

    def test_loss_decreases_on_tiny_trajectory(self):
        catalog, _, params = self.make()
        traj = Trajectory("u", (CheckIn("u", "p0", 0), CheckIn("u", "p1", 3600)))
        cfg = ExperimentConfig(d=6, lr=0.05, dropout=0.0, batch=4, n_neg=2)
        p1, loss1 = train_local_epoch(traj, catalog, params, cfg, np.random.default_rng(2))
        _, loss2 = train_local_epoch(traj, catalog, p1, cfg, np.random.default_rng(2))
        assert loss2 < loss1

    def test_deterministic_for_fixed_seed(self):
        catalog, traj, params = self.make()
        cfg = ExperimentConfig(d=6, lr=0.01, dropout=0.2, batch=4)
        a, la = train_local_epoch(traj, catalog, params, cfg, np.random.default_rng(3))
        b, lb = train_local_epoch(traj, catalog, params, cfg, np.random.default_rng(3))
        assert la == lb
        assert a.equal(b)

    def test_too_short_trajectory_rejected(self):
        catalog, _, params = self.make()
        traj = Trajectory("u", (CheckIn("u", "p0", 0),))
        cfg = ExperimentConfig(d=6)
        with pytest.raises(ContractError):
            train_local_epoch(traj, catalog, params, cfg, np.random.default_rng(4))
