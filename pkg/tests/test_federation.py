import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtp import autodiff as ad
from fedtp.federation import (
    ClientState,
    FederationError,
    StrategySpec,
    aggregate_shared,
    evaluate,
    local_train,
    sample_clients,
)
from fedtp.models import init_model, loss_fn

from conftest import TINY_MODEL


class TestAggregate:
    def test_equal_weights(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -2.0])
        out = aggregate_shared([({"x": a}, 5), ({"x": b}, 5)])
        np.testing.assert_allclose(out["x"], (a + b) / 2)

    def test_unequal_weights(self):
        a, b = np.array([4.0]), np.array([8.0])
        out = aggregate_shared([({"x": a}, 1), ({"x": b}, 3)])
        np.testing.assert_allclose(out["x"], 0.25 * a + 0.75 * b)

    def test_single_client_is_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 2))
        np.testing.assert_array_equal(aggregate_shared([({"x": a}, 7)])["x"], a)

    def test_mismatched_shapes(self):
        with pytest.raises(ad.ShapeError, match="'x'"):
            aggregate_shared([({"x": np.ones(2)}, 1), ({"x": np.ones(3)}, 1)])

    def test_global_mass(self):
        out = aggregate_shared([({"x": np.array([2.0])}, 1)], total_mass=4)
        np.testing.assert_allclose(out["x"], [0.5])


class TestSampling:
    def test_count_and_distinct(self):
        for rate, n, k in [(1.0, 10, 10), (0.1, 50, 5), (0.25, 10, 3), (0.01, 10, 1)]:
            s = sample_clients(3, 1, n, rate)
            assert len(s) == k == len(set(s))
            assert s == sorted(s)

    def test_deterministic_per_round(self):
        assert sample_clients(0, 4, 20, 0.3) == sample_clients(0, 4, 20, 0.3)
        assert any(sample_clients(0, r, 20, 0.3) != sample_clients(0, 1, 20, 0.3) for r in range(2, 6))


def _client(x, y, cid=0):
    return ClientState(cid, x, y, x, y)


def _data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 3, 8, 8)), rng.integers(0, 4, n)


class TestLocalTrain:
    def test_zero_rate_is_no_op(self):
        theta = init_model(TINY_MODEL, 0).merged()
        out, delta, _ = local_train(_client(*_data()), theta, TINY_MODEL, 2, 0.0, 4, StrategySpec("fedavg"))
        assert all(np.array_equal(out[k], theta[k]) for k in theta)
        assert all(not np.any(v) for v in delta.values())

    def test_single_full_batch_step(self):
        x, y = _data()
        theta = init_model(TINY_MODEL, 0).merged()
        out, delta, _ = local_train(_client(x, y), theta, TINY_MODEL, 1, 0.1, 64, StrategySpec("fedavg"))
        _, g = ad.value_and_grad(lambda q: loss_fn(q, x, y, TINY_MODEL), theta)
        for k in theta:
            np.testing.assert_allclose(out[k], theta[k] - 0.1 * g[k], rtol=0, atol=1e-14)
        np.testing.assert_allclose(delta["blocks.0.attn.wq"], -0.1 * g["blocks.0.attn.wq"], atol=1e-14)

    def test_proximal_term_shrinks_drift(self):
        x, y = _data(12)
        theta = init_model(TINY_MODEL, 0).merged()
        drift = {}
        for mu in (0.0, 1e3):
            out, _, _ = local_train(_client(x, y), theta, TINY_MODEL, 3, 1e-4, 4, StrategySpec("fedprox", mu=mu))
            drift[mu] = math.sqrt(sum(float(np.sum((out[k] - theta[k]) ** 2)) for k in theta))
        assert drift[1e3] < drift[0.0]

    def test_empty_client(self):
        c = _client(np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))
        with pytest.raises(FederationError, match="no training data"):
            local_train(c, init_model(TINY_MODEL, 0).merged(), TINY_MODEL, 1, 0.1, 4, StrategySpec("fedavg"))


class TestEvaluate:
    def test_weighted_accuracy(self):
        # client 0: 10 samples all right; client 1: 30 samples, half right
        params = init_model(TINY_MODEL, 0).merged()
        params["head.w"] = np.zeros_like(params["head.w"])
        x = np.zeros((40, 3, 8, 8))
        c0 = ClientState(0, x[:10], np.zeros(10, int), x[:10], np.zeros(10, int))
        c1 = ClientState(1, x[:30], np.zeros(30, int), x[:30], np.repeat([0, 1], 15))
        acc, correct, counts, weighted = evaluate([c0, c1], [params, params], TINY_MODEL)
        assert acc == {0: 1.0, 1: 0.5}
        assert weighted == pytest.approx(0.625)

    def test_constant_predictor_on_balanced_classes(self):
        params = init_model(TINY_MODEL, 0).merged()
        params["head.w"] = np.zeros_like(params["head.w"])
        params["head.b"] = np.zeros_like(params["head.b"])
        x = np.zeros((8, 3, 8, 8))
        c = ClientState(0, x, np.arange(8) % 4, x, np.arange(8) % 4)
        acc, *_ = evaluate([c], [params], TINY_MODEL)
        assert acc[0] == 0.25

    def test_memorization_reaches_full_accuracy(self):
        x, _ = _data(4, seed=3)
        y = np.arange(4)
        c = _client(x, y)
        theta = init_model(TINY_MODEL, 0).merged()
        theta, _, _ = local_train(c, theta, TINY_MODEL, 300, 0.1, 4, StrategySpec("fedavg"))
        acc, *_ = evaluate([c], [theta], TINY_MODEL)
        assert acc[0] == 1.0


class TestStrategies:
    def test_fedavg_clients_share_one_model(self, make_sim):
        sim = make_sim("fedavg")
        sim.run()
        a, b = sim.client_params(sim.clients[0]), sim.client_params(sim.clients[2])
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_local_only_never_updates_server(self, make_sim):
        sim = make_sim("local_only")
        before = {k: v.copy() for k, v in sim.server.shared.items()}
        reports = sim.run()
        assert all(np.array_equal(before[k], sim.server.shared[k]) for k in before)
        assert all(r.shared_update_norm == 0.0 for r in reports)
        a, b = sim.client_params(sim.clients[0]), sim.client_params(sim.clients[1])
        assert not np.array_equal(a["head.w"], b["head.w"])

    def test_vanilla_personalized_keeps_attention_local(self, make_sim):
        sim = make_sim("vanilla_personalized")
        sim.run()
        a, b = sim.client_params(sim.clients[0]), sim.client_params(sim.clients[1])
        assert not np.array_equal(a["blocks.0.attn.wq"], b["blocks.0.attn.wq"])
        assert np.array_equal(a["blocks.0.attn.wo"], b["blocks.0.attn.wo"])

    def test_fedper_head_keeps_classifier_local(self, make_sim):
        sim = make_sim("fedper_head")
        sim.run()
        a, b = sim.client_params(sim.clients[0]), sim.client_params(sim.clients[1])
        assert not np.array_equal(a["head.w"], b["head.w"])
        assert np.array_equal(a["blocks.0.attn.wq"], b["blocks.0.attn.wq"])

    def test_fedprox_with_zero_mu_matches_fedavg(self, make_sim):
        a, b = make_sim("fedavg"), make_sim("fedprox")
        a.run(), b.run()
        assert all(np.array_equal(a.server.shared[k], b.server.shared[k]) for k in a.server.shared)

    def test_mu_rejected_outside_fedprox(self):
        with pytest.raises(ValueError, match="mu"):
            StrategySpec("fedavg", mu=0.1).validate()

    def test_fedtp_personalizes_attention_and_moves_embeddings(self, make_sim):
        sim = make_sim("fedtp")
        z0 = [z.copy() for z in sim.server.embeddings]
        reports = sim.run()
        a, b = sim.client_params(sim.clients[0]), sim.client_params(sim.clients[1])
        assert not np.array_equal(a["blocks.0.attn.wq"], b["blocks.0.attn.wq"])
        assert all(not np.array_equal(z, w) for z, w in zip(z0, sim.server.embeddings))
        assert reports[-1].grad_phi_norm > 0

    def test_frozen_embeddings(self, make_sim):
        sim = make_sim(StrategySpec("fedtp", freeze_embeddings=True))
        z0 = [z.copy() for z in sim.server.embeddings]
        sim.run()
        assert all(np.array_equal(z, w) for z, w in zip(z0, sim.server.embeddings))

    def test_unsampled_client_keeps_cache(self, make_sim):
        sim = make_sim("vanilla_personalized", sample_rate=0.34, rounds=1)
        report = sim.run_round()
        idle = [c for c in sim.clients if c.id not in report.sampled]
        assert len(report.sampled) == 2 and all(not c.cache for c in idle)


def _reports_equal(r1, r2):
    return [(r.to_json() | {"wall_clock": 0}) for r in r1] == [(r.to_json() | {"wall_clock": 0}) for r in r2]


def test_fedtp_rerun_is_bit_identical(make_sim):
    a, b = make_sim("fedtp"), make_sim("fedtp")
    assert _reports_equal(a.run(), b.run())
    assert all(np.array_equal(a.server.phi[k], b.server.phi[k]) for k in a.server.phi)


def test_worker_count_does_not_change_results(make_sim):
    a, b = make_sim("fedtp", workers=1), make_sim("fedtp", workers=3)
    assert _reports_equal(a.run(), b.run())


def test_checkpoint_round_trip(make_sim, tmp_path):
    sim = make_sim("fedtp")
    sim.run()
    sim.save(tmp_path / "s.npa", {"note": "x"})
    fresh = make_sim("fedtp")
    meta = fresh.load(tmp_path / "s.npa")
    assert meta["round"] == 2 and meta["experiment"] == {"note": "x"}
    assert fresh.evaluate() == sim.evaluate()


class TestNovelClient:
    def test_zero_epochs_is_no_op(self, make_sim):
        sim = make_sim("fedtp")
        sim.run()
        before, after, z = sim.finetune_novel_client(sim.clients[0], epochs=0)
        assert before == after
        np.testing.assert_array_equal(z, np.mean(sim.server.embeddings, axis=0))

    def test_only_embedding_moves(self, make_sim):
        sim = make_sim("fedtp")
        sim.run()
        phi = {k: v.copy() for k, v in sim.server.phi.items()}
        _, _, z = sim.finetune_novel_client(sim.clients[1], epochs=1)
        assert all(np.array_equal(phi[k], sim.server.phi[k]) for k in phi)
        assert not np.array_equal(z, np.mean(sim.server.embeddings, axis=0))

    def test_needs_embeddings(self, make_sim):
        sim = make_sim("fedavg")
        with pytest.raises(FederationError, match="embeddings"):
            sim.finetune_novel_client(sim.clients[0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=6), st.integers(0, 1000))
def test_aggregate_is_convex_combination(masses, seed):
    rng = np.random.default_rng(seed)
    vals = [rng.normal(size=3) for _ in masses]
    out = aggregate_shared([({"x": v}, m) for v, m in zip(vals, masses)])["x"]
    lo, hi = np.min(vals, axis=0), np.max(vals, axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
