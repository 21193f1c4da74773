from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colhar.agent import Agent
from colhar.errors import ArchitectureError, ConfigError, UsageError
from colhar.network import (InProcessTransport, NeighborContribution, RoundLog, ZeroTotalWeight,
                            aggregate, build_topology, derive_weights, run_round, run_training)
from colhar.nn import AdamState, ModelArchitecture, adam_step, init_params
from conftest import make_dataset, random_windows

ARCH = ModelArchitecture(input_channels=2, num_classes=2, window_length=10, conv_out_channels=3)


def contrib(i, params, w):
    return NeighborContribution(i, np.asarray(params, dtype=float), w)


def network(rng, sizes, seed=0, **kw):
    agents = [Agent(i, ARCH, make_dataset(i, random_windows(rng, ARCH, n)),
                    init_seed=seed + i, shuffle_seed=seed + 10 + i, **kw)
              for i, n in enumerate(sizes)]
    topo = build_topology(len(sizes))
    return agents, topo, derive_weights(topo, [a.size_weight for a in agents])


class TestTopology:
    def test_full(self):
        t = build_topology(4)
        assert len(t.edges) == 12
        assert t.in_neighbors(2) == [0, 1, 3]

    def test_single_agent(self):
        assert build_topology(1).edges == frozenset()

    def test_ring(self):
        t = build_topology(4, "ring")
        assert t.in_neighbors(0) == [1, 3] and t.out_neighbors(0) == [1, 3]
        assert len(t.edges) == 8

    def test_random_is_seeded(self):
        a = build_topology(6, "random", degree=2, seed=5)
        assert a == build_topology(6, "random", degree=2, seed=5)
        assert all(len(a.in_neighbors(i)) >= 2 for i in range(6))
        assert all(s != r and (r, s) in a.edges for s, r in a.edges)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_topology(3, "star")


class TestWeights:
    def test_size_weighted_with_self(self):
        w = derive_weights(build_topology(2), [100, 300])
        assert w.vector(0) == ((0, 100.0), (1, 300.0))
        assert w.vector(1) == ((0, 100.0), (1, 300.0))

    def test_without_self(self):
        w = derive_weights(build_topology(2), [100, 300], include_self=False)
        assert w.vector(0) == ((1, 300.0),)
        assert not w.include_self

    def test_equal_sizes_give_equal_shares(self):
        w = derive_weights(build_topology(3), [7, 7, 7], include_self=False)
        for r in range(3):
            ws = [x for _, x in w.vector(r)]
            assert [x / sum(ws) for x in ws] == [0.5, 0.5]


class TestAggregate:
    def test_weighted_mean(self):
        out = aggregate([contrib(0, [0.0], 1), contrib(1, [1.0], 3)])
        assert out[0] == 0.75

    def test_idempotent(self):
        p = np.array([0.1, -0.3, 2.5])
        out = aggregate([contrib(i, p, w) for i, w in enumerate((3, 5, 11))])
        np.testing.assert_allclose(out, p, rtol=1e-15)

    def test_single_contribution_bitwise(self, rng):
        p = rng.normal(size=50)
        p[3] = -0.0
        out = aggregate([contrib(0, p, 7)])
        assert out.tobytes() == p.tobytes()

    def test_order_independent(self, rng):
        cs = [contrib(i, rng.normal(size=10), float(i + 1)) for i in range(4)]
        assert aggregate(cs).tobytes() == aggregate(cs[::-1]).tobytes()

    def test_zero_weight_ignored(self):
        out = aggregate([contrib(0, [1.0], 2), contrib(1, [np.nan], 0)])
        assert out[0] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ArchitectureError):
            aggregate([contrib(0, [1.0], 1), contrib(1, [1.0, 2.0], 1)])

    def test_zero_total(self):
        with pytest.raises(ZeroTotalWeight):
            aggregate([contrib(0, [1.0], 0), contrib(1, [2.0], 0)])
        with pytest.raises(UsageError):
            aggregate([contrib(0, [1.0], -1)])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 40))
    def test_convex_and_exact(self, seed, z, p):
        rng = np.random.default_rng(seed)
        thetas = rng.normal(size=(z, p))
        weights = rng.integers(1, 1000, size=z)
        out = aggregate([contrib(i, thetas[i], float(weights[i])) for i in range(z)])
        assert np.all(out >= thetas.min(axis=0) - 1e-12)
        assert np.all(out <= thetas.max(axis=0) + 1e-12)
        total = sum(int(w) for w in weights)
        for k in range(p):
            exact = sum(Fraction(float(thetas[i, k])) * int(weights[i]) for i in range(z)) / total
            assert abs(out[k] - float(exact)) <= 1e-12 * max(1.0, abs(float(exact)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_conservation_of_mean_under_full_topology(self, seed, n):
        rng = np.random.default_rng(seed)
        thetas = rng.normal(size=(n, 5))
        sizes = rng.integers(1, 50, size=n)
        w = derive_weights(build_topology(n), list(sizes))
        new = np.array([aggregate([contrib(s, thetas[s], x) for s, x in w.vector(r)])
                        for r in range(n)])
        before = (sizes[:, None] * thetas).sum(axis=0) / sizes.sum()
        after = (sizes[:, None] * new).sum(axis=0) / sizes.sum()
        np.testing.assert_allclose(after, before, rtol=1e-12, atol=1e-12)


class TestTransport:
    def test_barrier(self):
        from colhar.codec import Message
        t = InProcessTransport()
        t.send(1, Message(0, 0, 1.0, ARCH.fingerprint(), np.zeros(ARCH.num_params)))
        assert t.collect(1) == []
        t.deliver()
        assert [m.sender_id for m in t.collect(1)] == [0]
        assert t.collect(1) == []


class TestRounds:
    def test_round_zero_is_plain_step(self, rng):
        agents, topo, w = network(rng, [6, 6])
        start = [a.get_params() for a in agents]
        batches = [a._x[a._order[:4]] for a in agents]
        labels = [a._y[a._order[:4]] for a in agents]
        run_round(agents, topo, w, 4, 0, InProcessTransport())
        for a, p0, x, y in zip(agents, start, batches, labels):
            from colhar.nn import loss_and_grad_arrays
            _, g = loss_and_grad_arrays(p0, ARCH, x, y)
            expected, _ = adam_step(p0, g, AdamState.fresh(ARCH.num_params))
            assert np.array_equal(a.get_params(), expected)

    def test_single_agent_equals_plain_training(self, rng):
        windows = random_windows(rng, ARCH, 20)
        solo = Agent(0, ARCH, make_dataset(0, windows), init_seed=1, shuffle_seed=2)
        net = Agent(0, ARCH, make_dataset(0, windows), init_seed=1, shuffle_seed=2)
        topo = build_topology(1)
        w = derive_weights(topo, [20])
        t = InProcessTransport()
        for r in range(12):
            solo.train_one_batch(6)
            run_round([net], topo, w, 6, r, t)
        assert solo.get_params().tobytes() == net.get_params().tobytes()

    def test_symmetric_pair_stays_equal(self, rng):
        windows = random_windows(rng, ARCH, 12)
        agents = [Agent(i, ARCH, make_dataset(i, windows), init_seed=1, shuffle_seed=2)
                  for i in range(2)]
        topo = build_topology(2)
        w = derive_weights(topo, [12, 12])
        log = RoundLog()
        t = InProcessTransport()
        for r in range(10):
            run_round(agents, topo, w, 5, r, t, log)
            a, b = log.rows(r)
            assert a.post_checksum == b.post_checksum

    def test_wire_transport_identical(self, rng):
        a1, topo, w = network(rng, [9, 14, 5])
        a2, _, _ = network(np.random.default_rng(12345), [9, 14, 5])
        t1, t2 = InProcessTransport(), InProcessTransport(ARCH)
        for r in range(6):
            run_round(a1, topo, w, 4, r, t1)
            run_round(a2, topo, w, 4, r, t2)
        for x, y in zip(a1, a2):
            assert x.get_params().tobytes() == y.get_params().tobytes()

    def test_aggregation_uses_previous_round_snapshots(self, rng):
        from colhar.nn import loss_and_grad_arrays
        agents, topo, w = network(rng, [8, 8])
        t = InProcessTransport()
        run_round(agents, topo, w, 4, 0, t)
        snaps = [a.get_params() for a in agents]
        a0 = agents[0]
        state, idx = a0.adam, a0._order[a0.cursor:a0.cursor + 4]
        log = RoundLog()
        run_round(agents, topo, w, 4, 1, t, log)
        assert all(e.aggregated for e in log.entries)
        mixed = aggregate([contrib(i, snaps[i], 8.0) for i in range(2)])
        _, g = loss_and_grad_arrays(mixed, ARCH, a0._x[idx], a0._y[idx])
        expected, _ = adam_step(mixed, g, state)
        assert a0.get_params().tobytes() == expected.tobytes()


class TestRunTraining:
    def test_round_count_and_aggregations(self, rng):
        agents, topo, w = network(rng, [3, 3])
        log = RoundLog()
        run_training(agents, topo, w, epochs=3, batch_size=8, round_log=log)
        assert sorted({e.round for e in log.entries}) == [0, 1, 2]
        assert sum(e.aggregated for e in log.entries) == 4
        assert all(a.epoch == 3 for a in agents)

    def test_hooks_fire_per_epoch(self, rng):
        agents, topo, w = network(rng, [6, 6])
        test = random_windows(rng, ARCH, 5)
        hist = run_training(agents, topo, w, 2, 4, [lambda a, e: a.evaluate(test, e)])
        assert [(m.agent_id, m.epoch) for m in hist] == [(0, 1), (0, 2), (1, 1), (1, 2)]

    def test_heterogeneous_epochs(self, rng):
        agents, topo, w = network(rng, [4, 12])
        seen = []
        run_training(agents, topo, w, 2, 4, [lambda a, e: seen.append((a.agent_id, e))])
        # agent 0 has 1 batch per epoch, agent 1 has 3; 6 rounds in total
        assert sorted(seen) == [(0, 1), (0, 2), (1, 1), (1, 2)]
        assert agents[0].epoch == 6 and agents[1].epoch == 2

    def test_frozen_model_has_constant_metrics(self, rng):
        agents, topo, w = network(rng, [5, 5], adam={"alpha": 0.0})
        for a in agents:
            a.set_params(np.zeros(ARCH.num_params))
        test = random_windows(rng, ARCH, 8)
        hist = run_training(agents, topo, w, 3, 5, [lambda a, e: a.evaluate(test, e)])
        assert len({(m.macro_f1, m.mean_loss) for m in hist}) == 1

    def test_replay_and_worker_independence(self, rng):
        def run(workers):
            agents, topo, w = network(np.random.default_rng(7), [11, 7, 9])
            test = random_windows(np.random.default_rng(8), ARCH, 6)
            log = RoundLog()
            hist = run_training(agents, topo, w, 3, 4, [lambda a, e: a.evaluate(test, e)],
                                workers=workers, round_log=log)
            return hist, [e.post_checksum for e in log.entries]
        h1, c1 = run(1)
        h2, c2 = run(1)
        h3, c3 = run(3)
        assert c1 == c2 == c3
        assert all(a.same_as(b) and a.same_as(c) for a, b, c in zip(h1, h2, h3))

    def test_passive_agent_evaluated_on_longest_clock(self, rng):
        agents = [Agent(0, ARCH, make_dataset(0, random_windows(rng, ARCH, 8))),
                  Agent(1, ARCH, make_dataset(1, []))]
        topo = build_topology(2)
        w = derive_weights(topo, [8, 0])
        seen = []
        run_training(agents, topo, w, 2, 4, [lambda a, e: seen.append((a.agent_id, e))])
        assert sorted(seen) == [(0, 1), (0, 2), (1, 1), (1, 2)]
        # passive agent ends up holding the active agent's parameters
        assert agents[1].get_params().tobytes() != init_params(ARCH, 0).tobytes()

    def test_requires_ordered_ids(self, rng):
        agents, topo, w = network(rng, [3, 3])
        with pytest.raises(UsageError):
            run_training(agents[::-1], topo, w, 1, 2)

    def test_no_active_agent(self):
        agents = [Agent(0, ARCH, make_dataset(0, []))]
        topo = build_topology(1)
        with pytest.raises(UsageError):
            run_training(agents, topo, derive_weights(topo, [0]), 1, 2)
