"""Aggregation and correction against independent closed forms."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rosfl.errors import ConfigurationError
from rosfl.fedops import AnchorStore, DwcsConfig, aggregate, alpha, correct, normalized_weights
from rosfl.nn import ParamSet, stream


def _pset(values, part="head", tag=0):
    return ParamSet(part, {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}, tag)


def _random_pset(rng, part="head"):
    return ParamSet(part, {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,))})


class TestAggregate:
    def test_two_equal_clients_mean(self):
        out = aggregate([_pset({"w": [0.0, 0.0]}), _pset({"w": [2.0, 2.0]})], [0.5, 0.5])
        np.testing.assert_array_equal(out.tensors["w"], [1.0, 1.0])

    def test_size_weighted(self):
        # |D1|=1, |D2|=3 -> weights 1/4, 3/4; 0 and 4 average to 3
        weights = normalized_weights([1, 3])
        out = aggregate([_pset({"w": [0.0]}), _pset({"w": [4.0]})], weights)
        np.testing.assert_array_equal(out.tensors["w"], [3.0])

    def test_single_client_identity(self, rng):
        ps = _random_pset(rng)
        out = aggregate([ps], [1.0])
        assert out.equals(ps)

    def test_weight_validation(self, rng):
        ps = [_random_pset(rng), _random_pset(rng)]
        with pytest.raises(ConfigurationError):
            aggregate(ps, [0.7, 0.7])
        with pytest.raises(ConfigurationError):
            aggregate(ps, [1.5, -0.5])
        with pytest.raises(ConfigurationError):
            aggregate(ps, [1.0])

    def test_structure_mismatch(self, rng):
        a = _random_pset(rng)
        b = ParamSet("head", {"w": rng.normal(size=(3, 3))})
        with pytest.raises(ConfigurationError):
            aggregate([a, b], [0.5, 0.5])

    def test_matches_naive_loop(self, rng):
        sets = [_random_pset(rng) for _ in range(4)]
        weights = normalized_weights([2, 5, 1, 8])
        out = aggregate(sets, weights)
        for name in sets[0].tensors:
            naive = np.zeros_like(sets[0].tensors[name])
            for ps, w in zip(sets, weights):
                for idx in np.ndindex(naive.shape):
                    naive[idx] += w * ps.tensors[name][idx]
            assert np.max(np.abs(out.tensors[name] - naive)) <= 1e-12

    def test_linearity_in_scale(self, rng):
        sets = [_random_pset(rng) for _ in range(3)]
        weights = [0.25, 0.25, 0.5]
        c = 3.7
        scaled = [ParamSet(p.part, {k: c * v for k, v in p.tensors.items()}) for p in sets]
        a = aggregate(scaled, weights)
        b = aggregate(sets, weights)
        for name in a.tensors:
            np.testing.assert_allclose(a.tensors[name], c * b.tensors[name],
                                       atol=1e-12, rtol=0)

    def test_identical_sets_exact(self, rng):
        ps = _random_pset(rng)
        out = aggregate([ps.copy(), ps.copy(), ps.copy(), ps.copy()],
                        normalized_weights([1, 1, 1, 1]))
        # 4 * 0.25 * x sums exactly to x in binary floating point
        assert out.equals(ps)

    def test_partwise_equals_whole_vector(self, rng):
        parts = {"head": 3, "body": 6, "tail": 2}
        clients = []
        for _ in range(3):
            clients.append({part: ParamSet(part, {"w": rng.normal(size=n)})
                            for part, n in parts.items()})
        weights = normalized_weights([1, 2, 1])
        per_part = {part: aggregate([c[part] for c in clients], weights)
                    for part in parts}
        whole = aggregate(
            [ParamSet("full", {"w": np.concatenate([c[p].tensors["w"] for p in parts])})
             for c in clients], weights)
        stacked = np.concatenate([per_part[p].tensors["w"] for p in parts])
        np.testing.assert_array_equal(stacked, whole.tensors["w"])


class TestAlpha:
    def test_values(self):
        assert alpha(1, 0.99) == pytest.approx(0.5)
        assert alpha(9, 0.99) == pytest.approx(0.9)
        assert alpha(10 ** 6, 0.99) == 0.99

    def test_requires_k_ge_1(self):
        with pytest.raises(ConfigurationError):
            alpha(0, 0.99)

    @given(st.integers(min_value=1, max_value=10 ** 6),
           st.floats(min_value=0.0, max_value=0.999))
    def test_nondecreasing_and_bounded(self, k, beta):
        assert alpha(k, beta) <= alpha(k + 1, beta) <= beta


class TestCorrect:
    def test_identity_when_no_drift(self, rng):
        ps = _random_pset(rng)
        for direction in ("extrapolate", "stabilize"):
            cfg = DwcsConfig(mu=0.5, eta=0.1, beta=0.99, direction=direction)
            out = correct(ps.copy(), ps.copy(), cfg, k=3)
            assert out.equals(ps)

    def test_identity_when_mu_zero(self, rng):
        cur, prev = _random_pset(rng), _random_pset(rng)
        out = correct(cur, prev, DwcsConfig(mu=0.0, eta=0.1), k=2)
        assert out.equals(cur)

    def test_scalar_hand_evaluation(self):
        # theta=2, prev=1, mu=0.5, eta=0.1, k=1: correction model 2.05,
        # alpha 0.5, blend 0.5*2 + 0.5*2.05 = 2.025
        out = correct(_pset({"t": [2.0]}), _pset({"t": [1.0]}),
                      DwcsConfig(mu=0.5, eta=0.1, beta=0.99), k=1)
        assert out.tensors["t"][0] == pytest.approx(2.025, abs=1e-15)

    def test_stabilize_flips_sign(self):
        out = correct(_pset({"t": [2.0]}), _pset({"t": [1.0]}),
                      DwcsConfig(mu=0.5, eta=0.1, beta=0.99, direction="stabilize"), k=1)
        assert out.tensors["t"][0] == pytest.approx(1.975, abs=1e-15)

    def test_matches_literal_three_step_form(self, rng):
        cur, prev = _random_pset(rng), _random_pset(rng)
        for k in (1, 5, 400):
            for direction, sign in (("extrapolate", 1.0), ("stabilize", -1.0)):
                cfg = DwcsConfig(mu=3e-2, eta=0.7, beta=0.9, direction=direction)
                out = correct(cur.copy(), prev.copy(), cfg, k)
                a = min(1 - 1 / (k + 1), 0.9)
                for name in cur.tensors:
                    drift_grad = cfg.mu * (cur.tensors[name] - prev.tensors[name])
                    correction = cur.tensors[name] + sign * cfg.eta * drift_grad
                    blended = (1 - a) * cur.tensors[name] + a * correction
                    assert np.max(np.abs(out.tensors[name] - blended)) <= 1e-12

    def test_displacement_closed_form(self, rng):
        cur, prev = _random_pset(rng), _random_pset(rng)
        cfg = DwcsConfig(mu=0.3, eta=0.25, beta=0.99)
        k = 4
        out = correct(cur, prev, cfg, k)
        moved = np.linalg.norm(out.flat() - cur.flat())
        drift = np.linalg.norm(cur.flat() - prev.flat())
        expected = alpha(k, cfg.beta) * cfg.eta * cfg.mu * drift
        assert abs(moved - expected) <= 1e-10

    def test_mismatch_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            correct(_random_pset(rng), _pset({"other": [1.0]}), DwcsConfig(), 1)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            DwcsConfig(mu=-1.0).validate()
        with pytest.raises(ConfigurationError):
            DwcsConfig(beta=1.0).validate()
        with pytest.raises(ConfigurationError):
            DwcsConfig(eta=0.0).validate()
        with pytest.raises(ConfigurationError):
            DwcsConfig(direction="sideways").validate()


class TestAnchorStore:
    def test_round_tag_must_advance(self, rng):
        store = AnchorStore()
        store.put("head", ParamSet("head", {"w": rng.normal(size=2)}, 0))
        store.put("head", ParamSet("head", {"w": rng.normal(size=2)}, 1))
        with pytest.raises(ConfigurationError):
            store.put("head", ParamSet("head", {"w": rng.normal(size=2)}, 1))

    def test_get_copies_are_isolated(self, rng):
        store = AnchorStore()
        ps = ParamSet("tail", {"w": np.ones(2)}, 0)
        store.put("tail", ps)
        ps.tensors["w"][:] = 99.0
        np.testing.assert_array_equal(store.get("tail").tensors["w"], [1.0, 1.0])
