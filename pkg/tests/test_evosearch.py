import math

import numpy as np
import pytest

from casnas.evosearch import (LATENCY, MFLOPS, DeviceProfile, InfeasibleConstraint, ProfileError, SearchConfig,
                              exhaustive_best, load_profile, pareto_sweep, predict_latency, profile_from_dict,
                              search)
from casnas.flops import mflops
from casnas.space import SpaceSpec, encode, iter_subnets, max_subnet, min_subnet, sample_uniform

from conftest import stage

KINDS = ("ConvStem", "MBv2", "MBv3", "Transformer", "MBPool")


def smooth_evaluator(space):
    """Accuracy rises with FLOPs plus a fixed per-genome jitter."""
    def ev(cfg):
        g = encode(space, cfg)
        jitter = np.random.default_rng(list(g)).uniform(0, 0.05)
        acc = min(1.0, 0.5 * mflops(space, cfg) / mflops(space, max_subnet(space)) + jitter)
        return acc, 1.0 - acc
    return ev


def uniform_profile(coef=1.0, overhead=0.0):
    return DeviceProfile("u", {k: coef for k in KINDS}, {k: overhead for k in KINDS})


class TestLatency:
    def test_zero_profile(self, micro, rng):
        p = uniform_profile(0.0)
        assert predict_latency(p, micro, sample_uniform(micro, rng)) == 0.0

    def test_linear_in_scale(self, micro, rng):
        p = load_profile("neutral")
        for _ in range(20):
            cfg = sample_uniform(micro, rng)
            assert predict_latency(p.scaled(3.0), micro, cfg) == pytest.approx(3 * predict_latency(p, micro, cfg))

    def test_coefficient_only_equals_mflops(self, micro, rng):
        cfg = sample_uniform(micro, rng)
        assert predict_latency(uniform_profile(1.0), micro, cfg) == pytest.approx(mflops(micro, cfg))

    def test_three_layer_hand_sum(self):
        sp = SpaceSpec("three", (stage("ConvStem", channels=(8, 8, 8), stride=2), stage("MBv2"),
                                 stage("MBPool", channels=(16, 16, 1), expansions=(2,))), (8,), num_classes=4)
        stem = 2 * 4 * 4 * 8 * 27
        mb = 2 * 16 * 8 * 9 + 2 * 16 * 8 * 8 + 16 * 8
        head = 2 * 16 * 8 * 16 + 16 * 16 + 2 * 16 * 16 + 2 * 16 * 4
        p = DeviceProfile("h", {"ConvStem": 0.5, "MBv2": 2.0, "MBPool": 1.0}, {"MBv2": 0.25, "MBPool": 0.125})
        expected = 0.5 * stem / 1e6 + 2.0 * mb / 1e6 + 0.25 + head / 1e6 + 0.125
        assert predict_latency(p, sp, min_subnet(sp)) == pytest.approx(expected, rel=1e-12)
        doubled = DeviceProfile("h2", p.coefficients, p.overheads, {8: 2.0})
        assert predict_latency(doubled, sp, min_subnet(sp)) == pytest.approx(2 * expected, rel=1e-12)

    def test_missing_kind(self, micro):
        with pytest.raises(ProfileError):
            predict_latency(DeviceProfile("x", {"MBv2": 1.0}), micro, min_subnet(micro))

    def test_bundled_ordering(self, micro):
        cfg = max_subnet(micro)
        s, n, w = (predict_latency(load_profile(name), micro, cfg) for name in ("strong", "neutral", "weak"))
        assert s < n < w


class TestProfiles:
    @pytest.mark.parametrize("data", [
        {"name": "x", "coefficients": {}},
        {"name": "x", "coefficients": {"Nope": 1.0}},
        {"name": "x", "coefficients": {"MBv2": -1.0}},
        {"name": "x", "coefficients": {"MBv2": 1.0}, "resolution_multipliers": {"8": 0}},
        {"coefficients": {"MBv2": 1.0}},
        {"name": "x", "coefficients": {"MBv2": "fast"}},
    ])
    def test_invalid(self, data):
        with pytest.raises(ProfileError):
            profile_from_dict(data)

    def test_roundtrip(self):
        p = load_profile("weak")
        assert profile_from_dict(p.to_dict()) == p

    def test_unknown_name(self):
        with pytest.raises(ProfileError):
            load_profile("no-such-device")

    def test_file(self, tmp_path):
        f = tmp_path / "d.toml"
        f.write_text('name = "d"\n[coefficients]\nMBv2 = 1.5\n')
        assert load_profile(f).coefficients == {"MBv2": 1.5}
        f.write_text("name = \n")
        with pytest.raises(ProfileError):
            load_profile(f)


class TestSearchConfig:
    @pytest.mark.parametrize("kw", [{}, {"latency_ms": 1, "mflops": 1}, {"mflops": 1, "population": 1},
                                    {"mflops": 1, "budget": 10}, {"mflops": 1, "mutation_rate": 0},
                                    {"mflops": 1, "parent_fraction": 1.5}, {"mflops": 1, "generations": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SearchConfig(**kw)

    def test_constraint(self):
        assert SearchConfig(latency_ms=3.0).constraint == (LATENCY, 3.0)
        assert SearchConfig(mflops=2.0).constraint == (MFLOPS, 2.0)


class TestSearch:
    def _run(self, micro, **kw):
        cfg = SearchConfig(**{"population": 16, "budget": 80, **kw})
        return search(None, micro, load_profile("neutral"), cfg, evaluator=smooth_evaluator(micro))

    def test_constraint_respected(self, micro):
        limit = predict_latency(load_profile("neutral"), micro, max_subnet(micro)) / 2
        res = self._run(micro, latency_ms=limit)
        assert all(c.latency_ms <= limit for c in res.candidates)
        assert res.best.latency_ms <= limit

    def test_budget_and_uniqueness(self, micro):
        res = self._run(micro, mflops=3.0)
        assert res.evaluations == len(res.candidates) <= 80
        assert len({c.genome for c in res.candidates}) == len(res.candidates)

    def test_history_monotone(self, micro):
        res = self._run(micro, mflops=3.0)
        fits = [h["best_fitness"] for h in res.history]
        assert all(b >= a for a, b in zip(fits, fits[1:]))
        assert res.history[-1]["best_genome"] == res.best.genome

    def test_best_is_top_ranked(self, micro):
        res = self._run(micro, mflops=3.0)
        assert res.best.fitness == max(c.fitness for c in res.candidates)

    def test_deterministic(self, micro):
        a = self._run(micro, mflops=3.0, seed=5).to_json()
        b = self._run(micro, mflops=3.0, seed=5).to_json()
        assert a == b

    def test_infeasible(self, micro):
        with pytest.raises(InfeasibleConstraint):
            self._run(micro, mflops=mflops(micro, min_subnet(micro)) / 2)

    def test_loose_latency(self, micro):
        assert self._run(micro, latency_ms=1e9).best.latency_ms < 1e9

    def test_latency_needs_profile(self, micro):
        with pytest.raises(ValueError):
            search(None, micro, None, SearchConfig(latency_ms=1.0, population=4, budget=4),
                   evaluator=smooth_evaluator(micro))

    def test_needs_evaluator(self, micro):
        with pytest.raises(ValueError):
            search(None, micro, None, SearchConfig(mflops=1.0))

    def test_exhausts_tiny(self, tiny):
        ev = smooth_evaluator(tiny)
        res = search(None, tiny, None, SearchConfig(mflops=1e9, population=32, budget=5000), evaluator=ev)
        assert res.exhausted and res.evaluations == 512
        oracle = exhaustive_best(tiny, iter_subnets(tiny), None, 1e9, MFLOPS, ev)
        assert res.best.genome == oracle.genome


class TestSweep:
    def test_sorted_and_infeasible_reported(self, micro):
        lo = mflops(micro, min_subnet(micro))
        cfg = SearchConfig(mflops=1.0, population=8, budget=24)
        entries = pareto_sweep(None, micro, None, [3.0, lo / 2, 1.0], cfg, evaluator=smooth_evaluator(micro))
        assert [e.constraint for e in entries] == sorted([3.0, lo / 2, 1.0])
        assert entries[0].result is None and entries[0].row()["feasible"] is False
        assert all(e.result.best.mflops <= e.constraint for e in entries[1:])

    def test_single_equals_search(self, micro):
        ev = smooth_evaluator(micro)
        cfg = SearchConfig(mflops=2.0, population=8, budget=24, seed=3)
        (entry,) = pareto_sweep(None, micro, None, [2.0], cfg, evaluator=ev)
        assert entry.result.to_json() == search(None, micro, None, cfg, evaluator=ev).to_json()

    def test_nan_latency_serialized(self, micro):
        cfg = SearchConfig(mflops=2.0, population=4, budget=4)
        js = search(None, micro, None, cfg, evaluator=smooth_evaluator(micro)).to_json()
        assert js["best"]["latency_ms"] is None
        assert not math.isnan(js["best"]["mflops"])
