import math

import numpy as np
import pytest

from casnas.conflict import (cosine, cosine_matrix, good_vs_random, grad_cosine, mean_offdiag, pearson,
                             similarity_sweep, subnet_grads)
from casnas.micronet import Batch, init_weights, mask_of, slice_map
from casnas.space import SubnetConfig, sample_uniform

from conftest import hybrid_space


@pytest.fixture(scope="module")
def setup():
    space = hybrid_space()
    w = init_weights(space, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(1)
    batch = Batch(rng.standard_normal((4, 3, 12, 12)), rng.integers(0, 4, 4))
    return space, w, batch


def at12(space, rng):
    return SubnetConfig(sample_uniform(space, rng).stages, 12)


def oracle_cosine(space, ga, gb, cfg_a, cfg_b):
    """Dot product over the elementwise intersection of both subnets' active masks."""
    sa, sb = slice_map(space, cfg_a), slice_map(space, cfg_b)
    u, v = [], []
    for name in sorted(set(sa) & set(sb)):
        m = mask_of(ga[name].shape, sa[name]) & mask_of(gb[name].shape, sb[name])
        u.append(ga[name][m])
        v.append(gb[name][m])
    u, v = np.concatenate(u), np.concatenate(v)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


class TestCosine:
    def test_self_is_one(self, setup):
        space, w, batch = setup
        rng = np.random.default_rng(2)
        for _ in range(5):
            cfg = at12(space, rng)
            assert grad_cosine(w, space, cfg, cfg, batch).value == pytest.approx(1.0, abs=1e-12)

    def test_matches_flatten_oracle(self, setup):
        space, w, batch = setup
        rng = np.random.default_rng(3)
        cache = {}

        def grads(cfg):
            if cfg not in cache:
                cache[cfg] = subnet_grads(w, space, cfg, batch)
            return cache[cfg]

        for _ in range(100):
            a, b = at12(space, rng), at12(space, rng)
            got = grad_cosine(w, space, a, b, batch)
            assert not got.degenerate
            assert got.value == pytest.approx(oracle_cosine(space, grads(a), grads(b), a, b), abs=1e-9)

    def test_degenerate(self):
        c = cosine(np.zeros(3), np.ones(3))
        assert c.degenerate and c.value == 0.0

    def test_clipped(self):
        v = np.array([1e-3, 2e-3, 3e-3])
        assert -1.0 <= cosine(v, v).value <= 1.0


class TestMatrix:
    def test_symmetric_unit_diagonal(self, setup):
        space, w, batch = setup
        rng = np.random.default_rng(4)
        cfgs = [at12(space, rng) for _ in range(6)]
        mat, degenerate = cosine_matrix(space, cfgs, [subnet_grads(w, space, c, batch) for c in cfgs])
        assert np.array_equal(mat, mat.T)
        np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-12)
        assert degenerate == []
        assert np.all(np.abs(mat) <= 1.0)

    def test_mean_offdiag(self):
        m = np.array([[1, 0.2, 0.4], [0.2, 1, 0.6], [0.4, 0.6, 1]])
        assert mean_offdiag(m, [0, 1, 2]) == pytest.approx(0.4)
        assert math.isnan(mean_offdiag(m, [1]))


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_matches_numpy(self, rng):
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)

    def test_constant_is_nan(self):
        assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


class TestHarnesses:
    def test_sweep_report(self, micro):
        w = init_weights(micro, np.random.default_rng(0))
        rng = np.random.default_rng(5)
        batch = Batch(rng.standard_normal((4, 3, 32, 32)), rng.integers(0, 8, 4))
        rep = similarity_sweep(w, micro, [0.5, 2.4], 2, batch, rng)
        js = rep.to_json()
        assert len(js["subnets"]) == 4 and np.array(js["matrix"]).shape == (4, 4)
        assert [b["target_gap"] for b in js["buckets"]] == [0.0, pytest.approx(1.9)]
        assert js["advisory"]["expected"] == "negative"

    def test_good_vs_random(self, micro):
        w = init_weights(micro, np.random.default_rng(0))
        rng = np.random.default_rng(6)
        batch = Batch(rng.standard_normal((4, 3, 32, 32)), rng.integers(0, 8, 4))
        res = good_vs_random(w, micro, 1.1, 4, 2, [batch], batch, rng)
        assert len(res.top_indices) == 2
        ranked = sorted(range(4), key=lambda i: (res.eval_losses[i], i))[:2]
        assert res.top_indices == sorted(ranked)
        assert res.top_mean == pytest.approx(mean_offdiag(res.matrix, res.top_indices))

    def test_good_vs_random_bad_k(self, micro):
        with pytest.raises(ValueError):
            good_vs_random(None, micro, 1.1, 2, 3, [], None, np.random.default_rng(0))

    def test_weights_untouched(self, setup):
        space, w, batch = setup
        before = {k: v.copy() for k, v in w.params.items()}
        rng = np.random.default_rng(7)
        grad_cosine(w, space, at12(space, rng), at12(space, rng), batch)
        assert all(np.array_equal(before[k], v) for k, v in w.params.items())
