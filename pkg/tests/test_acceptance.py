"""Acceptance criteria 1-10.

Each test records a PASS/FAIL line into ``conftest.ACCEPTANCE_RESULTS`` (listed in the
terminal summary) and prints it, then asserts. Runtime limits are part of each check.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from casnas.conflict import good_vs_random, grad_cosine, similarity_sweep, subnet_grads, cosine_matrix
from casnas.evosearch import (LATENCY, SearchConfig, batch_evaluator, exhaustive_best, load_profile,
                              predict_latency, search)
from casnas.flops import level_of, mflops
from casnas.ladder import ComplexityLadder, HssSet, nearest_min
from casnas.micronet import Batch, SyntheticClusters, init_weights, loss_and_grads, mask_of, slice_map
from casnas.perfsample import MemoryBank, QSchedule, bank_update, preference_check, q_at
from casnas.space import cardinality, load_space, encode, iter_subnets, max_subnet, min_subnet, parse_genome, sample_uniform
from casnas.trainer import TrainConfig, read_metrics, run, weights_from_checkpoint

from conftest import ACCEPTANCE_RESULTS, hybrid_space
from test_conflict import oracle_cosine
from test_micronet import BLOCK_PREFIXES, mixed_config
from test_perfsample import distinct_configs, preference_fixtures
from test_space import enumerate_by_hand

pytestmark = pytest.mark.slow


def report(n, ok, detail):
    ACCEPTANCE_RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.fixture(scope="module")
def smoke_runs(tmp_path_factory):
    """Three 500-step elastic runs (criterion 8); seed 0 also feeds criterion 7."""
    root = tmp_path_factory.mktemp("smoke")
    out = {}
    with Timer() as t:
        for seed in (0, 1, 2):
            out[seed] = run(TrainConfig(seed=seed, total_steps=500), root / f"seed{seed}")
    return out, t.elapsed


def test_criterion_1_flops_anchors():
    with Timer() as t:
        evit = load_space("elasticvit")
        lo, hi = mflops(evit, min_subnet(evit)), mflops(evit, max_subnet(evit))
    ok = abs(lo - 37) <= 0.2 * 37 and abs(hi - 3191) <= 0.2 * 3191 and t.elapsed < 1
    report(1, ok, f"min {lo:.2f} MFLOPs (37 +-20%), max {hi:.2f} MFLOPs (3191 +-20%), {t.elapsed:.3f}s")


def test_criterion_2_cardinality(evit, tiny):
    with Timer() as t:
        log10 = cardinality(evit).log10
        checks = []
        for sp in (hybrid_space(granularity="layer"), hybrid_space(granularity="stage"), tiny):
            brute = enumerate_by_hand(sp)
            assert len(brute) < 10**6
            checks.append((sp.name + "/" + sp.granularity, cardinality(sp).exact, len(brute)))
    ok = 16 <= log10 <= 19 and all(a == b for _, a, b in checks) and t.elapsed < 60
    detail = ", ".join(f"{n} {a}=={b}" for n, a, b in checks)
    report(2, ok, f"log10 |space| = {log10:.3f}; {detail}; {t.elapsed:.1f}s")


def test_criterion_3_adjacency(micro):
    with Timer() as t:
        cfg = TrainConfig(total_steps=2000, batch_size=8, eval_batches=1, eval_batch_size=8)
        res = run(cfg, space=micro)
    lad = ComplexityLadder(cfg.ladder)
    recs = res.records
    top = max_subnet(micro)
    jumps = sum(abs(b.level - a.level) > 1 for a, b in zip(recs, recs[1:]))
    off_level = max_seen = 0
    for r in recs:
        assert len(r.subnets) == cfg.M + 1
        for s in r.subnets:
            max_seen += parse_genome(micro, s.genome) == top
        for s in r.subnets[1:]:
            try:
                off_level += level_of(s.mflops, lad) != r.level
            except ValueError:
                off_level += 1
    hss = HssSet(("a", "b", "c"), (37.0, 160.0, 280.0))
    rule = nearest_min(hss, 100) == "b" and nearest_min(hss, 200) == "c"
    ok = len(recs) == 2000 and jumps == 0 and off_level == 0 and max_seen == 0 and rule and t.elapsed < 600
    report(3, ok, f"{len(recs)} steps, level jumps>1: {jumps}, off-level subnets: {off_level}, "
                  f"max subnet seen: {max_seen}, HSS rule 100->160 200->280: {rule}, {t.elapsed:.0f}s")


def fd_check(space, weights, cfg, x, y, prefix, rng, want=20, eps=1e-6):
    res = loss_and_grads(weights, space, cfg, x, y)
    sm = slice_map(space, cfg)
    names = [n for n in sm if n.startswith(prefix)]
    worst, checked = 0.0, 0
    for _ in range(400):
        if checked >= want:
            break
        name = names[int(rng.integers(len(names)))]
        region = np.argwhere(mask_of(weights.params[name].shape, sm[name]))
        idx = tuple(region[int(rng.integers(len(region)))])
        p = weights.params[name]
        orig = p[idx]
        p[idx] = orig + eps
        up = loss_and_grads(weights, space, cfg, x, y, full=False).loss
        p[idx] = orig - eps
        down = loss_and_grads(weights, space, cfg, x, y, full=False).loss
        p[idx] = orig
        numeric, analytic = (up - down) / (2 * eps), res.grads[name][idx]
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-5:
            continue
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
    return checked, worst


def test_criterion_4_gradients():
    with Timer() as t:
        space = hybrid_space()
        w = init_weights(space, np.random.default_rng(0), np.float64)
        prng = np.random.default_rng(1)
        for name, p in w.params.items():
            if name.endswith((".s", ".b", "_b")):
                p += 0.1 * prng.standard_normal(p.shape)
        drng = np.random.default_rng(2)
        x, y = drng.standard_normal((3, 3, 12, 12)), drng.integers(0, space.num_classes, 3)
        cfg = mixed_config(space)
        per_kind = {k: fd_check(space, w, cfg, x, y, pre, np.random.default_rng(10 + i))
                    for i, (k, pre) in enumerate(BLOCK_PREFIXES.items())}
        inactive_nonzero = 0
        cfgs = [sample_uniform(space, drng) for _ in range(6)]
        for c in cfgs:
            g = loss_and_grads(w, space, c, x, y).grads
            sm = slice_map(space, c)
            for name, arr in g.items():
                m = mask_of(arr.shape, sm[name]) if name in sm else np.zeros(arr.shape, bool)
                inactive_nonzero += int(np.count_nonzero(arr[~m]))
        parts = [loss_and_grads(w, space, c, x, y).grads for c in cfgs[:4]]
        acc = {}
        for c in cfgs[:4]:
            for n, g in loss_and_grads(w, space, c, x, y, full=False).grads.items():
                acc[n] = acc.get(n, 0) + g
        lin = max(float(np.max(np.abs(acc.get(n, 0) - sum(p[n] for p in parts)))) for n in w.params)
    fd_ok = all(c >= 20 and e < 1e-4 for c, e in per_kind.values())
    ok = fd_ok and inactive_nonzero == 0 and lin <= 1e-12 and t.elapsed < 120
    kinds = ", ".join(f"{k} {c}@{e:.1e}" for k, (c, e) in per_kind.items())
    report(4, ok, f"FD max rel err per kind [{kinds}]; inactive nonzero {inactive_nonzero}; "
                  f"linearity {lin:.1e}; {t.elapsed:.1f}s")


def test_criterion_5_memory_bank(micro):
    with Timer() as t:
        cfgs = distinct_configs(micro, 80)
        losses = np.random.default_rng(0).permutation(80) / 10 + 0.05
        bank = MemoryBank(1, capacity=8)
        seen, mismatches, over = [], 0, 0
        for step, (c, loss) in enumerate(zip(cfgs, losses)):
            bank_update(micro, bank, 0, c, float(loss), step)
            seen.append((float(loss), encode(micro, c)))
            mismatches += sorted((e.loss, encode(micro, e.config)) for e in bank[0]) != sorted(seen)[:8]
            over += len(bank[0]) > 8
        q0 = q_at(QSchedule(), 0, 1000)
        qs = [q_at(QSchedule(), s, 1000) for s in range(1001)]
        mono = all(b >= a for a, b in zip(qs, qs[1:]))
    ok = mismatches == 0 and over == 0 and q0 == 0.2 and mono and t.elapsed < 1
    report(5, ok, f"oracle mismatches {mismatches}/80, capacity overruns {over}, q(0)={q0}, "
                  f"monotone {mono}, {t.elapsed:.3f}s")


def test_criterion_6_preference(micro):
    with Timer() as t:
        anchor, cands = preference_fixtures(micro)
        results = [preference_check(micro, anchor, c) for c in cands]
        decisions = [r.accept for r in results]
        base = mflops(micro, anchor)
        phi_ok = (math.isclose(results[0].phi_a, mflops(micro, cands[0]) - base) and results[0].phi_b == 0
                  and results[1].phi_a == 0 and math.isclose(results[1].phi_b, mflops(micro, cands[1]) - base)
                  and results[2].phi_a == results[2].phi_b == 0)
        invariant = all(preference_check(replace(micro, flops_per_mac=f), anchor, c).accept == d
                        for f in (0.5, 1.0, 7.3) for c, d in zip(cands, decisions))
    ok = decisions == [True, False, True] and phi_ok and invariant and t.elapsed < 1
    report(6, ok, f"decisions {decisions}, phi match {phi_ok}, rescale invariant {invariant}, {t.elapsed:.3f}s")


def test_criterion_7_conflict(micro, smoke_runs):
    runs, _ = smoke_runs
    with Timer() as t:
        space = hybrid_space()
        w = init_weights(space, np.random.default_rng(0), np.float64)
        rng = np.random.default_rng(3)
        batch = Batch(rng.standard_normal((4, 3, 12, 12)), rng.integers(0, 4, 4))
        cache = {}

        def grads(c):
            if c not in cache:
                cache[c] = subnet_grads(w, space, c, batch)
            return cache[c]

        def pick():
            return replace(sample_uniform(space, rng), resolution=12)

        selfsim = min(grad_cosine(w, space, c, c, batch).value for c in [pick() for _ in range(5)])
        worst = 0.0
        for _ in range(100):
            a, b = pick(), pick()
            worst = max(worst, abs(grad_cosine(w, space, a, b, batch).value - oracle_cosine(space, grads(a),
                                                                                          grads(b), a, b)))
        cs = [pick() for _ in range(6)]
        mat, _ = cosine_matrix(space, cs, [grads(c) for c in cs])
        sym = bool(np.array_equal(mat, mat.T) and np.allclose(np.diag(mat), 1.0, atol=1e-12))

        res = runs[0]
        sp, weights, meta = weights_from_checkpoint(res.checkpoint_path)
        cfg = TrainConfig(**meta["config"])
        data = SyntheticClusters(cfg.classes, sp.in_channels, cfg.image_size, cfg.noise, seed=cfg.seed)
        eval_batch = data.batch(1 << 41, 32)
        arng = np.random.default_rng([0, 10])
        rep = similarity_sweep(weights, sp, [0.5, 1.6, 3.5], 4, eval_batch, arng).to_json()
        gvr = good_vs_random(weights, sp, 1.6, 12, 4, data.eval_batches(4, 64), eval_batch, arng).to_json()
        well_formed = (len(rep["subnets"]) == 12 and np.array(rep["matrix"]).shape == (12, 12)
                       and len(rep["buckets"]) == 4 and "advisory" in rep and "advisory" in gvr
                       and len(gvr["top_indices"]) == 4)
    ok = abs(selfsim - 1.0) < 1e-12 and worst <= 1e-9 and sym and well_formed and t.elapsed < 900
    report(7, ok, f"self-cosine {selfsim:.12f}, oracle max |diff| {worst:.1e} over 100 pairs, symmetric {sym}, "
                  f"report ok {well_formed} (pearson {rep['pearson_gap_vs_similarity']}, advisory "
                  f"{rep['advisory']['observed']}; top {gvr['top_mean_similarity']:.3f} vs all "
                  f"{gvr['random_mean_similarity']:.3f}), {t.elapsed:.0f}s")


def test_criterion_8_learning(smoke_runs):
    runs, elapsed = smoke_runs
    ratios = {}
    for seed, res in runs.items():
        losses = [r.loss_mean for r in res.records]
        ratios[seed] = float(np.mean(losses[-50:]) / np.mean(losses[:50]))
    ok = all(r < 0.5 for r in ratios.values()) and elapsed < 600
    report(8, ok, "last50/first50 loss " + ", ".join(f"seed {s}: {r:.3f}" for s, r in ratios.items())
           + f"; {elapsed:.0f}s for 3 runs")


def tiny_evaluator(tiny):
    w = init_weights(tiny, np.random.default_rng([0, 1]))
    data = SyntheticClusters(tiny.num_classes, tiny.in_channels, tiny.resolutions[-1], 1.0, seed=0)
    inner = batch_evaluator(w, tiny, data.eval_batches(2, 32))
    memo = {}

    def ev(cfg):
        key = encode(tiny, cfg)
        if key not in memo:
            memo[key] = inner(cfg)
        return memo[key]
    return ev


def test_criterion_9_search_optimality(tiny):
    with Timer() as t:
        profile = load_profile("neutral")
        everything = list(iter_subnets(tiny))
        assert len(everything) < 2000
        lats = sorted(predict_latency(profile, tiny, c) for c in everything)
        limits = [lats[len(lats) // 4], lats[len(lats) // 2], lats[-1]]
        ev = tiny_evaluator(tiny)
        lines, ok = [], True
        for limit in limits:
            res = search(None, tiny, profile, SearchConfig(latency_ms=limit, budget=5000), evaluator=ev)
            oracle = exhaustive_best(tiny, everything, lambda s, c: predict_latency(profile, s, c), limit,
                                     LATENCY, ev)
            feasible = all(c.latency_ms <= limit for c in res.candidates)
            match = res.best.genome == oracle.genome
            ok &= match and feasible and res.evaluations <= 5000
            lines.append(f"{limit:.3f}ms: optimum {match}, feasible {feasible}, evals {res.evaluations}")
    ok &= t.elapsed < 300
    report(9, ok, "; ".join(lines) + f"; {t.elapsed:.0f}s")


def test_criterion_10_reproducibility(micro, tiny, tmp_path):
    with Timer() as t:
        cfg = TrainConfig(total_steps=40, batch_size=8, eval_batches=1, eval_batch_size=8)
        sandwich = replace(cfg, mode="sandwich", M=2)
        same = True
        for name, c in (("elastic", cfg), ("sandwich", sandwich)):
            run(c, tmp_path / f"{name}-a")
            run(c, tmp_path / f"{name}-b")
            same &= (tmp_path / f"{name}-a/metrics.jsonl").read_bytes() == \
                (tmp_path / f"{name}-b/metrics.jsonl").read_bytes()
        reference = (tmp_path / "elastic-a/metrics.jsonl").read_bytes()
        resumed = {}
        for k in (1, 7, 20, 39):
            d = tmp_path / f"resume-{k}"
            part = run(cfg, d, stop_after=k)
            run(cfg, d, resume=part.checkpoint_path)
            resumed[k] = (d / "metrics.jsonl").read_bytes() == reference
        assert len(read_metrics(tmp_path / "elastic-a/metrics.jsonl")) == 40
        ev = tiny_evaluator(tiny)
        scfg = SearchConfig(mflops=mflops(tiny, max_subnet(tiny)) / 2, population=16, budget=120, seed=9)
        searches_equal = (search(None, tiny, None, scfg, evaluator=ev).to_json()
                          == search(None, tiny, None, scfg, evaluator=tiny_evaluator(tiny)).to_json())
    ok = same and all(resumed.values()) and searches_equal and t.elapsed < 600
    report(10, ok, f"identical logs {same}, resume at steps {resumed}, identical search {searches_equal}, "
                   f"{t.elapsed:.0f}s")
