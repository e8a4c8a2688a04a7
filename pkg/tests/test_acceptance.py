"""Acceptance criteria, each checked at its stated tolerance under the default configuration.

Every test prints one ``ACCEPTANCE PASS|FAIL <criterion>`` line; the lines are
repeated in the terminal summary. Expensive artifacts (per-channel models, the
mixed corpus and its model) are built once per session.
"""

import itertools

import numpy as np
import pytest

from adaptfec.channel import derive_ge_params, empirical_stats, generate_trace
from adaptfec.experiments import (BURST_SWEEP, LOSS_SWEEP, ModelCache, deeprs_from, derive_seed, merge_config,
                                  sim_from, sweep, tradeoff)
from adaptfec.gf256 import MUL_TABLE
from adaptfec.lstm import PARAM_ORDER, backward, init_model
from adaptfec.rs_codec import decode_block, encode_block
from adaptfec.simulator import DeepRS, OraclePredictor, SimConfig, round_half_up, run_simulation
from tests.oracles import finite_diff_grads, rel_err, slow_mul

pytestmark = pytest.mark.slow

LOSS_CELLS = [(lr, 10.0) for lr in LOSS_SWEEP]
BURST_CELLS = [(0.10, float(bl)) for bl in BURST_SWEEP]
GRID_CELLS = list(dict.fromkeys(LOSS_CELLS + BURST_CELLS))


@pytest.fixture(scope="session")
def cfg():
    return merge_config()


@pytest.fixture(scope="session")
def models(cfg):
    return ModelCache(cfg)


@pytest.fixture(scope="session")
def grid(cfg, models):
    rows = sweep(cfg, GRID_CELLS, models)
    return {(r.scheme, r.loss_rate, r.burst_len): r for r in rows}


@pytest.fixture(scope="session")
def corpus_result(cfg):
    from adaptfec.experiments import train_on_corpus
    return train_on_corpus(cfg)


@pytest.fixture(scope="session")
def test_traces(corpus_result):
    ids = corpus_result.corpus.assignment["test"]
    return ids, [corpus_result.corpus.traces[i] for i in ids]


def test_prediction_accuracy(cfg, models, verdict):
    rate = models.get(0.10, 10.0).test_report.zero_error_rate
    n = len(models.get(0.10, 10.0).split.test)
    assert verdict("prediction accuracy", rate >= 0.60,
                   f"GE(0.10, 10) test zero-error {rate:.4f} on {n} windows (need >= 0.60)")


def test_mixed_corpus_accuracy(corpus_result, verdict):
    c = corpus_result
    rate = c.trained.test_report.zero_error_rate
    n_traces = len(c.corpus.traces)
    ok = n_traces >= 200 and rate >= 0.50 and rate > c.constant_zero_error
    assert verdict("mixed-corpus accuracy", ok,
                   f"{n_traces} traces, test zero-error {rate:.4f} (need >= 0.50), "
                   f"best constant ({c.constant.count}) {c.constant_zero_error:.4f} (need strictly below)")


def test_loss_sweep_trend(grid, verdict):
    def series(scheme, attr):
        return [getattr(grid[(scheme, lr, bl)], attr) for lr, bl in LOSS_CELLS]

    def decreasing(v):
        return all(a > b for a, b in zip(v, v[1:]))

    f16, f32 = series("Fix-16%", "recovery_ratio")[1:], series("Fix-32%", "recovery_ratio")[1:]
    deep_rec = series("DeepRS", "recovery_ratio")
    deep_red = series("DeepRS", "redundancy_ratio")
    margin = deep_rec[-1] - f32[-1]
    checks = {
        "Fix-16% decreasing": decreasing(f16),
        "Fix-32% decreasing": decreasing(f32),
        "DeepRS margin at 0.30": margin >= 0.15,
        "DeepRS redundancy increasing": all(a < b for a, b in zip(deep_red, deep_red[1:])),
    }
    fmt = lambda v: "[" + ", ".join(f"{x:.4f}" for x in v) + "]"
    detail = (f"Fix-16% {fmt(f16)}, Fix-32% {fmt(f32)} (loss 0.05..0.30); DeepRS recovery {fmt(deep_rec)}, "
              f"redundancy {fmt(deep_red)}; margin over Fix-32% at 0.30 = {margin:+.4f} (need >= 0.15); "
              + ", ".join(f"{k}: {'ok' if v else 'no'}" for k, v in checks.items()))
    assert verdict("loss-rate sweep trend", all(checks.values()), detail)


def test_burst_sweep_trend(grid, verdict):
    red = [grid[("DeepRS", lr, bl)].redundancy_ratio for lr, bl in BURST_CELLS]
    spread = max(red) - min(red)
    deep30 = grid[("DeepRS", 0.10, 30.0)].recovery_ratio
    fixed30 = max(grid[(s, 0.10, 30.0)].recovery_ratio for s in ("Fix-16%", "Fix-32%"))
    ok = spread >= 0.02 and deep30 >= fixed30
    assert verdict("burst sweep trend", ok,
                   f"DeepRS redundancy spread {spread:.4f} (need >= 0.02); recovery at burst 30 "
                   f"{deep30:.4f} vs best fixed {fixed30:.4f}")


def test_tradeoff_dominance(cfg, corpus_result, test_traces, verdict):
    ids, traces = test_traces
    res = tradeoff(cfg, corpus_result.trained.model, traces, ids)
    deep = [p for p in res.points if p[0] == "DeepRS"]
    mean_red = float(np.mean([p[2] for p in deep]))
    mean_rec = float(np.mean([p[3] for p in deep]))
    b = cfg["window"]["b"]
    k = round_half_up(mean_red * b)
    fixed = {name: m for name, m, _, _ in res.intervals}[f"Fix-{k}/{b}"]
    ok = len(traces) >= 50 and mean_rec - fixed >= 0.20
    assert verdict("tradeoff dominance", ok,
                   f"{len(traces)} held-out traces; DeepRS mean redundancy {mean_red:.4f}, mean recovery "
                   f"{mean_rec:.4f}; nearest fixed Fix-{k}/{b} recovery {fixed:.4f}; "
                   f"gap {mean_rec - fixed:+.4f} (need >= 0.20)")


def test_oracle_upper_bound(cfg, models, corpus_result, test_traces, verdict):
    # warmup blocks use a fixed k, so the oracle harness scores only post-warmup blocks
    sim = sim_from(cfg)
    sim.exclude_warmup = True
    worst_oracle, violations, n = 1.0, 0, 0
    ids, traces = test_traces
    pairs = [(tr, corpus_result.trained.model) for tr in traces]
    for lr, bl in GRID_CELLS:
        tr = generate_trace(derive_ge_params(lr, bl), cfg["grid"]["n_packets"],
                            seed=derive_seed(cfg["seed"], "grid-trace"))
        pairs.append((tr, models.get(lr, bl).model))
    for tr, model in pairs:
        oracle = run_simulation(sim, tr, DeepRS(OraclePredictor(tr, sim.b))).recovery_ratio
        learned = run_simulation(sim, tr, deeprs_from(cfg, model)).recovery_ratio
        worst_oracle = min(worst_oracle, oracle)
        violations += learned > oracle
        n += 1
    ok = worst_oracle == 1.0 and violations == 0
    assert verdict("oracle upper bound", ok,
                   f"{n} traces; minimum oracle recovery {worst_oracle:.4f}; learned above oracle on {violations}")


def test_codec_properties(verdict):
    failures = []
    # field: tables against a shift-and-add oracle, then axioms over every pair and triple
    oracle = np.array([[slow_mul(a, b) for b in range(256)] for a in range(256)])
    if not np.array_equal(MUL_TABLE, oracle):
        failures.append("multiplication table")
    m = MUL_TABLE.astype(np.intp)
    a = np.arange(256)
    if not np.array_equal(m, m.T):
        failures.append("commutativity")
    if not np.array_equal(m[m[:, :, None], a[None, None, :]], m[a[:, None, None], m[None, :, :]]):
        failures.append("associativity")
    if not np.array_equal(m[a[:, None, None], a[None, :, None] ^ a[None, None, :]], m[:, :, None] ^ m[:, None, :]):
        failures.append("distributivity")
    if not all((m[x] == 1).sum() == 1 for x in range(1, 256)) or (m[0] == 1).any():
        failures.append("inverses")

    # codec: every deletion pattern of at most k packets, all k <= b, b <= 8
    rng = np.random.default_rng(2024)
    patterns = 0
    for b in range(1, 9):
        src = [rng.integers(0, 256, size=16, dtype=np.uint8).tobytes() for _ in range(b)]
        for k in range(b + 1):
            blk = encode_block(src, k)
            for r in range(k + 1):
                for lost in itertools.combinations(range(b + k), r):
                    patterns += 1
                    if decode_block(blk.with_losses(lost)) != src:
                        failures.append(f"roundtrip b={b} k={k} lost={lost}")

    # counting and full codec modes on 10^4 simulated blocks with varying k
    class VaryingK:
        adaptive, name = False, "varying"

        def choose_k(self, block_id, history, b):
            return block_id % (b + 1), None

    tr = generate_trace(derive_ge_params(0.2, 5), 60_000, seed=11)
    count = run_simulation(SimConfig(), tr, VaryingK())
    full = run_simulation(SimConfig(codec_mode="full", payload_size=8), tr, VaryingK())
    agree = [x.recovered for x in count.blocks] == [x.recovered for x in full.blocks]
    if not agree or full.n_blocks != 10_000:
        failures.append("counting/full disagreement")
    assert verdict("codec properties", not failures,
                   f"{patterns} deletion patterns, field axioms over 256^3, {full.n_blocks} blocks in both modes; "
                   f"failures: {failures[:3] or 'none'}")


def test_channel_calibration(cfg, verdict):
    cells = [(float(lr), float(bl)) for lr in cfg["corpus"]["loss_rates"] for bl in cfg["corpus"]["burst_lens"]]
    cells = list(dict.fromkeys(cells + GRID_CELLS))
    misses = []
    for lr, bl in cells:
        st = empirical_stats(generate_trace(derive_ge_params(lr, bl), 10**6,
                                            seed=derive_seed(cfg["seed"], "calibration", lr, bl)))
        if abs(st.loss_rate - lr) > 0.005 or abs(st.mean_burst_len - bl) > 0.05 * bl:
            misses.append(f"({lr}, {bl}): loss {st.loss_rate:.5f}, burst {st.mean_burst_len:.3f}")
    assert verdict("channel calibration", not misses,
                   f"{len(cells)} cells at 10^6 packets; out of tolerance: {misses or 'none'}")


def test_gradient_check(verdict):
    worst = 0.0
    for case in range(20):
        rng = np.random.default_rng(1000 + case)
        b = (3, 6)[case % 2]
        model = init_model(b=b, hidden_dim=4, seed=1000 + case, init_scale=0.5)
        n = 1 + case % 4
        x = rng.integers(0, 2, size=(n, 5, b)).astype(float)
        y = rng.integers(0, 2, size=(n, b)).astype(float)
        _, grads = backward(model, x, y)
        fd = finite_diff_grads(model, x, y)
        worst = max(worst, max(float(rel_err(grads[p], fd[p]).max()) for p in PARAM_ORDER))
    assert verdict("gradient check", worst <= 1e-3,
                   f"20 random cases, worst relative error {worst:.2e} (need <= 1e-3)")
