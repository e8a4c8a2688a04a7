import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptfec.channel import (
    ChannelError,
    GEParams,
    LossTrace,
    TraceFormatError,
    derive_ge_params,
    empirical_stats,
    format_trace,
    generate_trace,
    parse_trace,
    read_trace_file,
    write_trace_file,
)


def stepwise_chain(p_gb, p_bg, n, seed):
    """Packet-by-packet Gilbert chain: emit, then transition. Independent of the sojourn sampler."""
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    out = np.zeros(n, dtype=np.uint8)
    bad = False
    for i in range(n):
        out[i] = bad
        bad = (u[i] >= p_bg) if bad else (u[i] < p_gb)
    return out


def test_derive_examples():
    p = derive_ge_params(0.10, 10)
    assert p.p_bg == pytest.approx(0.1)
    assert p.p_gb == pytest.approx(0.011111, abs=1e-6)
    p = derive_ge_params(0.30, 10)
    assert p.p_gb == pytest.approx(0.042857, abs=1e-6)
    p = derive_ge_params(0.2, 1)
    assert p.p_bg == 1.0
    assert (p.loss_in_good, p.loss_in_bad) == (0.0, 1.0)


@pytest.mark.parametrize("lr,bl", [(0.1, 10), (0.3, 10), (0.01, 1), (0.05, 30)])
def test_derive_invariants(lr, bl):
    p = derive_ge_params(lr, bl)
    assert p.stationary_bad == pytest.approx(lr)
    assert 1 / p.p_bg == pytest.approx(bl)
    assert 0 < p.p_gb < 1 and 0 < p.p_bg <= 1


@pytest.mark.parametrize("lr,bl", [(0.0, 10), (1.0, 10), (0.1, 0.5), (0.6, 1)])
def test_derive_rejects(lr, bl):
    with pytest.raises(ChannelError):
        derive_ge_params(lr, bl)


def test_memoryless_limit_bursts_have_length_one():
    tr = generate_trace(derive_ge_params(0.2, 1), 50_000, seed=5)
    st_ = empirical_stats(tr)
    assert set(st_.burst_histogram) == {1}


def test_lossless_states_give_zero_trace():
    p = GEParams(0.1, 10, 0.2, 0.3, loss_in_good=0.0, loss_in_bad=0.0)
    assert generate_trace(p, 1000, seed=1).bits.sum() == 0


def test_determinism():
    p = derive_ge_params(0.1, 10)
    a = generate_trace(p, 10_000, seed=42).bits
    b = generate_trace(p, 10_000, seed=42).bits
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_trace(p, 10_000, seed=43).bits)


def test_starts_in_good_state():
    p = derive_ge_params(0.3, 10)
    firsts = [generate_trace(p, 1, seed=s).bits[0] for s in range(200)]
    assert sum(firsts) == 0


@pytest.mark.parametrize("lr,bl", [(0.10, 10), (0.30, 10)])
def test_calibration_million_packets(lr, bl):
    st_ = empirical_stats(generate_trace(derive_ge_params(lr, bl), 10**6, seed=11))
    assert abs(st_.loss_rate - lr) <= 0.005
    assert abs(st_.mean_burst_len - bl) <= 0.05 * bl


def test_sampler_matches_stepwise_chain():
    p = derive_ge_params(0.2, 5)
    fast = empirical_stats(generate_trace(p, 400_000, seed=3))
    slow = empirical_stats(stepwise_chain(p.p_gb, p.p_bg, 400_000, seed=4))
    assert fast.loss_rate == pytest.approx(slow.loss_rate, abs=0.01)
    assert fast.mean_burst_len == pytest.approx(slow.mean_burst_len, rel=0.05)


def test_burst_lengths_geometric_chi_square():
    p = derive_ge_params(0.1, 4)
    hist = empirical_stats(generate_trace(p, 10**6, seed=9)).burst_histogram
    total = sum(hist.values())
    # bins 1..10 and a tail bin
    obs, exp = [], []
    for L in range(1, 11):
        obs.append(hist.get(L, 0))
        exp.append(total * p.p_bg * (1 - p.p_bg) ** (L - 1))
    obs.append(total - sum(obs))
    exp.append(total * (1 - p.p_bg) ** 10)
    chi2 = sum((o - e) ** 2 / e for o, e in zip(obs, exp))
    assert chi2 < 31.3  # 99.9% quantile of chi-square with 10 dof


def test_stats_hand_examples():
    s = empirical_stats(np.array([0, 0, 0, 0]))
    assert (s.loss_rate, s.mean_burst_len, s.burst_histogram, s.no_losses) == (0.0, 0.0, {}, True)
    s = empirical_stats(np.array([1, 1, 0, 1]))
    assert s.loss_rate == 0.75
    assert s.mean_burst_len == 1.5
    assert s.burst_histogram == {2: 1, 1: 1}
    assert not s.no_losses


def test_trace_format_layout():
    text = format_trace(np.ones(81, dtype=np.uint8))
    assert text == "FECTRACE v1 n=81\n" + "1" * 80 + "\n1\n"
    assert format_trace(np.zeros(80, dtype=np.uint8)).count("\n") == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=400))
def test_trace_roundtrip_property(bits):
    text = format_trace(np.array(bits, dtype=np.uint8))
    back = parse_trace(text)
    assert back.tolist() == bits
    assert format_trace(back) == text


def test_file_roundtrip_byte_exact(tmp_path):
    tr = generate_trace(derive_ge_params(0.1, 10), 1234, seed=1)
    path = tmp_path / "t.fectrace"
    write_trace_file(path, tr)
    raw = path.read_bytes()
    back = read_trace_file(path)
    assert np.array_equal(back.bits, tr.bits)
    assert back.params_origin == "ingested"
    write_trace_file(tmp_path / "u", back)
    assert (tmp_path / "u").read_bytes() == raw


@pytest.mark.parametrize("text,line,col", [
    ("FECTRACE v2 n=3\n010\n", 1, 1),
    ("FECTRACE v1 n=x\n010\n", 1, 15),
    ("FECTRACE v1 n=4\n010\n", 2, None),
    ("FECTRACE v1 n=3\n0a0\n", 2, 2),
    ("FECTRACE v1 n=0\n", 1, 15),
])
def test_parse_errors_name_location(text, line, col):
    with pytest.raises(TraceFormatError) as ei:
        parse_trace(text)
    assert ei.value.line == line
    assert ei.value.column == col


def test_loss_trace_rejects_empty():
    with pytest.raises(ValueError):
        LossTrace(np.zeros(0))
