import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfnsim.core import ms, seconds
from lfnsim.engine import FlowSpec, NetworkSpec, TraceKind, simulate
from lfnsim.htb import PolicyRow, burst_bytes, PolicyTable, TrafficType, default_policy
from lfnsim.link import LinkConfig
from lfnsim.reference import ReferenceEngine
from lfnsim.transport import FIXED_CWND, CcMode, RtoMode, RtoPolicyConfig

MSS = 1448


def transfer(size, loss=0.0, mode="accelerated", seed=1, stream=0, trace=False,
             t_end=seconds(60), cc="fixed"):
    return NetworkSpec(flows=(FlowSpec("crosstalk", size=size, cc_mode=cc,
                                       rto=RtoPolicyConfig(mode=mode)),),
                       link=LinkConfig(loss_probability=loss), seed=seed, stream_id=stream,
                       t_end=t_end, stop_when_complete=True, trace=trace)


def both(spec):
    return simulate(spec, "kernel"), simulate(spec, "reference")


EQUIVALENCE_CASES = {
    "lossless": transfer(3_000_000, trace=True),
    "loss-accelerated": transfer(5_000_000, 0.01, trace=True, stream=3),
    "loss-rfc": transfer(5_000_000, 0.01, "rfc2988", trace=True, stream=3),
    "heavy-loss": transfer(400_000, 0.2, trace=True, t_end=seconds(3600)),
    "reno": transfer(4_000_000, 0.005, cc="reno", trace=True),
    "tiny": transfer(1, 0.3, trace=True, t_end=seconds(600)),
    "mixed-classes": NetworkSpec(
        flows=(FlowSpec("efd", start=ms(10), stop=seconds(2)),
               FlowSpec("adhoc", start=0, stop=seconds(1)),
               FlowSpec("crosstalk", start=ms(500), size=20_000_000),
               FlowSpec("raw", start=ms(700), stop=ms(1900), cc_mode="reno"),
               FlowSpec("interactive", start=ms(300), stop=ms(2500),
                        rto=RtoPolicyConfig(mode="rfc2988"))),
        link=LinkConfig(loss_probability=0.001), t_end=seconds(3), bin_ns=ms(100), trace=True),
    "queue-limit": NetworkSpec(
        flows=tuple(FlowSpec("raw") for _ in range(4)), queue_limit=2,
        t_end=seconds(1), bin_ns=ms(100)),
}


@pytest.mark.parametrize("name", sorted(EQUIVALENCE_CASES))
def test_kernel_matches_reference_engine(name):
    kernel, reference = both(EQUIVALENCE_CASES[name])
    assert kernel.flows == reference.flows
    assert kernel.trace == reference.trace
    assert kernel.equivalent(reference)


@settings(max_examples=15, deadline=None)
@given(size=st.integers(1, 2_000_000), loss=st.sampled_from([0.0, 0.001, 0.01, 0.05, 0.2]),
       mode=st.sampled_from(["accelerated", "rfc2988"]), stream=st.integers(0, 1000))
def test_kernel_matches_reference_on_random_transfers(size, loss, mode, stream):
    kernel, reference = both(transfer(size, loss, mode, stream=stream, t_end=seconds(3600)))
    assert kernel.equivalent(reference)


def test_same_seed_same_result_different_stream_differs():
    a = simulate(transfer(5_000_000, 0.01, stream=2))
    b = simulate(transfer(5_000_000, 0.01, stream=2))
    c = simulate(transfer(5_000_000, 0.01, stream=3))
    assert a.equivalent(b)
    assert a.flows != c.flows


def test_zero_loss_full_transfer_packet_count():
    r = simulate(transfer(88_400 * MSS)).flows[0]
    assert r.packets_sent == 88_400 and r.retransmissions == 0 and r.timeouts == 0
    assert r.first_send == 0 and r.complete
    # the pipe holds one bandwidth-delay product of wire packets, plus at most
    # one root bucket of burst and the segment waiting in the scheduler
    bdp = 476_000_000 * 0.180 / 8 / (MSS + 66)
    burst = burst_bytes(476_000_000, MSS + 66) / (MSS + 66)
    assert 6_960 <= r.max_in_flight <= bdp + burst + 1


@settings(max_examples=30, deadline=None)
@given(size=st.integers(1, 10_000_000), loss=st.floats(0.0, 0.2),
       mode=st.sampled_from(["accelerated", "rfc2988"]), stream=st.integers(0, 10_000))
def test_reliable_delivery_fuzz(size, loss, mode, stream):
    res = simulate(transfer(size, loss, mode, stream=stream, t_end=seconds(3600)))
    r = res.flows[0]
    assert r.complete and r.delivered_bytes == size
    assert r.packets_sent == -(-size // MSS) + r.retransmissions


@settings(max_examples=10, deadline=None)
@given(loss=st.floats(0.0, 0.2), stream=st.integers(0, 1000))
def test_fixed_window_never_moves(loss, stream):
    spec = transfer(3_000_000, loss, stream=stream, t_end=seconds(3600))
    seen = set()
    eng = ReferenceEngine(spec, observer=lambda e, f: seen.add(e.senders[f].cwnd))
    r = eng.run().flows[0]
    assert seen == {FIXED_CWND}
    assert r.cwnd_min == r.cwnd_max == FIXED_CWND


def test_kernel_reports_fixed_window():
    r = simulate(transfer(2_000_000, 0.05)).flows[0]
    assert r.cwnd_min == r.cwnd_max == FIXED_CWND


def test_reno_window_moves():
    r = simulate(transfer(5_000_000, 0.01, cc="reno")).flows[0]
    assert r.cwnd_min < 10 < r.cwnd_max


def _timeout_runs(spec):
    """Gaps between consecutive timer expiries, split wherever the cumulative ack moves."""
    res = simulate(spec)
    runs, gaps, last_rto, last_cum = [], [], None, -1
    for t, kind, _, seq, _ in res.trace:
        if kind is TraceKind.ACK and seq > last_cum:
            last_cum, last_rto = seq, None
            runs.append(gaps)
            gaps = []
        elif kind is TraceKind.RTO:
            if last_rto is not None:
                gaps.append(t - last_rto)
            last_rto = t
    runs.append(gaps)
    return [g for g in runs if g]


def test_tail_retransmissions_spaced_fifty_ms():
    gaps = []
    for stream in range(10):
        for run in _timeout_runs(transfer(30 * MSS, 0.5, stream=stream, trace=True,
                                          t_end=seconds(600))):
            gaps += run
    assert len(gaps) > 10
    assert set(gaps) == {ms(50)}


def test_rfc2988_gaps_double():
    gaps = []
    for stream in range(10):
        for run in _timeout_runs(transfer(30 * MSS, 0.5, "rfc2988", stream=stream, trace=True,
                                          t_end=seconds(3600))):
            gaps += list(zip(run, run[1:]))
    # the float RTO is truncated to whole nanoseconds after doubling
    assert gaps and all(abs(b - 2 * a) <= 1 or b == seconds(120) for a, b in gaps)


def test_zero_loss_has_no_timeouts_or_retransmissions():
    for mode in ("accelerated", "rfc2988"):
        res = simulate(transfer(20_000_000, mode=mode, trace=True))
        assert not any(k is TraceKind.RTO or retx for _, k, _, _, retx in res.trace)


def test_greedy_flow_stops_and_drains():
    spec = NetworkSpec(flows=(FlowSpec("adhoc", stop=seconds(1)),), t_end=seconds(3),
                       bin_ns=ms(100))
    res = simulate(spec)
    assert res.bins[:11].sum() > 0 and res.bins[15:].sum() == 0
    assert res.flows[0].delivered_bytes > 40_000_000


def test_oversized_rates_rejected():
    rows = {**default_policy().rows, TrafficType.RAW: PolicyRow(3, 1, 1 << 41)}
    spec = NetworkSpec(flows=(FlowSpec("raw"),), policy=PolicyTable(1 << 41, rows))
    with pytest.raises(ValueError):
        simulate(spec)


def test_unknown_engine():
    with pytest.raises(ValueError):
        simulate(transfer(10), "quantum")


def test_spec_validation():
    with pytest.raises(ValueError):
        FlowSpec("efd", size=0)
    with pytest.raises(ValueError):
        FlowSpec("efd", start=10, stop=5)
    with pytest.raises(ValueError):
        NetworkSpec(flows=(), mss=0)
