import math

import pytest

from lfnsim.core import RandomStream, Simulator, ms
from lfnsim.link import Direction, Kind, Link, LinkConfig, Segment


def make_link(p=0.0, rtt=ms(180), seed=1, record=False):
    sim = Simulator()
    return sim, Link(sim, LinkConfig(rtt=rtt, loss_probability=p), RandomStream(seed), record)


def test_config_validation():
    with pytest.raises(ValueError):
        LinkConfig(rtt=0)
    with pytest.raises(ValueError):
        LinkConfig(rtt=3)
    with pytest.raises(ValueError):
        LinkConfig(loss_probability=1.1)
    assert LinkConfig().one_way_delay == ms(90)


def test_segment_sizes():
    d = Segment.data(0, 0, 1448)
    assert d.kind is Kind.DATA and d.payload_bytes == 1448 and d.wire_bytes == 1514
    a = Segment.ack(0, 1448, [(2896, 4344)])
    assert a.kind is Kind.ACK and a.wire_bytes == 66 and a.payload_bytes == 0


def test_lossless_delivery_after_one_way_delay_in_fifo_order():
    sim, link = make_link()
    arrivals = []
    for k in range(5):
        seg = Segment.data(0, k * 1448, (k + 1) * 1448)
        assert link.transmit(seg, Direction.FORWARD, 0, lambda s: arrivals.append((sim.now, s.seq_start))) == ms(90)
    sim.run_until(ms(200))
    assert arrivals == [(ms(90), k * 1448) for k in range(5)]


def test_loss_count_matches_binomial_oracle():
    p, n = 0.01, 100_000
    sim, link = make_link(p, seed=9)
    for k in range(n):
        link.transmit(Segment.data(0, 0, 1448), Direction.FORWARD, 0, lambda s: None)
    st = link.stats[Direction.FORWARD]
    assert st.transmitted == n and st.delivered + st.dropped == n
    assert abs(st.dropped - n * p) <= 4 * math.sqrt(n * p * (1 - p))


def test_both_directions_share_one_stream_in_call_order():
    # The same draws decide drops whichever direction the packet travels.
    seq = [Direction.FORWARD, Direction.REVERSE] * 500
    outcomes = []
    for directions in (seq, [Direction.FORWARD] * 1000):
        sim, link = make_link(0.3, seed=4)
        res = []
        for d in directions:
            res.append(link.transmit(Segment.data(0, 0, 10), d, 0, lambda s: None) is None)
        outcomes.append(res)
    assert outcomes[0] == outcomes[1]


def test_drop_records_and_first_transmission_counter():
    sim, link = make_link(1.0, record=True)
    link.transmit(Segment.data(3, 0, 100), Direction.FORWARD, 5, lambda s: None)
    link.transmit(Segment.data(3, 0, 100, retransmission=True), Direction.FORWARD, 6, lambda s: None)
    st = link.stats[Direction.FORWARD]
    assert st.dropped == 2 and st.dropped_first_transmissions == 1
    assert st.drops == [(5, 3, 0, False), (6, 3, 0, True)]
