"""Array-based simulation kernel, compiled with numba when available.

This is a line-for-line transcription of :mod:`lfnsim.reference` onto flat
int64 arrays so that numba can compile the per-packet loop.  Every scheduling
call happens in the same order as in the reference engine, so both engines
dispatch the same events with the same sequence numbers and produce identical
results (the test suite checks this).

Per-flow segment state lives in a ring of ``RING`` slots indexed by segment
number; the receive window (99999 segments) bounds the outstanding span, so
slots never collide.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import JIT_ENABLED, jit
from .core import stream_key
from .engine import N_CLASSES, FlowResult, NetworkSpec, SimResult, TraceKind
from .htb import UNITS_PER_BYTE, HtbScheduler, TrafficType
from .link import bernoulli_threshold
from .transport import (DUPTHRESH, FIXED_CWND, HANDSHAKE_WINDOW, RENO_INITIAL_CWND,
                        RWND_SEGMENTS, CcMode, ProtocolViolation, RtoMode, TimerError)

# per-event helpers only index preallocated arrays
helper = jit(refcounted=False)

RING = 1 << 17
RMASK = RING - 1
RANGE_CAP = RING // 2 + 2
HUGE = 1 << 62
# rate * dt fits in int64 for any rate below MAX_RATE when dt <= DT_NO_OVERFLOW
MAX_RATE = 1 << 40
DT_NO_OVERFLOW = 1 << 21

INFL = 1
LOST = 4
PENDING = 8
CLEAR_INFL = 0xFF ^ INFL
CLEAR_PENDING = 0xFF ^ PENDING

EV_START, EV_STOP, EV_WAKE, EV_DATA, EV_ACK, EV_RTO, EV_CAPLIFT = range(7)

# flow inputs
(FL_TYPE, FL_START, FL_STOP, FL_SIZE, FL_CC, FL_MODE, FL_THS, FL_RTOS, FL_THL, FL_RTOL,
 FL_MINRTO, FL_MAXRTO, FL_GRAN, FL_INITRTO) = range(14)
FL_FIELDS = 14

# sender / per-flow state
(S_NEXT, S_UNA, S_NINF, S_LOSTPTR, S_CWND, S_SSTHRESH, S_CWNDCNT, S_INREC, S_RECOVER,
 S_HASRTT, S_BACKOFF, S_ARMED, S_CAPLIFT, S_STOPPED, S_COMPLETE, S_FIRST, S_BOXEND,
 S_COMPLETE_AT, S_CECHO, S_CECHORETX, S_SENT, S_RETX, S_TIMEOUTS, S_RTOSLOT, S_RQHEAD,
 S_RQTAIL, S_SBN, S_ACTIVE, S_QUEUED, S_TIMER_AT, S_TIMER_GEN, S_FTXLOST, S_DLOST,
 S_ALOST, S_MAXINF, S_CWMIN, S_CWMAX, S_NSEG, S_DSEG, S_RN, S_STAMP, S_DUP, S_WQHEAD,
 S_WQTAIL) = range(44)
S_FIELDS = 44

# planes of the per-flow queue array: retransmit FIFO, then the retransmission
# watch FIFO (segment, next segment when sent) and each segment's latest watch slot
Q_RETX, Q_WSEG, Q_WMARK, Q_WPOS = range(4)

# engine globals
(G_TRN, G_WAKE_AT, G_WAKE_GEN, G_SEQ, G_EVENTS, G_HTBDROP, G_ERR, G_ERRF, G_LEFT,
 G_AHEAD, G_ATAIL, G_HN) = range(12)
G_FIELDS = 12

ERR_NONE, ERR_PROTOCOL, ERR_TIMER, ERR_OVERFLOW = 0, 1, 2, 3

ROOT = N_CLASSES
U_BYTE = UNITS_PER_BYTE

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)


@helper
def _draw(rng):
    rng[0] = rng[0] + _GOLDEN
    z = rng[0]
    z = (z ^ (z >> _SH30)) * _M1
    z = (z ^ (z >> _SH27)) * _M2
    return z ^ (z >> _SH31)


@helper
def _seg_end(i, size, mss):
    e = (i + 1) * mss
    if size >= 0 and e > size:
        return size
    return e


@helper
def _seg_byte(i, size, mss):
    b = i * mss
    if size >= 0 and b > size:
        return size
    return b


@helper
def _push(heap, G, t, kind, a, b, c):
    """Binary min-heap on (time, seq) in rows of ``heap``; the caller keeps room."""
    sq = G[G_SEQ]
    G[G_SEQ] = sq + 1
    j = G[G_HN]
    G[G_HN] = j + 1
    while j > 0:
        p = (j - 1) >> 1
        if heap[p, 0] < t or (heap[p, 0] == t and heap[p, 1] < sq):
            break
        for k in range(6):
            heap[j, k] = heap[p, k]
        j = p
    heap[j, 0] = t
    heap[j, 1] = sq
    heap[j, 2] = kind
    heap[j, 3] = a
    heap[j, 4] = b
    heap[j, 5] = c


@helper
def _pop(heap, G):
    """Removes the minimum row (it is copied to row ``G[G_HN]`` first)."""
    n = G[G_HN] - 1
    G[G_HN] = n
    for k in range(6):
        v = heap[0, k]
        heap[0, k] = heap[n, k]
        heap[n, k] = v
    t = heap[0, 0]
    sq = heap[0, 1]
    j = 0
    while True:
        c = 2 * j + 1
        if c >= n:
            break
        r = c + 1
        if r < n and (heap[r, 0] < heap[c, 0] or (heap[r, 0] == heap[c, 0] and heap[r, 1] < heap[c, 1])):
            c = r
        if t < heap[c, 0] or (t == heap[c, 0] and sq < heap[c, 1]):
            break
        for k in range(6):
            v = heap[j, k]
            heap[j, k] = heap[c, k]
            heap[c, k] = v
        j = c
    return n


@helper
def _trace(tr, G, t, kind, f, seq, retx):
    n = G[G_TRN]
    if n < tr.shape[0]:
        tr[n, 0] = t
        tr[n, 1] = kind
        tr[n, 2] = f
        tr[n, 3] = seq
        tr[n, 4] = retx
        G[G_TRN] = n + 1


# --- retransmission timer -------------------------------------------------------

@helper
def _effective_rto(S, F, fl, f):
    n = S[f, S_NINF]
    if fl[f, FL_MODE] == 1 and S[f, S_HASRTT] == 1 and n < fl[f, FL_THL]:
        if n < fl[f, FL_THS]:
            return fl[f, FL_RTOS]
        return fl[f, FL_RTOL]
    b = S[f, S_BACKOFF]
    if b > 40:
        b = 40
    v = math.ldexp(F[f, 2], int(b))
    mx = float(fl[f, FL_MAXRTO])
    if v > mx:
        v = mx
    return np.int64(v)


@helper
def _deadline(S, F, fl, f):
    armed = S[f, S_ARMED]
    if armed < 0:
        return -1
    return armed + _effective_rto(S, F, fl, f)


@helper
def _rto_update(S, F, fl, f, sample):
    r = float(sample)
    if S[f, S_HASRTT] == 0:
        F[f, 0] = r
        F[f, 1] = r / 2.0
        S[f, S_HASRTT] = 1
    else:
        F[f, 1] = 0.75 * F[f, 1] + 0.25 * abs(F[f, 0] - r)
        F[f, 0] = 0.875 * F[f, 0] + 0.125 * r
    g = float(fl[f, FL_GRAN])
    v = 4.0 * F[f, 1]
    rto = F[f, 0] + (g if g >= v else v)
    lo = float(fl[f, FL_MINRTO])
    hi = float(fl[f, FL_MAXRTO])
    if rto < lo:
        rto = lo
    if rto > hi:
        rto = hi
    F[f, 2] = rto


# --- sender ---------------------------------------------------------------------

@helper
def _send_opportunity(S, fl, flags, rq, f, now, mss, G):
    """Returns (segment index, retransmission flag); index -1 means nothing to send."""
    if S[f, S_COMPLETE] == 1:
        return -1, 0
    una = S[f, S_UNA]
    nxt = S[f, S_NEXT]
    idx = -1
    slot = S[f, S_RTOSLOT]
    if slot >= 0:
        S[f, S_RTOSLOT] = -1
        if una <= slot < nxt and (flags[f, slot & RMASK] & (INFL | PENDING)) == (INFL | PENDING):
            idx = slot
    while idx < 0 and S[f, S_RQHEAD] < S[f, S_RQTAIL]:
        i = rq[f, Q_RETX, S[f, S_RQHEAD] & RMASK]
        S[f, S_RQHEAD] += 1
        if una <= i < nxt and (flags[f, i & RMASK] & (INFL | PENDING)) == (INFL | PENDING):
            idx = i
    if idx >= 0:
        flags[f, idx & RMASK] &= CLEAR_PENDING
        w = S[f, S_WQTAIL]
        if w - S[f, S_WQHEAD] >= RING:
            G[G_ERR] = ERR_OVERFLOW
            G[G_ERRF] = f
            return -1, 0
        rq[f, Q_WSEG, w & RMASK] = idx
        rq[f, Q_WMARK, w & RMASK] = nxt
        rq[f, Q_WPOS, idx & RMASK] = w
        S[f, S_WQTAIL] = w + 1
        retx = 1
    else:
        if S[f, S_STOPPED] == 1 or (S[f, S_NSEG] >= 0 and nxt >= S[f, S_NSEG]):
            return -1, 0
        if S[f, S_NINF] >= S[f, S_CWND]:
            return -1, 0
        window = RWND_SEGMENTS * mss if S[f, S_CAPLIFT] == 1 else HANDSHAKE_WINDOW
        if _seg_end(nxt, fl[f, FL_SIZE], mss) - una * mss > window:
            return -1, 0
        if nxt - una >= RING:
            G[G_ERR] = ERR_OVERFLOW
            G[G_ERRF] = f
            return -1, 0
        idx = nxt
        S[f, S_NEXT] = nxt + 1
        flags[f, idx & RMASK] = INFL
        S[f, S_NINF] += 1
        retx = 0
    if S[f, S_ARMED] < 0:
        S[f, S_ARMED] = now
    return idx, retx


@helper
def _sack_insert(S, flags, sbs, sbe, f, a, b):
    """Merge [a, b) into the scoreboard; returns how many segments left flight."""
    una = S[f, S_UNA]
    if a < una:
        a = una
    if a >= b:
        return 0
    n = S[f, S_SBN]
    lo_i = 0
    hi_i = n
    while lo_i < hi_i:  # first range with end >= a
        mid = (lo_i + hi_i) // 2
        if sbe[f, mid] < a:
            lo_i = mid + 1
        else:
            hi_i = mid
    j0 = lo_i
    j1 = j0
    cur = a
    lo = a
    hi = b
    newly = 0
    while j1 < n and sbs[f, j1] <= b:
        s = sbs[f, j1]
        e = sbe[f, j1]
        if s > cur:
            stop = s if s < b else b
            for i in range(cur, stop):
                if flags[f, i & RMASK] & INFL:
                    flags[f, i & RMASK] &= CLEAR_INFL
                    S[f, S_NINF] -= 1
                    newly += 1
        if e > cur:
            cur = e
        if s < lo:
            lo = s
        if e > hi:
            hi = e
        j1 += 1
    if cur < b:
        for i in range(cur, b):
            if flags[f, i & RMASK] & INFL:
                flags[f, i & RMASK] &= CLEAR_INFL
                S[f, S_NINF] -= 1
                newly += 1
    k = j1 - j0
    if k == 0:
        for j in range(n, j0, -1):
            sbs[f, j] = sbs[f, j - 1]
            sbe[f, j] = sbe[f, j - 1]
        sbs[f, j0] = lo
        sbe[f, j0] = hi
        S[f, S_SBN] = n + 1
    else:
        sbs[f, j0] = lo
        sbe[f, j0] = hi
        shift = k - 1
        if shift > 0:
            for j in range(j0 + 1, n - shift):
                sbs[f, j] = sbs[f, j + shift]
                sbe[f, j] = sbe[f, j + shift]
            S[f, S_SBN] = n - shift
    return newly


@helper
def _mark_losses(S, flags, rq, sbs, sbe, f, G):
    need = DUPTHRESH
    s3 = -1
    j = S[f, S_SBN] - 1
    while j >= 0:
        ln = sbe[f, j] - sbs[f, j]
        if ln >= need:
            s3 = sbe[f, j] - need
            break
        need -= ln
        j -= 1
    if s3 < 0:
        return 0
    start = S[f, S_LOSTPTR]
    if S[f, S_UNA] > start:
        start = S[f, S_UNA]
    marked = 0
    for i in range(start, s3):
        fl_i = flags[f, i & RMASK]
        if (fl_i & INFL) and not (fl_i & LOST):
            flags[f, i & RMASK] = fl_i | LOST | PENDING
            if S[f, S_RQTAIL] - S[f, S_RQHEAD] >= RING:
                G[G_ERR] = ERR_OVERFLOW
                G[G_ERRF] = f
                return marked
            rq[f, Q_RETX, S[f, S_RQTAIL] & RMASK] = i
            S[f, S_RQTAIL] += 1
            marked += 1
    if s3 > S[f, S_LOSTPTR]:
        S[f, S_LOSTPTR] = s3
    # retransmissions overtaken by three SACKed segments sent after them
    una = S[f, S_UNA]
    while S[f, S_WQHEAD] < S[f, S_WQTAIL]:
        w = S[f, S_WQHEAD]
        i = rq[f, Q_WSEG, w & RMASK]
        fl_i = flags[f, i & RMASK]
        live = i >= una and (fl_i & INFL) != 0 and rq[f, Q_WPOS, i & RMASK] == w
        if live and rq[f, Q_WMARK, w & RMASK] > s3:
            break
        S[f, S_WQHEAD] = w + 1
        if live and not (fl_i & PENDING):
            flags[f, i & RMASK] = fl_i | LOST | PENDING
            if S[f, S_RQTAIL] - S[f, S_RQHEAD] >= RING:
                G[G_ERR] = ERR_OVERFLOW
                G[G_ERRF] = f
                return marked
            rq[f, Q_RETX, S[f, S_RQTAIL] & RMASK] = i
            S[f, S_RQTAIL] += 1
            marked += 1
    return marked


@helper
def _on_ack(S, F, fl, flags, rq, sbs, sbe, f, ack_seg, nblk, blk, echo, echo_retx, now, G):
    """Returns (complete, cum_advanced); errors are reported through G."""
    if S[f, S_COMPLETE] == 1:
        return 0, 0
    nxt = S[f, S_NEXT]
    if ack_seg > nxt or ack_seg < 0:
        G[G_ERR] = ERR_PROTOCOL
        G[G_ERRF] = f
        return 0, 0
    for k in range(nblk):
        if not (ack_seg <= blk[2 * k] < blk[2 * k + 1] <= nxt):
            G[G_ERR] = ERR_PROTOCOL
            G[G_ERRF] = f
            return 0, 0
    old_una = S[f, S_UNA]
    cum = ack_seg > old_una
    if cum:
        for i in range(old_una, ack_seg):
            if flags[f, i & RMASK] & INFL:
                S[f, S_NINF] -= 1
            flags[f, i & RMASK] = 0
        S[f, S_UNA] = ack_seg
        if ack_seg > S[f, S_LOSTPTR]:
            S[f, S_LOSTPTR] = ack_seg
        n = S[f, S_SBN]
        drop = 0
        while drop < n and sbe[f, drop] <= ack_seg:
            drop += 1
        if drop > 0:
            for j in range(drop, n):
                sbs[f, j - drop] = sbs[f, j]
                sbe[f, j - drop] = sbe[f, j]
            n -= drop
            S[f, S_SBN] = n
        if n > 0 and sbs[f, 0] < ack_seg:
            sbs[f, 0] = ack_seg
        S[f, S_BACKOFF] = 0
    newly_sacked = 0
    for k in range(nblk):
        newly_sacked += _sack_insert(S, flags, sbs, sbe, f, blk[2 * k], blk[2 * k + 1])
    if (cum or newly_sacked > 0) and echo_retx == 0:
        _rto_update(S, F, fl, f, now - echo)
    newly_lost = _mark_losses(S, flags, rq, sbs, sbe, f, G)
    if fl[f, FL_CC] == 1:
        if newly_lost > 0 and S[f, S_INREC] == 0:
            ss = (S[f, S_NEXT] - S[f, S_UNA]) // 2
            if ss < 2:
                ss = 2
            S[f, S_SSTHRESH] = ss
            S[f, S_CWND] = ss
            S[f, S_CWNDCNT] = 0
            S[f, S_INREC] = 1
            S[f, S_RECOVER] = S[f, S_NEXT]
        elif cum:
            if S[f, S_INREC] == 1 and S[f, S_UNA] >= S[f, S_RECOVER]:
                S[f, S_INREC] = 0
            if S[f, S_INREC] == 0:
                acked = ack_seg - old_una
                if S[f, S_CWND] < S[f, S_SSTHRESH]:
                    S[f, S_CWND] += acked
                else:
                    S[f, S_CWNDCNT] += acked
                    while S[f, S_CWNDCNT] >= S[f, S_CWND]:
                        S[f, S_CWNDCNT] -= S[f, S_CWND]
                        S[f, S_CWND] += 1
    if S[f, S_NSEG] >= 0 and S[f, S_UNA] >= S[f, S_NSEG]:
        S[f, S_COMPLETE] = 1
        S[f, S_COMPLETE_AT] = now
        S[f, S_CECHO] = echo
        S[f, S_CECHORETX] = echo_retx
        S[f, S_ARMED] = -1
        return 1, 1 if cum else 0
    if cum:
        if S[f, S_NINF] > 0:
            S[f, S_ARMED] = now
        else:
            S[f, S_ARMED] = -1
    return 0, 1 if cum else 0


@helper
def _on_rto_timeout(S, F, fl, flags, f, now, G):
    una = S[f, S_UNA]
    if S[f, S_NINF] == 0 or not (flags[f, una & RMASK] & INFL):
        G[G_ERR] = ERR_TIMER
        G[G_ERRF] = f
        return
    flags[f, una & RMASK] |= PENDING
    S[f, S_RTOSLOT] = una
    S[f, S_TIMEOUTS] += 1
    tail = fl[f, FL_MODE] == 1 and S[f, S_HASRTT] == 1 and S[f, S_NINF] < fl[f, FL_THL]
    if not tail:
        S[f, S_BACKOFF] += 1
    if fl[f, FL_CC] == 1:
        ss = (S[f, S_NEXT] - S[f, S_UNA]) // 2
        if ss < 2:
            ss = 2
        S[f, S_SSTHRESH] = ss
        S[f, S_CWND] = 1
        S[f, S_CWNDCNT] = 0
        S[f, S_INREC] = 0
    S[f, S_ARMED] = now


# --- receiver -------------------------------------------------------------------

@helper
def _on_data(S, rrs, rre, rrt, f, i, blk):
    """Receiver side; fills ``blk`` with up to three SACK blocks, returns the count."""
    dseg = S[f, S_DSEG]
    n = S[f, S_RN]
    lo_i = 0
    hi_i = n
    while lo_i < hi_i:  # number of ranges starting at or below i
        mid = (lo_i + hi_i) // 2
        if rrs[f, mid] <= i:
            lo_i = mid + 1
        else:
            hi_i = mid
    k = lo_i
    if i < dseg or (k > 0 and rrs[f, k - 1] <= i < rre[f, k - 1]):
        S[f, S_DUP] += 1
    elif i == dseg:
        dseg += 1
        if n > 0 and rrs[f, 0] == dseg:
            dseg = rre[f, 0]
            for j in range(1, n):
                rrs[f, j - 1] = rrs[f, j]
                rre[f, j - 1] = rre[f, j]
                rrt[f, j - 1] = rrt[f, j]
            n -= 1
            S[f, S_RN] = n
        S[f, S_DSEG] = dseg
    else:
        S[f, S_STAMP] += 1
        st = S[f, S_STAMP]
        left = k > 0 and rre[f, k - 1] == i
        right = k < n and rrs[f, k] == i + 1
        if left and right:
            rre[f, k - 1] = rre[f, k]
            rrt[f, k - 1] = st
            for j in range(k + 1, n):
                rrs[f, j - 1] = rrs[f, j]
                rre[f, j - 1] = rre[f, j]
                rrt[f, j - 1] = rrt[f, j]
            n -= 1
        elif left:
            rre[f, k - 1] = i + 1
            rrt[f, k - 1] = st
        elif right:
            rrs[f, k] = i
            rrt[f, k] = st
        else:
            for j in range(n, k, -1):
                rrs[f, j] = rrs[f, j - 1]
                rre[f, j] = rre[f, j - 1]
                rrt[f, j] = rrt[f, j - 1]
            rrs[f, k] = i
            rre[f, k] = i + 1
            rrt[f, k] = st
            n += 1
        S[f, S_RN] = n
    # three most recently changed ranges, newest first
    nb = 0
    last = HUGE
    while nb < 3 and nb < n:
        best = -1
        for j in range(n):
            if rrt[f, j] < last and (best < 0 or rrt[f, j] > rrt[f, best]):
                best = j
        blk[2 * nb] = rrs[f, best]
        blk[2 * nb + 1] = rre[f, best]
        last = rrt[f, best]
        nb += 1
    return nb


# --- scheduler ------------------------------------------------------------------

@helper
def _refill(tok, cap, rate, dt):
    if tok >= cap:
        return cap
    if dt <= DT_NO_OVERFLOW:
        v = tok + rate * dt
        return v if v < cap else cap
    if dt >= (cap - tok + rate - 1) // rate:
        return cap
    return tok + rate * dt


@helper
def _refresh(H, now):
    for j in range(N_CLASSES + 1):
        dt = now - H[j, 4]
        if dt > 0:
            H[j, 0] = _refill(H[j, 0], H[j, 5], H[j, 2], dt)
            H[j, 1] = _refill(H[j, 1], H[j, 6], H[j, 3], dt)
            H[j, 4] = now


@helper
def _wait(have, need, rate):
    if have >= need:
        return 0
    return (need - have + rate - 1) // rate


@helper
def _pick(H, hq, qhead, qlen, rr_last, guarantee):
    best = -1
    bp = 0
    br = 0
    for idx in range(N_CLASSES):
        if qlen[idx] == 0:
            continue
        cost = hq[idx, qhead[idx], 3] * U_BYTE
        if guarantee:
            ok = H[idx, 0] >= cost and H[idx, 1] >= cost and H[ROOT, 0] >= 0
        else:
            ok = H[idx, 1] >= cost and H[ROOT, 1] >= cost
        if not ok:
            continue
        p = H[idx, 7]
        r = (idx - rr_last[p] - 1) % N_CLASSES
        if best < 0 or p < bp or (p == bp and r < br):
            best = idx
            bp = p
            br = r
    if best >= 0:
        rr_last[H[best, 7]] = best
    return best


@helper
def _dequeue(H, hq, qhead, qlen, rr_last, now):
    """Returns the leaf index served, or -1; the packet is at hq[leaf, old head]."""
    _refresh(H, now)
    t = _pick(H, hq, qhead, qlen, rr_last, True)
    if t >= 0:
        H[t, 0] -= hq[t, qhead[t], 3] * U_BYTE
    else:
        t = _pick(H, hq, qhead, qlen, rr_last, False)
        if t < 0:
            return -1
    cost = hq[t, qhead[t], 3] * U_BYTE
    H[t, 1] -= cost
    H[ROOT, 0] -= cost
    H[ROOT, 1] -= cost
    return t


@helper
def _next_dequeue_time(H, hq, qhead, qlen, now):
    _refresh(H, now)
    best = -1
    root_wait = _wait(H[ROOT, 0], 0, H[ROOT, 2])
    for idx in range(N_CLASSES):
        if qlen[idx] == 0:
            continue
        cost = hq[idx, qhead[idx], 3] * U_BYTE
        cw = _wait(H[idx, 1], cost, H[idx, 3])
        g = _wait(H[idx, 0], cost, H[idx, 2])
        if cw > g:
            g = cw
        if root_wait > g:
            g = root_wait
        b = _wait(H[ROOT, 1], cost, H[ROOT, 3])
        if cw > b:
            b = cw
        w = g if g < b else b
        if best < 0 or w < best:
            best = w
    if best < 0:
        return -1
    return now + best


# --- engine ---------------------------------------------------------------------

@helper
def _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G):
    if S[f, S_ACTIVE] == 0 or S[f, S_QUEUED] == 1:
        return
    idx, retx = _send_opportunity(S, fl, flags, rq, f, now, mss, G)
    if idx < 0:
        return
    if S[f, S_NINF] > S[f, S_MAXINF]:
        S[f, S_MAXINF] = S[f, S_NINF]
    leaf = fl[f, FL_TYPE]
    if qlen[leaf] >= qlimit:
        G[G_HTBDROP] += 1
        return
    pos = (qhead[leaf] + qlen[leaf]) & (hq.shape[1] - 1)
    hq[leaf, pos, 0] = f
    hq[leaf, pos, 1] = idx
    hq[leaf, pos, 2] = retx
    hq[leaf, pos, 3] = _seg_end(idx, fl[f, FL_SIZE], mss) - idx * mss + overhead
    qlen[leaf] += 1
    S[f, S_QUEUED] = 1


@helper
def _sync_timer(S, F, fl, heap, G, f, now):
    d = _deadline(S, F, fl, f)
    if d < 0:
        return
    if d < now:
        d = now
    if S[f, S_TIMER_AT] < 0 or d < S[f, S_TIMER_AT]:
        S[f, S_TIMER_GEN] += 1
        S[f, S_TIMER_AT] = d
        _push(heap, G, d, EV_RTO, f, S[f, S_TIMER_GEN], 0)


@helper
def _kick(H, hq, qhead, qlen, heap, G, now):
    t = _next_dequeue_time(H, hq, qhead, qlen, now)
    if t >= 0 and (G[G_WAKE_AT] < 0 or t < G[G_WAKE_AT]):
        G[G_WAKE_GEN] += 1
        G[G_WAKE_AT] = t
        _push(heap, G, t, EV_WAKE, G[G_WAKE_GEN], 0, 0)


@helper
def _observe(S, f):
    c = S[f, S_CWND]
    if S[f, S_CWMIN] == 0 or c < S[f, S_CWMIN]:
        S[f, S_CWMIN] = c
    if c > S[f, S_CWMAX]:
        S[f, S_CWMAX] = c


@jit
def _simulate(fl, H, nprio, qlimit, qcap, owd, rtt, threshold, rng_state, mss, overhead,
              t_end, bin_ns, nbins, stop_when_complete, trace_cap):
    nf = fl.shape[0]
    S = np.zeros((nf, S_FIELDS), dtype=np.int64)
    F = np.zeros((nf, 3), dtype=np.float64)
    G = np.zeros(G_FIELDS, dtype=np.int64)
    flags = np.zeros((nf, RING), dtype=np.uint8)
    rq = np.zeros((nf, 4, RING), dtype=np.int64)
    sbs = np.zeros((nf, RANGE_CAP), dtype=np.int64)
    sbe = np.zeros((nf, RANGE_CAP), dtype=np.int64)
    rrs = np.zeros((nf, RANGE_CAP), dtype=np.int64)
    rre = np.zeros((nf, RANGE_CAP), dtype=np.int64)
    rrt = np.zeros((nf, RANGE_CAP), dtype=np.int64)
    hq = np.zeros((N_CLASSES, qcap, 4), dtype=np.int64)
    qhead = np.zeros(N_CLASSES, dtype=np.int64)
    qlen = np.zeros(N_CLASSES, dtype=np.int64)
    rr_last = np.full(nprio, -1, dtype=np.int64)
    bins = np.zeros((max(nbins, 1), N_CLASSES), dtype=np.int64)
    tr = np.zeros((max(trace_cap, 1), 5), dtype=np.int64)
    # Both path directions have a fixed delay, so arrivals are FIFO per
    # direction and bypass the heap: rows are (time, seq, flow, ...).
    dcap = 1 << 12
    dq = np.zeros((dcap, 5), dtype=np.int64)    # ..., segment, retransmission
    acap = 1 << 12
    aq = np.zeros((acap, 13), dtype=np.int64)   # ..., cum, nblk, 6 block ends, echo, echo_retx
    dhead = 0
    dtail = 0
    blk = np.zeros(6, dtype=np.int64)
    rng = np.zeros(1, dtype=np.uint64)
    rng[0] = rng_state

    G[G_WAKE_AT] = -1
    for f in range(nf):
        size = fl[f, FL_SIZE]
        S[f, S_NSEG] = -1 if size < 0 else (size + mss - 1) // mss
        S[f, S_CWND] = FIXED_CWND if fl[f, FL_CC] == 0 else RENO_INITIAL_CWND
        S[f, S_SSTHRESH] = HUGE
        S[f, S_ARMED] = -1
        S[f, S_FIRST] = -1
        S[f, S_BOXEND] = -1
        S[f, S_COMPLETE_AT] = -1
        S[f, S_CECHO] = -1
        S[f, S_RTOSLOT] = -1
        S[f, S_TIMER_AT] = -1
        init = fl[f, FL_INITRTO]
        if init < fl[f, FL_MINRTO]:
            init = fl[f, FL_MINRTO]
        if init > fl[f, FL_MAXRTO]:
            init = fl[f, FL_MAXRTO]
        F[f, 2] = float(init)
        if size >= 0:
            G[G_LEFT] += 1

    heap = np.zeros((max(64, 4 * nf), 6), dtype=np.int64)
    for f in range(nf):
        _push(heap, G, fl[f, FL_START], EV_START, f, 0, 0)
        if fl[f, FL_STOP] >= 0:
            _push(heap, G, fl[f, FL_STOP], EV_STOP, f, 0, 0)

    now = 0
    stopped = False
    while True:
        if trace_cap > 0 and G[G_TRN] + 8 > tr.shape[0]:
            bigger = np.zeros((tr.shape[0] * 2, 5), dtype=np.int64)
            bigger[:tr.shape[0]] = tr
            tr = bigger
        if dtail - dhead + 1 >= dcap:
            bigger_d = np.zeros((dcap * 2, 5), dtype=np.int64)
            for j in range(dhead, dtail):
                bigger_d[j & (dcap * 2 - 1)] = dq[j & (dcap - 1)]
            dq = bigger_d
            dcap *= 2
        if G[G_ATAIL] - G[G_AHEAD] + 1 >= acap:
            bigger_a = np.zeros((acap * 2, 13), dtype=np.int64)
            for j in range(G[G_AHEAD], G[G_ATAIL]):
                bigger_a[j & (acap * 2 - 1)] = aq[j & (acap - 1)]
            aq = bigger_a
            acap *= 2
        if G[G_HN] + 8 > heap.shape[0]:
            bigger_h = np.zeros((heap.shape[0] * 2, 6), dtype=np.int64)
            bigger_h[:heap.shape[0]] = heap
            heap = bigger_h
        src = -1
        t = HUGE
        sq = HUGE
        if G[G_HN] > 0:
            src = 0
            t = heap[0, 0]
            sq = heap[0, 1]
        if dtail > dhead:
            row = dhead & (dcap - 1)
            if dq[row, 0] < t or (dq[row, 0] == t and dq[row, 1] < sq):
                src = 1
                t = dq[row, 0]
                sq = dq[row, 1]
        if G[G_ATAIL] > G[G_AHEAD]:
            row = G[G_AHEAD] & (acap - 1)
            if aq[row, 0] < t or (aq[row, 0] == t and aq[row, 1] < sq):
                src = 2
                t = aq[row, 0]
        if src < 0 or t > t_end:
            break
        a = 0
        b = 0
        c = 0
        if src == 0:
            last = _pop(heap, G)
            kind = heap[last, 2]
            a = heap[last, 3]
            b = heap[last, 4]
            c = heap[last, 5]
        elif src == 1:
            kind = EV_DATA
            row = dhead & (dcap - 1)
            a = dq[row, 2]
            b = dq[row, 3]
            c = dq[row, 4]
            dhead += 1
        else:
            kind = EV_ACK
        now = t
        G[G_EVENTS] += 1
        if kind == EV_WAKE:
            if a != G[G_WAKE_GEN]:
                continue
            G[G_WAKE_AT] = -1
            leaf = _dequeue(H, hq, qhead, qlen, rr_last, now)
            if leaf >= 0:
                h = qhead[leaf]
                f = hq[leaf, h, 0]
                seg = hq[leaf, h, 1]
                retx = hq[leaf, h, 2]
                qhead[leaf] = (h + 1) & (qcap - 1)
                qlen[leaf] -= 1
                S[f, S_QUEUED] = 0
                # on_transmit
                S[f, S_SENT] += 1
                if retx == 1:
                    S[f, S_RETX] += 1
                elif fl[f, FL_SIZE] >= 0 and _seg_end(seg, fl[f, FL_SIZE], mss) == fl[f, FL_SIZE]:
                    S[f, S_BOXEND] = now
                if S[f, S_FIRST] < 0:
                    S[f, S_FIRST] = now
                    _push(heap, G, now + rtt, EV_CAPLIFT, f, 0, 0)
                seq_b = seg * mss
                if trace_cap > 0:
                    _trace(tr, G, now, 0, f, seq_b, retx)
                if (_draw(rng) >> _SH11) < threshold:
                    if trace_cap > 0:
                        _trace(tr, G, now, 1, f, seq_b, retx)
                    S[f, S_DLOST] += 1
                    if retx == 0:
                        S[f, S_FTXLOST] += 1
                else:
                    row = dtail & (dcap - 1)
                    dq[row, 0] = now + owd
                    dq[row, 1] = G[G_SEQ]
                    dq[row, 2] = f
                    dq[row, 3] = seg
                    dq[row, 4] = retx
                    G[G_SEQ] += 1
                    dtail += 1
                _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G)
                _sync_timer(S, F, fl, heap, G, f, now)
            _kick(H, hq, qhead, qlen, heap, G, now)
        elif kind == EV_DATA:
            f = a
            seg = b
            retx = c
            size = fl[f, FL_SIZE]
            if trace_cap > 0:
                _trace(tr, G, now, 2, f, seg * mss, retx)
            if bin_ns > 0:
                bi = now // bin_ns
                if bi < nbins:
                    bins[bi, fl[f, FL_TYPE]] += _seg_end(seg, size, mss) - seg * mss + overhead
            nb = _on_data(S, rrs, rre, rrt, f, seg, blk)
            cum = S[f, S_DSEG]
            if (_draw(rng) >> _SH11) < threshold:
                if trace_cap > 0:
                    _trace(tr, G, now, 4, f, _seg_byte(cum, size, mss), retx)
                S[f, S_ALOST] += 1
            else:
                row = G[G_ATAIL] & (acap - 1)
                aq[row, 0] = now + owd
                aq[row, 1] = G[G_SEQ]
                aq[row, 2] = f
                aq[row, 3] = cum
                aq[row, 4] = nb
                for j in range(2 * nb):
                    aq[row, 5 + j] = blk[j]
                aq[row, 11] = now - owd
                aq[row, 12] = retx
                G[G_SEQ] += 1
                G[G_ATAIL] += 1
        elif kind == EV_ACK:
            row = G[G_AHEAD] & (acap - 1)
            G[G_AHEAD] += 1
            f = aq[row, 2]
            size = fl[f, FL_SIZE]
            nb = aq[row, 4]
            for j in range(2 * nb):
                blk[j] = aq[row, 5 + j]
            if trace_cap > 0:
                _trace(tr, G, now, 3, f, _seg_byte(aq[row, 3], size, mss), aq[row, 12])
            done, _ = _on_ack(S, F, fl, flags, rq, sbs, sbe, f, aq[row, 3], nb, blk,
                              aq[row, 11], aq[row, 12], now, G)
            if G[G_ERR] != 0:
                break
            if done == 1:
                G[G_LEFT] -= 1
                if stop_when_complete and G[G_LEFT] == 0:
                    _observe(S, f)
                    stopped = True
                    break
            _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G)
            _sync_timer(S, F, fl, heap, G, f, now)
            _kick(H, hq, qhead, qlen, heap, G, now)
            _observe(S, f)
        elif kind == EV_RTO:
            f = a
            if b != S[f, S_TIMER_GEN]:
                continue
            S[f, S_TIMER_AT] = -1
            d = _deadline(S, F, fl, f)
            if d < 0:
                continue
            if now < d:
                _sync_timer(S, F, fl, heap, G, f, now)
                continue
            head = S[f, S_UNA]
            _on_rto_timeout(S, F, fl, flags, f, now, G)
            if G[G_ERR] != 0:
                break
            if trace_cap > 0:
                _trace(tr, G, now, 5, f, _seg_byte(head, fl[f, FL_SIZE], mss), 1)
            _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G)
            _sync_timer(S, F, fl, heap, G, f, now)
            _kick(H, hq, qhead, qlen, heap, G, now)
            _observe(S, f)
        elif kind == EV_START:
            f = a
            S[f, S_ACTIVE] = 1
            _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G)
            _sync_timer(S, F, fl, heap, G, f, now)
            _kick(H, hq, qhead, qlen, heap, G, now)
            _observe(S, f)
        elif kind == EV_STOP:
            S[a, S_STOPPED] = 1
        elif kind == EV_CAPLIFT:
            f = a
            S[f, S_CAPLIFT] = 1
            _try_emit(S, fl, flags, rq, H, hq, qhead, qlen, qlimit, f, now, mss, overhead, G)
            _sync_timer(S, F, fl, heap, G, f, now)
            _kick(H, hq, qhead, qlen, heap, G, now)
        if G[G_ERR] != 0:
            break
    if not stopped and G[G_ERR] == 0 and now < t_end:
        now = t_end
    return S, bins, tr[:G[G_TRN]], now, G


def _flow_inputs(spec: NetworkSpec) -> np.ndarray:
    fl = np.zeros((len(spec.flows), FL_FIELDS), dtype=np.int64)
    for f, fs in enumerate(spec.flows):
        r = fs.rto
        fl[f] = (int(fs.traffic_type), fs.start, -1 if fs.stop is None else fs.stop,
                 -1 if fs.size is None else fs.size, 0 if fs.cc_mode is CcMode.FIXED else 1,
                 1 if r.mode is RtoMode.ACCELERATED else 0, r.tail_threshold_small,
                 r.tail_rto_small, r.tail_threshold_large, r.tail_rto_large, r.min_rto,
                 r.max_rto, r.clock_granularity, r.initial_rto)
    return fl


def _htb_inputs(spec: NetworkSpec):
    sched = HtbScheduler.build_tree(spec.policy, spec.mss, spec.overhead, spec.queue_limit)
    H = np.zeros((N_CLASSES + 1, 8), dtype=np.int64)  # tokens, ctokens, rate, ceil, last, burst, cburst, prio
    for t in TrafficType:
        c = sched.leaves[t]
        H[int(t)] = (c.tokens, c.ctokens, c.guarantee_rate, c.ceil_rate, 0, c.burst_units,
                     c.cburst_units, c.priority)
    r = sched.root
    H[ROOT] = (r.tokens, r.ctokens, r.guarantee_rate, r.ceil_rate, 0, r.burst_units, r.cburst_units, 0)
    if H[:, 2:4].max() >= MAX_RATE:
        raise ValueError("class rates above 1 Tbit/s are not supported")
    nprio = int(H[:N_CLASSES, 7].max()) + 1
    return H, nprio


def run_kernel(spec: NetworkSpec) -> SimResult:
    fl = _flow_inputs(spec)
    H, nprio = _htb_inputs(spec)
    # each flow queues at most one segment; ring sizes are powers of two
    qcap = 1 << min(spec.queue_limit, len(spec.flows)).bit_length()
    with np.errstate(over="ignore"):
        S, bins, tr, end, G = _simulate(
            fl, H, nprio, spec.queue_limit, qcap, spec.link.one_way_delay, spec.link.rtt,
            np.uint64(bernoulli_threshold(spec.link.loss_probability)),
            np.uint64(stream_key(spec.seed, spec.stream_id)), spec.mss, spec.overhead,
            spec.t_end, spec.bin_ns, spec.nbins, spec.stop_when_complete,
            4096 if spec.trace else 0)
    err, errf = int(G[G_ERR]), int(G[G_ERRF])
    if err == ERR_PROTOCOL:
        raise ProtocolViolation(f"flow {errf}: acknowledgment beyond sent data")
    if err == ERR_TIMER:
        raise TimerError(f"flow {errf}: RTO fired with nothing in flight")
    if err == ERR_OVERFLOW:
        raise OverflowError(f"flow {errf}: outstanding span exceeds {RING} segments")
    return SimResult(_flow_results(spec, S), bins[:spec.nbins].copy(), _trace_list(tr),
                     int(end), int(G[G_EVENTS]), int(G[G_HTBDROP]))


def _opt(v):
    v = int(v)
    return None if v < 0 else v


def _flow_results(spec: NetworkSpec, S) -> list:
    out = []
    for f, fs in enumerate(spec.flows):
        s = S[f]
        size = fs.size
        dseg = int(s[S_DSEG])
        delivered = dseg * spec.mss if size is None else min(dseg * spec.mss, size)
        out.append(FlowResult(
            fs.traffic_type, size,
            first_send=_opt(s[S_FIRST]), box_end=_opt(s[S_BOXEND]),
            complete_at=_opt(s[S_COMPLETE_AT]),
            completion_echo=_opt(s[S_CECHO]) if s[S_COMPLETE] else None,
            completion_echo_retx=bool(s[S_CECHORETX]),
            packets_sent=int(s[S_SENT]), retransmissions=int(s[S_RETX]),
            first_tx_lost=int(s[S_FTXLOST]), data_lost=int(s[S_DLOST]),
            acks_lost=int(s[S_ALOST]), duplicates=int(s[S_DUP]), timeouts=int(s[S_TIMEOUTS]),
            delivered_bytes=delivered, max_in_flight=int(s[S_MAXINF]),
            cwnd_min=int(s[S_CWMIN]), cwnd_max=int(s[S_CWMAX])))
    return out


def _trace_list(tr) -> list:
    return [(int(t), TraceKind(int(k)), int(f), int(seq), bool(r)) for t, k, f, seq, r in tr]


__all__ = ["run_kernel", "JIT_ENABLED", "RING"]
