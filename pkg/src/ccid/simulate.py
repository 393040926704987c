"""Fluid-model simulation of a single flow over a droptail bottleneck.

The model is round-based, not packet-based: each iteration covers one round
trip, the sender injects one window (or one pacing interval) of fluid, the
bottleneck serves at link capacity, and the droptail queue adds delay
``queue_bits / capacity`` to the base RTT. A queue above ``buffer_pkts``
packets signals a loss. Loss-responsive protocols additionally stall for one
round after a loss (retransmission), which is where their goodput penalty
comes from; BBR keeps pacing through losses.

A slowly varying exogenous delay term (seeded Ornstein-Uhlenbeck, clipped at
zero) stands in for queueing induced by unmodeled cross traffic. It is what
separates the protocols on an otherwise idle link: Vegas reads the inflated
RTT as congestion and throttles, Reno's RTT-clocked sawtooth slows down,
Cubic's absolute-time recovery does not, and BBR paces at the bandwidth
estimate regardless. Environment streams (jitter, delay noise, loss) depend
only on the link seed, not the protocol, so different protocols simulated
with the same seed face the same path conditions.

Delivered bytes are aggregated into fixed sampling intervals (100 ms by
default), one feature record per interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .protocols import (
    BBR_CWND_GAIN,
    INITIAL_CWND_PKTS,
    MIN_CWND_PKTS,
    BbrState,
    CubicState,
    LinkConfig,
    ProtocolLabel,
    RenoState,
    VegasState,
    bbr_cwnd_cap_pkts,
    cubic_reduce,
    cubic_window,
    step_bbr,
    step_reno,
    step_vegas,
)
from .seeds import derive_rng

DEFAULT_SAMPLE_INTERVAL_S = 0.1
DEFAULT_MAX_DURATION_S = 600.0
DELAY_NOISE_SD_FRAC = 0.8  # stationary std dev of the exogenous delay, vs its mean
DELAY_NOISE_UPDATE_DT_S = 1e-3  # fixed cadence: the delay path depends on time, not rounds


@dataclass(frozen=True)
class FeatureRecord:
    """One sampling-interval observation of a flow."""

    time_s: float
    size_bytes: int
    max_win_bytes: int
    throughput_mbps: float
    smoothed_mbps: float
    rtt_ms: float


@dataclass(frozen=True)
class FlowTrace:
    label: ProtocolLabel
    records: list[FeatureRecord]
    link: LinkConfig  # effective per-flow parameters (after jitter)
    transfer_bytes: int
    completed: bool

    @property
    def total_size_bytes(self) -> int:
        return sum(r.size_bytes for r in self.records)


class _RenoFlow:
    def __init__(self, pkt_bits: float):
        self.state = RenoState()
        self.pkt_bits = pkt_bits
        self.stalled = False

    def offered_bits(self, rtt_s: float) -> float:
        if self.stalled:
            self.stalled = False
            return 0.0
        return self.state.cwnd_pkts * self.pkt_bits

    def on_round(self, acks: float, loss: bool, rtt_s: float, now_s: float) -> None:
        self.state = step_reno(self.state, acks, loss)
        if loss:
            self.stalled = True

    def cwnd_bytes(self) -> float:
        return self.state.cwnd_pkts * self.pkt_bits / 8.0


class _CubicFlow:
    def __init__(self, pkt_bits: float):
        self.state = CubicState()
        self.pkt_bits = pkt_bits
        self.stalled = False

    def offered_bits(self, rtt_s: float) -> float:
        if self.stalled:
            self.stalled = False
            return 0.0
        return self.state.cwnd_pkts * self.pkt_bits

    def on_round(self, acks: float, loss: bool, rtt_s: float, now_s: float) -> None:
        st = self.state
        if loss:
            self.state = cubic_reduce(st)
            self.stalled = True
        elif st.w_max_pkts is None:
            # initial slow start, one segment per ack until the first loss
            st.cwnd_pkts += acks
        else:
            st.t_since_reduction_s += rtt_s
            st.w_est_pkts += st.friendly_gain_pkts_per_rtt * acks / st.cwnd_pkts
            st.cwnd_pkts = max(cubic_window(st, st.t_since_reduction_s), st.w_est_pkts)

    def cwnd_bytes(self) -> float:
        return self.state.cwnd_pkts * self.pkt_bits / 8.0


class _VegasFlow:
    def __init__(self, pkt_bits: float):
        self.state = VegasState()
        self.pkt_bits = pkt_bits
        self.stalled = False

    def offered_bits(self, rtt_s: float) -> float:
        if self.stalled:
            self.stalled = False
            return 0.0
        return self.state.cwnd_pkts * self.pkt_bits

    def on_round(self, acks: float, loss: bool, rtt_s: float, now_s: float) -> None:
        if loss:
            # delay-based control retains the standard halving loss response
            self.state.cwnd_pkts = max(MIN_CWND_PKTS, self.state.cwnd_pkts / 2.0)
            self.stalled = True
        else:
            self.state = step_vegas(self.state, rtt_s)

    def cwnd_bytes(self) -> float:
        return self.state.cwnd_pkts * self.pkt_bits / 8.0


class _BbrFlow:
    def __init__(self, pkt_bits: float, mss_bytes: int, cwnd_gain: float):
        self.state = BbrState(cwnd_gain=cwnd_gain)
        self.pkt_bits = pkt_bits
        self.mss_bytes = mss_bytes
        self._cap_pkts = bbr_cwnd_cap_pkts(self.state, mss_bytes)

    def offered_bits(self, rtt_s: float) -> float:
        st = self.state
        if st.btl_bw_bits_per_s <= 0.0:
            window_pkts = INITIAL_CWND_PKTS  # no rate estimate yet
        else:
            paced_pkts = st.pacing_gain * st.btl_bw_bits_per_s * rtt_s / self.pkt_bits
            window_pkts = min(paced_pkts, self._cap_pkts)
        return window_pkts * self.pkt_bits

    def on_round(self, acks: float, loss: bool, rtt_s: float, now_s: float) -> None:
        delivered_rate = acks * self.pkt_bits / rtt_s
        self.state = step_bbr(self.state, delivered_rate, rtt_s, now_s)
        self._cap_pkts = bbr_cwnd_cap_pkts(self.state, self.mss_bytes)

    def cwnd_bytes(self) -> float:
        cap_pkts = self._cap_pkts
        if not math.isfinite(cap_pkts):
            cap_pkts = INITIAL_CWND_PKTS
        return cap_pkts * self.pkt_bits / 8.0


def _make_flow(label: ProtocolLabel, link: LinkConfig, bbr_cwnd_gain: float):
    pkt_bits = link.packet_bits
    if label is ProtocolLabel.RENO:
        return _RenoFlow(pkt_bits)
    if label is ProtocolLabel.CUBIC:
        return _CubicFlow(pkt_bits)
    if label is ProtocolLabel.VEGAS:
        return _VegasFlow(pkt_bits)
    if label is ProtocolLabel.BBR:
        return _BbrFlow(pkt_bits, link.mss_bytes, bbr_cwnd_gain)
    raise ValueError(f"unsupported protocol {label!r}")


def effective_link(link: LinkConfig) -> LinkConfig:
    """Apply the per-flow +/- jitter draw to capacity and base RTT."""
    if link.jitter_frac == 0.0:
        return link
    rng = derive_rng(link.seed, "jitter")
    cap = link.capacity_bits_per_s * (1.0 + link.jitter_frac * (2.0 * rng.random() - 1.0))
    rtt = link.base_rtt_s * (1.0 + link.jitter_frac * (2.0 * rng.random() - 1.0))
    return replace(link, capacity_bits_per_s=cap, base_rtt_s=rtt)


def simulate_flow(
    label: ProtocolLabel,
    link: LinkConfig,
    transfer_bytes: int,
    sample_interval_s: float = DEFAULT_SAMPLE_INTERVAL_S,
    *,
    max_duration_s: float = DEFAULT_MAX_DURATION_S,
    bbr_cwnd_gain: float = BBR_CWND_GAIN,
) -> FlowTrace:
    """Simulate one transfer and return its sampled trace.

    Stops once ``transfer_bytes`` have been delivered or ``max_duration_s``
    of simulated time has elapsed (``completed`` records which).
    """
    if transfer_bytes <= 0:
        raise ValueError("transfer_bytes must be positive")
    if sample_interval_s <= 0:
        raise ValueError("sample_interval_s must be positive")

    link_eff = effective_link(link)
    capacity = link_eff.capacity_bits_per_s
    base_rtt = link_eff.base_rtt_s
    pkt_bits = link_eff.packet_bits
    buffer_bits = link_eff.buffer_pkts * pkt_bits
    interval = sample_interval_s

    flow = _make_flow(label, link_eff, bbr_cwnd_gain)

    rng_exo = derive_rng(link.seed, "exo")
    rng_loss = derive_rng(link.seed, "loss")
    exo_mean = link_eff.delay_noise_frac * base_rtt
    exo_dt = DELAY_NOISE_UPDATE_DT_S
    exo_theta = 1.0 / link_eff.delay_noise_tau_s
    exo_pull = exo_theta * exo_dt
    exo_noise = (
        DELAY_NOISE_SD_FRAC * exo_mean * math.sqrt(2.0 * exo_theta) * math.sqrt(exo_dt)
    )
    next_exo_update = exo_dt
    loss_rate = link_eff.loss_rate

    transfer_bits = transfer_bytes * 8.0
    queue_bits = 0.0
    exo_delay = 0.0
    now = 0.0
    delivered_bits = 0.0

    # per-interval accumulators, indexed by bucket number
    bucket_bits: list[float] = []
    bucket_rtt_time: list[float] = []
    bucket_time: list[float] = []
    bucket_max_win: list[float] = []
    cur_bucket = -1
    cur_bucket_end = 0.0

    def _advance_bucket() -> None:
        nonlocal cur_bucket, cur_bucket_end
        cur_bucket += 1
        cur_bucket_end += interval
        bucket_bits.append(0.0)
        bucket_rtt_time.append(0.0)
        bucket_time.append(0.0)
        bucket_max_win.append(0.0)

    _advance_bucket()

    while delivered_bits < transfer_bits and now < max_duration_s:
        rtt = base_rtt + exo_delay + queue_bits / capacity
        offered = flow.offered_bits(rtt)
        service = capacity * rtt
        delivered = min(queue_bits + offered, service)
        queue_bits = queue_bits + offered - delivered
        loss = False
        if queue_bits > buffer_bits:
            loss = True
            queue_bits = buffer_bits
        if loss_rate > 0.0 and offered > 0.0:
            pkts_sent = offered / pkt_bits
            if rng_loss.random() < 1.0 - (1.0 - loss_rate) ** pkts_sent:
                loss = True

        flow.on_round(delivered / pkt_bits, loss, rtt, now)

        win_bytes = flow.cwnd_bytes()
        t0 = now
        t_end = now + rtt
        while t0 < t_end:
            while t0 >= cur_bucket_end:
                _advance_bucket()
            b = cur_bucket
            seg_end = t_end if t_end < cur_bucket_end else cur_bucket_end
            span = seg_end - t0
            bucket_bits[b] += delivered * (span / rtt)
            bucket_rtt_time[b] += rtt * span
            bucket_time[b] += span
            if win_bytes > bucket_max_win[b]:
                bucket_max_win[b] = win_bytes
            t0 = seg_end

        delivered_bits += delivered
        now = t_end
        if exo_mean > 0.0:
            while now >= next_exo_update:
                exo_delay += exo_pull * (exo_mean - exo_delay)
                exo_delay += exo_noise * rng_exo.gauss(0.0, 1.0)
                if exo_delay < 0.0:
                    exo_delay = 0.0
                next_exo_update += exo_dt

    records = []
    cum_bits = 0.0
    prev_floor = 0
    for b, bits in enumerate(bucket_bits):
        if bucket_time[b] <= 0.0:
            continue
        cum_bits += bits
        cum_floor = math.floor(cum_bits / 8.0)
        size = cum_floor - prev_floor
        prev_floor = cum_floor
        records.append(
            FeatureRecord(
                time_s=b * interval,
                size_bytes=size,
                max_win_bytes=int(round(bucket_max_win[b])),
                throughput_mbps=size * 8.0 / interval / 1e6,
                smoothed_mbps=0.0,  # filled by the feature pipeline
                rtt_ms=bucket_rtt_time[b] / bucket_time[b] * 1000.0,
            )
        )

    return FlowTrace(
        label=label,
        records=records,
        link=link_eff,
        transfer_bytes=transfer_bytes,
        completed=delivered_bits >= transfer_bits,
    )
