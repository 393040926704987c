"""Congestion-control window dynamics for Reno, Cubic, Vegas, and BBRv1.

Each protocol is expressed as a small state record plus a pure update rule
applied once per simulated round trip. The rules follow the standard
published algorithms:

* Reno: slow start doubles the window each RTT, congestion avoidance adds
  one segment per RTT, and a loss halves the window (AIMD sawtooth).
* Cubic: after a reduction the window follows ``C*(t - K)**3 + w_max`` in
  absolute time, concave below the previous ceiling and convex above it.
* Vegas: compares expected and actual throughput via the minimum RTT and
  keeps the estimated queue backlog between ``alpha`` and ``beta`` packets.
* BBRv1: rate-based; estimates bottleneck bandwidth (windowed max) and
  propagation delay (windowed min), pacing through a startup / drain /
  probe-bandwidth / probe-RTT phase machine, with the congestion window
  capped at a multiple of the bandwidth-delay product.

Constants the algorithm definitions leave open (gain values, thresholds,
filter windows) are module-level and overridable through the state records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

MIN_CWND_PKTS = 2.0
INITIAL_CWND_PKTS = 10.0

CUBIC_C = 0.4
CUBIC_BETA = 0.7

VEGAS_ALPHA_PKTS = 2.0
VEGAS_BETA_PKTS = 4.0

BBR_STARTUP_GAIN = 2.885              # ~2/ln(2): doubles delivery each round
BBR_DRAIN_GAIN = 1.0 / BBR_STARTUP_GAIN
BBR_PROBE_BW_GAINS = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
BBR_CWND_GAIN = 3.0
BBR_PLATEAU_GROWTH = 1.25             # <25% growth counts as a flat round
BBR_PLATEAU_ROUND_LIMIT = 3
BBR_BW_WINDOW_ROUNDS = 10
BBR_RTPROP_WINDOW_S = 10.0
BBR_PROBE_RTT_DURATION_S = 0.2
BBR_PROBE_RTT_CWND_PKTS = 4.0
BBR_DRAIN_EXIT_MARGIN = 1.25          # in-flight within 25% of BDP counts as drained
BBR_DRAIN_MAX_ROUNDS = 8              # startup queue is <2 BDP; draining it takes ~3 rounds


class ProtocolLabel(Enum):
    """The four-way protocol class. Enum order fixes the class index."""

    VEGAS = "vegas"
    RENO = "reno"
    CUBIC = "cubic"
    BBR = "bbr"

    @property
    def index(self) -> int:
        return LABEL_ORDER.index(self)

    @classmethod
    def from_name(cls, name: str) -> "ProtocolLabel":
        try:
            return cls(name.lower())
        except ValueError:
            valid = ", ".join(l.value for l in cls)
            raise ValueError(f"unknown protocol {name!r} (valid: {valid})") from None


LABEL_ORDER = (
    ProtocolLabel.VEGAS,
    ProtocolLabel.RENO,
    ProtocolLabel.CUBIC,
    ProtocolLabel.BBR,
)


@dataclass(frozen=True)
class LinkConfig:
    """Single bottleneck link plus the noise knobs of the environment model.

    ``seed`` drives every random stream of a flow (jitter, path-delay noise,
    random loss), so identical configs give bit-identical traces.

    The noise knobs are stand-ins for an unmodeled shared-path environment:

    * ``jitter_frac``: per-flow multiplicative offset (+/- fraction) applied
      once to capacity and base RTT.
    * ``delay_noise_frac``: mean of a slowly varying, nonnegative exogenous
      queueing-delay term, as a multiple of the base RTT; emulates delay
      induced by unmodeled cross traffic. 0 disables it.
    * ``delay_noise_tau_s``: mean-reversion time constant of that term.
    * ``loss_rate``: independent per-packet loss probability.
    """

    capacity_bits_per_s: float = 1e9
    base_rtt_s: float = 9e-5
    buffer_pkts: int = 6
    mss_bytes: int = 1460
    seed: int = 0
    jitter_frac: float = 0.05
    delay_noise_frac: float = 1.0
    delay_noise_tau_s: float = 0.25
    loss_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.capacity_bits_per_s <= 0:
            raise ValueError("capacity_bits_per_s must be positive")
        if self.base_rtt_s <= 0:
            raise ValueError("base_rtt_s must be positive")
        if self.buffer_pkts < 1:
            raise ValueError("buffer_pkts must be >= 1")
        if self.mss_bytes < 1:
            raise ValueError("mss_bytes must be >= 1")
        if not 0.0 <= self.jitter_frac < 1.0:
            raise ValueError("jitter_frac must be in [0, 1)")
        if not 0.0 <= self.loss_rate < 1.0:
            raise ValueError("loss_rate must be in [0, 1)")
        if self.delay_noise_frac < 0.0:
            raise ValueError("delay_noise_frac must be >= 0")

    @property
    def packet_bits(self) -> float:
        return self.mss_bytes * 8.0

    @property
    def bdp_pkts(self) -> float:
        return self.capacity_bits_per_s * self.base_rtt_s / self.packet_bits


class RenoPhase(Enum):
    SLOW_START = "slow_start"
    CONGESTION_AVOIDANCE = "congestion_avoidance"
    FAST_RECOVERY = "fast_recovery"


@dataclass(slots=True)
class RenoState:
    cwnd_pkts: float = INITIAL_CWND_PKTS
    ssthresh_pkts: float = math.inf
    phase: RenoPhase = RenoPhase.SLOW_START


def step_reno(state: RenoState, acks: float, loss: bool) -> RenoState:
    """One round-trip Reno update.

    On loss: ssthresh and cwnd drop to half the window (floored at two
    segments) and the flow continues in congestion avoidance. Otherwise the
    window grows by one segment per ack in slow start and by ``1/cwnd`` per
    ack in congestion avoidance, with a mid-round handover when the window
    crosses ssthresh.
    """
    if acks < 0:
        raise ValueError("acks must be >= 0")
    if loss:
        ssthresh = max(MIN_CWND_PKTS, state.cwnd_pkts / 2.0)
        return RenoState(ssthresh, ssthresh, RenoPhase.CONGESTION_AVOIDANCE)

    cwnd = state.cwnd_pkts
    ssthresh = state.ssthresh_pkts
    phase = state.phase
    remaining = acks
    if phase is RenoPhase.SLOW_START:
        growth = min(remaining, max(0.0, ssthresh - cwnd))
        cwnd += growth
        remaining -= growth
        if cwnd >= ssthresh:
            phase = RenoPhase.CONGESTION_AVOIDANCE
    if remaining > 0.0 and phase is not RenoPhase.SLOW_START:
        cwnd += remaining / cwnd
    return RenoState(cwnd, ssthresh, phase)


@dataclass(slots=True)
class CubicState:
    """Cubic window state. ``w_max_pkts is None`` before the first reduction
    (initial slow start); afterwards the cwnd follows the cubic curve, floored
    by the standard Reno-rate emulation estimate ``w_est_pkts`` so growth
    never falls behind Reno on short-RTT paths."""

    cwnd_pkts: float = INITIAL_CWND_PKTS
    w_max_pkts: float | None = None
    t_since_reduction_s: float = 0.0
    k_s: float = 0.0
    c_scale: float = CUBIC_C
    beta_cubic: float = CUBIC_BETA
    w_est_pkts: float = 0.0

    @property
    def friendly_gain_pkts_per_rtt(self) -> float:
        return 3.0 * (1.0 - self.beta_cubic) / (1.0 + self.beta_cubic)


def cubic_inflection_time(w_max_pkts: float, beta_cubic: float, c_scale: float) -> float:
    """Time K at which the cubic curve regains the pre-loss ceiling."""
    return (w_max_pkts * (1.0 - beta_cubic) / c_scale) ** (1.0 / 3.0)


def cubic_reduce(state: CubicState) -> CubicState:
    """Multiplicative decrease: record the ceiling and restart the clock."""
    w_max = state.cwnd_pkts
    k = cubic_inflection_time(w_max, state.beta_cubic, state.c_scale)
    reduced = CubicState(
        cwnd_pkts=state.cwnd_pkts,
        w_max_pkts=w_max,
        t_since_reduction_s=0.0,
        k_s=k,
        c_scale=state.c_scale,
        beta_cubic=state.beta_cubic,
    )
    reduced.cwnd_pkts = cubic_window(reduced, 0.0)
    reduced.w_est_pkts = reduced.cwnd_pkts
    return reduced


def cubic_window(state: CubicState, t_s: float) -> float:
    """Window value ``c*(t - K)**3 + w_max`` floored at two segments."""
    if t_s < 0:
        raise ValueError("t_s must be >= 0")
    if state.w_max_pkts is None:
        raise ValueError("cubic window undefined before the first reduction")
    w = state.c_scale * (t_s - state.k_s) ** 3 + state.w_max_pkts
    return max(MIN_CWND_PKTS, w)


@dataclass(slots=True)
class VegasState:
    cwnd_pkts: float = INITIAL_CWND_PKTS
    base_rtt_s: float = math.inf
    alpha_pkts: float = VEGAS_ALPHA_PKTS
    beta_pkts: float = VEGAS_BETA_PKTS

    def __post_init__(self) -> None:
        if not self.alpha_pkts < self.beta_pkts:
            raise ValueError("alpha_pkts must be < beta_pkts")


def step_vegas(state: VegasState, rtt_s: float) -> VegasState:
    """One round-trip Vegas update.

    The minimum observed RTT is refreshed first, then the estimated backlog
    ``diff = cwnd * (1 - base_rtt/rtt)`` steers the window: grow by one
    segment below ``alpha``, shrink by one above ``beta`` (never below two
    segments), hold otherwise.
    """
    if rtt_s <= 0:
        raise ValueError("rtt_s must be positive")
    base = min(state.base_rtt_s, rtt_s)
    diff = state.cwnd_pkts * (1.0 - base / rtt_s)
    cwnd = state.cwnd_pkts
    if diff < state.alpha_pkts:
        cwnd += 1.0
    elif diff > state.beta_pkts:
        cwnd = max(MIN_CWND_PKTS, cwnd - 1.0)
    return VegasState(cwnd, base, state.alpha_pkts, state.beta_pkts)


class BbrPhase(Enum):
    STARTUP = "startup"
    DRAIN = "drain"
    PROBE_BW = "probe_bw"
    PROBE_RTT = "probe_rtt"


@dataclass(slots=True)
class BbrState:
    phase: BbrPhase = BbrPhase.STARTUP
    btl_bw_bits_per_s: float = 0.0
    rt_prop_s: float = math.inf
    pacing_gain: float = BBR_STARTUP_GAIN
    cwnd_gain: float = BBR_CWND_GAIN
    cycle_index: int = 0
    plateau_rounds: int = 0
    # filter and phase bookkeeping
    bw_window: tuple[float, ...] = field(default=())
    full_bw_bits_per_s: float = 0.0
    rt_prop_stamp_s: float = 0.0
    phase_start_s: float = 0.0
    probe_rtt_done_s: float = 0.0
    drain_rounds: int = 0


def bbr_cwnd_cap_pkts(state: BbrState, mss_bytes: int) -> float:
    """Window cap ``cwnd_gain * BDP`` in packets (held at 4 during ProbeRTT)."""
    if state.phase is BbrPhase.PROBE_RTT:
        return BBR_PROBE_RTT_CWND_PKTS
    if state.btl_bw_bits_per_s <= 0.0 or not math.isfinite(state.rt_prop_s):
        return math.inf
    bdp_pkts = state.btl_bw_bits_per_s * state.rt_prop_s / 8.0 / mss_bytes
    return state.cwnd_gain * bdp_pkts


def step_bbr(
    state: BbrState,
    delivered_bits_per_s: float,
    rtt_s: float,
    now_s: float,
) -> BbrState:
    """One round-trip BBR model/state update.

    Feeds the delivery-rate sample into the 10-round max filter and the RTT
    sample into the 10-second min filter, then runs the phase machine:
    startup exits to drain after three consecutive rounds of <25% bandwidth
    growth, drain exits to probe-bandwidth once in-flight is back near the
    BDP (estimated via Little's law, with a round-count backstop), the
    probe-bandwidth gain cycle advances once per rt_prop, and a 10-s-stale
    rt_prop sample triggers a 200 ms probe-RTT hold.
    """
    if delivered_bits_per_s < 0:
        raise ValueError("delivered_bits_per_s must be >= 0")
    if rtt_s <= 0:
        raise ValueError("rtt_s must be positive")

    # A sample taken while the window cap (not the path) limited delivery
    # understates the bottleneck; such samples may never lower the estimate,
    # otherwise a delay spike walks the filter down a self-reinforcing spiral.
    sample = delivered_bits_per_s
    cap_bits = state.cwnd_gain * state.btl_bw_bits_per_s * (
        state.rt_prop_s if math.isfinite(state.rt_prop_s) else 0.0
    )
    window_limited = state.phase is BbrPhase.PROBE_RTT or (
        cap_bits > 0.0 and delivered_bits_per_s * rtt_s >= 0.999 * cap_bits
    )
    if window_limited and sample < state.btl_bw_bits_per_s:
        sample = state.btl_bw_bits_per_s
    bw_window = (state.bw_window + (sample,))[-BBR_BW_WINDOW_ROUNDS:]
    btl_bw = max(bw_window)

    rt_prop = state.rt_prop_s
    rt_stamp = state.rt_prop_stamp_s
    if rtt_s <= rt_prop:
        rt_prop = rtt_s
        rt_stamp = now_s

    phase = state.phase
    pacing_gain = state.pacing_gain
    cycle_index = state.cycle_index
    plateau_rounds = state.plateau_rounds
    full_bw = state.full_bw_bits_per_s
    phase_start = state.phase_start_s
    probe_rtt_done = state.probe_rtt_done_s
    drain_rounds = state.drain_rounds

    if phase is BbrPhase.STARTUP:
        if btl_bw >= BBR_PLATEAU_GROWTH * full_bw:
            full_bw = btl_bw
            plateau_rounds = 0
        else:
            plateau_rounds += 1
        if plateau_rounds >= BBR_PLATEAU_ROUND_LIMIT:
            phase = BbrPhase.DRAIN
            pacing_gain = BBR_DRAIN_GAIN
            phase_start = now_s
            drain_rounds = 0
    elif phase is BbrPhase.DRAIN:
        drain_rounds += 1
        inflight_bits = delivered_bits_per_s * rtt_s
        bdp_bits = btl_bw * rt_prop
        if inflight_bits <= bdp_bits * BBR_DRAIN_EXIT_MARGIN or drain_rounds >= BBR_DRAIN_MAX_ROUNDS:
            phase = BbrPhase.PROBE_BW
            cycle_index = 0
            pacing_gain = BBR_PROBE_BW_GAINS[0]
            phase_start = now_s
    elif phase is BbrPhase.PROBE_BW:
        if now_s - phase_start >= rt_prop:
            cycle_index = (cycle_index + 1) % len(BBR_PROBE_BW_GAINS)
            pacing_gain = BBR_PROBE_BW_GAINS[cycle_index]
            phase_start = now_s
    elif phase is BbrPhase.PROBE_RTT:
        if now_s >= probe_rtt_done:
            rt_prop = rtt_s
            rt_stamp = now_s
            phase = BbrPhase.PROBE_BW
            cycle_index = 0
            pacing_gain = BBR_PROBE_BW_GAINS[0]
            phase_start = now_s

    if phase is BbrPhase.PROBE_BW and now_s - rt_stamp > BBR_RTPROP_WINDOW_S:
        phase = BbrPhase.PROBE_RTT
        pacing_gain = 1.0
        probe_rtt_done = now_s + BBR_PROBE_RTT_DURATION_S
        phase_start = now_s

    return BbrState(
        phase=phase,
        btl_bw_bits_per_s=btl_bw,
        rt_prop_s=rt_prop,
        pacing_gain=pacing_gain,
        cwnd_gain=state.cwnd_gain,
        cycle_index=cycle_index,
        plateau_rounds=plateau_rounds,
        bw_window=bw_window,
        full_bw_bits_per_s=full_bw,
        rt_prop_stamp_s=rt_stamp,
        phase_start_s=phase_start,
        probe_rtt_done_s=probe_rtt_done,
        drain_rounds=drain_rounds,
    )
