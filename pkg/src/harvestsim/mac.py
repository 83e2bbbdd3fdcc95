"""Low-power-listening MAC: adaptive duty schedules and addressed preambles.

Receivers sleep most of the time and wake briefly on a fixed cycle; a sender
therefore precedes each data frame with a train of short addressed packets
long enough to span the receiver's sleep interval, so any wake phase lands
inside the train. The duty factor comes from the per-slot optimizer: nodes
high on energy wake more often, shortening the trains their peers must send
("virtual energy transfer").

Two schedule realizations exist. Formula mode keeps a fixed wake window and
derives sleep as ``w * (1 - delta) / delta``, so the on-fraction equals the
duty factor exactly. Table mode reproduces the three published
(duty, sleep-ms) calibration pairs verbatim; those pairs are mutually
inconsistent with any single wake window, which is why the formula is the
default and the table is kept for comparison runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .energy import EnergyLevel


class MacError(Exception):
    """Base class for MAC errors."""


class ChannelSaturated(MacError):
    """Every CSMA attempt found the channel busy."""

    def __init__(self, msg: str, result=None):
        super().__init__(msg)
        self.result = result


class NoAck(MacError):
    """Retries exhausted without an acknowledgement."""

    def __init__(self, msg: str, result=None):
        super().__init__(msg)
        self.result = result


# Duty-factor anchors per energy level, used both to realize a node's own
# schedule and to size preamble trains for an inferred neighbour level.
DELTA_BY_LEVEL = {
    EnergyLevel.E0: 0.0,
    EnergyLevel.E1: 0.05,
    EnergyLevel.E2: 0.15,
    EnergyLevel.E3: 0.25,
}

# Published duty-to-sleep calibration pairs (table mode).
PAPER_TABLE_SLEEP_MS = {0.05: 100.0, 0.15: 35.0, 0.25: 20.0}


@dataclass(frozen=True)
class MacConfig:
    cca_threshold_dbm: float = -77.0
    backoff_initial_ms: float = 1.25
    backoff_max_attempts: int = 5
    arq_retries: int = 3
    rts_cts: bool = False
    preamble_packet_ms: float = 1.0
    wake_window_ms: float = 5.0
    schedule_mode: str = "formula"  # or "paper-table"
    data_packet_ms: float = 4.096  # 128 B at 250 kb/s
    ack_ms: float = 0.35
    control_packet_ms: float = 1.0  # beacon / rts / cts / rreq / rrep frames

    def __post_init__(self) -> None:
        if self.backoff_max_attempts < 1 or self.arq_retries < 0:
            raise ValueError("attempt counts must be positive")
        if self.backoff_initial_ms <= 0 or self.preamble_packet_ms <= 0:
            raise ValueError("windows and packet durations must be > 0")


@dataclass(frozen=True)
class RadioEnergyModel:
    """Per-state supply currents (mA) and voltage; uJ = mA * V * ms."""

    tx_ma: dict[int, float] = field(
        default_factory=lambda: {0: 25.8, -5: 23.0, -10: 20.5}
    )
    rx_ma: float = 18.5
    idle_ma: float = 22.3
    sleep_ma: float = 0.001
    supply_v: float = 3.0

    def __post_init__(self) -> None:
        if self.sleep_ma * 100 > self.idle_ma:
            raise ValueError("sleep current must be far below idle current")


@dataclass(frozen=True)
class DutySchedule:
    """Wake/sleep timing realizing one duty factor."""

    wake_ms: float
    sleep_ms: float
    mode: str = "formula"

    @property
    def period_ms(self) -> float:
        return self.wake_ms + self.sleep_ms

    @property
    def duty_fraction(self) -> float:
        if self.wake_ms == 0.0:
            return 0.0
        if self.sleep_ms == 0.0:
            return 1.0
        return self.wake_ms / self.period_ms

    @property
    def radio_off(self) -> bool:
        return self.wake_ms == 0.0


def schedule_from_delta(delta: float, config: MacConfig = MacConfig()) -> DutySchedule:
    """Realize a duty factor as a wake/sleep cycle.

    ``delta = 0`` turns the radio off entirely (system-only operation);
    ``delta = 1`` keeps it always on.
    """
    if not (0.0 <= delta <= 1.0):
        raise ValueError(f"duty factor outside [0,1]: {delta}")
    if delta == 0.0:
        return DutySchedule(wake_ms=0.0, sleep_ms=math.inf, mode=config.schedule_mode)
    if delta == 1.0:
        return DutySchedule(wake_ms=config.wake_window_ms, sleep_ms=0.0, mode=config.schedule_mode)
    if config.schedule_mode == "paper-table":
        anchor = min(PAPER_TABLE_SLEEP_MS, key=lambda d: (abs(d - delta), d))
        return DutySchedule(
            wake_ms=config.wake_window_ms,
            sleep_ms=PAPER_TABLE_SLEEP_MS[anchor],
            mode="paper-table",
        )
    w = config.wake_window_ms
    return DutySchedule(wake_ms=w, sleep_ms=w * (1.0 - delta) / delta, mode="formula")


def measure_duty(schedule: DutySchedule, cycles: int) -> float:
    """Radio-on fraction over a number of wake cycles, from the timeline itself."""
    if cycles < 1:
        raise ValueError("need at least one cycle")
    if schedule.radio_off:
        return 0.0
    on = 0.0
    total = 0.0
    for _ in range(cycles):
        on += schedule.wake_ms
        total += schedule.wake_ms + schedule.sleep_ms
    return on / total


@dataclass(frozen=True)
class PreambleTrain:
    """Addressed wake-up packets spanning the receiver's sleep interval."""

    count: int
    packet_ms: float
    receiver: str = ""

    @property
    def duration_ms(self) -> float:
        return self.count * self.packet_ms


def preamble_train(
    receiver_sleep_ms: float, config: MacConfig = MacConfig(), receiver: str = ""
) -> PreambleTrain:
    """Size a train to span the receiver's sleep; always at least one packet."""
    if receiver_sleep_ms < 0 or math.isinf(receiver_sleep_ms):
        raise ValueError(f"receiver sleep invalid: {receiver_sleep_ms}")
    count = max(1, math.ceil(receiver_sleep_ms / config.preamble_packet_ms))
    return PreambleTrain(count=count, packet_ms=config.preamble_packet_ms, receiver=receiver)


def cca(sampled_power_dbm: float, config: MacConfig = MacConfig()) -> bool:
    """Energy-detection clear channel assessment: True when busy (>= threshold)."""
    return sampled_power_dbm >= config.cca_threshold_dbm


def backoff_window_ms(attempt: int, config: MacConfig) -> float:
    """Binary-exponential window for the k-th attempt (1-based)."""
    if attempt < 1:
        raise ValueError("attempts are 1-based")
    return config.backoff_initial_ms * (2 ** (attempt - 1))


def radio_energy(
    model: RadioEnergyModel,
    *,
    tx_ms: float = 0.0,
    tx_power_dbm: int = 0,
    rx_ms: float = 0.0,
    idle_ms: float = 0.0,
    sleep_ms: float = 0.0,
) -> float:
    """Energy (uJ) of radio activity: sum of duration x current x voltage."""
    for name, d in (("tx", tx_ms), ("rx", rx_ms), ("idle", idle_ms), ("sleep", sleep_ms)):
        if d < 0:
            raise ValueError(f"{name} duration must be >= 0")
    if tx_ms and tx_power_dbm not in model.tx_ma:
        raise ValueError(f"no tx current for {tx_power_dbm} dBm")
    tx_current = model.tx_ma.get(tx_power_dbm, 0.0)
    return model.supply_v * (
        tx_ms * tx_current
        + rx_ms * model.rx_ma
        + idle_ms * model.idle_ma
        + sleep_ms * model.sleep_ma
    )


@dataclass
class SendResult:
    """Outcome of a CSMA unicast exchange."""

    delivered: bool
    attempts: int
    preambles_sent: int
    elapsed_ms: float
    sender_tx_ms: float
    trace: list[tuple[float, str]] = field(default_factory=list)


def _first_wake_at(
    schedule: DutySchedule, phase_ms: float, t_ms: float
) -> float:
    """Earliest time >= t_ms at which the receiver is awake.

    ``phase_ms`` is the offset of the receiver's first wake within its cycle.
    """
    if schedule.radio_off:
        return math.inf
    if schedule.sleep_ms == 0.0:
        return t_ms
    period = schedule.period_ms
    into = (t_ms - phase_ms) % period
    if into < schedule.wake_ms:
        return t_ms
    return t_ms + (period - into)


def csma_send(
    packet: str,
    receiver_schedule: DutySchedule,
    config: MacConfig,
    rng,
    *,
    receiver_phase_ms: float = 0.0,
    start_ms: float = 0.0,
    channel_power_dbm=None,
    attempt_delivers=None,
    train_sleep_ms: float | None = None,
) -> SendResult:
    """One unicast exchange: CCA, backoff, preamble train, data, ack, retries.

    ``channel_power_dbm`` samples the medium at a given time (default: always
    idle); ``attempt_delivers`` decides whether a given attempt's data frame
    survives the link (default: always). ``train_sleep_ms`` overrides the
    sleep span the train is sized for (the sender's *belief* about the
    receiver, which may be stale); rendezvous always follows the receiver's
    real schedule, so an undersized train misses and the round is retried.
    Raises :class:`ChannelSaturated` when every attempt finds the channel
    busy and :class:`NoAck` when the allowed retries are exhausted without a
    delivery.
    """
    sample = channel_power_dbm or (lambda t: -120.0)
    decide = attempt_delivers or (lambda attempt: True)
    if train_sleep_ms is None:
        train_sleep_ms = (
            0.0
            if receiver_schedule.radio_off or math.isinf(receiver_schedule.sleep_ms)
            else receiver_schedule.sleep_ms
        )
    train = preamble_train(train_sleep_ms, config)
    now = start_ms
    trace: list[tuple[float, str]] = []
    attempts = 0
    preambles_total = 0
    tx_ms_total = 0.0
    saturated = 0
    deliveries_allowed = config.arq_retries + 1

    for round_no in range(1, deliveries_allowed + 1):
        # CSMA: sample, back off while busy.
        cleared = False
        for attempt in range(1, config.backoff_max_attempts + 1):
            attempts += 1
            if not cca(sample(now), config):
                cleared = True
                trace.append((now, "cca-idle"))
                break
            trace.append((now, "cca-busy"))
            now += rng.uniform(0.0, backoff_window_ms(attempt, config))
        if not cleared:
            saturated += 1
            continue
        if config.rts_cts:
            trace.append((now, "rts"))
            now += config.control_packet_ms
            trace.append((now, "cts"))
            now += config.control_packet_ms
            tx_ms_total += config.control_packet_ms
        # Preamble until the receiver's wake lands inside the train.
        wake_at = _first_wake_at(receiver_schedule, receiver_phase_ms, now)
        train_end = now + train.duration_ms
        if wake_at > train_end:
            sent = train.count
            preambles_total += sent
            tx_ms_total += sent * train.packet_ms
            trace.append((now, f"preamble x{sent} missed"))
            now = train_end
            continue
        sent = max(1, math.ceil(max(wake_at - now, 0.0) / train.packet_ms))
        sent = min(sent, train.count)
        preambles_total += sent
        tx_ms_total += sent * train.packet_ms
        trace.append((now, f"preamble x{sent}"))
        now = max(wake_at, now + sent * train.packet_ms)
        trace.append((now, "data"))
        now += config.data_packet_ms
        tx_ms_total += config.data_packet_ms
        if decide(round_no):
            trace.append((now, "ack"))
            now += config.ack_ms
            return SendResult(
                delivered=True,
                attempts=attempts,
                preambles_sent=preambles_total,
                elapsed_ms=now - start_ms,
                sender_tx_ms=tx_ms_total,
                trace=trace,
            )
        trace.append((now, "no-ack"))
        now += config.ack_ms

    result = SendResult(
        delivered=False,
        attempts=attempts,
        preambles_sent=preambles_total,
        elapsed_ms=now - start_ms,
        sender_tx_ms=tx_ms_total,
        trace=trace,
    )
    if saturated == deliveries_allowed:
        raise ChannelSaturated(
            f"{attempts} attempts, channel never cleared", result
        )
    raise NoAck(
        f"no acknowledgement after {deliveries_allowed} delivery rounds", result
    )
