"""Deterministic hybrid engine: coarse energy slots, fine-grained radio events.

Each slot runs three phases, nodes visited in ascending id order:

1. planning: harvest intake, forecast update, level assessment, budgeting,
   the LP plan, and scheduling of the slot's traffic/beacon/flood events;
2. event drain: the continuous-time queue (CSMA exchanges, floods, replies,
   forwarding) advances to the slot boundary;
3. settlement: the plan's operations are charged against the store at the
   published per-operation costs, the duty-cycle baseline and leakage are
   drawn, deferred work enters the backlog, and metrics rows are emitted.

Energy accounting is split in two: application operations (sense, compute,
storage, packet transmissions/receptions) are settled through the plan at
exact cost-table values, while MAC-layer overhead (preamble trains, acks,
retries, beacons, flood frames) is charged per event from the radio current
model. Every draw lands in one charge log, so the per-slot ledger closes
exactly. Rarely, a slot's radio overhead can leave the store unable to cover
the already-planned operations; settlement then aborts mid-plan (the
forecast-error path) and the unexecuted tail is deferred or dropped with an
eviction record.

Determinism: all randomness flows from named streams derived from the global
seed, and the event queue orders ties by insertion sequence, so identical
(config, seed) pairs reproduce runs bit-for-bit.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field, replace

from . import app, forecast, mac, routing
from .energy import (
    EnergyLevel,
    EnergyStore,
    HarvestTrace,
    InsufficientEnergy,
    LevelThresholds,
    OperationCostTable,
    deposit,
    harvest_in_slot,
    withdraw,
)
from .scenario import ScenarioConfig, build_profile_trace

PROCESSING_DELAY_S = 0.005
RREQ_JITTER_MS = 20.0
NEIGHBOR_TTL_SLOTS = 5
MAX_PACKET_RETRIES = 3
PENDING_QUEUE_CAP = 64


@dataclass(frozen=True)
class Channel:
    """Log-distance path loss anchored at the beacon calibration point."""

    path_loss_exponent: float = 2.7
    reference_loss_db: float = 65.0
    reference_distance_m: float = 8.0
    shadowing_sigma_db: float = 0.0
    sensitivity_dbm: float = -95.0
    loss_margin_db: float = 10.0
    loss_prob_at_zero: float = 0.5


def rssi_at(tx_dbm: float, distance_m: float, channel: Channel, rng=None) -> float:
    """Received power over one link; optional lognormal shadowing draw."""
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    loss = channel.reference_loss_db + 10.0 * channel.path_loss_exponent * math.log10(
        distance_m / channel.reference_distance_m
    )
    rssi = tx_dbm - loss
    if channel.shadowing_sigma_db > 0.0:
        if rng is None:
            raise ValueError("shadowing requires an rng")
        rssi += rng.gauss(0.0, channel.shadowing_sigma_db)
    return rssi


def loss_probability(rssi_dbm: float, channel: Channel) -> float:
    """Frame loss probability from the link margin (linear ramp near the floor)."""
    margin = rssi_dbm - channel.sensitivity_dbm
    if margin < 0:
        return 1.0
    if margin >= channel.loss_margin_db:
        return 0.0
    return channel.loss_prob_at_zero * (1.0 - margin / channel.loss_margin_db)


def deliver(rssi_dbm: float, channel: Channel, rng) -> bool:
    """Bernoulli frame delivery at the given received power."""
    p = loss_probability(rssi_dbm, channel)
    if p >= 1.0:
        return False
    if p <= 0.0:
        return True
    return rng.random() >= p


@dataclass
class Packet:
    pid: str
    origin: str
    created_slot: int
    retries: int = 0


@dataclass
class NodeRuntime:
    """Everything the engine tracks per node."""

    node_id: str
    role: str
    position: tuple[float, float]
    store: EnergyStore | None
    trace: HarvestTrace | None
    routing: routing.RoutingState
    backlog: app.Backlog
    wake_phase_ms: float
    rng_mac: random.Random
    predictor_state: object | None = None
    next_prediction: float | None = None
    level: EnergyLevel = EnergyLevel.E0
    tx_power: int | None = None
    delta_op: float = 0.0
    schedule: mac.DutySchedule = mac.DutySchedule(wake_ms=0.0, sleep_ms=math.inf)
    context: app.EnergyContext | None = None
    plan: app.ExecutionPlan | None = None
    budget: float = 0.0
    available: float = 0.0
    forwards_left: int = 0
    pending: list[Packet] = field(default_factory=list)
    neighbor_seen: dict[str, tuple[EnergyLevel, int]] = field(default_factory=dict)
    need_route: bool = False
    flood_initiated_slot: int = -1
    slot_ledger: tuple = (0.0, 0.0, 0.0)

    @property
    def is_sink(self) -> bool:
        return self.role == "sink"

    def awake_at(self, t_ms: float) -> bool:
        if self.is_sink:
            return True
        if self.schedule.radio_off:
            return False
        if self.schedule.sleep_ms == 0.0:
            return True
        into = (t_ms - self.wake_phase_ms) % self.schedule.period_ms
        return into < self.schedule.wake_ms


@dataclass
class Metrics:
    """Collected run output; delivered can never exceed generated."""

    slot_reports: list[app.SlotReport] = field(default_factory=list)
    ledger: list[tuple] = field(default_factory=list)
    charges: list[tuple] = field(default_factory=list)
    forecast_rows: list[tuple] = field(default_factory=list)
    route_log: list[tuple] = field(default_factory=list)
    mac_trace: list[tuple] = field(default_factory=list)
    drops: list[tuple] = field(default_factory=list)
    evictions: list[tuple] = field(default_factory=list)
    generated: int = 0
    delivered_ids: set = field(default_factory=set)
    duty_sum: dict[str, float] = field(default_factory=dict)
    slots_run: int = 0

    @property
    def delivered(self) -> int:
        return len(self.delivered_ids)

    def pdr(self) -> float:
        if self.generated == 0:
            return 0.0
        return self.delivered / self.generated

    def duty_fractions(self) -> dict[str, float]:
        if self.slots_run == 0:
            return {}
        return {n: s / self.slots_run for n, s in sorted(self.duty_sum.items())}

    def summary(self) -> dict:
        return {
            "generated": self.generated,
            "delivered": self.delivered,
            "pdr": self.pdr(),
            "slots": self.slots_run,
            "route_changes": len(self.route_log),
            "drops": len(self.drops),
            "evictions": len(self.evictions),
            "duty_fractions": self.duty_fractions(),
        }


class World:
    """One simulation instance; deterministic under a fixed (config, seed)."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        *,
        traces: dict[str, HarvestTrace] | None = None,
        mode: str | None = None,
        seed: int | None = None,
        collect_mac_trace: bool = False,
        horizon_slots: int | None = None,
    ):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.mode = mode or cfg.routing.mode
        self.collect_mac_trace = collect_mac_trace
        ch = cfg.channel
        self.channel = Channel(
            path_loss_exponent=ch.path_loss_exponent,
            reference_loss_db=ch.reference_loss_db,
            reference_distance_m=ch.reference_distance_m,
            shadowing_sigma_db=ch.shadowing_sigma_db,
            sensitivity_dbm=ch.sensitivity_dbm,
            loss_margin_db=ch.loss_margin_db,
            loss_prob_at_zero=ch.loss_prob_at_zero,
        )
        m = cfg.mac
        self.mac_cfg = mac.MacConfig(
            cca_threshold_dbm=m.cca_threshold_dbm,
            backoff_initial_ms=m.backoff_initial_ms,
            backoff_max_attempts=m.backoff_max_attempts,
            arq_retries=m.arq_retries,
            rts_cts=m.rts_cts,
            preamble_packet_ms=m.preamble_packet_ms,
            wake_window_ms=m.wake_window_ms,
            schedule_mode=m.schedule_mode,
            data_packet_ms=m.data_packet_ms,
            ack_ms=m.ack_ms,
            control_packet_ms=m.control_packet_ms,
        )
        self.radio = mac.RadioEnergyModel()
        costs = dict(cfg.costs)
        tx_costs = costs.pop("tx128", None)
        table_kwargs = {}
        if costs:
            base = dict(OperationCostTable().costs)
            base.update(costs)
            table_kwargs["costs"] = base
        if tx_costs:
            table_kwargs["tx_costs"] = dict(tx_costs)
        self.table = OperationCostTable(**table_kwargs)
        self.thresholds = LevelThresholds(*cfg.energy.thresholds)
        self.floor = cfg.energy.floor_fraction * cfg.energy.capacity_uj

        self.rng_channel = random.Random(f"{self.seed}:channel")
        self.metrics = Metrics()
        self.now = 0.0
        self.slot = 0
        self.busy_until = 0.0
        self._event_seq = 0
        self._events: list = []
        self.flood_candidates: dict[tuple[str, int], list[routing.Rreq]] = {}
        self.active_sink_route: dict[str, routing.RouteEntry] = {}
        self._packet_counter = 0

        sinks = [n for n in cfg.nodes if n.role == "sink"]
        if len(sinks) != 1:
            raise ValueError(f"exactly one sink required, found {len(sinks)}")
        self.sink_id = sinks[0].id

        traces = traces or {}
        horizon = max(cfg.slots, horizon_slots or 0)
        self.nodes: dict[str, NodeRuntime] = {}
        for spec in sorted(cfg.nodes, key=lambda n: n.id):
            trace = None
            store = None
            if spec.role != "sink":
                if spec.id in traces:
                    trace = traces[spec.id]
                else:
                    trace = build_profile_trace(
                        cfg.profiles[spec.profile], horizon, spec.profile
                    )
                store = EnergyStore(
                    stored=0.5 * cfg.energy.capacity_uj,
                    capacity=cfg.energy.capacity_uj,
                    thresholds=self.thresholds,
                )
            rt = NodeRuntime(
                node_id=spec.id,
                role=spec.role,
                position=spec.position,
                store=store,
                trace=trace,
                routing=routing.RoutingState(
                    node_id=spec.id,
                    mode=self.mode,
                    mu_weights=list(cfg.routing.mu) if cfg.routing.mu else None,
                    cost_mode=cfg.routing.cost_mode,
                ),
                backlog=app.Backlog(),
                wake_phase_ms=random.Random(f"{self.seed}:{spec.id}:phase").uniform(
                    0.0, 100.0
                ),
                rng_mac=random.Random(f"{self.seed}:{spec.id}:mac"),
            )
            if spec.role == "sink":
                rt.level = EnergyLevel.E3
                rt.tx_power = routing.REFERENCE_TX_POWER_DBM
                rt.delta_op = 1.0
                rt.schedule = mac.DutySchedule(wake_ms=self.mac_cfg.wake_window_ms, sleep_ms=0.0)
            self.nodes[spec.id] = rt

    # ------------------------------------------------------------------
    # infrastructure

    def _push(self, t: float, kind: str, *payload) -> None:
        if t < self.now - 1e-9:
            raise AssertionError(f"causality violation: {kind} at {t} < now {self.now}")
        self._event_seq += 1
        heapq.heappush(self._events, (t, self._event_seq, kind, payload))

    def _charge(self, rt: NodeRuntime, label: str, amount: float) -> bool:
        """Withdraw overhead energy; sinks are mains-powered and free."""
        if rt.is_sink or amount <= 0.0:
            return True
        try:
            rt.store = withdraw(rt.store, amount, self.floor)
        except InsufficientEnergy:
            return False
        self.metrics.charges.append((self.slot, rt.node_id, label, amount))
        return True

    def _trace_mac(self, t: float, node: str, event: str, detail: str = "") -> None:
        if self.collect_mac_trace:
            self.metrics.mac_trace.append((t, node, event, detail))

    def _distance(self, a: NodeRuntime, b: NodeRuntime) -> float:
        (x1, y1), (x2, y2) = a.position, b.position
        return math.hypot(x2 - x1, y2 - y1)

    def _link_rssi(self, sender: NodeRuntime, receiver: NodeRuntime, tx_dbm: float) -> float:
        rng = self.rng_channel if self.channel.shadowing_sigma_db > 0 else None
        return rssi_at(tx_dbm, self._distance(sender, receiver), self.channel, rng)

    def _hear(
        self, receiver: NodeRuntime, sender_id: str, rssi: float, is_beacon: bool
    ) -> None:
        state = receiver.routing
        if is_beacon:
            # Beacons ride the fixed reference power: they calibrate the
            # per-neighbour reference and prove liveness, but carry no level
            # information of their own.
            state.references[sender_id] = routing.calibrate_reference(
                state.references.get(sender_id), rssi, now=self.now
            )
            if sender_id == self.sink_id:
                level = EnergyLevel.E3
            else:
                level = receiver.neighbor_seen.get(sender_id, (EnergyLevel.E1, 0))[0]
            receiver.neighbor_seen[sender_id] = (level, self.slot)
            return
        ref = state.references.get(sender_id)
        if ref is None:
            return
        level = routing.infer_neighbor_level(rssi, ref)
        receiver.neighbor_seen[sender_id] = (level, self.slot)

    def _believed_sleep_ms(self, sender: NodeRuntime, receiver_id: str) -> float:
        """Train sizing from the routing layer's inferred neighbour level."""
        if receiver_id == self.sink_id:
            return 0.0
        seen = sender.neighbor_seen.get(receiver_id)
        level = seen[0] if seen else EnergyLevel.E1  # conservative default
        if level == EnergyLevel.E0:
            level = EnergyLevel.E1
        sched = mac.schedule_from_delta(mac.DELTA_BY_LEVEL[level], self.mac_cfg)
        return sched.sleep_ms

    def _worst_case_sleep_ms(self) -> float:
        return mac.schedule_from_delta(
            mac.DELTA_BY_LEVEL[EnergyLevel.E1], self.mac_cfg
        ).sleep_ms

    # ------------------------------------------------------------------
    # unicast exchange

    def _unicast(
        self,
        t: float,
        sender: NodeRuntime,
        receiver: NodeRuntime,
        frame_ms: float,
        purpose: str,
    ):
        """One LPL exchange; returns (delivered, elapsed_s, result)."""
        tx_dbm = sender.tx_power
        rssi = self._link_rssi(sender, receiver, tx_dbm)
        believed_sleep = self._believed_sleep_ms(sender, receiver.node_id)
        cfg = replace(self.mac_cfg, data_packet_ms=frame_ms)
        t_ms = t * 1000.0

        def channel_power(at_ms: float) -> float:
            return 0.0 if at_ms / 1000.0 < self.busy_until else -120.0

        def attempt_delivers(_round: int) -> bool:
            if not deliver(rssi, self.channel, self.rng_channel):
                return False
            return True

        # The train is sized by the sender's belief about the receiver's
        # level; rendezvous happens on the receiver's real schedule. An
        # undersized train simply misses that round and retries.
        real_sched = receiver.schedule if not receiver.is_sink else mac.DutySchedule(
            wake_ms=cfg.wake_window_ms, sleep_ms=0.0
        )
        try:
            result = mac.csma_send(
                purpose,
                real_sched,
                cfg,
                sender.rng_mac,
                receiver_phase_ms=receiver.wake_phase_ms,
                start_ms=t_ms,
                channel_power_dbm=channel_power,
                attempt_delivers=attempt_delivers,
                train_sleep_ms=None if receiver.is_sink else believed_sleep,
            )
            delivered = True
        except (mac.ChannelSaturated, mac.NoAck) as exc:
            result = exc.result
            delivered = False
        elapsed_s = result.elapsed_ms / 1000.0
        self.busy_until = max(self.busy_until, t + elapsed_s)

        # Sender overhead: everything but the single plan-paid data frame.
        tx_overhead_ms = result.sender_tx_ms - (frame_ms if purpose == "data" else 0.0)
        tx_overhead_ms = max(tx_overhead_ms, 0.0)
        overhead = mac.radio_energy(
            self.radio,
            tx_ms=tx_overhead_ms,
            tx_power_dbm=tx_dbm,
            rx_ms=cfg.ack_ms,
        )
        self._charge(sender, f"mac:{purpose}-tx", overhead)
        self._trace_mac(
            t,
            sender.node_id,
            f"{purpose}-tx",
            f"to={receiver.node_id} rssi={rssi:.1f} delivered={delivered} "
            f"attempts={result.attempts} preambles={result.preambles_sent}",
        )
        if delivered:
            rx_ms = cfg.preamble_packet_ms + (0.0 if purpose == "data" else frame_ms)
            rx_cost = mac.radio_energy(self.radio, rx_ms=rx_ms) + mac.radio_energy(
                self.radio, tx_ms=cfg.ack_ms, tx_power_dbm=0
            )
            self._charge(receiver, f"mac:{purpose}-rx", rx_cost)
            self._hear(receiver, sender.node_id, rssi, is_beacon=False)
        return delivered, elapsed_s, result

    # ------------------------------------------------------------------
    # event handlers

    def _handle_event(self, t: float, kind: str, payload: tuple) -> None:
        self.now = t
        handler = getattr(self, f"_on_{kind}")
        handler(t, *payload)

    def _on_beacon(self, t: float, node_id: str) -> None:
        rt = self.nodes[node_id]
        if not rt.is_sink and (rt.tx_power is None or rt.schedule.radio_off):
            return
        cost = mac.radio_energy(
            self.radio,
            tx_ms=self.mac_cfg.control_packet_ms,
            tx_power_dbm=routing.REFERENCE_TX_POWER_DBM,
        )
        if not self._charge(rt, "mac:beacon-tx", cost):
            return
        self._trace_mac(t, node_id, "beacon-tx")
        for other in self.nodes.values():
            if other.node_id == node_id:
                continue
            rssi = self._link_rssi(rt, other, routing.REFERENCE_TX_POWER_DBM)
            if rssi < self.channel.sensitivity_dbm:
                continue
            if not other.awake_at(t * 1000.0):
                continue
            if not deliver(rssi, self.channel, self.rng_channel):
                continue
            rx = mac.radio_energy(self.radio, rx_ms=self.mac_cfg.control_packet_ms)
            if self._charge(other, "mac:beacon-rx", rx):
                self._hear(other, node_id, rssi, is_beacon=True)

    def _on_rreq_init(self, t: float, node_id: str) -> None:
        rt = self.nodes[node_id]
        if rt.tx_power is None:
            return
        seq = rt.routing.next_seq()
        rreq = routing.Rreq(
            origin=node_id, dest=self.sink_id, seq=seq, tx_power_dbm=rt.tx_power
        )
        self._broadcast_rreq(t, rt, rreq)

    def _on_rreq_tx(self, t: float, node_id: str, rreq: routing.Rreq) -> None:
        self._broadcast_rreq(t, self.nodes[node_id], rreq)

    def _broadcast_rreq(self, t: float, rt: NodeRuntime, rreq: routing.Rreq) -> None:
        if rt.tx_power is None and not rt.is_sink:
            return
        span_ms = self._worst_case_sleep_ms() + self.mac_cfg.control_packet_ms
        cost = mac.radio_energy(self.radio, tx_ms=span_ms, tx_power_dbm=rreq.tx_power_dbm)
        if not self._charge(rt, "mac:rreq-tx", cost):
            return
        self._trace_mac(t, rt.node_id, "rreq-tx", f"seq={rreq.seq}")
        arrival = t + span_ms / 1000.0
        self.busy_until = max(self.busy_until, arrival)
        for other in self.nodes.values():
            if other.node_id == rt.node_id:
                continue
            if not other.is_sink and other.schedule.radio_off:
                continue
            rssi = self._link_rssi(rt, other, rreq.tx_power_dbm)
            if rssi < self.channel.sensitivity_dbm:
                continue
            if not deliver(rssi, self.channel, self.rng_channel):
                continue
            rx = mac.radio_energy(self.radio, rx_ms=self.mac_cfg.control_packet_ms)
            if not self._charge(other, "mac:rreq-rx", rx):
                continue
            self._push(arrival, "rreq_rx", other.node_id, rreq, rssi)

    def _on_rreq_rx(self, t: float, node_id: str, rreq: routing.Rreq, rssi: float) -> None:
        rt = self.nodes[node_id]
        self._hear(rt, (rreq.hops() or [rreq.origin])[-1], rssi, is_beacon=False)
        if rt.is_sink:
            self._sink_handle_rreq(t, rt, rreq, rssi)
            return
        if rt.role != "relay":
            return
        fwd = routing.process_rreq(rt.routing, rreq, rssi, rt.level, rt.tx_power)
        if fwd is None:
            return
        jitter = rt.rng_mac.uniform(0.0, RREQ_JITTER_MS) / 1000.0
        self._push(t + PROCESSING_DELAY_S + jitter, "rreq_tx", node_id, fwd)

    def _sink_handle_rreq(
        self, t: float, sink: NodeRuntime, rreq: routing.Rreq, rssi: float
    ) -> None:
        state = sink.routing
        candidate = routing.sink_observe(rreq, sink.node_id, rssi)
        key = (rreq.origin, rreq.seq)
        answered = state.answered.get(rreq.origin, 0)
        if rreq.seq < answered:
            return
        if self.mode == "baseline":
            if rreq.seq == answered:
                return  # first copy already answered this flood
            rrep = routing.sink_decide(state, [candidate])
            self._install_sink_route(rrep)
            self._send_rrep(t + PROCESSING_DELAY_S, rrep)
            return
        if key in self.flood_candidates:
            self.flood_candidates[key].append(candidate)
            return
        if rreq.seq == answered and rreq.origin in self.active_sink_route:
            # Window already closed for this flood: honour late requests that
            # strictly beat the installed route, even mid-transfer.
            rrep = routing.reroute_on_better(
                state, self.active_sink_route[rreq.origin], candidate
            )
            if rrep is not None:
                self._install_sink_route(rrep)
                self._send_rrep(t + PROCESSING_DELAY_S, rrep)
            return
        self.flood_candidates[key] = [candidate]
        window = self.cfg.routing.collection_window_ms / 1000.0
        self._push(t + window, "rreq_window", rreq.origin, rreq.seq)

    def _on_rreq_window(self, t: float, origin: str, seq: int) -> None:
        candidates = self.flood_candidates.pop((origin, seq), [])
        if not candidates:
            return
        sink = self.nodes[self.sink_id]
        if seq < sink.routing.answered.get(origin, 0):
            return
        rrep = routing.sink_decide(sink.routing, candidates)
        self._install_sink_route(rrep)
        self._send_rrep(t, rrep)

    def _install_sink_route(self, rrep: routing.Rrep) -> None:
        self.active_sink_route[rrep.origin] = routing.RouteEntry(
            dest=rrep.origin,
            next_hop=rrep.path[1] if len(rrep.path) > 1 else rrep.origin,
            cost=rrep.cost,
            seq=rrep.seq,
            installed_at=self.now,
        )

    def _send_rrep(self, t: float, rrep: routing.Rrep) -> None:
        self._push(t, "rrep_hop", rrep, 0)

    def _on_rrep_hop(self, t: float, rrep: routing.Rrep, idx: int) -> None:
        sender = self.nodes[rrep.path[idx]]
        receiver = self.nodes[rrep.path[idx + 1]]
        if sender.tx_power is None and not sender.is_sink:
            return
        delivered, elapsed, _ = self._unicast(
            t, sender, receiver, self.mac_cfg.control_packet_ms, "rrep"
        )
        if not delivered:
            self.metrics.route_log.append(
                (t, sender.node_id, rrep.origin, "-", rrep.cost, rrep.seq, "rrep-lost")
            )
            return
        changed = routing.install_route(
            receiver.routing,
            dest=rrep.dest,
            next_hop=sender.node_id,
            cost=rrep.cost,
            seq=rrep.seq,
            now=t + elapsed,
        )
        if changed:
            self.metrics.route_log.append(
                (
                    t + elapsed,
                    receiver.node_id,
                    rrep.dest,
                    sender.node_id,
                    rrep.cost,
                    rrep.seq,
                    "installed",
                )
            )
        if receiver.node_id == rrep.origin:
            receiver.need_route = False
            self._flush_pending(t + elapsed, receiver)
        elif idx + 2 < len(rrep.path):
            self._push(t + elapsed + PROCESSING_DELAY_S, "rrep_hop", rrep, idx + 1)

    def _flush_pending(self, t: float, rt: NodeRuntime) -> None:
        if not rt.pending:
            return
        spacing = 0.1
        queued, rt.pending = rt.pending, []
        slot_end = (self.slot + 1) * self.cfg.slot_duration_s
        for i, pkt in enumerate(queued):
            at = t + i * spacing
            if at >= slot_end - 1e-9:
                rt.pending.append(pkt)
            else:
                self._push(at, "send", rt.node_id, pkt)

    def _queue_packet(self, rt: NodeRuntime, pkt: Packet, reason: str) -> None:
        rt.pending.append(pkt)
        if len(rt.pending) > PENDING_QUEUE_CAP:
            victim = rt.pending.pop(0)
            self.metrics.drops.append(
                (self.slot, victim.pid, rt.node_id, f"queue-overflow({reason})")
            )

    def _on_send(self, t: float, node_id: str, pkt: Packet) -> None:
        rt = self.nodes[node_id]
        entry = rt.routing.table.get(self.sink_id)
        if rt.tx_power is None or rt.schedule.radio_off:
            if rt.role == "source":
                self._queue_packet(rt, pkt, "dormant")
            else:
                self.metrics.drops.append((self.slot, pkt.pid, node_id, "dormant"))
            return
        if entry is None:
            if rt.role == "source":
                rt.need_route = True
                self._queue_packet(rt, pkt, "no-route")
            else:
                self.metrics.drops.append((self.slot, pkt.pid, node_id, "no-route"))
            return
        receiver = self.nodes[entry.next_hop]
        # Worst-case single-round overhead must be affordable before keying up.
        est_ms = self._believed_sleep_ms(rt, entry.next_hop) + self.mac_cfg.data_packet_ms
        est = mac.radio_energy(self.radio, tx_ms=est_ms, tx_power_dbm=rt.tx_power)
        if not rt.is_sink and rt.store.stored - est < self.floor:
            if rt.role == "source":
                self._queue_packet(rt, pkt, "no-energy")
            else:
                self.metrics.drops.append((self.slot, pkt.pid, node_id, "no-energy"))
            return
        delivered, elapsed, _ = self._unicast(
            t, rt, receiver, self.mac_cfg.data_packet_ms, "data"
        )
        if delivered:
            self._push(t + elapsed, "arrive", receiver.node_id, pkt)
            return
        pkt.retries += 1
        if rt.role == "source":
            routing.invalidate_route(rt.routing, self.sink_id)
            self.metrics.route_log.append(
                (t, node_id, self.sink_id, "-", entry.cost, entry.seq, "mac-fail")
            )
            rt.need_route = True
            if pkt.retries > MAX_PACKET_RETRIES:
                self.metrics.drops.append((self.slot, pkt.pid, node_id, "retries"))
            else:
                self._queue_packet(rt, pkt, "mac-fail")
        else:
            self.metrics.drops.append((self.slot, pkt.pid, node_id, "mac-fail"))

    def _on_arrive(self, t: float, node_id: str, pkt: Packet) -> None:
        rt = self.nodes[node_id]
        if rt.is_sink:
            self.metrics.delivered_ids.add(pkt.pid)
            return
        if rt.role != "relay":
            return
        if rt.forwards_left <= 0:
            self.metrics.drops.append((self.slot, pkt.pid, node_id, "relay-quota"))
            return
        rt.forwards_left -= 1
        self._push(t + PROCESSING_DELAY_S, "send", node_id, pkt)

    # ------------------------------------------------------------------
    # slot phases

    def _policy_specs(self, rt: NodeRuntime):
        if rt.node_id in self.cfg.policies:
            return self.cfg.policies[rt.node_id]
        return self.cfg.policies.get(rt.role, ())

    def _materialize_policies(self, rt: NodeRuntime) -> list[app.Policy]:
        tx_power = rt.tx_power if rt.tx_power is not None else -10
        policies = []
        for spec in self._policy_specs(rt):
            ops = []
            for _ in range(spec.repeat):
                for kind in spec.ops:
                    if kind == "tx128":
                        ops.append(
                            app.Operation(kind, app.OpClass.NETWORK, tx_power_dbm=tx_power)
                        )
                    elif kind == "rx128":
                        ops.append(app.Operation(kind, app.OpClass.NETWORK))
                    else:
                        ops.append(app.Operation(kind))
            policies.append(
                app.Policy(
                    name=spec.name,
                    ops=tuple(ops),
                    priority=spec.priority,
                    weight=spec.weight,
                )
            )
        return policies

    def _plan_node(self, rt: NodeRuntime, slot: int, t0: float) -> None:
        harvested = harvest_in_slot(rt.trace, slot, self.cfg.slot_duration_s)
        stored_start = rt.store.stored
        rt.store, wasted = deposit(rt.store, harvested)
        e_a = rt.store.stored
        rt.slot_ledger = (stored_start, harvested, wasted)

        if rt.next_prediction is not None:
            self.metrics.forecast_rows.append(
                (slot, rt.node_id, rt.next_prediction, harvested)
            )
        pred, rt.predictor_state = _predictor_step(
            self.cfg.predictor, rt.predictor_state, harvested
        )
        rt.next_prediction = pred
        forecasts = predict_horizon_for(rt.predictor_state, self.cfg.predictor.horizon)

        neighbor_levels = {
            n: lvl
            for n, (lvl, seen) in rt.neighbor_seen.items()
            if slot - seen <= NEIGHBOR_TTL_SLOTS
        }
        context = app.assess_slot(rt.store, 0.0, forecasts, neighbor_levels)
        rt.context = context
        rt.level = context.own
        rt.available = e_a
        try:
            rt.tx_power = routing.map_level_to_txpower(context.own)
        except routing.NodeDormant:
            rt.tx_power = None
        rt.delta_op = mac.DELTA_BY_LEVEL[context.own]
        rt.schedule = mac.schedule_from_delta(rt.delta_op, self.mac_cfg)

        rt.budget = app.compute_budget(context, rt.store, 0.0)
        policies = self._materialize_policies(rt)
        rt.plan = app.plan_slot(
            context,
            policies,
            rt.backlog,
            rt.budget,
            self.table,
            duty_energy=self.cfg.energy.duty_energy_uj,
            duty_weight=self.cfg.optimizer.duty_weight,
            slot=slot,
        )

        tx_quota = sum(1 for _, op in rt.plan.run_ops if op.kind == "tx128")
        rx_quota = sum(1 for _, op in rt.plan.run_ops if op.kind == "rx128")
        rt.forwards_left = min(tx_quota, rx_quota) if rt.role == "relay" else 0

        if rt.role == "source":
            self._schedule_traffic(rt, slot, t0, tx_quota)
        self._schedule_beacons(rt, t0)

    def _schedule_traffic(self, rt: NodeRuntime, slot: int, t0: float, tx_quota: int) -> None:
        period = self.cfg.traffic.packet_period_s
        n_gen = int(round(self.cfg.slot_duration_s / period))
        fresh = []
        for i in range(n_gen):
            self._packet_counter += 1
            fresh.append(Packet(pid=f"{rt.node_id}-{slot}-{i}", origin=rt.node_id, created_slot=slot))
        self.metrics.generated += n_gen

        drained = [
            Packet(pid=e.packet_id, origin=rt.node_id, created_slot=e.enqueued_slot)
            for e in rt.plan.backlog_run
            if e.packet_id is not None
        ]
        sendable = fresh[:tx_quota]
        for i, pkt in enumerate(fresh[tx_quota:]):
            victim = rt.backlog.push(
                app.BacklogEntry(
                    op=app.Operation("tx128", app.OpClass.NETWORK, tx_power_dbm=rt.tx_power or -10),
                    policy="deferred-tx",
                    priority=1,
                    enqueued_slot=slot,
                    packet_id=pkt.pid,
                )
            )
            if victim is not None:
                self.metrics.evictions.append((slot, rt.node_id, victim.packet_id or victim.op.kind))
                if victim.packet_id is not None:
                    self.metrics.drops.append(
                        (slot, victim.packet_id, rt.node_id, "backlog-evicted")
                    )

        to_send = rt.pending + drained + sendable
        rt.pending = []
        have_route = self.sink_id in rt.routing.table
        if rt.tx_power is None:
            rt.pending = to_send
        elif not have_route:
            for pkt in to_send:
                self._queue_packet(rt, pkt, "no-route")
            if to_send:
                rt.need_route = True
        else:
            for i, pkt in enumerate(to_send):
                self._push(t0 + 0.2 + i * period, "send", rt.node_id, pkt)

        refresh = slot % self.cfg.routing.rreq_refresh_slots == 0
        if rt.tx_power is not None and (rt.need_route or refresh):
            if rt.flood_initiated_slot != slot:
                rt.flood_initiated_slot = slot
                jitter = rt.rng_mac.uniform(0.0, 0.1)
                self._push(t0 + jitter, "rreq_init", rt.node_id)

    def _schedule_beacons(self, rt: NodeRuntime, t0: float) -> None:
        period = self.cfg.routing.beacon_period_s
        t_end = t0 + self.cfg.slot_duration_s
        t_b = math.ceil(t0 / period) * period
        while t_b < t_end - 1e-9:
            offset = rt.rng_mac.uniform(0.0, 0.05)
            self._push(max(t_b + offset, t0), "beacon", rt.node_id)
            t_b += period

    def _settle_node(self, rt: NodeRuntime, slot: int) -> None:
        stored_start, harvested, wasted = rt.slot_ledger
        report, rt.store, skipped = app.execute_plan(
            rt.plan,
            rt.store,
            self.table,
            self.floor,
            available=rt.available,
            slot=slot,
            node=rt.node_id,
            context=rt.context,
            charge_log=self.metrics.charges,
        )
        # Duty-cycle baseline for the level-anchored schedule actually run.
        if rt.delta_op > 0.0:
            paid = self._charge(
                rt, "duty", self.cfg.energy.duty_energy_uj * rt.delta_op
            )
            if paid:
                self.metrics.duty_sum[rt.node_id] = (
                    self.metrics.duty_sum.get(rt.node_id, 0.0) + rt.delta_op
                )
        leak = self.cfg.energy.leakage_uj_per_slot
        if leak > 0.0 and rt.store.stored > self.floor:
            self._charge(rt, "leakage", min(leak, rt.store.stored - self.floor))

        # Node-class deferrals enter the backlog; network-class deferrals are
        # already represented as queued/deferred packets (source) or arrival
        # drops (relay), so re-backlogging the ops would double-count them.
        deferred = [
            (n, o)
            for n, o in rt.plan.enqueue + skipped
            if o.op_class is app.OpClass.NODE
        ]
        for name, op in deferred:
            victim = rt.backlog.push(
                app.BacklogEntry(op=op, policy=name, priority=1, enqueued_slot=slot)
            )
            if victim is not None:
                self.metrics.evictions.append(
                    (slot, rt.node_id, victim.packet_id or victim.op.kind)
                )
                if victim.packet_id is not None:
                    self.metrics.drops.append(
                        (slot, victim.packet_id, rt.node_id, "backlog-evicted")
                    )
        for name, op in skipped:
            if op.op_class is app.OpClass.NETWORK:
                self.metrics.drops.append((slot, "-", rt.node_id, "aborted-op"))

        self.metrics.slot_reports.append(report)
        consumed = stored_start + harvested - wasted - rt.store.stored
        self.metrics.ledger.append(
            (slot, rt.node_id, stored_start, harvested, wasted, consumed, rt.store.stored)
        )

    def step_slot(self) -> None:
        slot = self.slot
        t0 = slot * self.cfg.slot_duration_s
        t_end = t0 + self.cfg.slot_duration_s
        self.now = max(self.now, t0)
        for node_id in sorted(self.nodes):
            rt = self.nodes[node_id]
            if rt.is_sink:
                self._schedule_beacons(rt, t0)
                continue
            self._plan_node(rt, slot, t0)
        while self._events and self._events[0][0] < t_end:
            t, _, kind, payload = heapq.heappop(self._events)
            self._handle_event(t, kind, payload)
        self.now = t_end
        for node_id in sorted(self.nodes):
            rt = self.nodes[node_id]
            if not rt.is_sink:
                self._settle_node(rt, slot)
        self.metrics.slots_run += 1
        self.slot += 1


def _predictor_step(settings, state, measured: float):
    """Advance whichever predictor the scenario configured."""
    if settings.kind == "ewma":
        if state is None:
            state = forecast.ewma_init(measured, settings.epsilon)
            return state.prediction, state
        return forecast.ewma_step(state, measured)
    if state is None:
        state = _HwWarmup(period=settings.period, settings=settings)
    if isinstance(state, _HwWarmup):
        state.history.append(measured)
        if len(state.history) >= 2 * state.period:
            hw = forecast.hw_init(
                state.history,
                state.period,
                epsilon=state.settings.epsilon,
                beta=state.settings.beta,
                gamma=state.settings.gamma,
            )
            return forecast.predict_horizon(hw, 1)[0], hw
        mean = sum(state.history) / len(state.history)
        return mean, state
    return forecast.hw_step(state, measured)


@dataclass
class _HwWarmup:
    """Collects two periods of history before the seasonal model starts."""

    period: int
    settings: object
    history: list[float] = field(default_factory=list)


def predict_horizon_for(state, horizon: int) -> list[float]:
    if isinstance(state, _HwWarmup):
        mean = sum(state.history) / max(len(state.history), 1)
        return [mean] * horizon
    return forecast.predict_horizon(state, horizon)


def step_slot(world: World) -> World:
    """Advance one slot (planning, event drain, settlement); returns the world."""
    world.step_slot()
    return world


def run(world: World, n_slots: int) -> Metrics:
    """Advance the world ``n_slots`` slots and return the metrics."""
    if n_slots < 1:
        raise ValueError("need at least one slot")
    for _ in range(n_slots):
        world.step_slot()
    return world.metrics
