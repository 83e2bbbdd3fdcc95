"""The morphing application: per-slot energy assessment and policy planning.

Each slot the application classifies its own, predicted ("virtual") and
neighbourhood energy into the four discrete levels, derives a spendable
budget, and asks the optimizer how far to morph each policy (the alpha
prefix rule) and how much duty cycle to afford. Operations that do not fit
are backlogged; abundant slots drain the backlog first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .energy import (
    EnergyLevel,
    EnergyStore,
    InsufficientEnergy,
    OperationCostTable,
    available_energy,
    classify_level,
    op_cost,
    withdraw,
)
from .optimizer import Infeasible, build_opt, solve_for_v


class OpClass(Enum):
    NODE = "node"
    NETWORK = "network"


@dataclass(frozen=True)
class Operation:
    """One executable step of a policy; transmit kinds carry a power level."""

    kind: str
    op_class: OpClass = OpClass.NODE
    tx_power_dbm: int | None = None


@dataclass(frozen=True)
class Policy:
    """Named, ordered operation sequence with a priority rank (1 = highest).

    ``weight`` scales the policy's utility contribution (base: one unit per
    operation).
    """

    name: str
    ops: tuple[Operation, ...]
    priority: int = 1
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.ops:
            raise ValueError(f"policy {self.name!r} has no operations")
        if self.weight <= 0:
            raise ValueError(f"policy {self.name!r} weight must be positive")

    @property
    def is_network(self) -> bool:
        return any(op.op_class is OpClass.NETWORK for op in self.ops)

    @property
    def utility(self) -> float:
        return self.weight * len(self.ops)


@dataclass(frozen=True)
class EnergyContext:
    """The three level readings steering the slot's plan."""

    own: EnergyLevel
    virtual: EnergyLevel
    network: EnergyLevel


# Network level when no neighbour has been heard this epoch: conservative
# but not paralyzing.
DEFAULT_NETWORK_LEVEL = EnergyLevel.E1

# Spendable fraction of stored+harvested withheld per *virtual* level: the
# gloomier the forecast, the more is reserved.
RESERVE_FRACTIONS = {
    EnergyLevel.E3: 0.0,
    EnergyLevel.E2: 0.10,
    EnergyLevel.E1: 0.25,
    EnergyLevel.E0: 0.40,
}

# Residual target as a fraction of the budget, keyed by *own* level: a rich
# node spends its whole grant, a poor one conserves most of it. Reuses the
# level-threshold ladder so a single knob shapes both discretizations.
RESIDUAL_FRACTIONS = {
    EnergyLevel.E3: 0.0,
    EnergyLevel.E2: 0.10,
    EnergyLevel.E1: 0.40,
    EnergyLevel.E0: 0.70,
}


def assess_slot(
    store: EnergyStore,
    harvested: float,
    forecasts: list[float],
    neighbor_levels: dict[str, EnergyLevel] | list[EnergyLevel],
) -> EnergyContext:
    """Classify own, virtual and network energy for this slot.

    The virtual level is the classification of the *worst* forecast over the
    horizon (at least two slots).
    """
    if len(forecasts) < 2:
        raise ValueError("forecast horizon must cover at least 2 slots")
    own = classify_level(
        available_energy(store, harvested), store.capacity, store.thresholds
    )
    virtual = classify_level(
        max(min(forecasts), 0.0), store.capacity, store.thresholds
    )
    levels = (
        list(neighbor_levels.values())
        if isinstance(neighbor_levels, dict)
        else list(neighbor_levels)
    )
    network = min(levels) if levels else DEFAULT_NETWORK_LEVEL
    return EnergyContext(own=own, virtual=virtual, network=network)


def compute_budget(context: EnergyContext, store: EnergyStore, harvested: float) -> float:
    """Spendable energy this slot.

    Available energy minus a virtual-level reserve minus the survivability
    floor, clamped at zero. The network level never shrinks the budget; it
    gates network-class policies in plan_slot instead.
    """
    e_a = available_energy(store, harvested)
    reserve = RESERVE_FRACTIONS[context.virtual] * e_a
    floor = store.thresholds.t1 * store.capacity
    return max(e_a - reserve - floor, 0.0)


@dataclass(frozen=True)
class BacklogEntry:
    op: Operation
    policy: str
    priority: int
    enqueued_slot: int
    packet_id: int | None = None


@dataclass
class Backlog:
    """Bounded deferred-operation queue.

    Eviction removes the lowest-priority entry, oldest first among equals;
    evicted entries are returned to the caller so nothing vanishes silently.
    """

    capacity: int = 64
    entries: list[BacklogEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: BacklogEntry) -> BacklogEntry | None:
        self.entries.append(entry)
        if len(self.entries) <= self.capacity:
            return None
        victim = max(
            range(len(self.entries)),
            key=lambda i: (self.entries[i].priority, -self.entries[i].enqueued_slot, -i),
        )
        return self.entries.pop(victim)

    def drain(self) -> list[BacklogEntry]:
        """Remove and return all entries, highest priority and oldest first."""
        out = sorted(self.entries, key=lambda e: (e.priority, e.enqueued_slot))
        self.entries.clear()
        return out


@dataclass
class ExecutionPlan:
    """One slot's commitment: ops to run now, controls, and deferrals."""

    run_ops: list[tuple[str, Operation]]
    backlog_run: list[BacklogEntry]
    alphas: dict[str, float]
    delta: float
    enqueue: list[tuple[str, Operation]]
    planned_cost: float
    budget: float
    residual_target: float
    infeasible: bool = False


@dataclass
class SlotReport:
    """Per-slot settlement record (one CSV row of the slot log)."""

    slot: int
    node: str
    own_level: EnergyLevel
    virtual_level: EnergyLevel
    network_level: EnergyLevel
    alpha_mean: float
    delta: float
    ops_node: int
    ops_network: int
    consumed_uj: float
    residual_uj: float
    aborted: bool = False


def select_subset(policies: list[Policy], alphas: dict[str, float]) -> list[tuple[str, Operation]]:
    """Deterministic prefix rule: run the first floor(alpha * len) ops of each policy.

    Policies are visited in priority order so higher-ranked work lands first
    in the slot.
    """
    chosen: list[tuple[str, Operation]] = []
    for pol in sorted(policies, key=lambda p: (p.priority, p.name)):
        alpha = alphas.get(pol.name, 0.0)
        if not (0.0 <= alpha <= 1.0):
            raise ValueError(f"alpha for {pol.name!r} outside [0,1]: {alpha}")
        count = math.floor(alpha * len(pol.ops) + 1e-12)
        chosen.extend((pol.name, op) for op in pol.ops[:count])
    return chosen


def policy_cost(policy: Policy, table: OperationCostTable) -> float:
    return sum(op_cost(table, op.kind, op.tx_power_dbm) for op in policy.ops)


def plan_slot(
    context: EnergyContext,
    policies: list[Policy],
    backlog: Backlog,
    budget: float,
    table: OperationCostTable,
    *,
    duty_energy: float,
    duty_weight: float | None = None,
    slot: int = 0,
) -> ExecutionPlan:
    """Choose this slot's operation subset from the energy context.

    Network-class policies are dropped when the network (or the node itself)
    is at E0. The residual target is the own-level conservation fraction of
    the budget, raised just enough to keep the spend within what the
    variables can absorb; the optimizer then yields the morphing factors.
    When both own and virtual levels are high the backlog is drained before
    fresh policy work is planned.
    """
    eligible = [
        p
        for p in policies
        if not (
            p.is_network
            and (context.network == EnergyLevel.E0 or context.own == EnergyLevel.E0)
        )
    ]
    eligible_names = {p.name for p in eligible}
    gated = [
        (p.name, op)
        for p in policies
        if p.name not in eligible_names
        for op in p.ops
    ]

    v_target = RESIDUAL_FRACTIONS[context.own] * budget
    spend_cap = budget - v_target

    backlog_run: list[BacklogEntry] = []
    drained_cost = 0.0
    if (
        context.own == EnergyLevel.E3
        and context.virtual == EnergyLevel.E3
        and len(backlog)
    ):
        kept: list[BacklogEntry] = []
        for entry in backlog.drain():
            cost = op_cost(table, entry.op.kind, entry.op.tx_power_dbm)
            if drained_cost + cost <= spend_cap:
                backlog_run.append(entry)
                drained_cost += cost
            else:
                kept.append(entry)
        backlog.entries = kept

    weights = tuple(p.utility for p in eligible)
    costs = tuple(policy_cost(p, table) for p in eligible)
    lp = build_opt(weights, costs, duty_energy, duty_weight, budget)
    # Clamp the residual up so the LP spend never exceeds total capacity:
    # abundant slots simply saturate every variable instead of failing.
    v_eff = max(v_target + drained_cost, budget - lp.max_spend)
    v_eff = min(v_eff, budget)
    try:
        result = solve_for_v(lp, v_eff)
    except Infeasible:
        enqueue = [(p.name, op) for p in eligible for op in p.ops] + gated
        return ExecutionPlan(
            run_ops=[],
            backlog_run=[],
            alphas={p.name: 0.0 for p in policies},
            delta=0.0,
            enqueue=enqueue,
            planned_cost=0.0,
            budget=budget,
            residual_target=v_target,
            infeasible=True,
        )

    alphas = {p.name: a for p, a in zip(eligible, result.alphas)}
    run_ops = select_subset(eligible, alphas)
    executed_counts: dict[str, int] = {}
    for name, _ in run_ops:
        executed_counts[name] = executed_counts.get(name, 0) + 1
    enqueue = [
        (p.name, op)
        for p in eligible
        for op in p.ops[executed_counts.get(p.name, 0) :]
    ] + gated
    planned = drained_cost + sum(
        op_cost(table, op.kind, op.tx_power_dbm) for _, op in run_ops
    )
    full_alphas = {p.name: alphas.get(p.name, 0.0) for p in policies}
    return ExecutionPlan(
        run_ops=run_ops,
        backlog_run=backlog_run,
        alphas=full_alphas,
        delta=result.delta,
        enqueue=enqueue,
        planned_cost=planned,
        budget=budget,
        residual_target=v_target,
    )


def execute_plan(
    plan: ExecutionPlan,
    store: EnergyStore,
    table: OperationCostTable,
    floor: float,
    *,
    available: float | None = None,
    slot: int = 0,
    node: str = "",
    context: EnergyContext | None = None,
    charge_log: list | None = None,
) -> tuple[SlotReport, EnergyStore, list[tuple[str, Operation]]]:
    """Charge the store for the plan's operations, in order.

    Backlogged work runs first, then the fresh subset. A withdrawal refused
    by the floor aborts the remainder (the harvest-forecast-error path); the
    unexecuted tail is returned for re-backlogging. The report's residual is
    measured against ``available`` (defaults to the store's balance at
    entry).
    """
    if available is None:
        available = store.stored
    consumed = 0.0
    ops_node = 0
    ops_network = 0
    aborted = False
    skipped: list[tuple[str, Operation]] = []
    sequence: list[tuple[str, Operation]] = [
        (e.policy, e.op) for e in plan.backlog_run
    ] + plan.run_ops
    for i, (pol_name, op) in enumerate(sequence):
        cost = op_cost(table, op.kind, op.tx_power_dbm)
        try:
            store = withdraw(store, cost, floor)
        except InsufficientEnergy:
            aborted = True
            skipped = sequence[i:]
            break
        consumed += cost
        if charge_log is not None:
            charge_log.append((slot, node, f"op:{op.kind}", cost))
        if op.op_class is OpClass.NETWORK:
            ops_network += 1
        else:
            ops_node += 1
    alphas = list(plan.alphas.values())
    levels = context or EnergyContext(
        EnergyLevel.E0, EnergyLevel.E0, EnergyLevel.E0
    )
    report = SlotReport(
        slot=slot,
        node=node,
        own_level=levels.own,
        virtual_level=levels.virtual,
        network_level=levels.network,
        alpha_mean=sum(alphas) / len(alphas) if alphas else 0.0,
        delta=plan.delta,
        ops_node=ops_node,
        ops_network=ops_network,
        consumed_uj=consumed,
        residual_uj=available - consumed,
        aborted=aborted,
    )
    return report, store, skipped
