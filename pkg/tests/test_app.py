import pytest

from harvestsim.app import (
    Backlog,
    BacklogEntry,
    EnergyContext,
    OpClass,
    Operation,
    Policy,
    assess_slot,
    compute_budget,
    execute_plan,
    plan_slot,
    policy_cost,
    select_subset,
)
from harvestsim.energy import EnergyLevel, EnergyStore, OperationCostTable

CAP = 100_000.0  # 100 mJ
FLOOR = 10_000.0  # E0/E1 boundary


def store_at(stored):
    return EnergyStore(stored=stored, capacity=CAP)


SENSE = Operation("sense")
AVG = Operation("average50")
WRITE = Operation("flash_write")
TX = Operation("tx128", OpClass.NETWORK, tx_power_dbm=0)
RX = Operation("rx128", OpClass.NETWORK)


class TestAssess:
    def test_all_high(self):
        ctx = assess_slot(
            store_at(CAP), 0.0, [90_000.0, 95_000.0], [EnergyLevel.E3, EnergyLevel.E3]
        )
        assert (ctx.own, ctx.virtual, ctx.network) == (
            EnergyLevel.E3,
            EnergyLevel.E3,
            EnergyLevel.E3,
        )

    def test_mixed_levels(self):
        ctx = assess_slot(
            store_at(25_000.0),
            0.0,
            [5_000.0, 30_000.0],
            [EnergyLevel.E2, EnergyLevel.E1],
        )
        assert (ctx.own, ctx.virtual, ctx.network) == (
            EnergyLevel.E1,
            EnergyLevel.E0,
            EnergyLevel.E1,
        )

    def test_no_neighbors_defaults_e1(self):
        ctx = assess_slot(store_at(CAP), 0.0, [CAP, CAP], [])
        assert ctx.network is EnergyLevel.E1

    def test_short_horizon_rejected(self):
        with pytest.raises(ValueError):
            assess_slot(store_at(CAP), 0.0, [CAP], [])

    def test_virtual_uses_worst_forecast(self):
        ctx = assess_slot(store_at(CAP), 0.0, [80_000.0, 5_000.0], [])
        assert ctx.virtual is EnergyLevel.E0


class TestBudget:
    def test_zero_reserve_at_high_virtual(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        assert compute_budget(ctx, store_at(50_000.0), 0.0) == pytest.approx(40_000.0)

    def test_forty_percent_reserve_at_low_virtual(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E0, EnergyLevel.E3)
        assert compute_budget(ctx, store_at(50_000.0), 0.0) == pytest.approx(20_000.0)

    def test_nothing_spendable_at_floor(self):
        ctx = EnergyContext(EnergyLevel.E1, EnergyLevel.E3, EnergyLevel.E3)
        assert compute_budget(ctx, store_at(FLOOR), 0.0) == 0.0

    def test_network_level_does_not_change_budget(self):
        hi = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        lo = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E0)
        s = store_at(50_000.0)
        assert compute_budget(hi, s, 0.0) == compute_budget(lo, s, 0.0)


class TestSelectSubset:
    def test_full_alpha_runs_all(self):
        pol = Policy("p", (SENSE, AVG, WRITE))
        assert len(select_subset([pol], {"p": 1.0})) == 3

    def test_half_alpha_floors(self):
        pol = Policy("p", (SENSE, AVG, WRITE))
        assert len(select_subset([pol], {"p": 0.5})) == 1

    def test_zero_alpha_runs_none(self):
        pol = Policy("p", (SENSE, AVG, WRITE))
        assert select_subset([pol], {"p": 0.0}) == []

    def test_priority_order(self):
        low = Policy("low", (AVG,), priority=2)
        high = Policy("high", (SENSE,), priority=1)
        chosen = select_subset([low, high], {"low": 1.0, "high": 1.0})
        assert [name for name, _ in chosen] == ["high", "low"]

    def test_alpha_out_of_bounds_rejected(self):
        pol = Policy("p", (SENSE,))
        with pytest.raises(ValueError):
            select_subset([pol], {"p": 1.2})


def make_policies():
    # ~2.2 mJ and ~0.43 mJ per execution
    report = Policy("report", (SENSE, TX, SENSE, TX, SENSE, TX), priority=1)
    log = Policy("log", (SENSE, AVG, WRITE), priority=2)
    return [report, log]


def plan(ctx, policies=None, budget=None, backlog=None, table=None):
    policies = policies or make_policies()
    table = table or OperationCostTable()
    if budget is None:
        budget = 50_000.0
    return plan_slot(
        ctx,
        policies,
        backlog if backlog is not None else Backlog(),
        budget,
        table,
        duty_energy=10_000.0,
    )


class TestPlanSlot:
    def test_abundant_runs_everything(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        p = plan(ctx)
        assert all(a == pytest.approx(1.0) for a in p.alphas.values())
        assert len(p.run_ops) == 9
        assert p.enqueue == []

    def test_backlog_drained_when_both_levels_high(self):
        backlog = Backlog()
        backlog.push(BacklogEntry(SENSE, "report", 1, enqueued_slot=0))
        backlog.push(BacklogEntry(AVG, "log", 2, enqueued_slot=1))
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        p = plan(ctx, backlog=backlog)
        assert len(p.backlog_run) == 2
        assert len(backlog) == 0

    def test_backlog_not_drained_when_virtual_low(self):
        backlog = Backlog()
        backlog.push(BacklogEntry(SENSE, "report", 1, enqueued_slot=0))
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E1, EnergyLevel.E3)
        p = plan(ctx, backlog=backlog)
        assert p.backlog_run == []
        assert len(backlog) == 1

    def test_low_virtual_strictly_reduces_ops(self):
        # Reserve bite: same store, virtual E0 vs E3. The full policy set
        # costs ~1112 uJ; the scaled budgets straddle that threshold.
        store = store_at(CAP)
        hi = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        lo = EnergyContext(EnergyLevel.E3, EnergyLevel.E0, EnergyLevel.E3)
        p_hi = plan(hi, budget=compute_budget(hi, store, 0.0) / 60.0)
        p_lo = plan(lo, budget=compute_budget(lo, store, 0.0) / 60.0)
        assert len(p_hi.run_ops) == 9
        assert len(p_lo.run_ops) < len(p_hi.run_ops)

    def test_zero_budget_defers_everything(self):
        ctx = EnergyContext(EnergyLevel.E0, EnergyLevel.E0, EnergyLevel.E1)
        p = plan(ctx, budget=0.0)
        assert p.run_ops == []
        assert len(p.enqueue) == 9

    def test_network_e0_gates_network_policies(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E0)
        p = plan(ctx)
        assert all(name == "log" for name, _ in p.run_ops)
        gated = [name for name, _ in p.enqueue if name == "report"]
        assert len(gated) == 6

    def test_morphing_monotone_in_virtual_level(self):
        store = store_at(60_000.0)
        counts = []
        for virt in (EnergyLevel.E3, EnergyLevel.E2, EnergyLevel.E1, EnergyLevel.E0):
            ctx = EnergyContext(EnergyLevel.E3, virt, EnergyLevel.E3)
            budget = compute_budget(ctx, store, 0.0)
            counts.append(len(plan(ctx, budget=budget / 20.0).run_ops))
        assert counts == sorted(counts, reverse=True)


class TestBacklog:
    def test_eviction_order_lowest_priority_oldest_first(self):
        b = Backlog(capacity=2)
        assert b.push(BacklogEntry(SENSE, "a", 1, enqueued_slot=0)) is None
        assert b.push(BacklogEntry(AVG, "b", 3, enqueued_slot=1)) is None
        victim = b.push(BacklogEntry(WRITE, "c", 3, enqueued_slot=2))
        assert victim is not None
        assert victim.policy == "b"  # same low priority, older goes first

    def test_drain_orders_by_priority_then_age(self):
        b = Backlog()
        b.push(BacklogEntry(SENSE, "late", 2, enqueued_slot=5))
        b.push(BacklogEntry(AVG, "old", 1, enqueued_slot=1))
        b.push(BacklogEntry(WRITE, "new", 1, enqueued_slot=3))
        assert [e.policy for e in b.drain()] == ["old", "new", "late"]
        assert len(b) == 0

    def test_nothing_vanishes(self):
        b = Backlog(capacity=4)
        evicted = []
        for i in range(10):
            victim = b.push(BacklogEntry(SENSE, f"p{i}", 1, enqueued_slot=i))
            if victim:
                evicted.append(victim)
        assert len(b) + len(evicted) == 10


class TestExecutePlan:
    def test_empty_plan_all_zero(self):
        ctx = EnergyContext(EnergyLevel.E1, EnergyLevel.E1, EnergyLevel.E1)
        p = plan(ctx, budget=0.0)
        report, store, skipped = execute_plan(
            p, store_at(50_000.0), OperationCostTable(), FLOOR
        )
        assert report.consumed_uj == 0.0
        assert report.ops_node == report.ops_network == 0
        assert skipped == []

    def test_sense_plus_transmit_charge(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        pol = Policy("one", (SENSE, TX))
        p = plan(ctx, policies=[pol], budget=50_000.0)
        report, store, _ = execute_plan(
            p, store_at(50_000.0), OperationCostTable(), FLOOR
        )
        assert report.consumed_uj == pytest.approx(361.30)
        assert report.ops_node == 1 and report.ops_network == 1
        assert store.stored == pytest.approx(50_000.0 - 361.30)

    def test_mid_slot_abort_backlogs_rest(self):
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        pol = Policy("one", (TX, TX, TX))
        p = plan(ctx, policies=[pol], budget=50_000.0)
        # Store only covers one transmission above the floor.
        tight = EnergyStore(stored=FLOOR + 500.0, capacity=CAP)
        report, store, skipped = execute_plan(p, tight, OperationCostTable(), FLOOR)
        assert report.aborted
        assert report.ops_network == 1
        assert len(skipped) == 2
        assert store.stored >= FLOOR

    def test_budget_safety(self):
        # Consumed never exceeds the granted budget plus one op cost.
        table = OperationCostTable()
        for budget in (0.0, 500.0, 2_000.0, 10_000.0, 50_000.0):
            ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
            p = plan(ctx, budget=budget)
            report, _, _ = execute_plan(p, store_at(CAP), table, FLOOR)
            assert report.consumed_uj <= budget + 400.0 + 1e-9

    def test_charge_log_matches_table(self):
        table = OperationCostTable()
        ctx = EnergyContext(EnergyLevel.E3, EnergyLevel.E3, EnergyLevel.E3)
        p = plan(ctx, budget=50_000.0)
        log = []
        execute_plan(p, store_at(CAP), table, FLOOR, charge_log=log, slot=3, node="D")
        assert log
        for slot, node, label, amount in log:
            assert (slot, node) == (3, "D")
            kind = label.removeprefix("op:")
            expected = (
                table.tx_costs[0] if kind == "tx128" else table.costs[kind]
            )
            assert amount == expected  # exact, no tolerance


class TestPolicyCost:
    def test_sum_of_op_costs(self):
        table = OperationCostTable()
        pol = Policy("p", (SENSE, TX, AVG))
        assert policy_cost(pol, table) == pytest.approx(20.30 + 341.0 + 7.056)

    def test_network_flag(self):
        assert Policy("p", (SENSE, TX)).is_network
        assert not Policy("p", (SENSE, AVG)).is_network
