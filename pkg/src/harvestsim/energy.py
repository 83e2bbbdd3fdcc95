"""Per-node energy ledger: harvest intake, capacitor storage, operation costs.

All energy amounts are plain floats in microjoules (uJ). Stores are immutable
values; deposit/withdraw return updated copies so a slot can be replayed or
rolled back without aliasing surprises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum


class EnergyError(Exception):
    """Base class for ledger errors."""


class SlotOutOfRange(EnergyError):
    """A harvest trace ended before the requested slot."""


class InsufficientEnergy(EnergyError):
    """A withdrawal would push the store below the survivability floor."""


class UnknownOperation(EnergyError):
    """No cost entry for the requested operation kind / power level."""


class EnergyLevel(IntEnum):
    """Discretized store state, ordered from lowest-survivable to high."""

    E0 = 0
    E1 = 1
    E2 = 2
    E3 = 3


def check_amount(value: float, what: str = "energy") -> float:
    """Validate a microjoule amount: finite and non-negative."""
    if not math.isfinite(value):
        raise ValueError(f"{what} must be finite, got {value!r}")
    if value < 0:
        raise ValueError(f"{what} must be >= 0, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class LevelThresholds:
    """Three ascending capacity fractions splitting [0, capacity] into four levels."""

    t1: float = 0.10
    t2: float = 0.40
    t3: float = 0.70

    def __post_init__(self) -> None:
        if not (0.0 < self.t1 < self.t2 < self.t3 < 1.0):
            raise ValueError(
                f"thresholds must be strictly ascending in (0,1), got "
                f"({self.t1}, {self.t2}, {self.t3})"
            )


DEFAULT_THRESHOLDS = LevelThresholds()


def classify_level(e: float, capacity: float, thresholds: LevelThresholds = DEFAULT_THRESHOLDS) -> EnergyLevel:
    """Map a stored/available amount to one of the four energy levels.

    Classification is total: every 0 <= e <= capacity maps to exactly one
    level, with boundaries belonging to the level above.
    """
    check_amount(e, "e")
    check_amount(capacity, "capacity")
    if capacity <= 0:
        raise ValueError("capacity must be positive")
    frac = e / capacity
    if frac < thresholds.t1:
        return EnergyLevel.E0
    if frac < thresholds.t2:
        return EnergyLevel.E1
    if frac < thresholds.t3:
        return EnergyLevel.E2
    return EnergyLevel.E3


@dataclass(frozen=True)
class EnergyStore:
    """Supercapacitor ledger: stored amount, capacity clamp, level thresholds."""

    stored: float
    capacity: float
    thresholds: LevelThresholds = DEFAULT_THRESHOLDS

    def __post_init__(self) -> None:
        check_amount(self.stored, "stored")
        check_amount(self.capacity, "capacity")
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.stored > self.capacity:
            raise ValueError(
                f"stored ({self.stored}) exceeds capacity ({self.capacity})"
            )

    @property
    def level(self) -> EnergyLevel:
        return classify_level(self.stored, self.capacity, self.thresholds)


def deposit(store: EnergyStore, e: float) -> tuple[EnergyStore, float]:
    """Add harvested energy, clamping at capacity.

    Returns the updated store and the overflow that could not be banked
    (wasted harvest).
    """
    check_amount(e, "deposit")
    total = store.stored + e
    if total > store.capacity:
        return (
            EnergyStore(store.capacity, store.capacity, store.thresholds),
            total - store.capacity,
        )
    return EnergyStore(total, store.capacity, store.thresholds), 0.0


def withdraw(store: EnergyStore, e: float, floor: float) -> EnergyStore:
    """Spend energy, refusing any draw that would breach the survivability floor."""
    check_amount(e, "withdrawal")
    check_amount(floor, "floor")
    remaining = store.stored - e
    if remaining < floor:
        raise InsufficientEnergy(
            f"withdraw {e} from {store.stored} would leave {remaining} < floor {floor}"
        )
    return EnergyStore(remaining, store.capacity, store.thresholds)


def available_energy(store: EnergyStore, harvested: float) -> float:
    """Energy usable this slot: stored plus fresh harvest, clamped at capacity."""
    check_amount(harvested, "harvested")
    return min(store.stored + harvested, store.capacity)


@dataclass(frozen=True)
class HarvestTrace:
    """Per-slot harvested power samples (watts), with a lazy scale factor.

    Slots are contiguous, starting at ``start_slot``. The scale factor models
    panels attenuated to lab scale and is applied at integration time, not to
    the stored samples.
    """

    powers: tuple[float, ...]
    start_slot: int = 0
    kind: str = "synthetic"
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.scale <= 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        for i, p in enumerate(self.powers):
            if not math.isfinite(p) or p < 0:
                raise ValueError(f"power sample {i} invalid: {p!r}")

    def __len__(self) -> int:
        return len(self.powers)

    def power_at(self, slot: int) -> float:
        idx = slot - self.start_slot
        if idx < 0 or idx >= len(self.powers):
            raise SlotOutOfRange(
                f"slot {slot} outside trace [{self.start_slot}, "
                f"{self.start_slot + len(self.powers) - 1}]"
            )
        return self.powers[idx]


def harvest_in_slot(trace: HarvestTrace, slot: int, slot_duration_s: float) -> float:
    """Integrate harvested power over one slot (rectangle rule), in microjoules."""
    if slot_duration_s < 0 or not math.isfinite(slot_duration_s):
        raise ValueError(f"slot duration invalid: {slot_duration_s}")
    power_w = trace.power_at(slot)
    # 1 W * 1 s = 1 J = 1e6 uJ
    return power_w * slot_duration_s * trace.scale * 1e6


# Measured per-operation costs for the reference mote, in uJ. Transmit cost
# depends on the radio power level; the sub-0dBm entries are scaled by the
# transmit-current ratio of the radio (only the 0 dBm cost was measured).
DEFAULT_OP_COSTS = {
    "average50": 7.056,
    "peak50": 7.392,
    "sense": 20.30,
    "flash_write": 1.23,
    "flash_read": 0.30,
    "rx128": 400.0,
}
DEFAULT_TX_COSTS = {0: 341.0, -5: 304.0, -10: 271.0}

TX_OP_KIND = "tx128"


@dataclass(frozen=True)
class OperationCostTable:
    """Lookup from operation kind to energy cost (uJ)."""

    costs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OP_COSTS))
    tx_costs: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_TX_COSTS))

    def __post_init__(self) -> None:
        for kind, cost in self.costs.items():
            if cost <= 0 or not math.isfinite(cost):
                raise ValueError(f"cost for {kind!r} must be > 0, got {cost}")
        for power, cost in self.tx_costs.items():
            if cost <= 0 or not math.isfinite(cost):
                raise ValueError(f"tx cost at {power} dBm must be > 0, got {cost}")


def op_cost(table: OperationCostTable, kind: str, tx_power_dbm: int | None = None) -> float:
    """Cost of one operation; transmit kinds additionally need a power level."""
    if kind == TX_OP_KIND:
        if tx_power_dbm is None:
            raise UnknownOperation("transmit cost requires a tx power level")
        try:
            return table.tx_costs[tx_power_dbm]
        except KeyError:
            raise UnknownOperation(
                f"no transmit cost configured for {tx_power_dbm} dBm"
            ) from None
    try:
        return table.costs[kind]
    except KeyError:
        raise UnknownOperation(f"unknown operation kind {kind!r}") from None
