"""Utility / residual-energy trade-off kernel.

The per-slot planning problem is a linear program over morphing factors
``alpha_i`` (one per policy) and the duty factor ``delta``::

    maximize    sum(w_i * alpha_i) + w_delta * delta
    subject to  sum(E_i * alpha_i) + E_dc * delta = X - V
                0 <= alpha_i <= 1,   0 <= delta <= 1

where ``X`` is the slot's energy budget and ``V`` the residual energy the
node wants left over. Because there is exactly one equality constraint and
every variable is box-bounded, the simplex basis is a single variable: all
other variables sit at 0 or 1 and the basic one absorbs the remainder of the
budget. Bounds are handled natively (no slack rows, no variable splitting).

``parametric_sweep`` traces the optimal value as ``V`` grows: within one
basis the optimum moves linearly, and the basis change points are found by
ratio tests on the perturbed right-hand side followed by a dual-simplex
pivot, yielding the piecewise-linear, concave trade-off curve without
re-solving from scratch.

``greedy_oracle`` is an independent check: for this structure the fractional
knapsack fill (descending utility-per-microjoule) is provably optimal. It is
used by the test suite only and shares no code with the simplex path.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field

FEAS_TOL = 1e-9

AT_LOWER = 0
AT_UPPER = 1


class OptimizerError(Exception):
    """Base class for optimizer errors."""


class DimensionMismatch(OptimizerError):
    """Utility weights and energy costs have different lengths."""


class NonPositiveCost(OptimizerError):
    """Every energy coefficient must be strictly positive."""


class Infeasible(OptimizerError):
    """The requested spend exceeds what the variables can absorb."""


class PrimalInfeasible(OptimizerError):
    """Dual-simplex found no entering column: the V interval is infeasible."""


class OutOfDomain(OptimizerError):
    """Curve evaluated outside its swept V range."""


@dataclass(frozen=True)
class PolicyLp:
    """One slot's optimization instance.

    Variables are ordered policies-first, duty factor last. ``budget_base``
    is the slot budget X; a solve at residual ``v`` spends ``X - v``.
    """

    weights: tuple[float, ...]
    costs: tuple[float, ...]
    duty_energy: float
    duty_weight: float
    budget_base: float

    @property
    def n_policies(self) -> int:
        return len(self.weights)

    @property
    def n_vars(self) -> int:
        return len(self.weights) + 1

    @property
    def objective(self) -> tuple[float, ...]:
        return self.weights + (self.duty_weight,)

    @property
    def row(self) -> tuple[float, ...]:
        return self.costs + (self.duty_energy,)

    @property
    def max_spend(self) -> float:
        """Largest budget the instance can absorb (all variables at 1)."""
        return sum(self.costs) + self.duty_energy


def default_duty_weight(weights: tuple[float, ...], costs: tuple[float, ...], duty_energy: float) -> float:
    """Duty utility priced at a tenth of the cheapest policy's utility rate.

    The duty factor has no intrinsic utility in the planning model; giving
    it a small positive rate makes it soak up budget only after every policy
    is saturated, so it rises exactly when energy is abundant.
    """
    if not weights:
        return 1.0
    min_rate = min(w / c for w, c in zip(weights, costs))
    return 0.1 * min_rate * duty_energy


def build_opt(
    weights,
    costs,
    e_dc: float,
    w_delta: float | None,
    x_k: float,
) -> PolicyLp:
    """Validate and assemble a PolicyLp; ``w_delta=None`` picks the default rate."""
    weights = tuple(float(w) for w in weights)
    costs = tuple(float(c) for c in costs)
    if len(weights) != len(costs):
        raise DimensionMismatch(
            f"{len(weights)} weights vs {len(costs)} costs"
        )
    if any(c <= 0 or not math.isfinite(c) for c in costs):
        raise NonPositiveCost(f"costs must be > 0, got {costs}")
    if e_dc <= 0 or not math.isfinite(e_dc):
        raise NonPositiveCost(f"duty energy must be > 0, got {e_dc}")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ValueError(f"weights must be >= 0, got {weights}")
    if x_k < 0 or not math.isfinite(x_k):
        raise ValueError(f"budget base must be >= 0, got {x_k}")
    if w_delta is None:
        w_delta = default_duty_weight(weights, costs, e_dc)
    elif w_delta < 0:
        raise ValueError(f"duty weight must be >= 0, got {w_delta}")
    return PolicyLp(
        weights=weights,
        costs=costs,
        duty_energy=float(e_dc),
        duty_weight=float(w_delta),
        budget_base=float(x_k),
    )


@dataclass(frozen=True)
class OptResult:
    """Optimal controls for one solve: utility, morphing factors, duty factor."""

    utility: float
    alphas: tuple[float, ...]
    delta: float
    status: str = "optimal"


@dataclass
class Tableau:
    """Bounded-variable simplex state for the single-constraint LP.

    ``basic`` is the index of the one basic variable; every other variable
    is pinned at a bound per ``status``. ``rhs`` holds the current budget
    and ``rhs_dir`` its derivative with respect to the swept parameter V
    (-1: raising the residual target shrinks the spend).
    """

    a: tuple[float, ...]
    c: tuple[float, ...]
    upper: tuple[float, ...]
    rhs: float
    basic: int
    status: list[int]
    rhs_dir: float = -1.0

    def nonbasic_spend(self) -> float:
        return sum(
            self.a[j] * self.upper[j]
            for j in range(len(self.a))
            if j != self.basic and self.status[j] == AT_UPPER
        )

    def basic_value(self) -> float:
        return (self.rhs - self.nonbasic_spend()) / self.a[self.basic]

    def values(self) -> list[float]:
        xs = [
            self.upper[j] if self.status[j] == AT_UPPER else 0.0
            for j in range(len(self.a))
        ]
        xs[self.basic] = self.basic_value()
        return xs

    def utility(self) -> float:
        return sum(cj * xj for cj, xj in zip(self.c, self.values()))

    def dual(self) -> float:
        return self.c[self.basic] / self.a[self.basic]

    def reduced_cost(self, j: int) -> float:
        return self.c[j] - self.dual() * self.a[j]

    def is_dual_feasible(self, tol: float = FEAS_TOL) -> bool:
        for j in range(len(self.a)):
            if j == self.basic:
                continue
            d = self.reduced_cost(j)
            if self.status[j] == AT_LOWER and d > tol:
                return False
            if self.status[j] == AT_UPPER and d < -tol:
                return False
        return True


def _snap(x: float, upper: float) -> float:
    """Pull values that strayed marginally outside the box back onto a bound.

    Interior values pass through untouched, so tiny legitimate allocations
    survive; anything beyond tolerance is an internal error.
    """
    if -FEAS_TOL <= x < 0.0:
        return 0.0
    if upper < x <= upper + FEAS_TOL:
        return upper
    if x < -FEAS_TOL or x > upper + FEAS_TOL:
        raise ArithmeticError(f"basic value {x} escaped [0, {upper}]")
    return x


def _phase1(lp: PolicyLp, budget: float) -> Tableau:
    """Deterministic index-order fill producing a primal-feasible tableau."""
    a = lp.row
    n = lp.n_vars
    status = [AT_LOWER] * n
    remaining = budget
    basic = 0
    for j in range(n):
        if remaining <= FEAS_TOL:
            basic = j if j < n else n - 1
            break
        step = a[j] * 1.0
        if step <= remaining + FEAS_TOL and j < n - 1:
            status[j] = AT_UPPER
            remaining -= step
            basic = j + 1
        else:
            basic = j
            remaining = 0.0
            break
    t = Tableau(a=a, c=lp.objective, upper=(1.0,) * n, rhs=budget, basic=basic, status=status)
    t.status[basic] = AT_LOWER  # placeholder; basic entry ignored
    _snap(t.basic_value(), 1.0)
    return t


def _phase2(t: Tableau) -> Tableau:
    """Primal simplex to optimality with Bland's rule (lowest eligible index)."""
    n = len(t.a)
    guard = 0
    while True:
        guard += 1
        if guard > 4 * n * n + 16:
            raise ArithmeticError("simplex failed to terminate")
        entering = -1
        sigma = 0
        for j in range(n):
            if j == t.basic:
                continue
            d = t.reduced_cost(j)
            if t.status[j] == AT_LOWER and d > FEAS_TOL:
                entering, sigma = j, +1
                break
            if t.status[j] == AT_UPPER and d < -FEAS_TOL:
                entering, sigma = j, -1
                break
        if entering < 0:
            return t
        coef = t.a[entering] / t.a[t.basic]
        drift = -sigma * coef  # d(basic)/d(step in entering direction)
        x_b = t.basic_value()
        t_enter = t.upper[entering]
        if drift < 0:
            t_basic = x_b / (-drift)
        else:
            t_basic = (t.upper[t.basic] - x_b) / drift
        if t_basic < t_enter - FEAS_TOL:
            # Basic variable leaves at the bound it hit; entering becomes basic.
            leave_to = AT_LOWER if drift < 0 else AT_UPPER
            old_basic = t.basic
            t.status[old_basic] = leave_to
            t.basic = entering
            t.status[entering] = AT_LOWER
            _snap(t.basic_value(), t.upper[entering])
        else:
            # Bound flip: entering crosses to its other bound, basis unchanged.
            t.status[entering] = AT_UPPER if sigma > 0 else AT_LOWER
            _snap(t.basic_value(), t.upper[t.basic])


def _solve_tableau(lp: PolicyLp, v: float) -> Tableau:
    if not (-FEAS_TOL <= v <= lp.budget_base + FEAS_TOL):
        raise ValueError(
            f"residual target {v} outside [0, {lp.budget_base}]"
        )
    budget = lp.budget_base - v
    if budget > lp.max_spend + FEAS_TOL:
        raise Infeasible(
            f"budget {budget} exceeds the instance's maximum spend {lp.max_spend}"
        )
    return _phase2(_phase1(lp, budget))


def _extract(lp: PolicyLp, t: Tableau) -> OptResult:
    xs = t.values()
    xs[t.basic] = _snap(xs[t.basic], t.upper[t.basic])
    return OptResult(
        utility=sum(c * x for c, x in zip(t.c, xs)),
        alphas=tuple(xs[: lp.n_policies]),
        delta=xs[lp.n_policies],
    )


def solve_for_v(lp: PolicyLp, v: float) -> OptResult:
    """Optimal controls when the slot must leave residual ``v`` unspent.

    Raises :class:`Infeasible` when the implied spend ``X - v`` exceeds the
    instance's total absorbing capacity (too much energy to burn), rather
    than clamping silently.
    """
    return _extract(lp, _solve_tableau(lp, v))


def _dual_pivot(t: Tableau, violated_low: bool) -> None:
    """One dual-simplex basis exchange.

    The basic variable leaves at the bound it hit; the entering column comes
    from the dual ratio test, which for this structure is the bound-pinned
    variable with the extreme utility-per-cost (smallest among upper-pinned
    when the rhs shrank, largest among lower-pinned when it grew), lowest
    index on ties.
    """
    best = -1
    best_ratio = math.inf
    for j in range(len(t.a)):
        if j == t.basic:
            continue
        # A decreasing rhs must be absorbed by a variable stepping down
        # from its upper bound (and symmetrically for increases).
        eligible = t.status[j] == (AT_UPPER if violated_low else AT_LOWER)
        if not eligible:
            continue
        ratio = t.c[j] / t.a[j]
        key = ratio if violated_low else -ratio
        if key < best_ratio - FEAS_TOL:
            best, best_ratio = j, key
    if best < 0:
        raise PrimalInfeasible("no entering column: rhs unreachable from this basis")
    old = t.basic
    t.status[old] = AT_LOWER if violated_low else AT_UPPER
    t.basic = best
    t.status[best] = AT_LOWER


def dual_simplex_reoptimize(t: Tableau, lambda_hat: float) -> Tableau:
    """Advance the tableau's rhs by ``lambda_hat`` along V and repair the basis.

    Precondition: ``t`` is optimal (dual-feasible) for its current rhs. The
    perturbation moves the budget by ``lambda_hat * rhs_dir``; any basic
    variable pushed past a bound leaves the basis via :func:`_dual_pivot`.
    Returns ``t`` unchanged when no basic variable is displaced.
    """
    if lambda_hat < 0:
        raise ValueError("perturbation must be non-negative")
    t.rhs += lambda_hat * t.rhs_dir
    guard = 0
    while True:
        guard += 1
        if guard > 4 * len(t.a) + 16:
            raise ArithmeticError("dual simplex failed to terminate")
        x_b = t.basic_value()
        if -FEAS_TOL <= x_b <= t.upper[t.basic] + FEAS_TOL:
            return t
        _dual_pivot(t, violated_low=x_b < -FEAS_TOL)


@dataclass(frozen=True)
class TradeoffCurve:
    """Piecewise-linear optimal utility versus residual energy.

    ``breakpoints`` hold ascending (V, U) pairs; ``controls[i]`` are the
    (alphas, delta) realizing breakpoint i; ``intervals`` lists the V span
    of each optimal basis between consecutive breakpoints.
    """

    breakpoints: tuple[tuple[float, float], ...]
    controls: tuple[tuple[tuple[float, ...], float], ...] = field(repr=False)
    intervals: tuple[tuple[float, float], ...] = field(repr=False)

    @property
    def v_lo(self) -> float:
        return self.breakpoints[0][0]

    @property
    def v_hi(self) -> float:
        return self.breakpoints[-1][0]

    def csv_rows(self) -> list[list[str]]:
        n_alpha = len(self.controls[0][0]) if self.controls else 0
        header = ["v_microjoules", "u"] + [f"alpha_{i + 1}" for i in range(n_alpha)] + ["delta"]
        rows = [header]
        for (v, u), (alphas, delta) in zip(self.breakpoints, self.controls):
            rows.append([repr(v), repr(u)] + [repr(a) for a in alphas] + [repr(delta)])
        return rows


def parametric_sweep(lp: PolicyLp, v_lo: float, v_hi: float) -> TradeoffCurve:
    """Trace the optimal curve over residual targets ``[v_lo, v_hi]``.

    Starts from the optimum at ``v_lo`` and repeatedly finds the largest
    perturbation the current basis survives, emitting a breakpoint and
    performing a dual-simplex update at each basis change.
    """
    if not (-FEAS_TOL <= v_lo <= v_hi <= lp.budget_base + FEAS_TOL):
        raise ValueError(
            f"sweep range [{v_lo}, {v_hi}] invalid for budget base {lp.budget_base}"
        )
    t = _solve_tableau(lp, v_lo)
    bps: list[tuple[float, float]] = []
    controls: list[tuple[tuple[float, ...], float]] = []
    intervals: list[tuple[float, float]] = []

    def emit(v: float) -> None:
        res = _extract(lp, t)
        if bps and abs(bps[-1][0] - v) <= FEAS_TOL:
            return
        bps.append((v, res.utility))
        controls.append((res.alphas, res.delta))

    emit(v_lo)
    cur_v = v_lo
    guard = 0
    while cur_v < v_hi - FEAS_TOL:
        guard += 1
        if guard > 8 * lp.n_vars + 32:
            raise ArithmeticError("parametric sweep failed to terminate")
        drift = t.rhs_dir / t.a[t.basic]  # d(basic)/dV
        x_b = t.basic_value()
        if drift < -FEAS_TOL:
            lam = x_b / (-drift)
        elif drift > FEAS_TOL:
            lam = (t.upper[t.basic] - x_b) / drift
        else:
            lam = math.inf
        if cur_v + lam >= v_hi - FEAS_TOL:
            # Current basis survives to the end of the range.
            t.rhs += (v_hi - cur_v) * t.rhs_dir
            intervals.append((cur_v, v_hi))
            cur_v = v_hi
            emit(v_hi)
            break
        next_v = cur_v + lam
        t.rhs += lam * t.rhs_dir
        if lam > FEAS_TOL:
            intervals.append((cur_v, next_v))
        emit(next_v)
        # The basis interval ends here: exchange the pinned basic variable
        # even though the boundary point itself is still feasible.
        try:
            _dual_pivot(t, violated_low=drift < 0)
        except PrimalInfeasible as exc:
            raise Infeasible(f"sweep infeasible beyond V={next_v}: {exc}") from exc
        cur_v = next_v
    return TradeoffCurve(
        breakpoints=tuple(bps), controls=tuple(controls), intervals=tuple(intervals)
    )


def evaluate_curve(curve: TradeoffCurve, v: float) -> float:
    """Interpolate the utility at ``v``; exact at breakpoints."""
    if v < curve.v_lo - FEAS_TOL or v > curve.v_hi + FEAS_TOL:
        raise OutOfDomain(f"{v} outside [{curve.v_lo}, {curve.v_hi}]")
    vs = [bp[0] for bp in curve.breakpoints]
    if len(vs) == 1:
        return curve.breakpoints[0][1]
    i = bisect_right(vs, v) - 1
    if i < 0:
        i = 0
    if i >= len(vs) - 1:
        i = len(vs) - 2
    (v0, u0), (v1, u1) = curve.breakpoints[i], curve.breakpoints[i + 1]
    if v1 == v0:
        return u0
    w = (v - v0) / (v1 - v0)
    return u0 + w * (u1 - u0)


def greedy_oracle(lp: PolicyLp, v: float) -> OptResult:
    """Independent optimum via fractional-knapsack fill (tests only).

    Variables are filled in descending utility-per-microjoule order until
    the spend ``X - v`` is exhausted; an exchange argument shows this is
    optimal for the single-constraint box-bounded structure.
    """
    if not (-FEAS_TOL <= v <= lp.budget_base + FEAS_TOL):
        raise ValueError(f"residual target {v} outside [0, {lp.budget_base}]")
    budget = lp.budget_base - v
    costs = lp.row
    gains = lp.objective
    if budget > lp.max_spend + FEAS_TOL:
        raise Infeasible(
            f"budget {budget} exceeds the instance's maximum spend {lp.max_spend}"
        )
    order = sorted(range(len(costs)), key=lambda j: (-(gains[j] / costs[j]), j))
    xs = [0.0] * len(costs)
    remaining = budget
    for j in order:
        if remaining <= 0:
            break
        take = min(1.0, remaining / costs[j])
        xs[j] = take
        remaining -= take * costs[j]
    return OptResult(
        utility=sum(g * x for g, x in zip(gains, xs)),
        alphas=tuple(xs[: lp.n_policies]),
        delta=xs[lp.n_policies],
    )
