"""Economic settlement system: integer-cent account books for agents, firms,
government, and the bank, plus progressive taxation, Taylor-rule interest,
price/wage adjustment, UBI transfers, and macro indicator compilation.

Every amount is an integer number of cents and every rounding is half-up per
component, so money conservation can be asserted exactly: the sum of all
accounts minus the initial total always equals minted_total, and only
interest accrual mints.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .util import round_half_up

GOVERNMENT = "government"
BANK = "bank"
ISSUE = "central-issue"

H_MAX_MONTH = 168.0  # working hours per month at full propensity

# 2018-style single-filer progressive schedule: (upper bound cents, marginal rate).
DEFAULT_TAX_SCHEDULE = [
    (970_000, 0.10),
    (3_947_500, 0.12),
    (8_420_000, 0.22),
    (16_072_500, 0.24),
    (20_410_000, 0.32),
    (51_030_000, 0.35),
    (None, 0.37),
]

PRICE_ADJUST_ALPHA = 0.2
PRICE_ADJUST_CLAMP = 0.05  # at most +-5% per period


class EconError(Exception):
    pass


class InsufficientFunds(EconError):
    pass


class ConfigurationError(EconError):
    pass


@dataclass(frozen=True)
class MonetaryParams:
    natural_rate: float = 0.01
    inflation_target: float = 0.02
    alpha_inflation: float = 0.5
    alpha_output: float = 0.5

    def __post_init__(self):
        if self.alpha_inflation < 0 or self.alpha_output < 0:
            raise ConfigurationError("Taylor coefficients must be non-negative")


@dataclass
class MacroIndicators:
    period: int
    real_gdp_cents: int
    avg_work_hours: float
    per_capita_consumption_cents: float
    tax_revenue_cents: int
    mean_interest_cents: float
    government_deficit_cents: int
    population: int


@dataclass
class Firm:
    id: str
    price_cents: int
    wage_cents_per_hour: int
    inventory: float = 0.0
    productivity: float = 1.0   # units produced per labor hour
    sold_units: float = 0.0
    demand_units: float = 0.0
    supplied_units: float = 0.0


def tax_due(income_cents: int, schedule=None) -> tuple[int, int]:
    """Progressive tax on one income: (tax, disposable), half-up per bracket."""
    if income_cents < 0:
        raise EconError("income must be non-negative")
    schedule = DEFAULT_TAX_SCHEDULE if schedule is None else schedule
    _validate_schedule(schedule)
    tax = 0
    lower = 0
    for upper, rate in schedule:
        top = income_cents if upper is None else min(income_cents, upper)
        if top > lower:
            tax += round_half_up((top - lower) * rate)
        if upper is None or income_cents <= upper:
            break
        lower = upper
    return tax, income_cents - tax


def _validate_schedule(schedule) -> None:
    if not schedule:
        raise ConfigurationError("empty tax schedule")
    prev = 0
    for i, (upper, rate) in enumerate(schedule):
        if rate < 0 or rate >= 1:
            raise ConfigurationError(f"bracket {i} rate {rate} out of range")
        if upper is None:
            if i != len(schedule) - 1:
                raise ConfigurationError("open bracket must be last")
        else:
            if upper <= prev:
                raise ConfigurationError("bracket bounds must be increasing")
            prev = upper


def taylor_rate(inflation: float, output_gap: float, params: MonetaryParams) -> float:
    """Annual policy rate with a zero lower bound."""
    r = (params.natural_rate + inflation
         + params.alpha_inflation * (inflation - params.inflation_target)
         + params.alpha_output * output_gap)
    return max(0.0, r)


class EconLedger:
    def __init__(self, tax_schedule=None, monetary: MonetaryParams | None = None,
                 interest_rate: float = 0.03):
        self._lock = threading.RLock()
        self.accounts: dict[str, int] = {GOVERNMENT: 0, BANK: 0, ISSUE: 0}
        self.firms: dict[str, Firm] = {}
        self.tax_schedule = tax_schedule or DEFAULT_TAX_SCHEDULE
        _validate_schedule(self.tax_schedule)
        self.monetary = monetary or MonetaryParams()
        self.interest_rate = interest_rate
        self.minted_total = 0
        self._initial_total = 0
        self._base_prices: dict[str, int] = {}
        self.period = 0
        self._gdp_history: list[int] = []
        self.reads = 0  # coarse counter for interaction accounting
        self._reset_period_counters()

    def _reset_period_counters(self) -> None:
        self._hours: dict[str, float] = {}
        self._consumption_cents = 0
        self._tax_cents = 0
        self._interest: dict[str, int] = {}
        self._sold: dict[str, float] = {}

    # -- accounts -------------------------------------------------------------

    def open_account(self, account_id: str, initial_cents: int = 0) -> None:
        with self._lock:
            if account_id in self.accounts:
                raise EconError(f"account {account_id} already exists")
            self.accounts[account_id] = initial_cents
            self._initial_total += initial_cents

    def add_firm(self, firm_id: str, price_cents: int, wage_cents_per_hour: int,
                 initial_cents: int = 0, productivity: float = 1.0) -> Firm:
        with self._lock:
            self.open_account(firm_id, initial_cents)
            firm = Firm(id=firm_id, price_cents=price_cents,
                        wage_cents_per_hour=wage_cents_per_hour,
                        productivity=productivity)
            self.firms[firm_id] = firm
            self._base_prices[firm_id] = price_cents
            return firm

    def balance(self, account_id: str) -> int:
        self.reads += 1
        return self.accounts[account_id]

    def total_balance(self) -> int:
        """Sum of all circulating accounts; the issue account is the mint's
        liability ledger and sits outside the conserved total."""
        return sum(v for k, v in self.accounts.items() if k != ISSUE)

    def conservation_error(self) -> int:
        """Zero iff money was conserved (minting accounted separately)."""
        return self.total_balance() - self._initial_total - self.minted_total

    def _transfer(self, src: str, dst: str, amount: int) -> None:
        if amount < 0:
            raise EconError("negative transfer")
        if src not in (GOVERNMENT, ISSUE, BANK) and self.accounts[src] < amount:
            raise InsufficientFunds(f"{src} short by {amount - self.accounts[src]}")
        self.accounts[src] -= amount
        self.accounts[dst] += amount

    # -- wages and work ---------------------------------------------------------

    def settle_wages(self, firm_id: str, workers: list[tuple[str, float]],
                     h_max: float = H_MAX_MONTH):
        """Pay each worker w * h_max hours at the firm's wage rate.

        When the firm cannot cover payroll, payments are scaled down
        proportionally and the result is flagged. Returns (payments, scaled).
        """
        with self._lock:
            firm = self.firms[firm_id]
            for _, w in workers:
                if w < 0 or w > 1:
                    raise EconError(f"work propensity {w} outside [0, 1]")
            grosses = []
            for agent_id, w in workers:
                hours = w * h_max
                grosses.append((agent_id, hours,
                                round_half_up(hours * firm.wage_cents_per_hour)))
            payroll = sum(g for _, _, g in grosses)
            scaled = False
            if payroll > self.accounts[firm_id] and payroll > 0:
                # Proportional scaling, apportioned by largest remainder so the
                # scaled payroll sums exactly to the available balance.
                scaled = True
                balance = self.accounts[firm_id]
                shares = [(a, h, g * balance / payroll) for a, h, g in grosses]
                floors = [(a, h, int(s)) for a, h, s in shares]
                leftover = balance - sum(f for _, _, f in floors)
                order = sorted(range(len(shares)),
                               key=lambda i: (-(shares[i][2] - floors[i][2]), shares[i][0]))
                bump = set(order[:leftover])
                grosses = [(a, h, f + (1 if i in bump else 0))
                           for i, (a, h, f) in enumerate(floors)]
            payments = []
            for agent_id, hours, gross in grosses:
                self._transfer(firm_id, agent_id, gross)
                self._hours[agent_id] = self._hours.get(agent_id, 0.0) + hours
                firm.inventory += hours * firm.productivity
                firm.supplied_units += hours * firm.productivity
                payments.append((agent_id, gross))
            return payments, scaled

    def withhold_tax(self, agent_id: str, income_cents: int) -> tuple[int, int]:
        """Levy progressive income tax on an agent's earnings."""
        with self._lock:
            tax, disposable = tax_due(income_cents, self.tax_schedule)
            tax = min(tax, self.accounts[agent_id])
            self._transfer(agent_id, GOVERNMENT, tax)
            self._tax_cents += tax
            return tax, disposable

    # -- interest ----------------------------------------------------------------

    def accrue_interest(self, savers: list[str] | None = None,
                        period_years: float = 1.0) -> dict[str, int]:
        """Credit balance * rate to each savings account from the issue account.

        This is the only operation that changes the tracked money total;
        minted_total records exactly what was created.
        """
        with self._lock:
            rate = self.interest_rate * period_years
            if savers is None:
                savers = [a for a in self.accounts
                          if a not in (GOVERNMENT, BANK, ISSUE) and a not in self.firms]
            credits = {}
            for account in savers:
                credit = round_half_up(self.accounts[account] * rate)
                if credit:
                    self._transfer(ISSUE, account, credit)
                    self.minted_total += credit
                credits[account] = credit
                self._interest[account] = self._interest.get(account, 0) + credit
            return credits

    def set_rate_from_taylor(self, inflation: float, output_gap: float) -> float:
        with self._lock:
            self.interest_rate = taylor_rate(inflation, output_gap, self.monetary)
            return self.interest_rate

    def output_gap(self) -> float:
        """Relative deviation of the latest real GDP from its trailing mean."""
        if len(self._gdp_history) < 2:
            return 0.0
        trailing = self._gdp_history[:-1]
        mean = sum(trailing) / len(trailing)
        if mean == 0:
            return 0.0
        return (self._gdp_history[-1] - mean) / mean

    # -- consumption ---------------------------------------------------------------

    def consume(self, agent_id: str, propensity: float, month_income_cents: int,
                rng, firm_weights: dict[str, float] | None = None) -> tuple[str, int] | None:
        """Spend propensity * monthly income (capped by cash) at one firm.

        Firms are chosen gravity-style: weight 1/price by default, optionally
        scaled by a caller-supplied proximity factor per firm.
        """
        if not 0 <= propensity <= 1:
            raise EconError(f"consumption propensity {propensity} outside [0, 1]")
        with self._lock:
            budget = min(round_half_up(propensity * month_income_cents),
                         self.accounts[agent_id])
            if budget <= 0 or not self.firms:
                return None
            ids = sorted(self.firms)
            weights = []
            for fid in ids:
                w = 1.0 / max(self.firms[fid].price_cents, 1)
                if firm_weights:
                    w *= firm_weights.get(fid, 1.0)
                weights.append(w)
            total = sum(weights)
            r = rng.random() * total
            acc = 0.0
            chosen = ids[-1]
            for fid, w in zip(ids, weights):
                acc += w
                if r < acc:
                    chosen = fid
                    break
            firm = self.firms[chosen]
            self._transfer(agent_id, chosen, budget)
            units = budget / firm.price_cents
            firm.inventory -= units
            firm.sold_units += units
            firm.demand_units += units
            self._sold[chosen] = self._sold.get(chosen, 0.0) + units
            self._consumption_cents += budget
            return chosen, budget

    # -- price and wage adjustment ----------------------------------------------------

    def adjust_price_wage(self, firm_id: str, demand: float, supply: float) -> tuple[int, int]:
        """Multiplicative update toward excess demand, clamped to +-5% per period."""
        if demand < 0 or supply < 0:
            raise EconError("demand and supply must be non-negative")
        with self._lock:
            firm = self.firms[firm_id]
            pressure = PRICE_ADJUST_ALPHA * (demand - supply) / max(supply, 1.0)
            pressure = min(max(pressure, -PRICE_ADJUST_CLAMP), PRICE_ADJUST_CLAMP)
            firm.price_cents = max(1, round_half_up(firm.price_cents * (1.0 + pressure)))
            firm.wage_cents_per_hour = max(
                1, round_half_up(firm.wage_cents_per_hour * (1.0 + pressure)))
            return firm.price_cents, firm.wage_cents_per_hour

    # -- transfers ------------------------------------------------------------------------

    def pay_ubi(self, amount_cents: int, recipients: list[str]) -> int:
        """Unconditional transfer to each recipient; the government may run a deficit."""
        if amount_cents <= 0:
            raise EconError("UBI amount must be positive")
        with self._lock:
            for agent_id in recipients:
                self._transfer(GOVERNMENT, agent_id, amount_cents)
            return amount_cents * len(recipients)

    # -- indicators -------------------------------------------------------------------------

    def compile_indicators(self, population: int | None = None) -> MacroIndicators:
        """Close the current period and report its macro aggregates."""
        with self._lock:
            savers = [a for a in self.accounts
                      if a not in (GOVERNMENT, BANK, ISSUE) and a not in self.firms]
            pop = population if population is not None else len(savers)
            real_gdp = sum(round_half_up(units * self._base_prices[fid])
                           for fid, units in self._sold.items())
            hours = sum(self._hours.values())
            interest_total = sum(self._interest.values())
            ind = MacroIndicators(
                period=self.period,
                real_gdp_cents=real_gdp,
                avg_work_hours=hours / pop if pop else 0.0,
                per_capita_consumption_cents=self._consumption_cents / pop if pop else 0.0,
                tax_revenue_cents=self._tax_cents,
                mean_interest_cents=interest_total / pop if pop else 0.0,
                government_deficit_cents=max(0, -self.accounts[GOVERNMENT]),
                population=pop,
            )
            self._gdp_history.append(real_gdp)
            self.period += 1
            for firm in self.firms.values():
                firm.demand_units = 0.0
                firm.supplied_units = 0.0
            self._reset_period_counters()
            return ind
