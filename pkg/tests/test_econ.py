import random

import pytest
from hypothesis import given, settings, strategies as st

from socsim.econ import (BANK, DEFAULT_TAX_SCHEDULE, ConfigurationError, EconError,
                         EconLedger, GOVERNMENT, ISSUE, MonetaryParams, tax_due,
                         taylor_rate)
from socsim.util import round_half_up


def tax_oracle(income, schedule):
    """Bracket-by-bracket recomputation, independent of the implementation."""
    tax = 0
    lower = 0
    for upper, rate in schedule:
        top = income if upper is None else min(income, upper)
        if top > lower:
            tax += round_half_up((top - lower) * rate)
        lower = upper if upper is not None else income
        if upper is None or income <= (upper or income):
            if upper is None or income <= upper:
                break
    return tax


def make_ledger(agents=3, firms=1, agent_cash=100_000, firm_cash=100_000_000):
    led = EconLedger()
    for k in range(firms):
        led.add_firm(f"f{k}", price_cents=1000, wage_cents_per_hour=2000,
                     initial_cents=firm_cash)
    for k in range(agents):
        led.open_account(f"a{k}", agent_cash)
    return led


# -- taxation ------------------------------------------------------------------


def test_zero_income_zero_tax():
    assert tax_due(0) == (0, 0)


def test_flat_single_bracket():
    assert tax_due(100_000, [(None, 0.10)]) == (10_000, 90_000)


def test_two_bracket_example():
    schedule = [(970_000, 0.10), (3_947_500, 0.12)]
    tax, disposable = tax_due(1_000_000, schedule)
    assert tax == 97_000 + 3_600  # 970.00 + 36.00
    assert disposable == 1_000_000 - 100_600


def test_tax_oracle_equivalence_on_random_incomes():
    rng = random.Random(5)
    for _ in range(1000):
        income = rng.randrange(0, 60_000_000)
        assert tax_due(income)[0] == tax_oracle(income, DEFAULT_TAX_SCHEDULE)


def test_malformed_schedules_rejected():
    with pytest.raises(ConfigurationError):
        tax_due(100, [])
    with pytest.raises(ConfigurationError):
        tax_due(100, [(None, 0.1), (50, 0.2)])
    with pytest.raises(ConfigurationError):
        tax_due(100, [(100, 0.2), (50, 0.3), (None, 0.4)])
    with pytest.raises(ConfigurationError):
        tax_due(100, [(None, 1.5)])


@given(st.integers(0, 10_000_000), st.integers(0, 1_000_000))
@settings(max_examples=200)
def test_tax_monotone(income, bump):
    t1, d1 = tax_due(income)
    t2, d2 = tax_due(income + bump)
    assert t2 >= t1
    assert d2 >= d1


# -- Taylor rule ----------------------------------------------------------------


def test_taylor_on_target():
    p = MonetaryParams(natural_rate=0.01, inflation_target=0.02,
                       alpha_inflation=0.5, alpha_output=0.5)
    assert taylor_rate(0.02, 0.0, p) == pytest.approx(0.03, abs=1e-15)


def test_taylor_above_target():
    p = MonetaryParams(natural_rate=0.01, inflation_target=0.02,
                       alpha_inflation=0.5, alpha_output=0.5)
    assert taylor_rate(0.04, 0.0, p) == pytest.approx(0.06, abs=1e-15)


def test_taylor_zero_lower_bound():
    p = MonetaryParams()
    assert taylor_rate(-0.10, 0.0, p) == 0.0


def test_taylor_monotone_in_inputs():
    p = MonetaryParams()
    assert taylor_rate(0.03, 0.0, p) > taylor_rate(0.02, 0.0, p)
    assert taylor_rate(0.02, 0.1, p) > taylor_rate(0.02, 0.0, p)


# -- wages ------------------------------------------------------------------------


def test_zero_propensity_pays_nothing():
    led = make_ledger()
    payments, scaled = led.settle_wages("f0", [("a0", 0.0)])
    assert payments == [("a0", 0)]
    assert not scaled


def test_full_propensity_monthly_wage():
    led = make_ledger()
    payments, _ = led.settle_wages("f0", [("a0", 1.0)])
    assert payments == [("a0", 336_000)]  # 168h at 20.00/h = 3,360.00


def test_two_workers_conserve_firm_debit():
    led = make_ledger()
    before = led.accounts["f0"]
    payments, _ = led.settle_wages("f0", [("a0", 0.5), ("a1", 0.5)])
    assert before - led.accounts["f0"] == sum(g for _, g in payments)


def test_insolvent_firm_scales_payroll_exactly():
    led = EconLedger()
    led.add_firm("f0", 1000, 2000, initial_cents=100_001)
    led.open_account("a0", 0)
    led.open_account("a1", 0)
    payments, scaled = led.settle_wages("f0", [("a0", 1.0), ("a1", 1.0)])
    assert scaled
    assert led.accounts["f0"] == 0
    assert sum(g for _, g in payments) == 100_001


def test_negative_propensity_rejected():
    led = make_ledger()
    with pytest.raises(EconError):
        led.settle_wages("f0", [("a0", -0.1)])


# -- interest -----------------------------------------------------------------------


def test_interest_zero_balance():
    led = make_ledger(agent_cash=0)
    credits = led.accrue_interest(["a0"])
    assert credits == {"a0": 0}


def test_interest_yearly_amount():
    led = make_ledger(agent_cash=1_000_000)
    led.interest_rate = 0.03
    credits = led.accrue_interest(["a0"])
    assert credits["a0"] == 30_000  # 300.00 on 10,000.00


def test_interest_mints_exactly():
    led = make_ledger(agents=4, agent_cash=123_457)
    before = led.total_balance()
    credits = led.accrue_interest()
    assert led.minted_total == sum(credits.values())
    assert led.total_balance() - before == led.minted_total
    assert led.conservation_error() == 0


# -- consumption -----------------------------------------------------------------------


def test_zero_propensity_no_purchase():
    led = make_ledger()
    assert led.consume("a0", 0.0, 100_000, random.Random(0)) is None


def test_single_firm_gets_whole_budget():
    led = make_ledger()
    firm, spent = led.consume("a0", 0.5, 10_000, random.Random(0))
    assert firm == "f0"
    assert spent == 5_000


def test_budget_capped_by_cash():
    led = make_ledger(agent_cash=1_000)
    _, spent = led.consume("a0", 1.0, 1_000_000, random.Random(0))
    assert spent == 1_000


def test_identical_firms_split_evenly():
    led = make_ledger(firms=2, agent_cash=10_000_000_000)
    rng = random.Random(42)
    n = 4000
    hits = {"f0": 0, "f1": 0}
    for _ in range(n):
        firm, _ = led.consume("a0", 0.001, 1_000, rng)
        hits[firm] += 1
    sigma = (n * 0.25) ** 0.5
    assert abs(hits["f0"] - n / 2) <= 3 * sigma


# -- price and wage adjustment ------------------------------------------------------------


def test_balanced_market_leaves_prices():
    led = make_ledger()
    assert led.adjust_price_wage("f0", 100, 100) == (1000, 2000)


def test_excess_demand_clamped_to_five_percent():
    led = make_ledger()
    price, wage = led.adjust_price_wage("f0", 200, 100)  # raw +20% clamps to +5%
    assert (price, wage) == (1050, 2100)


def test_zero_demand_clamped_down():
    led = make_ledger()
    price, wage = led.adjust_price_wage("f0", 0, 100)
    assert (price, wage) == (950, 1900)


# -- UBI ---------------------------------------------------------------------------------


def test_ubi_no_recipients():
    led = make_ledger()
    assert led.pay_ubi(100_000, []) == 0


def test_ubi_arithmetic_and_deficit():
    led = make_ledger(agents=100)
    led.pay_ubi(100_000, [f"a{k}" for k in range(100)])
    assert led.accounts[GOVERNMENT] == -10_000_000


def test_ubi_conserves_total():
    led = make_ledger(agents=10)
    before = led.total_balance()
    led.pay_ubi(100_000, [f"a{k}" for k in range(10)])
    assert led.total_balance() == before


# -- indicators -----------------------------------------------------------------------------


def test_indicators_idle_period_zeros():
    led = make_ledger()
    ind = led.compile_indicators()
    assert ind.real_gdp_cents == 0
    assert ind.per_capita_consumption_cents == 0
    assert ind.tax_revenue_cents == 0


def test_real_gdp_uses_base_prices():
    led = EconLedger()
    led.add_firm("f0", price_cents=200, wage_cents_per_hour=2000,
                 initial_cents=1_000_000)
    led.open_account("a0", 1_000_000)
    led.consume("a0", 0.002, 1_000_000, random.Random(0))  # 10 units at 2.00
    led.adjust_price_wage("f0", 1000, 0)  # price moves after the sale
    ind = led.compile_indicators()
    assert ind.real_gdp_cents == 2_000  # 10 units x base price 2.00 = 20.00


def test_per_capita_consumption_definition():
    led = make_ledger(agents=4, agent_cash=100_000)
    led.consume("a0", 0.5, 20_000, random.Random(0))
    ind = led.compile_indicators(population=4)
    assert ind.per_capita_consumption_cents == pytest.approx(10_000 / 4)


# -- conservation under randomized operation sequences ----------------------------------------


def test_money_conservation_randomized():
    rng = random.Random(99)
    led = EconLedger()
    agents = [f"a{k}" for k in range(500)]
    firms = [f"f{k}" for k in range(5)]
    for f in firms:
        led.add_firm(f, price_cents=rng.randrange(500, 3000),
                     wage_cents_per_hour=rng.randrange(1000, 4000),
                     initial_cents=50_000_000)
    for a in agents:
        led.open_account(a, rng.randrange(0, 1_000_000))

    for _ in range(1000):
        op = rng.randrange(6)
        if op == 0:
            workers = [(rng.choice(agents), rng.random()) for _ in range(rng.randrange(1, 8))]
            led.settle_wages(rng.choice(firms), workers)
        elif op == 1:
            led.withhold_tax(rng.choice(agents), rng.randrange(0, 2_000_000))
        elif op == 2:
            led.consume(rng.choice(agents), rng.random(),
                        rng.randrange(0, 500_000), rng)
        elif op == 3:
            led.pay_ubi(100_000, rng.sample(agents, rng.randrange(1, 50)))
        elif op == 4:
            led.accrue_interest(rng.sample(agents, rng.randrange(1, 100)),
                                period_years=1 / 12)
        else:
            led.adjust_price_wage(rng.choice(firms), rng.random() * 100,
                                  rng.random() * 100)
    assert led.conservation_error() == 0
    for a in agents:
        assert led.accounts[a] >= 0
    for f in firms:
        assert led.accounts[f] >= 0
