from datetime import date

import numpy as np
import pytest

from discount_kernel.core.errors import InputError
from discount_kernel.services.data_service import (
    BondQuote,
    SyntheticSpec,
    generate_synthetic,
    ingest_csv,
    quotes_to_systems,
    write_quotes_csv,
)

HEADER = "quote_date,maturity_date,coupon_rate,frequency,clean_price,face"
ROWS = [
    "2021-01-15,2023-01-15,0.04,2,101.5,100",
    "2021-01-15,2021-07-15,0,2,99.8,",
    "2021-01-18,2023-01-15,0.04,2,101.4,100",
    "2021-13-01,2023-01-15,0.04,2,101.4,100",
    "2021-01-18,2022-01-18,0.01,2,-5,100",
    "2021-01-15,2023-01-15,0.04,2,101.6,100",
]


def write_csv(path, rows):
    path.write_text("\n".join([HEADER, *rows]) + "\n")
    return path


def test_two_year_semiannual_coupon_bond():
    quote = BondQuote(date(2021, 1, 15), date(2023, 1, 15), 0.04, 2, 101.5)
    tenors, amounts = quote.cashflows()
    np.testing.assert_allclose(amounts, [2.0, 2.0, 2.0, 102.0])
    np.testing.assert_allclose(tenors, [0.5, 1.0, 1.5, 2.0], atol=0.01)
    assert np.all(np.diff(tenors) > 0)


def test_zero_coupon_bond_has_one_cashflow():
    quote = BondQuote(date(2021, 1, 15), date(2021, 7, 15), 0.0, 2, 99.8)
    tenors, amounts = quote.cashflows()
    np.testing.assert_allclose(amounts, [100.0])
    assert tenors[0] == pytest.approx(181 / 365)
    assert quote.dirty_price == pytest.approx(99.8)


def test_accrued_interest():
    on_coupon_date = BondQuote(date(2021, 1, 15), date(2023, 1, 15), 0.04, 2, 101.5)
    assert on_coupon_date.accrued == 0.0
    assert on_coupon_date.dirty_price == 101.5

    mid_period = BondQuote(date(2021, 4, 15), date(2023, 1, 15), 0.04, 2, 101.5)
    assert mid_period.accrued == pytest.approx(2.0 * 90 / 181)
    assert mid_period.dirty_price == pytest.approx(101.5 + 2.0 * 90 / 181)


def test_annual_coupons_and_face():
    quote = BondQuote(date(2021, 3, 1), date(2026, 3, 1), 0.03, 1, 98.0, face=1000.0)
    _, amounts = quote.cashflows()
    np.testing.assert_allclose(amounts, [30.0] * 4 + [1030.0])
    assert quote.dirty_price == pytest.approx(980.0)


def test_cashflow_conservation(rng):
    for _ in range(20):
        years = int(rng.integers(1, 30))
        coupon = float(rng.uniform(0.0, 0.08))
        quote = BondQuote(date(2021, 6, 30), date(2021 + years, 6, 30), coupon, 2, 100.0)
        _, amounts = quote.cashflows()
        assert amounts.sum() == pytest.approx(100.0 + coupon * 100.0 * years, abs=1e-9)


@pytest.mark.parametrize(
    "kwargs,reason",
    [
        ({"maturity_date": date(2021, 1, 1)}, "maturity"),
        ({"maturity_date": date(2071, 1, 1)}, "beyond"),
        ({"frequency": 4}, "frequency"),
        ({"clean_price": 0.0}, "nonpositive price"),
        ({"coupon_rate": -0.01}, "negative coupon"),
    ],
)
def test_bond_quote_validation(kwargs, reason):
    fields = dict(quote_date=date(2021, 1, 15), maturity_date=date(2031, 1, 15), coupon_rate=0.02, frequency=2, clean_price=99.0)
    fields.update(kwargs)
    with pytest.raises(InputError, match=reason):
        BondQuote(**fields)


def test_ingest_builds_one_system_per_day(tmp_path):
    result = ingest_csv(write_csv(tmp_path / "quotes.csv", ROWS))

    assert [s.quote_date for s in result.systems] == ["2021-01-15", "2021-01-18"]
    first = result.systems[0]
    # canonical order: the bill maturing 2021-07-15 first; its tenor merges with the first coupon date
    np.testing.assert_allclose(first.cashflows, [[100.0, 0.0, 0.0, 0.0], [2.0, 2.0, 2.0, 102.0]])
    np.testing.assert_allclose(first.prices, [99.8, 101.5])
    np.testing.assert_array_equal(first.obs_weights, [1.0, 1.0])
    assert np.all(np.diff(first.tenors) > 0)

    second = result.systems[1]
    assert second.prices[0] == pytest.approx(101.4 + 2.0 * 3 / 181)


def test_ingest_reports_rejects(tmp_path):
    result = ingest_csv(write_csv(tmp_path / "quotes.csv", ROWS))
    assert list(result.rejects.columns) == ["line", "reason"]
    assert result.rejects["line"].tolist() == [5, 6, 7]
    reasons = dict(zip(result.rejects["line"], result.rejects["reason"]))
    assert "nonpositive price" in reasons[6]
    assert reasons[7] == "duplicate bond-date row"
    assert len(result.quotes) == 3


def test_ingest_is_independent_of_row_order(tmp_path):
    forward = ingest_csv(write_csv(tmp_path / "a.csv", ROWS))
    backward = ingest_csv(write_csv(tmp_path / "b.csv", ROWS[::-1]))
    assert len(forward.systems) == len(backward.systems)
    for a, b in zip(forward.systems, backward.systems):
        np.testing.assert_array_equal(a.prices, b.prices)
        np.testing.assert_array_equal(a.cashflows, b.cashflows)
        np.testing.assert_array_equal(a.tenors, b.tenors)


def test_ingest_zero_coupon_only_file(tmp_path):
    result = ingest_csv(write_csv(tmp_path / "bills.csv", ["2021-01-15,2021-07-15,0,2,99.8,100", "2021-01-15,2022-01-15,0,2,99.5,100"]))
    system = result.systems[0]
    assert np.all(np.count_nonzero(system.cashflows, axis=1) == 1)
    assert result.rejects.empty


def test_ingest_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(InputError, match="empty"):
        ingest_csv(empty)

    header_only = write_csv(tmp_path / "header.csv", [])
    with pytest.raises(InputError, match="no quote rows"):
        ingest_csv(header_only)

    missing = tmp_path / "missing.csv"
    missing.write_text("quote_date,maturity_date\n2021-01-15,2023-01-15\n")
    with pytest.raises(InputError, match="lacks columns"):
        ingest_csv(missing)

    with pytest.raises(InputError, match="no valid quotes"):
        ingest_csv(write_csv(tmp_path / "bad.csv", [ROWS[3], ROWS[4]]))

    with pytest.raises(InputError, match="day count"):
        ingest_csv(write_csv(tmp_path / "ok.csv", ROWS[:1]), day_count="30/360")


def test_written_quotes_ingest_back(tmp_path, small_dataset):
    path = write_quotes_csv(small_dataset.quotes, tmp_path / "quotes.csv")
    result = ingest_csv(path)
    assert len(result.quotes) == len(small_dataset.quotes)
    for a, b in zip(result.systems, small_dataset.systems):
        np.testing.assert_allclose(a.prices, b.prices, rtol=1e-14)
        np.testing.assert_array_equal(a.cashflows, b.cashflows)


def test_quotes_to_systems_rejects_unknown_day_count():
    with pytest.raises(InputError):
        quotes_to_systems([], day_count="ACT/360")


def test_noiseless_synthetic_prices_are_exact(small_dataset):
    for day, system in enumerate(small_dataset.systems):
        np.testing.assert_allclose(system.prices, small_dataset.true_prices(day), rtol=1e-12)
    assert len(small_dataset.systems) == 3
    assert all(s.n_contracts == 12 for s in small_dataset.systems)


def test_synthetic_factors_keep_the_terminal_sum(small_dataset):
    np.testing.assert_allclose(small_dataset.daily_coefs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(small_dataset.daily_coefs[0], small_dataset.model.z0)


def test_synthetic_maturity_mix():
    dataset = generate_synthetic(SyntheticSpec(n_days=1, contracts_per_day=40, seed=1))
    maturities = dataset.systems[0].maturities
    assert np.sum(maturities <= 5.5) >= 25
    assert 1 <= np.sum(maturities >= 20.0) <= 6
    assert maturities.max() <= 30.5


def test_synthetic_without_diffusion_repeats_the_curve():
    spec = SyntheticSpec(n_days=4, contracts_per_day=8, sigma_true=((0.0,) * 3,) * 3, seed=2)
    dataset = generate_synthetic(spec)
    assert np.all(dataset.daily_coefs == dataset.daily_coefs[0])
    x = np.linspace(0.0, 30.0, 31)
    np.testing.assert_array_equal(dataset.true_curve(0)(x), dataset.true_curve(3)(x))


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(n_days=3, contracts_per_day=10, price_noise_sd=0.05, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.quotes == b.quotes
    np.testing.assert_array_equal(a.daily_coefs, b.daily_coefs)


def test_synthetic_noise_is_added_to_prices():
    spec = SyntheticSpec(n_days=2, contracts_per_day=30, price_noise_sd=0.05, seed=4)
    dataset = generate_synthetic(spec)
    errors = np.concatenate([s.prices - dataset.true_prices(d) for d, s in enumerate(dataset.systems)])
    assert 0.02 < errors.std() < 0.1


def test_synthetic_spec_validation():
    with pytest.raises(InputError):
        SyntheticSpec(true_rates=(-0.1,), true_z0=(0.5, 0.5))
    with pytest.raises(InputError):
        SyntheticSpec(price_noise_sd=-1.0)
