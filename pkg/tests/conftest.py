import pytest

from drgrad.data import CENSUS_COLUMNS


def census_row(age="35", marital="Never married", income="- 50000.", **over):
    row = {c: "x" for c in CENSUS_COLUMNS}
    row.update(
        age=age, wage_per_hour="0", capital_gains="0", capital_losses="0", stock_dividends="0",
        num_emp="2", weeks_worked="52", instance_weight="1000.5", year="95",
        marital_stat=marital, income_50k=income, education="Bachelors degree",
    )  # fmt: skip
    row.update(over)
    return ", ".join(row[c] for c in CENSUS_COLUMNS)


@pytest.fixture
def census_dir(tmp_path):
    train = [
        census_row("40", "Married-civilian spouse present", "50000+."),
        census_row("22", "Never married", "- 50000."),
        census_row("58", "Divorced", "- 50000.", education="Masters degree"),
        census_row("31", "Never married", "50000+."),
        "too, short, row",
        census_row("abc"),
    ]
    test = [
        census_row("45", "Never married", "- 50000.", education="Doctorate degree"),
        census_row("19", "Widowed", "50000+."),
    ]
    (tmp_path / "census-income.data").write_text("\n".join(train) + "\n")
    (tmp_path / "census-income.test").write_text("\n".join(test) + "\n")
    return tmp_path


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def record_verdict(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
