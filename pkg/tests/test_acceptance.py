"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line and the summary repeats them."""

import pytest

from conftest import ACCEPTANCE_LINES
from sgmlab.harness.checks import (
    check_ambient_insensitivity,
    check_denoising_identity,
    check_dimension_ordering,
    check_emp_rate,
    check_kl_bound,
    check_learned_score,
    check_linear_gaussian,
    check_multiscale_bound,
    check_ot_oracle,
    check_partition_bounds,
    check_pipeline_rate,
    check_score_derivatives,
)


def report(number, result, budget):
    line = f"[{number:2d}] {result.line()}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert result.passed, line
    assert result.seconds <= budget, f"{line} exceeded {budget}s"


def test_01_ot_oracle():
    report(1, check_ot_oracle(200), 10)


def test_02_score_derivatives():
    report(2, check_score_derivatives(100), 30)


def test_03_denoising_identity():
    report(3, check_denoising_identity(100_000), 60)


def test_04_kl_bound():
    report(4, check_kl_bound(10, 100_000), 60)


def test_05_partition_bounds():
    report(5, check_partition_bounds(), 5)


def test_06_linear_gaussian():
    report(6, check_linear_gaussian(256, 10_000), 120)


@pytest.mark.slow
def test_07_emp_rate():
    torus = check_emp_rate("torus", 4, 8, -0.35, -0.15)
    subspace = check_emp_rate("subspace_uniform", 1, 8, -0.65, -0.35)
    both = type(torus)(
        "emp_rate", torus.passed and subspace.passed, torus.value, torus.threshold,
        f"torus {torus.detail}; subspace {subspace.detail}", torus.seconds + subspace.seconds,
    )
    report(7, both, 900)


@pytest.mark.slow
def test_08_ambient_insensitivity():
    report(8, check_ambient_insensitivity(), 900)


@pytest.mark.slow
def test_09_pipeline_rate():
    report(9, check_pipeline_rate(), 1200)


def test_10_learned_score():
    report(10, check_learned_score(), 300)


def test_11_multiscale_bound():
    report(11, check_multiscale_bound(200), 30)


def test_12_dimension_ordering():
    report(12, check_dimension_ordering(), 300)
