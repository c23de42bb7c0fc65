import copy
import math

import pytest

from massdae.bench import (ReferenceConfig, WorkPrecisionRecord, bench_work_precision,
                           format_records_csv, write_records_csv)
from massdae.solvers import NewtonConfig


def by_key(records):
    return {(r.solver, r.control): r for r in records}


def test_reference_against_itself_is_exact(kundur):
    h = 1e-3
    recs = bench_work_precision(kundur, ["trap"], [h], ReferenceConfig(h=h), runs=1, tf=0.3,
                                newton=NewtonConfig(tol=1e-12, max_iter=25))
    assert recs[0].error == 0.0


@pytest.fixture(scope="module")
def short_bench(kundur):
    return bench_work_precision(kundur, ["ie", "trap", "bdf2"], [4e-3, 2e-3],
                                ReferenceConfig(refine=16), runs=2, tf=0.5)


def test_grid_product_and_order(short_bench):
    assert [(r.solver, r.control) for r in short_bench] == [
        ("ie", "h=0.004"), ("ie", "h=0.002"), ("trap", "h=0.004"), ("trap", "h=0.002"),
        ("bdf2", "h=0.004"), ("bdf2", "h=0.002")]
    assert all(r.runs == 2 and r.mean_time_s > 0 and r.error >= 0 for r in short_bench)


def test_trapezoid_halving_ratio(short_bench):
    k = by_key(short_bench)
    ratio = k["trap", "h=0.004"].error / k["trap", "h=0.002"].error
    assert 3.2 <= ratio <= 4.8


def test_implicit_euler_less_accurate(short_bench):
    k = by_key(short_bench)
    for h in ("h=0.004", "h=0.002"):
        assert k["ie", h].error > k["trap", h].error


def test_both_norms_recorded(short_bench):
    for r in short_bench:
        assert r.error <= r.error_2norm


def test_csv_deterministic_without_timing(kundur, short_bench):
    runs = [bench_work_precision(kundur, ["ie", "trap"], [1e-2], ReferenceConfig(refine=4), runs=1,
                                 tf=0.3) for _ in range(2)]
    a, b = (format_records_csv(r, timing=False) for r in runs)
    assert a == b and "mean_time_s" not in a
    header = format_records_csv(short_bench).splitlines()[0].split(",")
    assert header[:7] == ["solver", "control", "error", "mean_time_s", "steps_accepted",
                          "steps_rejected", "newton_iters"]


def test_case_untouched(kundur):
    before = copy.deepcopy(kundur)
    bench_work_precision(kundur, ["trap"], [5e-3], ReferenceConfig(refine=4), runs=1, tf=0.2)
    assert kundur == before


def test_failed_run_is_nan_row(kundur):
    recs = bench_work_precision(kundur, ["ie", "trap"], [0.15], ReferenceConfig(h=0.05), runs=1,
                                tf=0.3, newton=NewtonConfig(tol=1e-14, max_iter=1))
    assert all(math.isnan(r.error) and r.note.startswith("failed") for r in recs)
    assert "nan" in format_records_csv(recs)


def test_parallel_matches_serial(kundur):
    kw = dict(reference=ReferenceConfig(refine=4), runs=1, tf=0.2)
    a = bench_work_precision(kundur, ["ie", "trap"], [1e-2], **kw)
    b = bench_work_precision(kundur, ["ie", "trap"], [1e-2], parallel=True, **kw)
    assert [r.error for r in a] == [r.error for r in b]


def test_record_validation_and_csv_file(tmp_path):
    with pytest.raises(ValueError):
        WorkPrecisionRecord("trap", "h=1", -1.0, 0.1, 1, 0, 1)
    r = WorkPrecisionRecord("trap", "h=1", 0.5, 0.1, 1, 0, 1)
    text = write_records_csv([r], tmp_path / "b.csv").read_text()
    assert text.splitlines()[1].startswith("trap,h=1,0.5,0.1,1,0,1")


def test_bad_arguments(kundur):
    with pytest.raises(ValueError):
        bench_work_precision(kundur, [], [1e-3])
    with pytest.raises(ValueError):
        bench_work_precision(kundur, ["trap"], [1e-3], runs=0)
