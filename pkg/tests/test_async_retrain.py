import time

import pytest

from asyncutils.async_retrain import run_jobs


def _job(value, delay):
    def run():
        time.sleep(delay)
        return value

    return run


def test_results_keep_job_order():
    jobs = [_job("a", 0.05), _job("b", 0.0), _job("c", 0.02)]
    assert run_jobs(jobs, workers=3) == ["a", "b", "c"]
    assert run_jobs(jobs, workers=1) == ["a", "b", "c"]


def test_job_failure_is_raised():
    def broken():
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        run_jobs([_job(1, 0.0), broken], workers=2)
    with pytest.raises(ValueError):
        run_jobs([_job(1, 0.0)], workers=0)
