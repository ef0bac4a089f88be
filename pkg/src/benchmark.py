#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

# Python standard library
from __future__ import print_function
from dataclasses import dataclass, asdict
import time, functools

# 3rd party imports from pypi
import numpy as np

# Local imports
from utils import get_logger

logger = get_logger('benchmark')


def timer(func):
    """Decorator that calculates how long a function takes to run.
    The elapsed time is logged at DEBUG level.
    @param func <func>:
        Function to time
    """
    @functools.wraps(func)
    def timed(*args, **kw):
        # Start time
        ts = time.perf_counter()
        # Run target function
        result = func(*args, **kw)
        # End time
        te = time.perf_counter()
        logger.debug('%s\t%.3f ms', func.__name__, (te - ts) * 1000)
        return result
    return timed


@dataclass
class TimingStats:
    """Wall-clock seconds of one benchmarked callable."""
    repetitions: int
    median: float
    iqr: float = None       # undefined for a single sample
    samples: list = None

    def to_dict(self):
        return asdict(self)


def timing_bench(fn, repetitions = 10, warmup = 2):
    """Median and interquartile range of fn() over repetitions, after warmup.
    @param fn <callable>:
        Work to time, i.e. full-graph forward plus full scoring
    @param repetitions <int>:
        Timed runs (>= 1)
    @param warmup <int>:
        Untimed runs first
    @return <TimingStats>
    """
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(max(int(repetitions), 1)):
        ts = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - ts)
    samples = np.asarray(samples)
    iqr = None
    if len(samples) > 1:
        q1, q3 = np.percentile(samples, [25, 75])
        iqr = float(q3 - q1)

    return TimingStats(repetitions=len(samples), median=float(np.median(samples)), iqr=iqr, samples=samples.tolist())


if __name__ == '__main__':
    # Smoke test
    print(timing_bench(lambda: np.linalg.svd(np.random.rand(64, 64)), repetitions=5))
