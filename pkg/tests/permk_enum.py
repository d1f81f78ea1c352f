"""Exact expectation over every PermK assignment for tiny (d, n)."""

import itertools

import numpy as np

from permfl.compress import assemble, compress_permk, deal_buckets


def all_assignments(d, n):
    """Every (permutation, residual tuple) pair, each equally likely."""
    t = d - n * (d // n)
    for z in itertools.permutations(range(d)):
        for res in itertools.permutations(range(n), t):
            yield deal_buckets(np.array(z), n, np.array(res, dtype=np.int64))


def exact_moments(vs):
    """(E[estimate] - mean, E||estimate - mean||^2, variance bound rhs)."""
    n, d = vs.shape
    mean = vs.mean(axis=0)
    total = np.zeros(d)
    sq = 0.0
    count = 0
    for a in all_assignments(d, n):
        est = assemble([compress_permk(vs[i], a, i) for i in range(n)], d, n)
        total += est
        sq += float(np.sum((est - mean) ** 2))
        count += 1
    bias = float(np.max(np.abs(total / count - mean)))
    rhs = float(np.mean(np.sum(vs**2, axis=1)) - np.sum(mean**2))
    return bias, sq / count, rhs
