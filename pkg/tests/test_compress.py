import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permfl.compress import (
    ProtocolViolation,
    SparseChunk,
    UnsupportedRegime,
    assemble,
    compress_identity,
    compress_permk,
    compress_randk,
    deal_buckets,
    decode_payload,
    encode_payload,
    randk_indices,
    sample_assignment,
)
from permfl.numkit import Precision
from permfl.prg import Prg
from permk_enum import exact_moments


@given(d=st.integers(1, 300), n=st.integers(1, 40), seed=st.integers(0, 2**64 - 1), k=st.integers(0, 10**6))
@settings(max_examples=200, deadline=None)
def test_assignment_is_partition(d, n, seed, k):
    if d < n:
        with pytest.raises(UnsupportedRegime):
            sample_assignment(d, n, seed, k)
        return
    a = sample_assignment(d, n, seed, k)
    allidx = np.concatenate(a.buckets)
    assert sorted(allidx.tolist()) == list(range(d))
    sizes = a.sizes()
    B, t = divmod(d, n)
    assert sorted(sizes) == [B] * (n - t) + [B + 1] * t
    for b in a.buckets:
        assert np.all(np.diff(b) > 0)


def test_assignment_deterministic_and_round_dependent():
    a = sample_assignment(100, 10, 5, 3)
    b = sample_assignment(100, 10, 5, 3)
    c = sample_assignment(100, 10, 5, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a.buckets, b.buckets))
    assert not all(np.array_equal(x, y) for x, y in zip(a.buckets, c.buckets))


def test_owner_map():
    a = sample_assignment(23, 4, 1, 0)
    own = a.owner
    for i, b in enumerate(a.buckets):
        assert np.all(own[b] == i)


def test_deal_buckets_hand_case():
    a = deal_buckets(np.array([4, 0, 3, 1, 2]), 2, np.array([1]))
    assert [b.tolist() for b in a.buckets] == [[0, 4], [1, 2, 3]]
    with pytest.raises(ValueError):
        deal_buckets(np.array([0, 1, 2]), 2, np.array([], dtype=np.int64))


def test_residual_clients_uniform():
    # d = n + 1: exactly one client gets a second coordinate
    counts = np.zeros(3)
    for k in range(3000):
        counts[np.argmax(sample_assignment(4, 3, 7, k).sizes())] += 1
    assert np.all(np.abs(counts / 3000 - 1 / 3) < 0.03)


@pytest.mark.parametrize("d,n", [(2, 2), (3, 2), (4, 3), (5, 2), (5, 3)])
def test_exact_unbiased_and_variance_bound(d, n):
    rng = np.random.default_rng(d * 10 + n)
    vs = rng.normal(size=(n, d))
    bias, var, rhs = exact_moments(vs)
    assert bias <= 1e-12
    assert var <= rhs + 1e-10


def test_variance_bound_tight_on_unit_vectors():
    bias, var, rhs = exact_moments(np.eye(2))
    assert bias == 0.0
    assert var == pytest.approx(0.5, abs=1e-15) and rhs == pytest.approx(0.5, abs=1e-15)


def test_monte_carlo_unbiased_large():
    d, n, T = 50, 7, 4000
    rng = np.random.default_rng(1)
    vs = rng.normal(size=(n, d))
    ests = np.array([assemble([compress_permk(vs[i], a, i) for i in range(n)], d, n)
                     for a in (sample_assignment(d, n, 3, k) for k in range(T))])
    se = ests.std(axis=0) / np.sqrt(T)
    assert np.all(np.abs(ests.mean(axis=0) - vs.mean(axis=0)) <= 4 * se + 1e-12)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_assemble_identity_bitwise_power_of_two(n):
    rng = np.random.default_rng(n)
    v = rng.normal(size=64)
    a = sample_assignment(64, n, 9, 0)
    out = assemble([compress_permk(v, a, i) for i in range(n)], 64, n)
    assert np.array_equal(out, v)


@pytest.mark.parametrize("n", [3, 5, 10])
def test_assemble_identity_within_one_ulp(n):
    rng = np.random.default_rng(n)
    v = rng.normal(size=200)
    a = sample_assignment(200, n, 9, 0)
    out = assemble([compress_permk(v, a, i) for i in range(n)], 200, n)
    assert np.all(np.abs(out - v) <= np.spacing(np.abs(v)))


def test_assemble_rejects_overlap():
    c1 = SparseChunk(0, np.array([0, 2]), np.array([1.0, 1.0]))
    c2 = SparseChunk(1, np.array([2, 3]), np.array([1.0, 1.0]))
    with pytest.raises(ProtocolViolation):
        assemble([c1, c2], 4, 2)
    assert assemble([c1, c2], 4, 2, overlap=True).tolist() == [0.5, 0.0, 1.0, 0.5]


def test_assemble_empty():
    assert assemble([], 3, 2).tolist() == [0.0, 0.0, 0.0]


def test_chunk_requires_sorted_indices():
    with pytest.raises(ValueError):
        SparseChunk(0, np.array([2, 1]), np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        SparseChunk(0, np.array([1]), np.array([0.0, 0.0]))


def test_randk_selection_frequencies():
    counts = np.zeros(3)
    p = Prg(4)
    for _ in range(30_000):
        counts[randk_indices(3, 1, p)] += 1
    assert np.all(np.abs(counts / 30_000 - 1 / 3) < 0.02)


def test_randk_unbiased_by_enumeration():
    # d = 3, k = 1: the three outcomes are equally likely
    v = np.array([1.0, -2.0, 4.0])
    outs = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = 3 * v[j]
        outs.append(e)
    assert np.allclose(np.mean(outs, axis=0), v)
    c = compress_randk(v, 1, Prg(1))
    assert c.values[0] == 3 * v[c.indices[0]]


def test_randk_bad_k():
    with pytest.raises(ValueError):
        randk_indices(5, 0, Prg(0))
    with pytest.raises(ValueError):
        randk_indices(5, 6, Prg(0))


def test_identity_chunk():
    v = np.arange(4.0)
    c = compress_identity(v, owner=2)
    assert c.indices.tolist() == [0, 1, 2, 3] and np.array_equal(c.values, v) and not c.scale_applied


def test_compress_permk_errors():
    a = sample_assignment(10, 2, 0, 0)
    with pytest.raises(ValueError):
        compress_permk(np.zeros(9), a, 0)
    with pytest.raises(IndexError):
        compress_permk(np.zeros(10), a, 2)


@pytest.mark.parametrize("prec", list(Precision))
def test_payload_roundtrip(prec):
    v = prec.round(np.linspace(-3, 3, 17))
    raw = encode_payload(v, prec)
    assert len(raw) == 17 * prec.nbytes
    assert np.array_equal(decode_payload(raw, prec), v)


def test_payload_little_endian_layout():
    assert encode_payload(np.array([1.0]), Precision.FP32) == b"\x00\x00\x80\x3f"
    with pytest.raises(ValueError):
        decode_payload(b"\x00" * 5, Precision.FP32)
