from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lifelongpr.data import DomainProfile, generate_domain, stack_points
from lifelongpr.encoder import embed, init_encoder
from lifelongpr.infoq import (InfoQRecord, allocate_sizes, effective_rank, info_quantity,
                              info_quantity_from_features, kernel_matrix, median_gamma,
                              uniform_sizes)

from oracles import infoq_reference, kernel_reference


def test_kernel_identical_features():
    A = kernel_matrix([[1.0, 2.0], [1.0, 2.0]], 0.2)
    assert np.array_equal(A, np.ones((2, 2)))


def test_kernel_unit_distance():
    A = kernel_matrix([[0.0, 0.0], [1.0, 0.0]], 0.2)
    assert A[0, 1] == pytest.approx(np.exp(-0.2), abs=1e-15)
    assert A[0, 1] == pytest.approx(0.8187, abs=1e-4)


def test_kernel_symmetric_unit_diagonal():
    f = np.random.default_rng(3).normal(size=(20, 5))
    A = kernel_matrix(f, 0.2)
    assert np.abs(A - A.T).max() <= 1e-12
    assert np.all(np.diag(A) == 1.0)
    assert np.all((A > 0) & (A <= 1))
    assert np.allclose(A, kernel_reference(f, 0.2), atol=1e-12)


@pytest.mark.parametrize("bad", [[[1.0, 2.0], [1.0]], [[np.nan, 0.0]], [[np.inf, 1.0]]])
def test_kernel_rejects_bad_features(bad):
    with pytest.raises(ValueError):
        kernel_matrix(bad, 0.2)


def test_effective_rank_rank_one_and_identity():
    assert effective_rank(np.ones((4, 4)), 1e-6) == 1
    assert effective_rank(np.eye(7), 1e-6) == 7


def test_effective_rank_three_scalars_matches_dense_svd():
    f = np.array([[0.0], [1.0], [2.0]])
    rank, _ = infoq_reference(f, 0.2, 1e-6)
    assert effective_rank(kernel_matrix(f, 0.2), 1e-6) == rank == 3


def test_effective_rank_zero_matrix_fails():
    with pytest.raises(ValueError):
        effective_rank(np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 24), st.integers(1, 6), st.floats(0.01, 5.0), st.integers(0, 2**31))
def test_effective_rank_matches_eigendecomposition(n, dim, gamma, seed):
    f = np.random.default_rng(seed).normal(size=(n, dim))
    A = kernel_matrix(f, gamma)
    lam = np.sort(np.linalg.eigvalsh(A))[::-1]
    expected = int(np.count_nonzero(lam >= 1e-6 * lam[0]))
    # eigen/SVD paths can disagree only for values sitting on the threshold
    near = np.abs(lam - 1e-6 * lam[0]) < 1e-12 * lam[0]
    if not near.any():
        assert effective_rank(A, 1e-6) == expected


def test_info_quantity_duplicates_is_one_over_n():
    rec = info_quantity_from_features(np.tile([[0.3, 0.4]], (12, 1)))
    assert rec.effective_rank == 1
    assert rec.info_q == pytest.approx(1 / 12, abs=0)


def test_info_quantity_distant_features_is_one():
    # gamma * min dist^2 = 0.2 * 400 = 80 > 40
    f = 20.0 * np.eye(10)
    rec = info_quantity_from_features(f / np.sqrt(2), gamma_k=0.2)
    assert rec.info_q == 1.0


def test_info_quantity_cap_subsamples():
    f = np.random.default_rng(0).normal(size=(50, 3))
    rec = info_quantity_from_features(f, cap=20, seed=4)
    assert rec.n_used == 20
    assert rec.info_q == rec.effective_rank / rec.n_used
    with pytest.raises(ValueError):
        info_quantity_from_features(f, cap=1)


def test_info_quantity_on_small_domain_matches_oracle():
    prof = DomainProfile(name="tiny", world_extent=40, n_train=10, n_database=10, n_query=10)
    ds = generate_domain(prof, seed=2, n_points=64)
    assert len(ds.train) == 10
    model = init_encoder(1)
    rec = info_quantity(ds, model, cap=2048, gamma_k=0.2, epsilon=1e-6)
    feats = embed(model, stack_points(ds.train))
    rank, q = infoq_reference(feats, 0.2, 1e-6)
    assert rec.effective_rank == rank
    assert abs(rec.info_q - q) <= 1e-12
    assert rec.domain_id == ds.domain_id


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 30), st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_median_gamma_scale_invariance(n, scale, seed):
    f = np.random.default_rng(seed).normal(size=(n, 4))
    a = info_quantity_from_features(f, use_median=True)
    b = info_quantity_from_features(f * scale, use_median=True)
    assert a.effective_rank == b.effective_rank
    assert median_gamma(f * scale) == pytest.approx(median_gamma(f) / scale**2, rel=1e-9)


def test_record_round_trip():
    rec = InfoQRecord(3, 0.25, 8, 2, 0.2, 1e-6)
    assert InfoQRecord.from_dict(rec.to_dict()) == rec


# -- allocation -------------------------------------------------------------------


def test_allocation_equal_values():
    assert allocate_sizes([0.5] * 4, 256, 4.0).sizes == [64, 64, 64, 64]


def _largest_remainder_decimal(values, k_total, tau):
    getcontext().prec = 50
    w = [(Decimal(v) / Decimal(tau)).exp() for v in values]
    z = sum(w)
    shares = [Decimal(k_total) * x / z for x in w]
    base = [int(s) for s in shares]
    rem = sorted(range(len(values)), key=lambda i: (-(shares[i] - base[i]), -values[i], i))
    for i in rem[:k_total - sum(base)]:
        base[i] += 1
    return base, shares


def test_allocation_two_values_matches_extended_precision():
    base, shares = _largest_remainder_decimal([0.8, 0.4], 100, 4.0)
    assert float(shares[0] / 100) == pytest.approx(0.5250, abs=1e-4)
    assert base == [52, 48]
    assert allocate_sizes([0.8, 0.4], 100, 4.0).sizes == [52, 48]


def test_allocation_large_tau_is_uniform():
    q = [0.1, 0.9, 0.5]
    assert allocate_sizes(q, 64, 1e9).sizes == uniform_sizes(3, 64, q).sizes == [21, 22, 21]
    assert uniform_sizes(3, 64).sizes == [22, 21, 21]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=8), st.integers(0, 1000))
def test_large_tau_limit_equals_uniform_split(q, k_total):
    sizes = allocate_sizes(q, k_total, 1e9).sizes
    assert sizes == uniform_sizes(len(q), k_total, q).sizes
    assert set(sizes) <= {k_total // len(q), -(-k_total // len(q))}


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_allocation_rejects_non_positive_tau(tau):
    with pytest.raises(ValueError):
        allocate_sizes([0.5], 10, tau)


def test_allocation_single_set_gets_everything():
    assert allocate_sizes([InfoQRecord(0, 0.3, 10, 3)], 64, 4.0).sizes == [64]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=8),
       st.floats(0.01, 100.0), st.integers(0, 1000))
def test_allocation_properties(q, tau, k_total):
    sizes = allocate_sizes(q, k_total, tau).sizes
    assert sum(sizes) == k_total
    assert all(s >= 0 for s in sizes)
    for i in range(len(q)):
        for j in range(len(q)):
            if q[i] > q[j]:
                assert sizes[i] >= sizes[j]
    ref, shares = _largest_remainder_decimal(q, k_total, tau)
    rem = sorted(float(s - int(s)) for s in shares)
    # the float path must agree exactly unless two remainders sit within rounding noise
    if all(b - a > 1e-9 for a, b in zip(rem, rem[1:])) and all(
            abs(float(s) - round(float(s))) > 1e-9 for s in shares):
        assert sizes == ref
