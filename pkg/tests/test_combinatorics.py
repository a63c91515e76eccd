import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superexit import combinatorics as C


def test_masks_round_trip():
    assert C.mask_of(C.elements(0b1011)) == 0b1011
    assert C.elements(C.full_mask(4)) == [1, 2, 3, 4]
    assert C.popcount(0b1011) == 3


def test_submask_enumeration():
    subs = list(C.submasks(0b101))
    assert sorted(subs) == [0b000, 0b001, 0b100, 0b101]
    assert sorted(C.nonempty_submasks(0b101)) == [0b001, 0b100, 0b101]


def test_partition_counts_match_bell_numbers():
    # Bell numbers 1, 2, 5, 15, 52, 203
    for n in range(1, 7):
        parts = list(C.enumerate_partitions(C.full_mask(n)))
        assert len(parts) == C.bell_number(n)
        for sigma in parts:
            acc = 0
            for block in sigma:
                assert acc & block == 0
                acc |= block
            assert acc == C.full_mask(n)


def test_cover_enumeration_matches_dp_count():
    for n in range(1, 5):
        N = C.full_mask(n)
        for m in range(1, 4):
            covers = list(C.enumerate_covers(N, m))
            assert len(covers) == C.cover_count(n, m)
            assert len(covers) == C.cover_count_dp(N, m)
            for tup in covers:
                acc = 0
                for blk in tup:
                    acc |= blk
                assert acc == N


def test_alternating_sums_exhaustive_n6():
    for n in range(1, 7):
        N = C.full_mask(n)
        for cm in C.nonempty_submasks(N):
            for am in C.submasks(cm):
                want = (-1) ** C.popcount(cm) if am == cm else 0
                assert C.alternating_sum_check(am, cm) == want


def test_alternating_sum_rejects_non_subset():
    with pytest.raises(ValueError):
        C.alternating_sum_check(0b10, 0b01)


def test_transforms_round_trip_exact_rationals():
    rng = np.random.default_rng(3)
    for n in range(1, 6):
        for _ in range(5):
            u = C.random_rational_values(n, rng)
            v = C.uv_transforms(u, n, "vA_from_u")
            assert C.uv_transforms(v, n, "u_from_vA") == u
            vu = C.uv_transforms(u, n, "vupper_from_u")
            assert C.uv_transforms(vu, n, "u_from_vupper") == u
            assert C.uv_transforms(v, n, "vupper_from_vA") == vu


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 4), data=st.data())
def test_transforms_round_trip_property(n, data):
    N = C.full_mask(n)
    u = {A: Fraction(data.draw(st.integers(-30, 30)), 7)
         for A in C.nonempty_submasks(N)}
    v = C.uv_transforms(u, n, "vA_from_u")
    assert C.uv_transforms(v, n, "u_from_vA") == u


def test_unknown_transform_direction():
    with pytest.raises(ValueError):
        C.uv_transforms({1: 1.0}, 1, "sideways")


def test_partition_sum_hand_expanded_n2():
    w = {0b01: 2.0, 0b10: 3.0, 0b11: 5.0}
    # partitions of {1,2}: {{1},{2}} and {{1,2}}
    assert C.partition_sum(0b11, w) == pytest.approx(2 * 3 + 5)
    assert C.partition_sum(0b11, w, coeff=lambda m: m) == \
        pytest.approx(2 * (2 * 3) + 1 * 5)


def test_partition_sum_hand_expanded_n3():
    vals = {C.mask_of([1]): 2.0, C.mask_of([2]): 3.0, C.mask_of([3]): 5.0,
            C.mask_of([1, 2]): 7.0, C.mask_of([1, 3]): 11.0,
            C.mask_of([2, 3]): 13.0, C.mask_of([1, 2, 3]): 17.0}
    want = (2 * 3 * 5) + 7 * 5 + 11 * 3 + 13 * 2 + 17
    assert C.partition_sum(C.full_mask(3), vals) == pytest.approx(want)


def test_density_two_forms_agree():
    """Alternating subset form vs inclusion-exclusion partition form."""
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        N = C.full_mask(n)
        u = {A: float(rng.uniform(0.05, 2.0))
             for A in C.nonempty_submasks(N)}
        v = C.uv_transforms(u, n, "vA_from_u")
        alt = 1.0
        for A in C.nonempty_submasks(N):
            alt += (-1) ** C.popcount(A) * math.exp(-u[A])
        part = 0.0
        for B in C.submasks(N):
            sig = sum(v[Cm] for Cm in C.nonempty_submasks(B)) if B else 0.0
            part += (-1) ** (n - C.popcount(B)) * math.exp(sig)
        part *= math.exp(-u[N])
        assert abs(alt - part) < 1e-12
