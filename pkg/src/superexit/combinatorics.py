"""Set partitions, ordered covers, and the subset-sum transforms.

Subsets of {1..n} are plain python ints used as bitmasks: bit (i-1) set
means element i is in the subset.  All enumeration orders are
deterministic (blocks ordered by smallest element) so tests are
reproducible.  Arithmetic is generic: everything works on Fractions as
well as floats.
"""

import itertools
from fractions import Fraction

MAX_N = 16


def popcount(mask):
    return int(mask).bit_count()


def full_mask(n):
    if not 1 <= n <= MAX_N:
        raise ValueError("ground-set size must be in 1..%d" % MAX_N)
    return (1 << n) - 1


def elements(mask):
    """Elements of the subset, 1-based, ascending."""
    out = []
    i = 1
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def mask_of(elems):
    m = 0
    for e in elems:
        m |= 1 << (e - 1)
    return m


def submasks(mask):
    """All subsets of mask, including 0 and mask itself."""
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def nonempty_submasks(mask):
    for s in submasks(mask):
        if s:
            yield s


def enumerate_partitions(ground):
    """Yield each partition of the ground mask exactly once.

    Partitions are tuples of block masks, blocks ordered by their
    smallest element (the canonical order).
    """
    if ground == 0:
        raise ValueError("empty ground set")

    def rec(remaining):
        if remaining == 0:
            yield ()
            return
        low = remaining & -remaining
        rest = remaining & ~low
        for extra in submasks(rest):
            block = low | extra
            for tail in rec(remaining & ~block):
                yield (block,) + tail

    return rec(ground)


def bell_number(n):
    """Bell numbers via the triangle recurrence."""
    row = [1]
    for _ in range(n):
        new = [row[-1]]
        for v in row:
            new.append(new[-1] + v)
        row = new
    return row[0]


def enumerate_covers(target, m):
    """All ordered m-tuples of nonempty subsets with union == target."""
    if m < 1:
        raise ValueError("m must be >= 1")
    subs = list(nonempty_submasks(target))

    def rec(i, covered):
        if i == m - 1:
            need = target & ~covered
            for c in subs:
                if c & need == need:
                    yield (c,)
            return
        for c in subs:
            for tail in rec(i + 1, covered | c):
                yield (c,) + tail

    if target == 0:
        return iter(())
    return rec(0, 0)


def cover_count(target_size, m):
    """Number of ordered m-covers of a k-set, by inclusion-exclusion."""
    k = target_size
    total = 0
    for j in range(k + 1):
        total += (-1) ** (k - j) * _binom(k, j) * (2 ** j - 1) ** m
    return total


def _binom(n, k):
    import math
    return math.comb(n, k)


def alternating_sum_check(a_mask, c_mask):
    """Sum of (-1)^{|B|} over a_mask <= B <= c_mask.

    Equals (-1)^{|C|} when A == C and 0 otherwise.
    """
    if a_mask & ~c_mask:
        raise ValueError("A must be a subset of C")
    free = c_mask & ~a_mask
    total = 0
    for extra in submasks(free):
        total += (-1) ** popcount(a_mask | extra)
    return total


_DIRECTIONS = ("u_from_vA", "vA_from_u", "vupper_from_u",
               "u_from_vupper", "vupper_from_vA")


def uv_transforms(values, n, direction):
    """Linear transforms among the three indexed families on subsets of {1..n}.

    values maps nonempty subset masks to numbers.  The u-family is
    implicitly extended by u^empty = 0.  Returns a dict on all nonempty
    subsets.
    """
    if direction not in _DIRECTIONS:
        raise ValueError("unknown direction %r" % (direction,))
    N = full_mask(n)
    u = dict(values)
    u[0] = 0 * next(iter(values.values())) if values else 0
    out = {}
    for A in nonempty_submasks(N):
        ka = popcount(A)
        if direction == "vA_from_u":
            lo = N & ~A
            acc = 0
            for extra in submasks(A):
                B = lo | extra
                acc += (-1) ** (ka + popcount(B) + n + 1) * u.get(B, 0)
            out[A] = acc
        elif direction == "vupper_from_u":
            acc = 0
            for B in nonempty_submasks(A):
                acc += (-1) ** (popcount(B) + 1) * values[B]
            out[A] = acc
        elif direction == "u_from_vA":
            acc = 0
            for B in nonempty_submasks(N):
                if B & A:
                    acc += values[B]
            out[A] = acc
        elif direction == "u_from_vupper":
            acc = 0
            for B in nonempty_submasks(A):
                acc += (-1) ** (popcount(B) + 1) * values[B]
            out[A] = acc
        elif direction == "vupper_from_vA":
            acc = 0
            for extra in submasks(N & ~A):
                acc += values[A | extra]
            out[A] = acc
    return out


def partition_sum(ground, weights_by_block, coeff=None):
    """Sum over partitions of ground of coeff(|sigma|) * prod of block weights."""
    total = 0
    for sigma in enumerate_partitions(ground):
        term = 1
        for block in sigma:
            term = term * weights_by_block[block]
        if coeff is not None:
            term = term * coeff(len(sigma))
        total = total + term
    return total


def cover_count_dp(target, m):
    """Independent cover count: DP over the covered-so-far subset."""
    subs = list(nonempty_submasks(target))
    f = {0: 1}
    for _ in range(m):
        g = {}
        for covered, ways in f.items():
            for c in subs:
                key = covered | c
                g[key] = g.get(key, 0) + ways
        f = g
    return f.get(target, 0)


def random_rational_values(n, rng, den=97):
    """Random Fraction-valued subset map for exact round-trip tests."""
    N = full_mask(n)
    return {A: Fraction(int(rng.integers(-50, 51)), den)
            for A in nonempty_submasks(N)}
