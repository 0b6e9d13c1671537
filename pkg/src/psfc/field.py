"""Prime-field arithmetic and small dense linear algebra over GF(p).

Values are plain Python ints kept in canonical form (reduced into
[0, p) at every operation boundary), vectors are tuples of ints, and
matrices are tuples of row tuples.  Python's arbitrary-precision ints
make everything overflow-free for any supported modulus, including the
default 2^31 - 1.

The representation is deliberately allocation-light and immutable: the
protocol engine and the audit sweeps call these functions millions of
times, and tuples are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .rand import Rng

__all__ = [
    "DEFAULT_MODULUS",
    "MAX_MODULUS",
    "PrimeModulus",
    "InversionOfZero",
    "DimensionMismatch",
    "SingularMatrix",
    "SamplingExhausted",
    "is_prime",
    "ff_add",
    "ff_sub",
    "ff_mul",
    "ff_neg",
    "ff_inv",
    "vec_add",
    "vec_sub",
    "mat_vec_mul",
    "mat_mul",
    "identity_matrix",
    "rank",
    "mat_inv",
    "sample_uniform_vector",
    "sample_uniform_matrix",
    "sample_invertible_matrix",
]

FieldVector = tuple[int, ...]
FieldMatrix = tuple[tuple[int, ...], ...]

DEFAULT_MODULUS = 2**31 - 1
MAX_MODULUS = 2**61  # exclusive upper bound for a supported modulus

# Witness set proven sufficient for deterministic Miller-Rabin below 3.3e24,
# comfortably covering the 2^61 bound.
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

INVERTIBLE_REDRAW_CAP = 10_000


class InversionOfZero(ZeroDivisionError):
    """Multiplicative inverse of 0 requested."""


class DimensionMismatch(ValueError):
    """Operands do not have compatible dimensions."""


class SingularMatrix(ValueError):
    """Matrix inversion requested for a rank-deficient matrix."""


class SamplingExhausted(RuntimeError):
    """Rejection sampling hit its redraw cap; indicates an internal bug."""


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for all n below 2^61."""
    if n < 2:
        return False
    for q in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n == q:
            return True
        if n % q == 0:
            return False
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class PrimeModulus:
    """A validated prime modulus p with 2 <= p < 2^61."""

    p: int

    def __post_init__(self):
        if not isinstance(self.p, int) or not (2 <= self.p < MAX_MODULUS):
            raise ValueError(f"modulus must be an integer in [2, 2^61): got {self.p!r}")
        if not is_prime(self.p):
            raise ValueError(f"modulus must be prime: got {self.p}")

    def __int__(self) -> int:
        return self.p

    def __index__(self) -> int:
        return self.p


# -- scalar operations -------------------------------------------------------


def ff_add(a: int, b: int, p: int) -> int:
    return (a + b) % p


def ff_sub(a: int, b: int, p: int) -> int:
    return (a - b) % p


def ff_mul(a: int, b: int, p: int) -> int:
    return a * b % p


def ff_neg(a: int, p: int) -> int:
    return -a % p


def ff_inv(a: int, p: int) -> int:
    """Multiplicative inverse via Fermat: a^(p-2) mod p, p prime."""
    if a % p == 0:
        raise InversionOfZero(f"0 has no inverse in GF({p})")
    return pow(a, p - 2, p)


# -- vector / matrix operations ----------------------------------------------


def vec_add(u: FieldVector, v: FieldVector, p: int) -> FieldVector:
    if len(u) != len(v):
        raise DimensionMismatch(f"vector lengths differ: {len(u)} vs {len(v)}")
    return tuple((a + b) % p for a, b in zip(u, v))


def vec_sub(u: FieldVector, v: FieldVector, p: int) -> FieldVector:
    if len(u) != len(v):
        raise DimensionMismatch(f"vector lengths differ: {len(u)} vs {len(v)}")
    return tuple((a - b) % p for a, b in zip(u, v))


def mat_vec_mul(a: FieldMatrix, w: FieldVector, p: int) -> FieldVector:
    """Matrix-vector product over GF(p)."""
    if len(a[0]) != len(w):
        raise DimensionMismatch(f"matrix is {len(a)}x{len(a[0])}, vector has length {len(w)}")
    return tuple(sum(x * y for x, y in zip(row, w)) % p for row in a)


def mat_mul(a: FieldMatrix, b: FieldMatrix, p: int) -> FieldMatrix:
    if len(a[0]) != len(b):
        raise DimensionMismatch(f"inner dimensions differ: {len(a[0])} vs {len(b)}")
    cols = tuple(zip(*b))
    return tuple(
        tuple(sum(x * y for x, y in zip(row, col)) % p for col in cols) for row in a
    )


def identity_matrix(l: int) -> FieldMatrix:
    return tuple(tuple(1 if i == j else 0 for j in range(l)) for i in range(l))


def rank(vectors: Sequence[FieldVector], p: int) -> int:
    """Rank of the span of `vectors` over GF(p), by Gaussian elimination."""
    if not vectors:
        return 0
    dim = len(vectors[0])
    for v in vectors:
        if len(v) != dim:
            raise DimensionMismatch("vectors have mixed dimensions")
    rows = [list(v) for v in vectors]
    r = 0
    for col in range(dim):
        pivot = None
        for i in range(r, len(rows)):
            if rows[i][col] % p:
                pivot = i
                break
        if pivot is None:
            continue
        rows[r], rows[pivot] = rows[pivot], rows[r]
        inv = ff_inv(rows[r][col] % p, p)
        rows[r] = [x * inv % p for x in rows[r]]
        for i in range(len(rows)):
            if i != r and rows[i][col] % p:
                f = rows[i][col] % p
                rows[i] = [(x - f * y) % p for x, y in zip(rows[i], rows[r])]
        r += 1
        if r == len(rows):
            break
    return r


def mat_inv(a: FieldMatrix, p: int) -> FieldMatrix:
    """Inverse of a square matrix over GF(p) via Gauss-Jordan elimination."""
    l = len(a)
    if any(len(row) != l for row in a):
        raise DimensionMismatch("matrix is not square")
    # Augment with the identity and reduce in place.
    aug = [list(row) + [1 if i == j else 0 for j in range(l)] for i, row in enumerate(a)]
    for col in range(l):
        pivot = None
        for i in range(col, l):
            if aug[i][col] % p:
                pivot = i
                break
        if pivot is None:
            raise SingularMatrix("matrix is singular over GF(p)")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = ff_inv(aug[col][col] % p, p)
        aug[col] = [x * inv % p for x in aug[col]]
        for i in range(l):
            if i != col and aug[i][col] % p:
                f = aug[i][col]
                aug[i] = [(x - f * y) % p for x, y in zip(aug[i], aug[col])]
    return tuple(tuple(row[l:]) for row in aug)


# -- sampling ----------------------------------------------------------------


def sample_uniform_vector(l: int, p: int, rng: Rng) -> FieldVector:
    """An i.i.d. uniform vector in GF(p)^l; deterministic given the rng state."""
    randrange = rng.randrange
    return tuple(randrange(p) for _ in range(l))


def sample_uniform_matrix(l: int, p: int, rng: Rng) -> FieldMatrix:
    randrange = rng.randrange
    return tuple(tuple(randrange(p) for _ in range(l)) for _ in range(l))


def sample_invertible_matrix(
    l: int, p: int, rng: Rng, max_redraws: int = INVERTIBLE_REDRAW_CAP
) -> FieldMatrix:
    """Uniform draw from GL(l, p) by rejection from uniform matrices.

    Rejection preserves uniformity on the invertible subset.  The redraw
    cap is unreachable in practice (the singular fraction is at most
    ~71% even at p=2), so hitting it is an internal error.
    """
    for _ in range(max_redraws):
        m = sample_uniform_matrix(l, p, rng)
        if rank(m, p) == l:
            return m
    raise SamplingExhausted(
        f"no invertible {l}x{l} matrix over GF({p}) in {max_redraws} draws"
    )
