"""Dense linear algebra helpers and a portable pseudo-random generator.

Matrices and vectors are plain float64 numpy arrays; the helpers here add
the shape checks and failure modes the rest of the package relies on.
The generator is xoshiro256++ seeded through splitmix64, so a given seed
produces the same stream in any language that implements the algorithm.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


class ConfigurationError(ValueError):
    """Raised for shape or argument mismatches that indicate a wiring bug."""


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when the normal equations cannot be factorized."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise ConfigurationError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times {b.shape[0]}x{b.shape[1]}"
        )
    return check_finite(a @ b, "matmul result")


def ridge_solve(x, y, lam: float) -> np.ndarray:
    """Return argmin_B ||XB - Y||^2 + lam ||B||^2.

    Solved through a Cholesky factorization of X^T X + lam I. With
    ``lam == 0`` a rank-deficient design raises :class:`SingularSystemError`.
    """
    if lam < 0:
        raise ConfigurationError(f"ridge penalty must be nonnegative, got {lam}")
    x = as_matrix(x)
    y = np.asarray(y, dtype=np.float64)
    vector_rhs = y.ndim == 1
    y = as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise ConfigurationError(f"ridge_solve: X has {x.shape[0]} rows but Y has {y.shape[0]}")
    if x.shape[0] < 1:
        raise ConfigurationError("ridge_solve needs at least one sample")

    gram = x.T @ x
    if lam > 0:
        gram[np.diag_indices_from(gram)] += lam
    rhs = x.T @ y
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        hint = "use lambda > 0" if lam == 0 else "increase lambda"
        raise SingularSystemError(f"normal equations are not positive definite; {hint}") from exc
    # numpy accepts some numerically singular factors; catch them explicitly
    diag = np.diag(chol)
    if diag.size and diag.min() <= diag.max() * 1e-13:
        hint = "use lambda > 0" if lam == 0 else "increase lambda"
        raise SingularSystemError(f"normal equations are numerically singular; {hint}")
    z = solve_triangular(chol, rhs, lower=True)
    b = solve_triangular(chol.T, z, lower=False)
    check_finite(b, "ridge solution")
    return b[:, 0] if vector_rhs else b


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """Mix integer keys into a base seed, giving independent child seeds."""
    state = base & _MASK
    _, out = _splitmix64(state)
    for k in keys:
        state, out = _splitmix64(out ^ (k & _MASK))
    return out


class Rng:
    """xoshiro256++ generator.

    The 256-bit state is filled from ``seed`` with splitmix64. Uniform
    doubles take the top 53 bits of each output; normals use the
    Box-Muller transform on consecutive uniform pairs.
    """

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        sm = self.seed
        words = []
        for _ in range(4):
            sm, w = _splitmix64(sm)
            words.append(w)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        t = (s0 + s3) & _MASK
        result = ((((t << 23) | (t >> 41)) & _MASK) + s0) & _MASK
        shifted = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= shifted
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * _INV_2_53)

    def uniforms(self, n: int) -> np.ndarray:
        """n draws from [0, 1), bulk path with the same stream as :meth:`uniform`."""
        s0, s1, s2, s3 = self._s
        out = [0.0] * n
        for i in range(n):
            t = (s0 + s3) & _MASK
            r = ((((t << 23) | (t >> 41)) & _MASK) + s0) & _MASK
            shifted = (s1 << 17) & _MASK
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= shifted
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK
            out[i] = (r >> 11) * _INV_2_53
        self._s = [s0, s1, s2, s3]
        return np.array(out, dtype=np.float64)

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return rng_normal(self, n, mean, std)


def rng_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw ``n`` normals with Box-Muller; an odd trailing draw discards its pair partner."""
    if std < 0:
        raise ConfigurationError(f"std must be nonnegative, got {std}")
    if n <= 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = rng.uniforms(2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    theta = _TWO_PI * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = radius * np.cos(theta)
    z[:, 1] = radius * np.sin(theta)
    return mean + std * z.reshape(-1)[:n]
