"""Dense float64 linear algebra, keyed deterministic randomness, and the
finite-difference gradient checker used as the oracle throughout the test
suite.

Everything here is numpy-only. Matrices are plain 2-D float64 arrays in
row-major order; helpers validate shape and finiteness at the public
boundaries.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonFiniteFunctionValue, NotSPD

# Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
SYMMETRY_RTOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising on bad shape or values."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name}: expected 2-D array, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteFunctionValue(f"{name}: contains NaN or Inf")
    return m


def check_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteFunctionValue(f"{name}: contains NaN or Inf")
    return a


@dataclass
class Rng:
    """Deterministic random source with keyed children.

    Children are derived from (seed, key path), never from draw order, so
    concurrent consumers obtain identical streams regardless of scheduling.
    String labels are hashed with crc32 to keep keys stable across runs.
    """

    seed: int
    key: tuple = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.default_rng(ss)

    def child(self, *labels) -> "Rng":
        key = self.key + tuple(
            lab if isinstance(lab, int) else zlib.crc32(str(lab).encode()) for lab in labels
        )
        return Rng(self.seed, key)

    # Convenience draws (all through the single generator).
    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return scale * self.generator.standard_normal(shape)

    def integers(self, low, high):
        return int(self.generator.integers(low, high))

    def choice(self, n, size, replace=True):
        return self.generator.choice(n, size=size, replace=replace)

    def derive_seed(self) -> int:
        """One 63-bit integer, e.g. to seed a torch.Generator."""
        return int(self.generator.integers(0, 2**63 - 1))


@dataclass(frozen=True)
class SpdFactor:
    """Cached Cholesky factorization of a symmetric positive-definite matrix."""

    c_and_lower: tuple
    shape: tuple

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.shape[0]:
            raise DimensionMismatch(
                f"rhs has {b.shape[0]} rows, factorization is {self.shape[0]}x{self.shape[1]}"
            )
        return scipy.linalg.cho_solve(self.c_and_lower, b)


def spd_factor(a, name: str = "matrix") -> SpdFactor:
    """Cholesky-factor a symmetric positive-definite matrix.

    Raises NotSPD on asymmetry beyond SYMMETRY_RTOL or on a failed pivot;
    there is no silent pseudo-inverse fallback.
    """
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name}: must be square, got {m.shape}")
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.T)
    if asym > SYMMETRY_RTOL * max(1.0, scale):
        raise NotSPD(f"{name}: asymmetry {asym:.3e} exceeds {SYMMETRY_RTOL} relative")
    try:
        c_and_lower = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotSPD(f"{name}: Cholesky failed ({exc})") from exc
    return SpdFactor(c_and_lower=c_and_lower, shape=m.shape)


def solve_spd(a, b) -> np.ndarray:
    """Solve A X = B for symmetric positive-definite A via Cholesky."""
    b = as_matrix(b, "rhs")
    x = spd_factor(a, "lhs").solve(b)
    return check_finite(x, "solve_spd result")


def ridge_of(a, lam: float) -> np.ndarray:
    """Return A + lam * I for square A; lam must be nonnegative."""
    m = as_matrix(a, "matrix")
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"ridge_of: must be square, got {m.shape}")
    if lam < 0:
        raise ValueError(f"ridge_of: lambda must be nonnegative, got {lam}")
    return m + lam * np.eye(m.shape[0])


def finite_diff_grad(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    Perturbs one entry at a time: (f(x + h e) - f(x - h e)) / (2h). Exact for
    quadratics up to roundoff, which is what makes it a usable oracle for the
    analytic backward passes.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_x.size):
        orig = flat_x[j]
        flat_x[j] = orig + h
        fp = float(f(x))
        flat_x[j] = orig - h
        fm = float(f(x))
        flat_x[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteFunctionValue(f"finite_diff_grad: f non-finite at entry {j}")
        flat_g[j] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(approx: np.ndarray, exact: np.ndarray, floor: float = 1e-12) -> float:
    """Frobenius relative error with a floor on the reference norm."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.linalg.norm(approx - exact) / max(floor, np.linalg.norm(exact)))
