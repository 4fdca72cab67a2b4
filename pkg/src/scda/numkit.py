"""Dense linear algebra helpers, seeded randomness and PCA.

Matrices are plain 2-D ``float64`` numpy arrays. Nothing here touches global
random state; every stochastic caller receives an explicit :class:`Rng`.

Rng algorithm
-------------
``Rng(seed)`` feeds the 64-bit seed into numpy's ``SeedSequence`` and drives a
``PCG64`` bit generator (128-bit LCG state with an XSL-RR output permutation).
Child streams are derived by *key*, not by consuming the parent:
``Rng(seed).child(3, "x")`` always equals ``Rng(seed, spawn_key=(3, h("x")))``,
so independently scheduled work (restarts, sweep points, epochs) draws from
streams that do not depend on execution order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

_MASK64 = (1 << 64) - 1


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


class Rng:
    """Seeded PCG64 stream with order-independent child derivation."""

    def __init__(self, seed: int, spawn_key: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.spawn_key = tuple(int(k) for k in spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *key) -> "Rng":
        return Rng(self.seed, self.spawn_key + tuple(_key_part(k) for k in key))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray  # (d_in, d_out), orthonormal columns
    variances: np.ndarray  # eigenvalues of the kept directions, descending
    zero_variance: bool = False

    @property
    def d_in(self) -> int:
        return self.components.shape[0]

    @property
    def d_out(self) -> int:
        return self.components.shape[1]


def fit_pca(x, d_out: int) -> PcaTransform:
    """Top ``d_out`` principal directions of ``x`` via the covariance eigendecomposition.

    Components are sign-normalised so the largest-magnitude entry of each
    column is positive. If every row is identical the transform is still
    returned (with axis-aligned components) and ``zero_variance`` is set.
    """
    x = as_matrix(x, "x")
    n, d_in = x.shape
    if n < 2:
        raise ContractError("PCA needs at least two samples")
    if not 1 <= d_out <= min(n - 1, d_in):
        raise ContractError(f"d_out={d_out} outside [1, {min(n - 1, d_in)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:d_out]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order]
    pivot = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivot, np.arange(d_out)])
    signs[signs == 0] = 1.0
    comps = comps * signs
    return PcaTransform(mean, comps, evals, zero_variance=bool(np.all(cov == 0.0)))


def apply_pca(t: PcaTransform, x) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != t.d_in:
        raise ShapeError(f"expected {t.d_in} columns, got {x.shape[1]}")
    return (x - t.mean) @ t.components


def inverse_pca(t: PcaTransform, z) -> np.ndarray:
    z = as_matrix(z, "z")
    if z.shape[1] != t.d_out:
        raise ShapeError(f"expected {t.d_out} columns, got {z.shape[1]}")
    return z @ t.components.T + t.mean
