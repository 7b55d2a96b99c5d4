"""Dense real linear algebra for adapters and spectral diagnostics.

All matrices are ``numpy.ndarray`` objects with ``float64`` entries. The thin
SVD is a one-sided (Hestenes) Jacobi iteration using a round-robin pair
ordering, so every sweep rotates ``m/2`` disjoint column pairs at once.
Randomness always goes through the counter-based Philox generator.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DecompositionError, DomainError, UndefinedRankError

LOG = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps
SWEEP_FACTOR = 100


def as_matrix(value: object, name: str = "Matrix") -> np.ndarray:
    """Return ``value`` as a finite 2-D float64 array or raise ``DomainError``."""

    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 2:
        raise DomainError(f"{name} muss zweidimensional sein (erhalten: {array.ndim} Dimensionen)")
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise DomainError(f"{name} darf nicht leer sein")
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{name} enthält NaN oder Inf")
    return array


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    left, right = as_matrix(a, "linker Faktor"), as_matrix(b, "rechter Faktor")
    if left.shape[1] != right.shape[0]:
        raise DomainError(f"Formen passen nicht: {left.shape} @ {right.shape}")
    return left @ right


def transpose(a: np.ndarray) -> np.ndarray:
    return as_matrix(a).T.copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    left, right = as_matrix(a), as_matrix(b)
    if left.shape != right.shape:
        raise DomainError(f"Formen passen nicht: {left.shape} + {right.shape}")
    return left + right


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    if not math.isfinite(factor):
        raise DomainError("Skalierungsfaktor muss endlich sein")
    return as_matrix(a) * float(factor)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(as_matrix(a), ord="fro"))


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Seeded generator on the Philox counter-based bit generator.

    Integer seeds are routed through ``SeedSequence`` so the same seed yields
    the same stream on every platform.
    """

    if isinstance(seed, (int, np.integer)) and seed < 0:
        raise DomainError("Seed darf nicht negativ sein")
    return np.random.Generator(np.random.Philox(seed))


def split_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child streams, one per chain; child ``i`` does not depend on ``count``."""

    if count < 0:
        raise DomainError("Anzahl der Teilströme darf nicht negativ sein")
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit sub-seed for a labelled sub-task."""

    return int(np.random.SeedSequence((seed, *keys)).generate_state(1)[0])


def random_gaussian(n: int, m: int, variance: float, seed: int) -> np.ndarray:
    """i.i.d. N(0, variance) matrix; a pure function of its arguments."""

    if n < 1 or m < 1:
        raise DomainError("Zeilen und Spalten müssen mindestens 1 sein")
    if not variance > 0:
        raise DomainError("Varianz muss größer als 0 sein")
    return scale(make_rng(seed).standard_normal((n, m)), math.sqrt(variance))


@dataclass(frozen=True)
class SVDFactors:
    """Thin SVD ``U @ diag(S) @ Vt`` with ``S`` sorted non-increasing."""

    U: np.ndarray
    S: np.ndarray
    Vt: np.ndarray

    @property
    def k(self) -> int:
        return int(self.S.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.Vt

    def band(self, start: int, width: int) -> "SVDFactors":
        """The ``width`` consecutive singular triplets beginning at ``start``."""

        if start < 0 or width < 1 or start + width > self.k:
            raise DomainError(f"Band [{start}, {start + width}) liegt außerhalb von 0..{self.k}")
        stop = start + width
        return SVDFactors(
            U=self.U[:, start:stop].copy(),
            S=self.S[start:stop].copy(),
            Vt=self.Vt[start:stop, :].copy(),
        )


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair schedule in which every column meets every other once per sweep."""

    players = list(range(m if m % 2 == 0 else m + 1))
    rounds: list[tuple[np.ndarray, np.ndarray]] = []
    half = len(players) // 2
    for _ in range(len(players) - 1):
        left, right = [], []
        for i in range(half):
            p, q = players[i], players[-1 - i]
            if p < m and q < m:
                left.append(min(p, q))
                right.append(max(p, q))
        if left:
            rounds.append((np.array(left), np.array(right)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Orthogonalise the columns of a tall matrix; returns (AV, V, sweeps)."""

    n, m = a.shape
    work = a.copy()
    v = np.eye(m)
    if m == 1:
        return work, v, 0
    gram_scale = float(np.sum(a * a))
    if gram_scale == 0.0:
        return work, v, 0
    rounds = _round_robin(m)
    pair_tol = max(m, 1) * _EPS
    tiny = np.finfo(np.float64).tiny
    max_sweeps = SWEEP_FACTOR * min(n, m)
    for sweep in range(1, max_sweeps + 1):
        rotations = 0
        off_mass = 0.0
        for left, right in rounds:
            up, uq = work[:, left], work[:, right]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            off_mass += float(np.sum(gamma * gamma))
            scale_ab = np.sqrt(alpha * beta)
            rotate = (np.abs(gamma) > pair_tol * scale_ab) & (scale_ab > tiny)
            if not np.any(rotate):
                continue
            rotations += int(np.count_nonzero(rotate))
            safe_gamma = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(rotate, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rotate, c * t, 0.0)
            work[:, left], work[:, right] = c * up - s * uq, s * up + c * uq
            vp, vq = v[:, left], v[:, right]
            v[:, left], v[:, right] = c * vp - s * vq, s * vp + c * vq
        # every pair below the relative threshold bounds the absolute off-diagonal mass as well
        if rotations == 0:
            LOG.debug("Jacobi-Sweep %d: Restmasse %.3e", sweep, math.sqrt(2.0 * off_mass))
            return work, v, sweep
    raise DecompositionError(
        f"SVD nicht konvergiert nach {max_sweeps} Sweeps (Restmasse außerhalb der Diagonale zu groß)"
    )


def _complete_basis(columns: np.ndarray, n: int, total: int) -> np.ndarray:
    """Extend orthonormal ``columns`` (n×g) to ``total`` orthonormal columns."""

    good = columns.shape[1]
    if good == total:
        return columns
    q, _ = np.linalg.qr(np.hstack([columns, np.eye(n)]))
    return np.hstack([columns, q[:, good:total]])


def svd(w: np.ndarray) -> SVDFactors:
    """Thin SVD with ``k = min(rows, cols)`` triplets.

    Raises ``DecompositionError`` if the Jacobi sweeps do not converge.
    """

    matrix = as_matrix(w, "W")
    rows, cols = matrix.shape
    transposed = rows < cols
    tall = matrix.T if transposed else matrix
    n, m = tall.shape
    work, v, sweeps = _jacobi_tall(tall)
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    cutoff = max(n, m) * _EPS * (sigma[0] if sigma.size else 0.0)
    good = int(np.count_nonzero(sigma > cutoff)) if sigma[0] > 0 else 0
    left = work[:, :good] / sigma[:good]
    left = _complete_basis(left, n, m)
    LOG.debug("SVD %sx%s: %d Sweeps, numerischer Rang %d", rows, cols, sweeps, good)
    if not np.all(np.isfinite(left)) or not np.all(np.isfinite(sigma)):
        raise DecompositionError("SVD lieferte nicht-endliche Faktoren")
    if transposed:
        return SVDFactors(U=v.copy(), S=sigma, Vt=left.T.copy())
    return SVDFactors(U=left, S=sigma, Vt=v.T.copy())


def effective_rank(singular_values: np.ndarray, fraction: float = 0.95) -> int:
    """Smallest k whose top-k singular values reach ``fraction`` of the total sum.

    ``fraction == 1`` counts the strictly positive values. Otherwise the
    remaining tail is compared with ``(1 - fraction)`` of the total, so tiny
    trailing values are not lost to rounding in a running sum.
    """

    values = np.asarray(singular_values, dtype=np.float64).reshape(-1)
    if not 0.0 < fraction <= 1.0:
        raise DomainError("fraction muss in (0, 1] liegen")
    if values.size == 0 or np.any(values < 0) or not np.all(np.isfinite(values)):
        raise DomainError("Singulärwerte müssen endlich und nicht negativ sein")
    if np.any(np.diff(values) > 0):
        raise DomainError("Singulärwerte müssen absteigend sortiert sein")
    if not np.any(values > 0.0):
        raise UndefinedRankError("Effektiver Rang für ein Nullspektrum undefiniert")
    if fraction >= 1.0:
        return int(np.count_nonzero(values > 0.0))
    tails = np.append(np.cumsum(values[::-1])[::-1], 0.0)
    allowed = (1.0 - fraction) * tails[0]
    return int(np.argmax(tails[1:] <= allowed)) + 1


def orthogonality_error(a: np.ndarray, mode: Literal["rows", "cols"] = "rows") -> float:
    """``‖AAᵀ − I‖²_F`` for ``rows`` or ``‖AᵀA − I‖²_F`` for ``cols``."""

    matrix = as_matrix(a, "A")
    if mode == "rows":
        gram = matrix @ matrix.T
    elif mode == "cols":
        gram = matrix.T @ matrix
    else:
        raise DomainError(f"Unbekannter Modus '{mode}' (erlaubt: rows, cols)")
    residual = gram - np.eye(gram.shape[0])
    return float(np.sum(residual * residual))


def matrix_effective_rank(a: np.ndarray, fraction: float = 0.95) -> int:
    """Effective rank of ``a``'s singular spectrum; 0 for the zero matrix."""

    try:
        return effective_rank(svd(a).S, fraction)
    except UndefinedRankError:
        return 0
