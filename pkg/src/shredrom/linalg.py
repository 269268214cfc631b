"""Dense matrix helpers: randomized truncated SVD and the POD compression map.

Matrices are plain 2-D float64 numpy arrays (row-major). All randomized
routines take an explicit seed and draw from a Philox counter-based
generator, so results are reproducible regardless of call order or thread
count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITERS = 2


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D finite float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name}: expected 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: non-finite entries")
    return a


def randomized_svd(
    a: np.ndarray,
    rank: int,
    oversample: int = DEFAULT_OVERSAMPLE,
    power_iters: int = DEFAULT_POWER_ITERS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Truncated SVD via a Gaussian range finder with power iteration.

    Returns (U, s, V) with U (m, rank), s nonincreasing, V (n, rank) so that
    A ~ U @ diag(s) @ V.T. One QR re-orthonormalization is applied per power
    pass to avoid losing small singular directions to roundoff.
    """
    a = as_matrix(a, "A")
    m, n = a.shape
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if power_iters < 0:
        raise ValueError(f"power_iters must be >= 0, got {power_iters}")
    sketch = rank + oversample
    if sketch > min(m, n):
        raise ValueError(
            f"rank + oversample = {sketch} exceeds min(A.shape) = {min(m, n)}"
        )
    omega = _rng(seed).standard_normal((n, sketch))
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(power_iters):
        w, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ w)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return q @ ub[:, :rank], s[:rank], vt[:rank].T


@dataclass(frozen=True)
class PODBasis:
    """Truncated orthonormal spatial basis with its singular values."""

    modes: np.ndarray  # (N_h, rank), orthonormal columns
    singular_values: np.ndarray  # (rank,), nonincreasing

    def __post_init__(self):
        modes = as_matrix(self.modes, "modes")
        s = np.asarray(self.singular_values, dtype=np.float64)
        if s.ndim != 1 or s.shape[0] != modes.shape[1]:
            raise ValueError("singular_values length must equal mode count")
        if np.any(s < 0) or np.any(np.diff(s) > 0):
            raise ValueError("singular values must be nonincreasing and >= 0")
        gram = modes.T @ modes
        if np.max(np.abs(gram - np.eye(modes.shape[1]))) > 1e-10:
            raise ValueError("modes are not orthonormal within 1e-10")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "singular_values", s)

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    @property
    def n_state(self) -> int:
        return self.modes.shape[0]

    def truncated(self, rank: int) -> "PODBasis":
        if not 1 <= rank <= self.rank:
            raise ValueError(f"rank {rank} outside [1, {self.rank}]")
        return PODBasis(self.modes[:, :rank], self.singular_values[:rank])


def pod_fit(snapshots: np.ndarray, rank: int, seed: int = 0, **rsvd_kwargs) -> PODBasis:
    """Fit a rank-r basis to a snapshot matrix (states as columns).

    The SVD is taken of the raw snapshot matrix; no mean subtraction or
    column scaling is applied. Callers are responsible for passing training
    snapshots only.
    """
    u, s, _ = randomized_svd(snapshots, rank, seed=seed, **rsvd_kwargs)
    return PODBasis(u, s)


def pod_project(basis: PODBasis, u: np.ndarray) -> np.ndarray:
    """Expansion coefficients of state(s) ``u``; last axis must be N_h."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != basis.n_state:
        raise ValueError(
            f"state length {u.shape[-1]} != basis dimension {basis.n_state}"
        )
    return u @ basis.modes


def pod_reconstruct(basis: PODBasis, coeffs: np.ndarray) -> np.ndarray:
    """Map coefficient vector(s) back to full state(s); last axis must be r."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] != basis.rank:
        raise ValueError(f"coeff length {coeffs.shape[-1]} != rank {basis.rank}")
    return coeffs @ basis.modes.T
