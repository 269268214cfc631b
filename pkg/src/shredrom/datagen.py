"""Parametric Kuramoto-Sivashinsky data generation.

The PDE  u_t + u_xx + nu*u_xxxx + u*u_x = 0  on a periodic domain [0, L) is
integrated with a Fourier pseudospectral discretization and the fourth-order
exponential time differencing Runge-Kutta scheme (ETDRK4). The scheme's
phi-coefficients are evaluated by averaging over points of a unit circle in
the complex plane around each lambda*dt, which stays accurate when
lambda*dt is near zero.

Also provides a 3x3 parametric linear ODE with a known closed-form solution,
used as an analytic end-to-end oracle: its modal coefficients can be
recovered from time samples of the first component, while the second and
third components leave a coefficient unobservable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container

log = logging.getLogger(__name__)

DEFAULT_CONTOUR_POINTS = 16


class BlowupError(RuntimeError):
    """A trajectory produced non-finite values."""

    def __init__(self, nu: float, omega: float, step: int):
        super().__init__(
            f"solution blow-up at step {step} (nu={nu:.6g}, omega={omega:.6g})"
        )
        self.nu = nu
        self.omega = omega
        self.step = step


class NonObservableError(ValueError):
    """The sensor constraint system does not determine all coefficients."""


@dataclass(frozen=True)
class KSConfig:
    domain_length: float = 22.0
    horizon: float = 200.0
    dt: float = 0.01
    n_grid: int = 100
    save_stride: int = 100
    nu: float = 1.0
    omega: float = 1.0
    contour_points: int = DEFAULT_CONTOUR_POINTS

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.save_stride < 1:
            raise ValueError(f"save_stride must be >= 1, got {self.save_stride}")
        if self.n_grid < 4:
            raise ValueError(f"n_grid must be >= 4, got {self.n_grid}")
        if self.domain_length <= 0:
            raise ValueError(f"domain_length must be > 0, got {self.domain_length}")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if self.contour_points < 1:
            raise ValueError(f"contour_points must be >= 1, got {self.contour_points}")
        blocks = self.horizon / (self.dt * self.save_stride)
        if abs(blocks - round(blocks)) > 1e-8:
            raise ValueError(
                f"horizon {self.horizon} is not a whole number of save intervals "
                f"(dt*save_stride = {self.dt * self.save_stride})"
            )

    @property
    def n_saved(self) -> int:
        """Number of saved snapshots, initial state included."""
        return round(self.horizon / (self.dt * self.save_stride)) + 1

    @property
    def grid(self) -> np.ndarray:
        return self.domain_length * np.arange(self.n_grid) / self.n_grid

    @property
    def times(self) -> np.ndarray:
        return self.dt * self.save_stride * np.arange(self.n_saved)


@dataclass(frozen=True)
class TrajectorySet:
    states: np.ndarray  # (N_p, N_t, N_h)
    params: np.ndarray  # (N_p, n_params)
    times: np.ndarray  # (N_t,)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        params = np.asarray(self.params, dtype=np.float64)
        times = np.asarray(self.times, dtype=np.float64)
        if states.ndim != 3 or params.ndim != 2 or times.ndim != 1:
            raise ValueError("states must be 3-D, params 2-D, times 1-D")
        if states.shape[0] != params.shape[0] or states.shape[1] != times.shape[0]:
            raise ValueError("inconsistent scenario/time axes")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(params))):
            raise ValueError("non-finite states or params")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "times", times)

    @property
    def n_scenarios(self) -> int:
        return self.states.shape[0]

    @property
    def n_times(self) -> int:
        return self.states.shape[1]

    @property
    def n_state(self) -> int:
        return self.states.shape[2]

    def save(self, path: str | Path) -> None:
        write_container(
            path, {"states": self.states, "params": self.params, "times": self.times}
        )

    @classmethod
    def load(cls, path: str | Path) -> "TrajectorySet":
        t = read_container(path)
        return cls(states=t["states"], params=t["params"], times=t["times"])


def ks_initial(grid: np.ndarray, omega: float, domain_length: float) -> np.ndarray:
    """Initial profile cos(2*pi*omega*x/L) * (1 + sin(2*pi*omega*x/L))."""
    phase = 2.0 * np.pi * omega * np.asarray(grid, dtype=np.float64) / domain_length
    return np.cos(phase) * (1.0 + np.sin(phase))


def _etdrk4_tables(lam: np.ndarray, dt: float, m_points: int):
    """ETDRK4 scalar coefficients for a diagonal linear symbol ``lam``.

    Each phi-function is the average of its integrand over ``m_points``
    points on a unit circle centered at lambda*dt; lam is real here so the
    upper half circle plus a real part gives the full contour average.
    """
    roots = np.exp(1j * np.pi * (np.arange(m_points) + 0.5) / m_points)
    lr = dt * lam[..., None] + roots
    exp_lr = np.exp(lr)
    e_full = np.exp(dt * lam)
    e_half = np.exp(0.5 * dt * lam)
    q = dt * ((np.expm1(lr / 2.0) / lr).mean(-1)).real
    f1 = dt * (((-4.0 - lr + exp_lr * (4.0 - 3.0 * lr + lr**2)) / lr**3).mean(-1)).real
    f2 = dt * (((2.0 + lr + exp_lr * (lr - 2.0)) / lr**3).mean(-1)).real
    f3 = dt * (((-4.0 - 3.0 * lr - lr**2 + exp_lr * (4.0 - lr)) / lr**3).mean(-1)).real
    return e_full, e_half, q, f1, f2, f3


def _integrate_batch(
    u0: np.ndarray, nu: np.ndarray, cfg: KSConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance a batch of initial states; rows evolve independently.

    Returns (states [B, N_t, N], blown mask [B], blow_step [B]). Rows that
    go non-finite are flagged and carry NaNs from the failing save on; the
    remaining rows are unaffected.
    """
    u0 = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    nu = np.asarray(nu, dtype=np.float64).reshape(-1)
    batch, n = u0.shape
    if nu.shape[0] != batch:
        raise ValueError("nu must provide one viscosity per row")
    if n != cfg.n_grid:
        raise ValueError(f"initial state length {n} != n_grid {cfg.n_grid}")

    k = 2.0 * np.pi * np.arange(n // 2 + 1) / cfg.domain_length
    lam = k**2 - nu[:, None] * k**4
    # Zero the Nyquist mode in the odd-derivative operator (even n).
    ik = 1j * k.copy()
    if n % 2 == 0:
        ik[-1] = 0.0
    e_full, e_half, q, f1, f2, f3 = _etdrk4_tables(lam, cfg.dt, cfg.contour_points)

    def nonlin(v_hat):
        u = np.fft.irfft(v_hat, n=n, axis=-1)
        return -0.5 * ik * np.fft.rfft(u * u, axis=-1)

    n_saved = cfg.n_saved
    states = np.empty((batch, n_saved, n))
    states[:, 0] = u0
    blown = np.zeros(batch, dtype=bool)
    blow_step = np.full(batch, -1, dtype=np.int64)
    v = np.fft.rfft(u0, axis=-1)
    step = 0
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for ksave in range(1, n_saved):
            for _ in range(cfg.save_stride):
                nv = nonlin(v)
                a = e_half * v + q * nv
                na = nonlin(a)
                b = e_half * v + q * na
                nb = nonlin(b)
                c = e_half * a + q * (2.0 * nb - nv)
                nc = nonlin(c)
                v = e_full * v + f1 * nv + 2.0 * f2 * (na + nb) + f3 * nc
                step += 1
                if not np.all(np.isfinite(v)):
                    bad = ~np.all(np.isfinite(v), axis=-1) & ~blown
                    blow_step[bad] = step
                    blown |= bad
            states[:, ksave] = np.fft.irfft(v, n=n, axis=-1)
    return states, blown, blow_step


def ks_simulate_from(u0: np.ndarray, cfg: KSConfig) -> np.ndarray:
    """Integrate one trajectory from an explicit initial state."""
    states, blown, blow_step = _integrate_batch(u0[None, :], [cfg.nu], cfg)
    if blown[0]:
        raise BlowupError(cfg.nu, cfg.omega, int(blow_step[0]))
    return states[0]


def ks_simulate(cfg: KSConfig) -> np.ndarray:
    """Integrate one trajectory from the configured initial condition.

    Returns the saved snapshots, shape (N_t, N_h); row 0 is the initial
    state, row k the solution at t = k*dt*save_stride.
    """
    return ks_simulate_from(ks_initial(cfg.grid, cfg.omega, cfg.domain_length), cfg)


def _param_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(index, attempt))
    return np.random.Generator(np.random.Philox(ss))


def sample_parameters(
    ranges: list[tuple[float, float]], n: int, seed: int
) -> np.ndarray:
    """Draw n i.i.d. uniform parameter vectors, one child stream per row.

    Row i depends only on (seed, i), so any single draw is reproducible
    without generating the others.
    """
    if len(ranges) == 0:
        raise ValueError("ranges must not be empty")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    lows = np.array([lo for lo, _ in ranges], dtype=np.float64)
    highs = np.array([hi for _, hi in ranges], dtype=np.float64)
    if np.any(lows >= highs):
        raise ValueError("each range must satisfy lo < hi")
    out = np.empty((n, len(ranges)))
    for i in range(n):
        out[i] = _param_rng(seed, i).uniform(lows, highs)
    return out


def generate_trajectories(
    base: KSConfig,
    ranges: list[tuple[float, float]],
    n: int,
    seed: int,
    max_attempts: int = 5,
) -> TrajectorySet:
    """Generate n trajectories with (nu, omega) drawn uniformly from ranges.

    All rows are integrated as one vectorized batch. A row that blows up has
    its parameter draw resampled (from that row's next attempt stream) and is
    re-integrated; the event is logged.
    """
    if len(ranges) != 2:
        raise ValueError("expected exactly (nu, omega) ranges")
    params = sample_parameters(ranges, n, seed)
    attempts = np.zeros(n, dtype=np.int64)
    states = np.empty((n, base.n_saved, base.n_grid))
    pending = np.arange(n)
    while pending.size:
        u0 = np.stack(
            [
                ks_initial(base.grid, params[i, 1], base.domain_length)
                for i in pending
            ]
        )
        got, blown, blow_step = _integrate_batch(u0, params[pending, 0], base)
        states[pending] = got
        failed = pending[blown]
        for i, s in zip(failed, blow_step[blown]):
            attempts[i] += 1
            if attempts[i] >= max_attempts:
                raise BlowupError(params[i, 0], params[i, 1], int(s))
            log.warning(
                "trajectory %d blew up at step %d (nu=%.6g, omega=%.6g); "
                "resampling (attempt %d)",
                i,
                s,
                params[i, 0],
                params[i, 1],
                attempts[i],
            )
            params[i] = _param_rng(seed, int(i), int(attempts[i])).uniform(
                [lo for lo, _ in ranges], [hi for _, hi in ranges]
            )
        pending = failed
    return TrajectorySet(states=states, params=params, times=base.times)


# --- 3x3 parametric linear ODE with closed-form solution --------------------
#
#   du/dt = [[1, 2, 0], [0, -1, mu], [0, 0, 2]] u,   u(0) = [1, 2, 3]
#
# Eigenpairs: (2, [2*mu, mu, 3]), (-1, [-1, 1, 0]), (1, [1, 0, 0]).

_ODE_RATES = np.array([2.0, -1.0, 1.0])


def ode_system_matrix(mu: float) -> np.ndarray:
    return np.array([[1.0, 2.0, 0.0], [0.0, -1.0, mu], [0.0, 0.0, 2.0]])


def ode_modes(mu: float) -> np.ndarray:
    """Eigenvectors as columns, ordered by rate (2, -1, 1)."""
    return np.array([[2.0 * mu, -1.0, 1.0], [mu, 1.0, 0.0], [3.0, 0.0, 0.0]])


def ode_coefficients(mu: float) -> np.ndarray:
    """Modal coefficients matching the initial condition [1, 2, 3]."""
    return np.array([1.0, 2.0 - mu, 3.0 - 3.0 * mu])


def ode_solution(t: float, mu: float) -> np.ndarray:
    """Closed-form solution at time t for parameter mu."""
    c = ode_coefficients(mu)
    return ode_modes(mu) @ (c * np.exp(_ODE_RATES * t))


def ode_recover_coeffs(
    measurements: list[tuple[float, float]], component: int, mu: float
) -> np.ndarray:
    """Recover modal coefficients from 3 time samples of one component.

    Solves the 3x3 system M c = y with M[k, m] = exp(rate_m * t_k) *
    mode_m[component]. Components 2 and 3 never see the fastest-decaying
    content (their mode entries vanish), so their constraint matrix is
    singular and recovery must be refused.
    """
    if component not in (1, 2, 3):
        raise ValueError(f"component must be 1, 2 or 3, got {component}")
    if len(measurements) != 3:
        raise ValueError("exactly 3 measurements are required")
    t = np.array([tk for tk, _ in measurements], dtype=np.float64)
    y = np.array([vk for _, vk in measurements], dtype=np.float64)
    if len(set(t.tolist())) != 3:
        raise ValueError("measurement times must be distinct")
    row = ode_modes(mu)[component - 1]
    m = np.exp(np.outer(t, _ODE_RATES)) * row
    if not np.all(np.isfinite(m)) or np.linalg.cond(m) > 1e12:
        raise NonObservableError(
            f"component {component} does not determine all coefficients "
            f"(mu={mu:.6g}): constraint matrix is singular"
        )
    return np.linalg.solve(m, y)
