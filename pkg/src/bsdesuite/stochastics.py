"""Seedable Brownian increment sampling and Euler-Maruyama forward simulation.

Everything here is pure: (inputs, seed) fully determine every output array.
Gaussian draws come from a counter-based Philox stream keyed by the seed, so
a fixed seed reproduces bit-identical batches across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.random import Generator, Philox


class SimulationError(ValueError):
    """Raised when model coefficients produce non-finite values."""


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Subdivision 0 = t_0 < t_1 < ... < t_N = T of the time interval."""

    times: np.ndarray

    def __init__(self, times: Sequence[float]):
        arr = _as_float_array(times, "grid times")
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("grid needs at least two time points")
        if arr[0] != 0.0:
            raise ValueError("grid must start at t = 0")
        if not np.all(np.diff(arr) > 0):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", arr)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if n_steps < 1:
            raise ValueError("need at least one time step")
        if not np.isfinite(horizon) or horizon <= 0:
            raise ValueError("horizon must be positive and finite")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        """Step sizes, length n_steps."""
        return np.diff(self.times)

    @property
    def modulus(self) -> float:
        return float(np.max(self.dt))


@dataclass
class ModelSpec:
    """Coefficients of the forward diffusion and the backward equation.

    ``drift(t, x)`` maps to R^d, ``diffusion(t, x)`` to a d x d matrix,
    ``generator(t, x, y, z)`` to a scalar and ``terminal(x)`` to a scalar.
    All callables must be numpy-vectorized: ``x`` may carry arbitrary
    leading batch axes, ``t`` is a scalar or an array broadcastable against
    those leading axes, and outputs keep the batch axes.

    ``constant_drift`` / ``constant_diffusion`` may carry the coefficient
    arrays when they do not depend on (t, x); simulation uses them directly,
    with arithmetic identical to the callable path.

    ``generator_dy`` / ``generator_dz`` hold the partial derivatives of the
    generator with respect to y and z.  When absent they are approximated
    by central finite differences during training.
    """

    dim: int
    horizon: float
    drift: Callable
    diffusion: Callable
    generator: Callable
    terminal: Callable
    analytic_solution: Optional[Callable] = None
    analytic_z: Optional[Callable] = None
    generator_dy: Optional[Callable] = None
    generator_dz: Optional[Callable] = None
    constant_drift: Optional[np.ndarray] = None
    constant_diffusion: Optional[np.ndarray] = None
    label: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("model dimension must be >= 1")
        if self.constant_drift is not None:
            self.constant_drift = _as_float_array(self.constant_drift, "constant_drift")
        if self.constant_diffusion is not None:
            self.constant_diffusion = _as_float_array(
                self.constant_diffusion, "constant_diffusion"
            )

    def drift_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.constant_drift is not None:
            return self.constant_drift
        return np.asarray(self.drift(t, x), dtype=np.float64)

    def diffusion_at(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.constant_diffusion is not None:
            return self.constant_diffusion
        return np.asarray(self.diffusion(t, x), dtype=np.float64)


@dataclass
class PathBatch:
    """Simulated Euler states and the Brownian increments that drove them.

    ``states`` has shape (batch, n+1, d) and ``increments`` (batch, n, d)
    where n <= grid.n_steps is the number of simulated steps; entry
    ``states[:, 0]`` equals the starting point ``x0``.
    """

    states: np.ndarray
    increments: np.ndarray
    grid: TimeGrid
    x0: np.ndarray = field(default=None)

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]


def sample_increments(grid: TimeGrid, dim: int, batch: int, seed: int) -> np.ndarray:
    """Draw Brownian increments of shape (batch, n_steps, dim).

    Entry (k, i, :) is an independent centered Gaussian vector with
    per-component variance dt_i.  Identical seeds give bit-identical
    arrays.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = Generator(Philox(key=seed))
    z = rng.standard_normal((batch, grid.n_steps, dim))
    z *= np.sqrt(grid.dt)[None, :, None]
    return z


def _apply_diffusion(sigma: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """sigma @ dw for one matrix or a batch of matrices."""
    if sigma.ndim == 2:
        return dw @ sigma.T
    return np.einsum("...ij,...j->...i", sigma, dw)


def euler_step(x: np.ndarray, t: float, dt: float, dw: np.ndarray, model: ModelSpec) -> np.ndarray:
    """One Euler-Maruyama step x + mu(t,x) dt + sigma(t,x) dw.

    Accepts a single state vector or a batch with leading axes.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if x.shape[-1] != model.dim or dw.shape[-1] != model.dim:
        raise ValueError(
            f"state/increment dimension mismatch: expected {model.dim}, "
            f"got {x.shape[-1]} and {dw.shape[-1]}"
        )
    mu = model.drift_at(t, x)
    if not np.all(np.isfinite(mu)):
        raise SimulationError(f"drift returned non-finite values at t={t}")
    sigma = model.diffusion_at(t, x)
    if not np.all(np.isfinite(sigma)):
        raise SimulationError(f"diffusion returned non-finite values at t={t}")
    return x + mu * dt + _apply_diffusion(sigma, dw)


def _euler_sweep(model, grid, x0, increments, n_steps, check: bool) -> np.ndarray:
    batch = increments.shape[0]
    states = np.empty((batch, n_steps + 1, model.dim))
    states[:, 0, :] = x0
    times = grid.times
    dt = grid.dt
    x = states[:, 0, :]
    for i in range(n_steps):
        t = float(times[i])
        if check:
            x = euler_step(x, t, float(dt[i]), increments[:, i, :], model)
        else:
            mu = model.drift_at(t, x)
            sigma = model.diffusion_at(t, x)
            x = x + mu * dt[i] + _apply_diffusion(sigma, increments[:, i, :])
        states[:, i + 1, :] = x
    return states


def simulate_paths(
    model: ModelSpec,
    grid: TimeGrid,
    x0,
    batch: int,
    seed: int,
    n_steps: Optional[int] = None,
) -> PathBatch:
    """Simulate a batch of Euler paths started at the deterministic x0.

    ``n_steps`` limits the simulation to the first steps of the grid (all
    of them by default).  Each produced state satisfies
    states[:, i+1] = euler_step(states[:, i], t_i, dt_i, increments[:, i]).
    """
    x0 = _as_float_array(x0, "x0")
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},), got {x0.shape}")
    n = grid.n_steps if n_steps is None else int(n_steps)
    if not 1 <= n <= grid.n_steps:
        raise ValueError(f"n_steps must lie in [1, {grid.n_steps}]")
    increments = sample_increments(grid, model.dim, batch, seed)[:, :n, :]
    states = _euler_sweep(model, grid, x0, increments, n, check=False)
    if not np.all(np.isfinite(states[:, -1, :])):
        # Re-run step by step to locate and report the failure.
        x = np.broadcast_to(x0, (batch, model.dim))
        for i in range(n):
            try:
                x = euler_step(x, float(grid.times[i]), float(grid.dt[i]), increments[:, i, :], model)
            except SimulationError as err:
                raise SimulationError(f"step {i}: {err}") from err
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"step {i}: state became non-finite")
        raise SimulationError("non-finite state of unknown origin")
    return PathBatch(states=states, increments=increments, grid=grid, x0=x0)
