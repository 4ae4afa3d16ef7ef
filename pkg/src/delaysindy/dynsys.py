"""Benchmark systems, fixed-step RK4 integration, and scalar measurements.

Everything here is deterministic: same inputs, bitwise-same outputs. Trajectories
are sampled on a uniform grid because the downstream delay embedding needs a
single sampling interval tau.
"""

import numpy as np
from dataclasses import dataclass

DIVERGENCE_CAP = 1e6

DEFAULT_PARAMS = {
    "lorenz": (10.0, 28.0, 8.0 / 3.0),
    "rossler": (0.2, 5.7),
    "lotka_volterra": (4.0, -2.0, -4.0, 1.0),
}

DEFAULT_X0 = {
    "lorenz": (-8.0, 8.0, 27.0),
    "rossler": (1.0, 1.0, 1.0),
    "lotka_volterra": (6.0, 3.0),
}

DEFAULT_BURN_IN = 1000


class IntegrationDiverged(RuntimeError):
    """A state component left the finite range during integration."""

    def __init__(self, step):
        self.step = step
        super().__init__(f"integration diverged at step {step}")


@dataclass(frozen=True)
class SystemDef:
    name: str
    dim: int
    params: np.ndarray
    rhs: object  # rhs(x, params) -> xdot, deterministic, output length == dim


@dataclass
class Trajectory:
    """Uniformly sampled states: times (S,), states (S, m)."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.times.shape[0] != self.states.shape[0]:
            raise ValueError("times and states length mismatch")
        _check_uniform(self.times)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


@dataclass
class MeasurementSeries:
    """Scalar series y(t_i); source_component records which state column it came from."""

    times: np.ndarray
    values: np.ndarray
    source_component: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values length mismatch")
        _check_uniform(self.times)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def __len__(self):
        return len(self.values)


def _check_uniform(times):
    if len(times) < 3:
        return
    steps = np.diff(times)
    dt = steps[0]
    if dt <= 0 or np.any(np.abs(steps - dt) > 1e-12 * max(abs(dt), 1.0)):
        raise ValueError("time grid is not uniformly spaced")


def _lorenz(x, p):
    s, r, b = p
    return np.array([s * (x[1] - x[0]), x[0] * (r - x[2]) - x[1], x[0] * x[1] - b * x[2]])


def _rossler(x, p):
    a, b = p
    return np.array([-x[1] - x[2], x[0] + a * x[1], a + x[2] * (x[0] - b)])


def _lotka_volterra(x, p):
    a, b, c, d = p
    return np.array([a * x[0] + b * x[0] * x[1], c * x[1] + d * x[0] * x[1]])


_BUILTINS = {
    "lorenz": (3, 3, _lorenz),
    "rossler": (3, 2, _rossler),
    "lotka_volterra": (2, 4, _lotka_volterra),
}


def builtin_system(name, params=None):
    """Return a SystemDef for one of the benchmark systems.

    params may be omitted to get the standard chaotic/oscillatory values.
    """
    if name not in _BUILTINS:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(_BUILTINS)}")
    dim, nparams, rhs = _BUILTINS[name]
    if params is None:
        params = DEFAULT_PARAMS[name]
    params = np.asarray(params, dtype=float)
    if params.shape != (nparams,):
        raise ValueError(f"{name} takes {nparams} parameters, got {params.shape}")
    return SystemDef(name=name, dim=dim, params=params, rhs=rhs)


def rk4_step(f, x, dt, step=0):
    """One classical Runge-Kutta step of ẋ = f(x).

    f takes the state only; bind parameters before calling. Raises
    IntegrationDiverged (carrying `step`) if the update leaves the finite range.
    """
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > DIVERGENCE_CAP:
        raise IntegrationDiverged(step)
    return out


def simulate(sys, x0, dt, steps, burn_in=0):
    """Integrate sys from x0; row 0 of the result is the state after burn_in steps."""
    x = np.asarray(x0, dtype=float)
    if x.shape != (sys.dim,):
        raise ValueError(f"x0 must have shape ({sys.dim},), got {x.shape}")
    if steps < 1:
        raise ValueError("steps must be positive")
    f = lambda state: sys.rhs(state, sys.params)
    for i in range(burn_in):
        x = rk4_step(f, x, dt, step=i)
    out = np.empty((steps, sys.dim))
    out[0] = x
    for i in range(1, steps):
        x = rk4_step(f, x, dt, step=burn_in + i - 1)
        out[i] = x
    times = np.arange(steps) * dt
    return Trajectory(times=times, states=out)


def add_noise(series, sigma, seed):
    """Add iid zero-mean Gaussian noise; deterministic under the seed."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    noisy = series.values + rng.normal(0.0, sigma, size=series.values.shape)
    return MeasurementSeries(times=series.times.copy(), values=noisy,
                             source_component=series.source_component)


def measure(traj, component):
    """Extract one state component as a scalar measurement series."""
    m = traj.states.shape[1]
    if not 0 <= component < m:
        raise IndexError(f"component {component} out of range for dim {m}")
    return MeasurementSeries(times=traj.times.copy(),
                             values=traj.states[:, component].copy(),
                             source_component=component)


# CSV I/O. 17 significant digits round-trips float64 exactly.

def _fmt(v):
    return "%.17g" % v


def save_trajectory(traj, path):
    m = traj.states.shape[1]
    header = "t," + ",".join(f"x{i + 1}" for i in range(m))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, row in zip(traj.times, traj.states):
            fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")


def load_trajectory(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(times=data[:, 0], states=data[:, 1:])


def save_measurement(series, path):
    with open(path, "w") as fh:
        fh.write("t,y\n")
        for t, v in zip(series.times, series.values):
            fh.write(_fmt(t) + "," + _fmt(v) + "\n")


def load_measurement(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"expected a t,y file with 2 columns, got {data.shape[1]}")
    return MeasurementSeries(times=data[:, 0], values=data[:, 1])
