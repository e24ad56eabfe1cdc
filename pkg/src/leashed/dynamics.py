"""Fluid model of thread flow between gradient computation and the publish loop.

With m threads, mean gradient-computation time T_c and mean update time T_u,
threads arrive at the publish retry loop at rate (m - n)/T_c and leave it at
rate n/T_u, scaled by (1 + gamma) when a persistence bound adds extra
departures (abandonments).  The deterministic recurrence

    n_{t+1} = n_t + (m - n_t)/T_c - n_t (1 + gamma)/T_u

has the closed-form solution implemented in :func:`n_t_closed` (for gamma=0)
and the fixed point of :func:`fixed_point` in general.  A stochastic
discrete-event simulation of the same system validates the fluid limit.

All computation here is float64 and single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np


@dataclass(frozen=True)
class DynamicsParams:
    m: int
    t_c: float
    t_u: float
    gamma: float = 0.0
    n0: float = 0.0
    horizon: int = 100

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.t_c <= 0 or self.t_u <= 0:
            raise ValueError("t_c and t_u must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.n0 <= self.m:
            raise ValueError("n0 must lie in [0, m]")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")


def rates(p: DynamicsParams, n: float) -> tuple[float, float]:
    """Arrival and departure rates (lambda, mu) at occupancy n."""
    if not 0 <= n <= p.m:
        raise ValueError(f"occupancy {n} outside [0, {p.m}]")
    lam = (p.m - n) / p.t_c
    mu = n / p.t_u * (1.0 + p.gamma)
    return lam, mu


def stability_factor(p: DynamicsParams) -> float:
    """Per-step contraction factor; the recurrence converges iff |factor| < 1."""
    return 1.0 - 1.0 / p.t_c - (1.0 + p.gamma) / p.t_u


def is_stable(p: DynamicsParams) -> bool:
    return abs(stability_factor(p)) < 1.0


def fixed_point(p: DynamicsParams) -> float:
    """Steady-state occupancy of the retry loop, shifted by gamma."""
    return p.m / (p.t_c / p.t_u * (1.0 + p.gamma) + 1.0)


def n_t_recurrence(p: DynamicsParams) -> np.ndarray:
    """Trajectory [n_0, ..., n_horizon] by literal iteration of the recurrence."""
    out = np.empty(p.horizon + 1, dtype=np.float64)
    n = float(p.n0)
    out[0] = n
    for k in range(1, p.horizon + 1):
        n = n + (p.m - n) / p.t_c - n * (1.0 + p.gamma) / p.t_u
        out[k] = n
    return out


class ClosedForm(NamedTuple):
    value: Union[float, np.ndarray]
    stable: bool


def n_t_closed(p: DynamicsParams, t: Union[int, np.ndarray]) -> ClosedForm:
    """Closed-form occupancy at step t (gamma = 0 only).

    The ``stable`` flag reports whether the geometric factor has modulus
    below one; when it does not, the value is still returned but the
    recurrence it solves diverges.
    """
    if p.gamma != 0.0:
        raise ValueError("closed form is stated for gamma = 0")
    r = 1.0 - 1.0 / p.t_c - 1.0 / p.t_u
    rt = np.power(r, t) if isinstance(t, np.ndarray) else r**t
    n_star = p.m / (1.0 + p.t_c / p.t_u)
    value = (1.0 - rt) * n_star + rt * p.n0
    return ClosedForm(value=value, stable=abs(r) < 1.0)


def estimate_gamma(published: int, abandoned: int) -> float:
    """Departure-rate surplus estimated from run telemetry.

    Total retry-loop exits are published + abandoned updates; the surplus over
    the base (publish-only) departure rate is their ratio minus one.  This is
    an approximation: it treats abandonments as uniformly spread over time.
    """
    if published < 1:
        raise ValueError("need at least one published update")
    return (published + abandoned) / published - 1.0


@dataclass(frozen=True)
class SimulationResult:
    """Event-driven trajectory: occupancy after each transition."""

    times: np.ndarray  # ascending event times
    occupancy: np.ndarray  # retry-loop occupancy immediately after each event
    time_average: float
    histogram: np.ndarray  # fraction of time at each integer occupancy


def simulate_events(
    p: DynamicsParams,
    seed: int,
    service: str = "exp",
    n_events: int = 100_000,
) -> SimulationResult:
    """Simulate m threads alternating compute and retry-loop service.

    Compute phases have mean duration t_c and service phases mean
    t_u / (1 + gamma); ``service`` selects deterministic ("det") or
    exponential ("exp") durations for both phases.  round(n0) threads start
    inside the retry loop.  Deterministic given the seed.
    """
    if service not in ("det", "exp"):
        raise ValueError(f"service must be 'det' or 'exp', got {service!r}")
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    rng = np.random.default_rng(seed)
    mean_service = p.t_u / (1.0 + p.gamma)
    per_thread = n_events // p.m + 2
    n_init = int(round(p.n0))

    all_times = []
    all_deltas = []
    for thread in range(p.m):
        in_loop_first = thread < n_init
        if service == "exp":
            durations = np.empty(2 * per_thread, dtype=np.float64)
            if in_loop_first:
                durations[0::2] = rng.exponential(mean_service, per_thread)
                durations[1::2] = rng.exponential(p.t_c, per_thread)
            else:
                durations[0::2] = rng.exponential(p.t_c, per_thread)
                durations[1::2] = rng.exponential(mean_service, per_thread)
        else:
            durations = np.empty(2 * per_thread, dtype=np.float64)
            if in_loop_first:
                durations[0::2] = mean_service
                durations[1::2] = p.t_c
            else:
                durations[0::2] = p.t_c
                durations[1::2] = mean_service
        times = np.cumsum(durations)
        deltas = np.empty(2 * per_thread, dtype=np.int64)
        if in_loop_first:
            deltas[0::2] = -1  # leaving the retry loop
            deltas[1::2] = +1
        else:
            deltas[0::2] = +1  # entering the retry loop
            deltas[1::2] = -1
        all_times.append(times)
        all_deltas.append(deltas)

    times = np.concatenate(all_times)
    deltas = np.concatenate(all_deltas)
    order = np.argsort(times, kind="stable")
    times = times[order][:n_events]
    deltas = deltas[order][:n_events]
    occupancy = n_init + np.cumsum(deltas)

    # Occupancy holds on [t_i, t_{i+1}); the initial segment [0, t_0) is n_init.
    levels = np.concatenate(([n_init], occupancy[:-1]))
    widths = np.diff(np.concatenate(([0.0], times)))
    total = times[-1]
    time_average = float(np.dot(levels, widths) / total)
    histogram = np.bincount(levels, weights=widths, minlength=p.m + 1) / total
    return SimulationResult(
        times=times,
        occupancy=occupancy,
        time_average=time_average,
        histogram=histogram,
    )
