"""Synthetic pendulum regression dataset.

Observation times come from a self-exciting point process with intensity
lambda(t) = mu + sum_{t_i < t} alpha * exp(-beta (t - t_i)), sampled by
Ogata thinning. Each sequence is a damped pendulum observed at those times
through unit-circle coordinates x = sin(theta), y = -cos(theta), with 10%
of coordinate values dropped. The regression target is the damping factor.
"""

import math
from dataclasses import dataclass

import numpy as np

from .data import (Dataset, EventSequence, FeatureSchema, NumericFeature,
                   FORWARD_FILL, REGRESSION)

G = 9.81


@dataclass(frozen=True)
class HawkesParams:
    mu: float
    alpha: float
    beta: float
    end_time: float

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if not (0 <= self.alpha < self.beta):
            raise ValueError("stability requires 0 <= alpha < beta")
        if self.end_time <= 1:
            raise ValueError("end_time must exceed 1")


@dataclass(frozen=True)
class PendulumParams:
    b: float                 # damping factor, the regression target
    m: float = 1.0
    g: float = G
    L: float = 1.0
    theta0: float = 0.0
    omega0: float = 0.0

    def __post_init__(self):
        if self.m <= 0 or self.L <= 0 or self.b < 0:
            raise ValueError("require m > 0, L > 0, b >= 0")


@dataclass(frozen=True)
class SynthConfig:
    n_sequences: int
    seed: int
    target_points: int = 30
    alpha: float = 0.5
    beta: float = 1.0
    end_time_range: tuple = (3.0, 5.0)
    b_range: tuple = (1.0, 3.0)
    length_range: tuple = (0.5, 10.0)
    theta0_range: tuple = (0.0, 2 * math.pi)
    omega0_range: tuple = (-math.pi, math.pi)
    drop_prob: float = 0.1

    def __post_init__(self):
        if not (0 <= self.drop_prob < 1):
            raise ValueError("drop_prob must lie in [0, 1)")


def adjust_base_intensity(target_points, alpha, end_time):
    """Base intensity giving roughly `target_points` events on (0, end_time]."""
    if end_time <= 1:
        raise ValueError("end_time must exceed 1")
    if not (0 <= alpha < 1):
        raise ValueError("alpha must lie in [0, 1)")
    return target_points * (1.0 - alpha) / (end_time - 1.0)


def sample_hawkes_times(p, rng):
    """Ogata thinning with the current intensity as the local upper bound.

    The exponential kernel only decays between events, so lambda evaluated
    just after the latest event dominates the intensity until the next one."""
    t = 0.0
    excitation = 0.0        # sum of alpha*exp(-beta*(t - t_i)) at current t
    times = []
    while True:
        lam_bar = p.mu + excitation
        w = rng.exponential(1.0 / lam_bar)
        decay = math.exp(-p.beta * w)
        t = t + w
        if t > p.end_time:
            break
        excitation *= decay
        if rng.random() * lam_bar <= p.mu + excitation:
            times.append(t)
            excitation += p.alpha
    return times


def _rk4_batch(b, m, L, theta1, theta2, t_end, h=1e-3):
    """Integrate the damped-pendulum system for a batch of parameter vectors,
    returning the state trajectory on the uniform step grid.

    theta2' = -(b/m) theta2 - (g/L) sin(theta1); theta1' = theta2."""
    n_steps = int(math.ceil(t_end / h))
    bm = b / m
    gl = G / L
    th1 = np.array(theta1, dtype=np.float64)
    th2 = np.array(theta2, dtype=np.float64)
    traj1 = np.empty((n_steps + 1, len(th1)))
    traj2 = np.empty((n_steps + 1, len(th1)))
    traj1[0] = th1
    traj2[0] = th2

    def deriv(t1, t2):
        return t2, -bm * t2 - gl * np.sin(t1)

    for k in range(n_steps):
        k1a, k1b = deriv(th1, th2)
        k2a, k2b = deriv(th1 + 0.5 * h * k1a, th2 + 0.5 * h * k1b)
        k3a, k3b = deriv(th1 + 0.5 * h * k2a, th2 + 0.5 * h * k2b)
        k4a, k4b = deriv(th1 + h * k3a, th2 + h * k3b)
        th1 = th1 + h / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        th2 = th2 + h / 6.0 * (k1b + 2 * k2b + 2 * k3b + k4b)
        traj1[k + 1] = th1
        traj2[k + 1] = th2
    return traj1, traj2, h


def _interp_grid(traj, h, query, col):
    idx = np.minimum((query / h).astype(np.int64), traj.shape[0] - 2)
    frac = query / h - idx
    return traj[idx, col] * (1.0 - frac) + traj[idx + 1, col] * frac


def integrate_pendulum(p, query_times, h=1e-3):
    """States (theta1, theta2) at ascending `query_times`, fixed-step RK4
    with linear interpolation between grid points."""
    query = np.asarray(query_times, dtype=np.float64)
    if np.any(np.diff(query) < 0):
        raise ValueError("query times must be ascending")
    if len(query) == 0:
        return np.zeros((0, 2))
    t_end = float(query[-1]) if query[-1] > 0 else h
    traj1, traj2, h = _rk4_batch(np.array([p.b]), np.array([p.m]),
                                 np.array([p.L]), np.array([p.theta0]),
                                 np.array([p.omega0]), t_end, h)
    th1 = _interp_grid(traj1, h, query, 0)
    th2 = _interp_grid(traj2, h, query, 0)
    return np.stack([th1, th2], axis=1)


PENDULUM_SCHEMA = FeatureSchema(
    numeric_features=(NumericFeature("x", imputation=FORWARD_FILL),
                      NumericFeature("y", imputation=FORWARD_FILL)),
    categorical_features=(),
    target_kind=REGRESSION,
)

_MAX_RETRIES = 100


def generate_pendulum_dataset(cfg, chunk_size=512, h=1e-3):
    """Deterministic function of cfg.seed; per-sequence RNG streams come
    from a splittable seed sequence, so generation order does not matter."""
    master = np.random.SeedSequence(cfg.seed)
    children = master.spawn(cfg.n_sequences)
    draws = []          # (times, b, L, theta0, omega0, drop_x, drop_y)
    for child in children:
        rng = np.random.Generator(np.random.PCG64(child))
        times = None
        for _ in range(_MAX_RETRIES):
            end_time = rng.uniform(*cfg.end_time_range)
            mu = adjust_base_intensity(cfg.target_points, cfg.alpha, end_time)
            hp = HawkesParams(mu, cfg.alpha, cfg.beta, end_time)
            candidate = sample_hawkes_times(hp, rng)
            if candidate:
                times = np.asarray(candidate)
                break
        if times is None:
            raise RuntimeError("could not sample a non-empty Hawkes sequence")
        b = rng.uniform(*cfg.b_range)
        length = rng.uniform(*cfg.length_range)
        theta0 = rng.uniform(*cfg.theta0_range)
        omega0 = rng.uniform(*cfg.omega0_range)
        n = len(times)
        drop_x = rng.random(n) < cfg.drop_prob
        drop_y = rng.random(n) < cfg.drop_prob
        draws.append((times, b, length, theta0, omega0, drop_x, drop_y))

    sequences = []
    for lo in range(0, len(draws), chunk_size):
        chunk = draws[lo:lo + chunk_size]
        t_end = max(d[0][-1] for d in chunk)
        traj1, _, step = _rk4_batch(
            np.array([d[1] for d in chunk]),
            np.ones(len(chunk)),
            np.array([d[2] for d in chunk]),
            np.array([d[3] for d in chunk]),
            np.array([d[4] for d in chunk]),
            t_end, h)
        for j, (times, b, _, _, _, drop_x, drop_y) in enumerate(chunk):
            theta = _interp_grid(traj1, step, times, j)
            x = np.sin(theta)
            y = -np.cos(theta)
            numeric = np.stack([np.where(drop_x, np.nan, x),
                                np.where(drop_y, np.nan, y)])
            mask = (~np.isnan(numeric)).astype(np.int8)
            sequences.append(EventSequence(
                id=f"pendulum-{lo + j:06d}", times=times, numeric=numeric,
                categorical=np.zeros((0, len(times)), dtype=np.int64),
                mask=mask, target=float(b)))
    return Dataset(PENDULUM_SCHEMA, sequences)
