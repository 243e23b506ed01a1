"""Pairwise contact probabilities from device positions or random-walk traces.

Contact probability between two users is the fraction of trajectory samples
at which their distance is at most the collaboration radius.  Static
deployments reduce to binary contacts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demand import _readonly


class MobilityError(ValueError):
    """Invalid mobility configuration or input."""


@dataclass(frozen=True, eq=False)
class ContactMatrix:
    """Symmetric K x K matrix of pairwise contact probabilities.

    Diagonal entries are 1: a user is always in contact with itself.
    """

    a: np.ndarray
    r_c: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise MobilityError("contact matrix must be square")
        if not np.array_equal(a, a.T):
            raise MobilityError("contact matrix must be symmetric")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise MobilityError("contact probabilities must lie in [0, 1]")
        if not np.all(np.diag(a) == 1.0):
            raise MobilityError("diagonal contact entries must equal 1")
        object.__setattr__(self, "a", _readonly(a))

    @property
    def K(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class MobilityConfig:
    """Random-walk parameters.

    Each user repeatedly draws a speed uniform on [0, v_max] and a direction
    uniform on [0, 2*pi), walks for ``leg_duration`` seconds, and reflects off
    the walls of an ``area_side`` x ``area_side`` square.  Positions are
    sampled every ``time_step`` seconds over a period of ``period`` seconds.
    """

    area_side: float = 500.0
    v_max: float = 1.0
    period: float = 7200.0
    leg_duration: float = 100.0
    time_step: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.area_side <= 0:
            raise MobilityError("area side must be positive")
        if self.v_max < 0:
            raise MobilityError("v_max must be nonnegative")
        if self.period <= 0 or self.leg_duration <= 0 or self.time_step <= 0:
            raise MobilityError("all durations must be positive")
        if self.leg_duration > self.period:
            raise MobilityError("leg duration cannot exceed the period")
        if self.time_step > self.leg_duration:
            raise MobilityError("time step cannot exceed the leg duration")

    @property
    def samples(self) -> int:
        return int(round(self.period / self.time_step))


def static_contacts(positions, r_c: float) -> ContactMatrix:
    """Binary contacts for fixed positions: 1 iff distance <= r_c."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise MobilityError("positions must have shape (K, 2)")
    if r_c < 0:
        raise MobilityError("collaboration radius must be nonnegative")
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    a = (d2 <= r_c * r_c).astype(np.float64)
    np.fill_diagonal(a, 1.0)
    a = np.triu(a) + np.triu(a, k=1).T
    return ContactMatrix(a, float(r_c))


def _reflect(u: np.ndarray, side: float) -> np.ndarray:
    # Fold the unconstrained coordinate with a period-2L triangle wave; this
    # is exactly a straight path reflecting off the walls of [0, L].
    m = np.mod(u, 2.0 * side)
    return np.where(m > side, 2.0 * side - m, m)


def simulate_random_walk(config: MobilityConfig, K: int) -> np.ndarray:
    """Sampled positions of ``K`` walkers, shape (samples, K, 2).

    All randomness comes from ``config.seed``: initial positions first, then
    per-leg speeds, then per-leg directions.
    """
    if K <= 0:
        raise MobilityError("need at least one user")
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    start = gen.uniform(0.0, config.area_side, (K, 2))
    n_legs = int(np.ceil(config.period / config.leg_duration))
    speeds = gen.uniform(0.0, config.v_max, (K, n_legs)) if config.v_max > 0 else np.zeros((K, n_legs))
    angles = gen.uniform(0.0, 2.0 * np.pi, (K, n_legs))

    vel = np.stack([speeds * np.cos(angles), speeds * np.sin(angles)], axis=2)
    leg_disp = vel * config.leg_duration
    # leg_start[k, i] is the unreflected position at the start of leg i
    leg_start = np.concatenate(
        [start[:, None, :], start[:, None, :] + np.cumsum(leg_disp, axis=1)], axis=1)

    t = np.arange(config.samples, dtype=np.float64) * config.time_step
    leg_idx = np.minimum((t // config.leg_duration).astype(np.int64), n_legs - 1)
    tau = t - leg_idx * config.leg_duration
    # (K, S, 2) unreflected positions, then fold into the square
    pos = leg_start[:, leg_idx, :] + vel[:, leg_idx, :] * tau[None, :, None]
    pos = _reflect(pos, config.area_side)
    return np.ascontiguousarray(pos.transpose(1, 0, 2))


def contacts_from_trajectory(trajectory: np.ndarray, r_c: float) -> ContactMatrix:
    """Fraction of samples with pairwise distance <= r_c, per user pair."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[2] != 2:
        raise MobilityError("trajectory must have shape (samples, K, 2)")
    if r_c < 0:
        raise MobilityError("collaboration radius must be nonnegative")
    S, K = traj.shape[0], traj.shape[1]
    counts = np.zeros((K, K), dtype=np.int64)
    r2 = r_c * r_c
    chunk = max(1, int(2_000_000 // max(K * K, 1)))
    for lo in range(0, S, chunk):
        block = traj[lo:lo + chunk]
        d2 = ((block[:, :, None, :] - block[:, None, :, :]) ** 2).sum(axis=3)
        counts += (d2 <= r2).sum(axis=0)
    a = counts / float(S)
    np.fill_diagonal(a, 1.0)
    a = np.triu(a) + np.triu(a, k=1).T
    return ContactMatrix(a, float(r_c))


def random_walk_contacts(config: MobilityConfig, K: int, r_c: float) -> ContactMatrix:
    """Contact probabilities from a seeded random-walk simulation.

    With ``v_max = 0`` this equals ``static_contacts`` on the initial
    positions.
    """
    return contacts_from_trajectory(simulate_random_walk(config, K), r_c)


def save_contacts(contacts: ContactMatrix, base, *, period=None, v_max=None,
                  seed=None):
    """Write the dense matrix as CSV plus a JSON sidecar of the parameters."""
    import json
    from pathlib import Path

    base = Path(base)
    csv_path = base.with_suffix(".csv")
    rows = [",".join(repr(float(v)) for v in row) for row in contacts.a]
    csv_path.write_text("\n".join(rows) + "\n")
    sidecar = {"r_c": contacts.r_c, "T_p": period, "v_max": v_max, "seed": seed}
    json_path = base.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return csv_path, json_path


def load_contacts(base) -> tuple[ContactMatrix, dict]:
    import json
    from pathlib import Path

    base = Path(base)
    rows = [[float(v) for v in line.split(",")]
            for line in base.with_suffix(".csv").read_text().splitlines()]
    sidecar = json.loads(base.with_suffix(".json").read_text())
    return ContactMatrix(np.array(rows), sidecar["r_c"]), sidecar
