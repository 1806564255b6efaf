"""
Inverted pendulum with the classic-control conventions: theta = 0 is upright,
observations are [cos(theta), sin(theta), theta_dot], torque is clipped to
[-2, 2], speed to [-8, 8], and the reward of a step is computed from the
state before the step.
"""

import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import NamedTuple
import numpy as np
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm
from l0_dynamics.config import config
from l0_dynamics.exceptions import (
    BadMagicException,
    ChecksumMismatchException,
    DataFormatException,
    EmptyBufferException,
    EnvironmentStateException,
    ShapeMismatchException,
    TruncatedFileException,
    UnsupportedVersionException,
)
from l0_dynamics.utils.helper import spawn_rngs

logger = logging.getLogger(__name__)

GRAVITY = 9.81
MASS = 1.0
LENGTH = 1.0
DT = 0.05
MAX_TORQUE = 2.0
MAX_SPEED = 8.0
OBS_DIM = 3
ACT_DIM = 1

DATASET_MAGIC = b"SGD0"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHHQ")
_CRC = struct.Struct("<I")
CSV_HEADER = "obs0,obs1,obs2,act0,rew,nobs0,nobs1,nobs2,done"


class PendulumState(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta: float
    theta_dot: float

    def observation(self) -> np.ndarray:
        return observe(np.float64(self.theta), np.float64(self.theta_dot))


class TransitionRecord(NamedTuple):
    obs: np.ndarray
    act: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class TransitionBatch(NamedTuple):
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


def angle_normalize(x: float | np.ndarray) -> float | np.ndarray:
    return ((x + np.pi) % (2 * np.pi)) - np.pi


def observe(theta: float | np.ndarray, theta_dot: float | np.ndarray) -> np.ndarray:
    return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)


def step_batch(
    theta: np.ndarray, theta_dot: np.ndarray, action: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised step: returns (next theta, next theta_dot, reward)."""
    a = np.clip(action, -MAX_TORQUE, MAX_TORQUE)
    reward = -(angle_normalize(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * a**2)

    new_theta_dot = theta_dot + (
        3.0 * GRAVITY / (2.0 * LENGTH) * np.sin(theta) + 3.0 / (MASS * LENGTH**2) * a
    ) * DT
    new_theta_dot = np.clip(new_theta_dot, -MAX_SPEED, MAX_SPEED)
    new_theta = theta + new_theta_dot * DT
    return new_theta, new_theta_dot, reward


def step(state: PendulumState, action: float) -> tuple[PendulumState, np.ndarray, float]:
    if not (
        math.isfinite(state.theta) and math.isfinite(state.theta_dot) and math.isfinite(action)
    ):
        raise EnvironmentStateException(f"Non-finite state {state} or action {action}")
    theta, theta_dot, reward = step_batch(
        np.array([state.theta]), np.array([state.theta_dot]), np.array([action])
    )
    next_state = PendulumState(theta=float(theta[0]), theta_dot=float(theta_dot[0]))
    return next_state, next_state.observation(), float(reward[0])


def reset(rng: np.random.Generator) -> PendulumState:
    theta, theta_dot = rng.uniform(low=[-np.pi, -1.0], high=[np.pi, 1.0])
    return PendulumState(theta=float(theta), theta_dot=float(theta_dot))


class ReplayBuffer:
    """Fixed-capacity ring of transitions stored column-wise."""

    def __init__(self, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM, capacity: int = 1):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.capacity = capacity
        self._obs = np.zeros((capacity, obs_dim))
        self._act = np.zeros((capacity, act_dim))
        self._rew = np.zeros(capacity)
        self._next_obs = np.zeros((capacity, obs_dim))
        self._done = np.zeros(capacity, dtype=bool)
        self._ptr = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def store(
        self,
        obs: np.ndarray,
        act: np.ndarray | float,
        rew: float,
        next_obs: np.ndarray,
        done: bool,
    ):
        self._obs[self._ptr] = obs
        self._act[self._ptr] = act
        self._rew[self._ptr] = rew
        self._next_obs[self._ptr] = next_obs
        self._done[self._ptr] = done
        self._ptr = (self._ptr + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def store_many(
        self,
        obs: np.ndarray,
        act: np.ndarray,
        rew: np.ndarray,
        next_obs: np.ndarray,
        done: np.ndarray,
    ):
        n = len(rew)
        if obs.shape != (n, self.obs_dim) or act.shape != (n, self.act_dim):
            raise ShapeMismatchException(
                ((n, self.obs_dim), (n, self.act_dim)), (obs.shape, act.shape), "transitions"
            )
        for column, values in (
            (self._obs, obs),
            (self._act, act),
            (self._rew, rew),
            (self._next_obs, next_obs),
            (self._done, done),
        ):
            # Only the newest `capacity` rows survive a wrap-around
            idx = (self._ptr + np.arange(n)) % self.capacity
            column[idx[-self.capacity :]] = values[-self.capacity :]
        self._ptr = (self._ptr + n) % self.capacity
        self.count = min(self.count + n, self.capacity)

    @property
    def obs(self) -> np.ndarray:
        return self._obs[: self.count]

    @property
    def act(self) -> np.ndarray:
        return self._act[: self.count]

    @property
    def rew(self) -> np.ndarray:
        return self._rew[: self.count]

    @property
    def next_obs(self) -> np.ndarray:
        return self._next_obs[: self.count]

    @property
    def done(self) -> np.ndarray:
        return self._done[: self.count]

    def record(self, index: int) -> TransitionRecord:
        if not 0 <= index < self.count:
            raise IndexError(f"Record {index} outside buffer of {self.count}")
        return TransitionRecord(
            self._obs[index].copy(),
            self._act[index].copy(),
            float(self._rew[index]),
            self._next_obs[index].copy(),
            bool(self._done[index]),
        )

    def select(self, mask: np.ndarray) -> "ReplayBuffer":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.count,):
            raise ShapeMismatchException((self.count,), mask.shape, "selection mask")
        selected = ReplayBuffer(self.obs_dim, self.act_dim, max(int(mask.sum()), 1))
        selected.store_many(
            self.obs[mask], self.act[mask], self.rew[mask], self.next_obs[mask], self.done[mask]
        )
        return selected

    def __repr__(self) -> str:
        return f"ReplayBuffer(count={self.count}, capacity={self.capacity})"


def sample_batch(
    buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator
) -> TransitionBatch:
    """Uniform sampling with replacement."""
    if buffer.count == 0:
        raise EmptyBufferException()
    idx = rng.integers(0, buffer.count, size=batch_size)
    return TransitionBatch(
        obs=buffer.obs[idx],
        act=buffer.act[idx],
        rew=buffer.rew[idx],
        next_obs=buffer.next_obs[idx],
        done=buffer.done[idx],
    )


def clip_free_mask(buffer: ReplayBuffer) -> np.ndarray:
    """Transitions during which the speed clip did not engage."""
    return np.abs(buffer.next_obs[:, 2]) < MAX_SPEED


def _rollout(
    rngs: list[np.random.Generator], steps_per_episode: int
) -> tuple[np.ndarray, ...]:
    """Run a shard of episodes side by side under a uniform random policy."""
    n_steps = steps_per_episode + 1
    starts = [reset(rng) for rng in rngs]
    actions = np.stack(
        [rng.uniform(-MAX_TORQUE, MAX_TORQUE, size=n_steps) for rng in rngs]
    )
    theta = np.array([s.theta for s in starts])
    theta_dot = np.array([s.theta_dot for s in starts])

    n_eps = len(rngs)
    obs = np.empty((n_eps, n_steps, OBS_DIM))
    rew = np.empty((n_eps, n_steps))
    next_obs = np.empty((n_eps, n_steps, OBS_DIM))
    for t in range(n_steps):
        obs[:, t] = observe(theta, theta_dot)
        theta, theta_dot, rew[:, t] = step_batch(theta, theta_dot, actions[:, t])
        next_obs[:, t] = observe(theta, theta_dot)

    done = np.zeros((n_eps, n_steps), dtype=bool)
    done[:, -1] = True
    return (
        obs.reshape(-1, OBS_DIM),
        actions.reshape(-1, ACT_DIM),
        rew.reshape(-1),
        next_obs.reshape(-1, OBS_DIM),
        done.reshape(-1),
    )


def collect_dataset(
    episodes: int,
    steps_per_episode: int,
    seed: int,
    jobs: int = 1,
    capacity: int | None = None,
) -> ReplayBuffer:
    """
    Random-policy dataset with steps_per_episode + 1 records per episode,
    `done` set on the last record of each episode. Episode i draws from its
    own stream derived from (seed, i), so the result does not depend on `jobs`.
    """
    n_records = episodes * (steps_per_episode + 1)
    capacity = capacity or n_records
    if capacity < n_records:
        raise ValueError(f"capacity {capacity} below the {n_records} records to collect")

    rngs = spawn_rngs(seed, episodes)
    jobs = max(1, min(jobs, episodes))
    bounds = np.linspace(0, episodes, jobs + 1).astype(int)
    shards: dict[int, tuple[np.ndarray, ...]] = {}

    logger.info(
        f"Collecting {episodes} episodes x {steps_per_episode + 1} steps with {jobs} jobs"
    )
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = {
            executor.submit(_rollout, rngs[lo:hi], steps_per_episode): index
            for index, (lo, hi) in enumerate(zip(bounds, bounds[1:]))
        }
        with logging_redirect_tqdm():
            for future in tqdm(
                as_completed(futures),
                total=len(futures),
                desc="Collecting episodes",
                disable=not config.show_progress,
            ):
                shards[futures[future]] = future.result()

    buffer = ReplayBuffer(OBS_DIM, ACT_DIM, capacity)
    for index in sorted(shards):
        buffer.store_many(*shards[index])
    logger.info(f"Collected {buffer}")
    return buffer


def save_dataset(buffer: ReplayBuffer, path: Path):
    header = _HEADER.pack(
        DATASET_MAGIC, DATASET_VERSION, buffer.obs_dim, buffer.act_dim, buffer.count
    )
    payload = b"".join(
        np.ascontiguousarray(column, dtype="<f8").tobytes()
        for column in (buffer.obs, buffer.act, buffer.rew, buffer.next_obs, buffer.done)
    )
    body = header + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + _CRC.pack(zlib.crc32(body)))
    logger.info(f"Saved {buffer.count} records to {path}")


def load_dataset(path: Path) -> ReplayBuffer:
    data = path.read_bytes()
    if len(data) < len(DATASET_MAGIC):
        raise TruncatedFileException(f"{path} is too short for a dataset header")
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise BadMagicException(f"bad magic {data[:4]!r} in {path}")
    if len(data) < _HEADER.size:
        raise TruncatedFileException(f"{path} is too short for a dataset header")

    _, version, obs_dim, act_dim, count = _HEADER.unpack_from(data)
    if version != DATASET_VERSION:
        raise UnsupportedVersionException(version)

    widths = [obs_dim, act_dim, 1, obs_dim, 1]
    expected = _HEADER.size + 8 * count * sum(widths) + _CRC.size
    if len(data) < expected:
        raise TruncatedFileException(f"{path} has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise DataFormatException(f"{path} has {len(data) - expected} trailing bytes")

    body = data[: -_CRC.size]
    (stored_crc,) = _CRC.unpack_from(data, len(body))
    if zlib.crc32(body) != stored_crc:
        raise ChecksumMismatchException(f"checksum mismatch in {path}")

    columns = []
    offset = _HEADER.size
    for width in widths:
        n = count * width
        columns.append(
            np.frombuffer(data, dtype="<f8", count=n, offset=offset).astype(np.float64)
        )
        offset += 8 * n

    obs, act, rew, next_obs, done = columns
    buffer = ReplayBuffer(obs_dim, act_dim, max(count, 1))
    buffer.store_many(
        obs.reshape(count, obs_dim),
        act.reshape(count, act_dim),
        rew.reshape(count),
        next_obs.reshape(count, obs_dim),
        done.reshape(count).astype(bool),
    )
    logger.info(f"Loaded {count} records from {path}")
    return buffer


def export_csv(buffer: ReplayBuffer, path: Path):
    table = np.column_stack(
        [buffer.obs, buffer.act, buffer.rew, buffer.next_obs, buffer.done.astype(np.float64)]
    )
    n_float = table.shape[1] - 1
    np.savetxt(
        path,
        table,
        delimiter=",",
        header=CSV_HEADER,
        comments="",
        fmt=["%.17g"] * n_float + ["%d"],
    )
