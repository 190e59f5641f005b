"""Seedable discrete-control environments and fixed probe batches.

CartPole follows the classic cart-pole benchmark dynamics (explicit Euler,
tau = 0.02, 500-step limit). GridRoom is an 8x8 walled room with a symbolic
egocentric observation and a 7-action space.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from oui_lab import kernels

CARTPOLE = "cartpole"
GRIDROOM = "gridroom"
ENV_IDS = (CARTPOLE, GRIDROOM)

X_THRESHOLD = 2.4
THETA_THRESHOLD = 12 * 2 * math.pi / 360
CARTPOLE_MAX_STEPS = 500

PROBE_MAGIC = b"OUIP"
PROBE_VERSION = 1
PROBE_SIZES = {CARTPOLE: 1024, GRIDROOM: 512}


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


def check_env_id(env_id: str) -> str:
    if env_id not in ENV_IDS:
        raise ValueError(f"unknown env {env_id!r}; expected one of {ENV_IDS}")
    return env_id


# ---------------------------------------------------------------- CartPole


def cartpole_reset(seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.05, 0.05, size=4)


def cartpole_dynamics(state, action: int) -> np.ndarray:
    if action not in (0, 1):
        raise ValueError(f"invalid CartPole action {action!r}")
    return np.array(kernels.cartpole_step(float(state[0]), float(state[1]), float(state[2]), float(state[3]), int(action)))


def cartpole_failed(state) -> bool:
    return bool(abs(state[0]) > X_THRESHOLD or abs(state[2]) > THETA_THRESHOLD)


def cartpole_step(state, action: int, elapsed: int = 0) -> StepResult:
    """Advance one step; ``elapsed`` is the number of steps already taken."""
    nxt = cartpole_dynamics(state, action)
    terminated = cartpole_failed(nxt)
    truncated = (not terminated) and elapsed + 1 >= CARTPOLE_MAX_STEPS
    return StepResult(nxt, 1.0, terminated, truncated)


class CartPole:
    obs_dim = 4
    n_actions = 2

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self.state = None
        self.elapsed = 0

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = tuple(float(v) for v in self._rng.uniform(-0.05, 0.05, size=4))
        self.elapsed = 0
        return np.array(self.state)

    def step(self, action: int) -> StepResult:
        if action != 0 and action != 1:
            raise ValueError(f"invalid CartPole action {action!r}")
        s = kernels.cartpole_step(*self.state, action)
        self.state = s
        self.elapsed += 1
        terminated = abs(s[0]) > X_THRESHOLD or abs(s[2]) > THETA_THRESHOLD
        truncated = (not terminated) and self.elapsed >= CARTPOLE_MAX_STEPS
        return StepResult(np.array(s), 1.0, terminated, truncated)


# ---------------------------------------------------------------- GridRoom

GRID_SIZE = 8
VIEW = 5
GRID_MAX_STEPS = 256
GRID_START = (1, 1)
GRID_GOAL = (GRID_SIZE - 2, GRID_SIZE - 2)
# heading 0=east, 1=south, 2=west, 3=north; positions are (col, row)
HEADINGS = ((1, 0), (0, 1), (-1, 0), (0, -1))
TURN_LEFT, TURN_RIGHT, FORWARD = 0, 1, 2
GRID_ACTIONS = 7

EMPTY, WALL, GOAL, OUTSIDE = 0, 1, 2, 3
N_CELL_KINDS = 4
GRID_OBS_DIM = VIEW * VIEW * N_CELL_KINDS + 4


@dataclass(frozen=True)
class GridState:
    pos: tuple[int, int]
    heading: int
    steps: int = 0


def _cell(col: int, row: int) -> int:
    if not (0 <= col < GRID_SIZE and 0 <= row < GRID_SIZE):
        return OUTSIDE
    if col in (0, GRID_SIZE - 1) or row in (0, GRID_SIZE - 1):
        return WALL
    if (col, row) == GRID_GOAL:
        return GOAL
    return EMPTY


def gridroom_observe(state: GridState) -> np.ndarray:
    """One-hot 5x5 egocentric window (agent at bottom centre, facing up) + heading."""
    obs = np.zeros(GRID_OBS_DIM)
    fx, fy = HEADINGS[state.heading]
    # right-hand direction relative to the heading
    rx, ry = -fy, fx
    col0, row0 = state.pos
    for i in range(VIEW):  # rows of the view, i = 0 is farthest ahead
        ahead = VIEW - 1 - i
        for j in range(VIEW):
            side = j - VIEW // 2
            c = col0 + fx * ahead + rx * side
            r = row0 + fy * ahead + ry * side
            obs[(i * VIEW + j) * N_CELL_KINDS + _cell(c, r)] = 1.0
    obs[VIEW * VIEW * N_CELL_KINDS + state.heading] = 1.0
    return obs


def gridroom_reset(seed=None) -> GridState:
    # the empty room has a fixed start; the seed is accepted for API symmetry
    return GridState(GRID_START, 0, 0)


def gridroom_step(state: GridState, action: int) -> tuple[GridState, StepResult]:
    if not (isinstance(action, (int, np.integer)) and 0 <= action < GRID_ACTIONS):
        raise ValueError(f"invalid GridRoom action {action!r}")
    pos, heading = state.pos, state.heading
    if action == TURN_LEFT:
        heading = (heading - 1) % 4
    elif action == TURN_RIGHT:
        heading = (heading + 1) % 4
    elif action == FORWARD:
        dx, dy = HEADINGS[heading]
        target = (pos[0] + dx, pos[1] + dy)
        if _cell(*target) in (EMPTY, GOAL):
            pos = target
    steps = state.steps + 1
    nxt = GridState(pos, heading, steps)
    reached = pos == GRID_GOAL
    reward = 1.0 - 0.9 * (steps / GRID_MAX_STEPS) if reached else 0.0
    truncated = (not reached) and steps >= GRID_MAX_STEPS
    return nxt, StepResult(gridroom_observe(nxt), reward, reached, truncated)


class GridRoom:
    obs_dim = GRID_OBS_DIM
    n_actions = GRID_ACTIONS

    def __init__(self, seed: int = 0):
        self.state = None

    def reset(self, seed=None) -> np.ndarray:
        self.state = gridroom_reset(seed)
        return gridroom_observe(self.state)

    def step(self, action: int) -> StepResult:
        self.state, result = gridroom_step(self.state, int(action))
        return result


def make_env(env_id: str, seed: int = 0):
    check_env_id(env_id)
    return CartPole(seed) if env_id == CARTPOLE else GridRoom(seed)


# ---------------------------------------------------------------- probe batches


@dataclass(frozen=True)
class ProbeBatch:
    observations: np.ndarray = field(repr=False)
    source_env: str
    seed: int

    def __post_init__(self):
        obs = np.array(self.observations, dtype=np.float64, order="C")
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)

    @property
    def size(self) -> int:
        return self.observations.shape[0]

    def to_bytes(self) -> bytes:
        b, d = self.observations.shape
        header = PROBE_MAGIC + struct.pack("<III", PROBE_VERSION, b, d)
        return header + self.observations.astype("<f8").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def probe_from_bytes(data: bytes, source_env: str = "", seed: int = 0) -> ProbeBatch:
    if len(data) < 16 or data[:4] != PROBE_MAGIC:
        raise ValueError("not a probe batch file (bad magic)")
    version, b, d = struct.unpack("<III", data[4:16])
    if version != PROBE_VERSION:
        raise ValueError(f"unsupported probe version {version}")
    body = data[16:]
    if len(body) != 8 * b * d:
        raise ValueError("probe batch payload length does not match header")
    obs = np.frombuffer(body, dtype="<f8").reshape(b, d).astype(np.float64)
    return ProbeBatch(obs, source_env, seed)


def write_probe(probe: ProbeBatch, path) -> str:
    path = Path(path)
    data = probe.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_probe(path, source_env: str = "", seed: int = 0) -> ProbeBatch:
    return probe_from_bytes(Path(path).read_bytes(), source_env, seed)


def make_probe_batch(env_id: str, size: int | None = None, seed: int = 0) -> ProbeBatch:
    """Roll a uniform-random policy and keep one observation per step."""
    check_env_id(env_id)
    size = PROBE_SIZES[env_id] if size is None else int(size)
    if size <= 0:
        raise ValueError("probe size must be positive")
    rng = np.random.default_rng(seed)
    env = make_env(env_id, seed)
    obs = env.reset(seed=seed)
    rows = []
    while len(rows) < size:
        rows.append(obs)
        result = env.step(int(rng.integers(env.n_actions)))
        obs = env.reset() if (result.terminated or result.truncated) else result.observation
    return ProbeBatch(np.array(rows), env_id, seed)


def cache_dir() -> Path:
    root = os.environ.get("OUI_LAB_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "oui_lab")
    return Path(root)


def load_probe_batch(env_id: str, size: int | None = None, seed: int = 0) -> ProbeBatch:
    """Load the persisted probe for (env, size, seed), building it on first use.

    The cache file name carries the content hash, so a stale or corrupted file
    is never silently reused.
    """
    check_env_id(env_id)
    size = PROBE_SIZES[env_id] if size is None else int(size)
    directory = cache_dir()
    pattern = f"{env_id}-B{size}-s{seed}-"
    if directory.is_dir():
        for candidate in sorted(directory.glob(pattern + "*.oui")):
            data = candidate.read_bytes()
            if candidate.stem.endswith(hashlib.sha256(data).hexdigest()[:16]):
                return probe_from_bytes(data, env_id, seed)
    probe = make_probe_batch(env_id, size, seed)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_probe(probe, directory / f"{pattern}{probe.digest()[:16]}.oui")
    except OSError:
        pass
    return probe
