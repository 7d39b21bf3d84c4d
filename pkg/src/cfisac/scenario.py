"""Scenario geometry, line-of-sight ULA channels and seeded datasets.

Every AP carries a uniform linear array laid along the x-axis; angles are
measured from the +x direction. Channels are pure line of sight with unit
modulus entries (no path loss).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, GeometryError

POSITION_SCHEMES = ("Pos1", "Pos2")


@dataclass(frozen=True)
class SystemConfig:
    """Physical parameters of the cell-free ISAC system.

    ``power_budget`` may be a scalar (same budget at every AP) or one value
    per AP; it is normalized to a tuple of length ``num_aps``.  When
    ``ap_positions`` is empty the APs are spread evenly over ``x_range`` on
    the line y=0, which gives (25, 0) and (75, 0) for two APs.
    """

    num_aps: int = 2
    antennas_per_ap: int = 16
    num_ues: int = 5
    power_budget: float | tuple[float, ...] = 1.0
    ue_noise_var: float = 1.0
    ap_noise_var: float = 1.0
    sensing_gain_var: float = 0.1
    spacing_ratio: float = 0.5
    position_scheme: str = "Pos1"
    ap_positions: tuple[tuple[float, float], ...] = ()
    x_range: tuple[float, float] = (0.0, 100.0)
    pos1_y: float = 50.0
    pos2_ue_y: float = 23.0
    pos2_target_y_range: tuple[float, float] = (0.0, 20.0)

    def __post_init__(self):
        L = self.num_aps
        if L < 1 or self.antennas_per_ap < 1 or self.num_ues < 1:
            raise ConfigError("num_aps, antennas_per_ap and num_ues must all be >= 1")
        budget = self.power_budget
        if np.ndim(budget) == 0:
            budget = (float(budget),) * L
        budget = tuple(float(p) for p in budget)
        if len(budget) != L:
            raise ConfigError(f"power_budget has {len(budget)} entries for {L} APs")
        object.__setattr__(self, "power_budget", budget)
        for name in ("ue_noise_var", "ap_noise_var", "sensing_gain_var"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if any(not p > 0 for p in budget):
            raise ConfigError("power budgets must be > 0")
        if self.position_scheme not in POSITION_SCHEMES:
            raise ConfigError(f"unknown position scheme {self.position_scheme!r}")
        x0, x1 = (float(v) for v in self.x_range)
        if x1 < x0:
            raise ConfigError("x_range must be (low, high) with low <= high")
        object.__setattr__(self, "x_range", (x0, x1))
        ty = tuple(float(v) for v in self.pos2_target_y_range)
        if ty[1] < ty[0]:
            raise ConfigError("pos2_target_y_range must be (low, high)")
        object.__setattr__(self, "pos2_target_y_range", ty)
        aps = self.ap_positions
        if not aps:
            step = (x1 - x0) / L
            aps = tuple((x0 + (l + 0.5) * step, 0.0) for l in range(L))
        aps = tuple((float(x), float(y)) for x, y in aps)
        if len(aps) != L:
            raise ConfigError(f"ap_positions has {len(aps)} entries for {L} APs")
        object.__setattr__(self, "ap_positions", aps)

    @property
    def num_beams(self) -> int:
        return self.num_ues + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["power_budget"] = list(self.power_budget)
        d["ap_positions"] = [list(p) for p in self.ap_positions]
        d["x_range"] = list(self.x_range)
        d["pos2_target_y_range"] = list(self.pos2_target_y_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown system config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("x_range", "pos2_target_y_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "ap_positions" in kw:
            kw["ap_positions"] = tuple(tuple(p) for p in kw["ap_positions"])
        if "power_budget" in kw and np.ndim(kw["power_budget"]) > 0:
            kw["power_budget"] = tuple(kw["power_budget"])
        return cls(**kw)


@dataclass(frozen=True)
class AgentPositions:
    ue_xy: np.ndarray  # (N, 2) meters
    target_xy: np.ndarray  # (2,) meters


@dataclass(frozen=True)
class ChannelScene:
    """One channel realization seen by all APs.

    comm_channels[l, :, n] is h_{ln}; sensing_steering[l] is a(theta_l).
    """

    positions: AgentPositions
    comm_channels: np.ndarray  # (L, M, N) complex
    sensing_steering: np.ndarray  # (L, M) complex
    ue_angles: np.ndarray  # (L, N) radians
    target_angles: np.ndarray  # (L,) radians


def sample_positions(config: SystemConfig, rng: np.random.Generator) -> AgentPositions:
    """Draw UE and target positions for one scene using ``config.position_scheme``."""
    N = config.num_ues
    x0, x1 = config.x_range
    ue_x = rng.uniform(x0, x1, size=N)
    tgt_x = rng.uniform(x0, x1)
    if config.position_scheme == "Pos1":
        ue_y = np.full(N, config.pos1_y)
        tgt_y = config.pos1_y
    elif config.position_scheme == "Pos2":
        ue_y = np.full(N, config.pos2_ue_y)
        tgt_y = rng.uniform(*config.pos2_target_y_range)
    else:
        raise ConfigError(f"unknown position scheme {config.position_scheme!r}")
    return AgentPositions(
        ue_xy=np.stack([ue_x, ue_y], axis=-1),
        target_xy=np.array([tgt_x, tgt_y], dtype=float),
    )


def angle_of(ap_xy, agent_xy) -> float:
    """Angle of the AP->agent direction measured from the +x (array) axis."""
    dx = float(agent_xy[0]) - float(ap_xy[0])
    dy = float(agent_xy[1]) - float(ap_xy[1])
    if dx == 0.0 and dy == 0.0:
        raise GeometryError(f"agent at {tuple(agent_xy)} coincides with AP")
    return math.atan2(dy, dx)


def _angles(ap_xy: np.ndarray, agent_xy: np.ndarray) -> np.ndarray:
    # vectorized angle_of; ap_xy (L, 2), agent_xy (..., 2) -> (L, ...)
    d = agent_xy[None, ...] - ap_xy.reshape((ap_xy.shape[0],) + (1,) * (agent_xy.ndim - 1) + (2,))
    if np.any((d[..., 0] == 0) & (d[..., 1] == 0)):
        raise GeometryError("an agent coincides with an AP")
    return np.arctan2(d[..., 1], d[..., 0])


def steering_vector(phi, M: int, spacing_ratio: float = 0.5) -> np.ndarray:
    """ULA response ``exp(j 2pi spacing_ratio m cos(phi))`` for m = 0..M-1.

    ``phi`` may be an array; the antenna axis is appended last.
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    m = np.arange(M)
    phase = 2.0 * np.pi * spacing_ratio * np.multiply.outer(np.cos(phi), m)
    return np.exp(1j * phase)


def build_channels(positions: AgentPositions, config: SystemConfig) -> ChannelScene:
    ap = np.asarray(config.ap_positions, dtype=float)
    M = config.antennas_per_ap
    ue_ang = _angles(ap, np.asarray(positions.ue_xy, dtype=float))  # (L, N)
    tgt_ang = _angles(ap, np.asarray(positions.target_xy, dtype=float))  # (L,)
    h = steering_vector(ue_ang, M, config.spacing_ratio)  # (L, N, M)
    a = steering_vector(tgt_ang, M, config.spacing_ratio)  # (L, M)
    return ChannelScene(
        positions=positions,
        comm_channels=np.ascontiguousarray(np.swapaxes(h, 1, 2)),
        sensing_steering=a,
        ue_angles=ue_ang,
        target_angles=tgt_ang,
    )


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for scene ``index``; serial and parallel generation agree."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of scene positions; channels are derived on demand."""

    config: SystemConfig
    ue_xy: np.ndarray  # (S, N, 2)
    target_xy: np.ndarray  # (S, 2)
    split: int
    seed: int
    train_fraction: float = 0.97
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.ue_xy.setflags(write=False)
        self.target_xy.setflags(write=False)

    def __len__(self) -> int:
        return self.ue_xy.shape[0]

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.split)

    @property
    def val_indices(self) -> np.ndarray:
        return np.arange(self.split, len(self))

    def positions(self, i: int) -> AgentPositions:
        return AgentPositions(ue_xy=self.ue_xy[i], target_xy=self.target_xy[i])

    def scene(self, i: int) -> ChannelScene:
        return build_channels(self.positions(i), self.config)

    @property
    def scenes(self) -> list[ChannelScene]:
        return [self.scene(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[ChannelScene]:
        return (self.scene(i) for i in range(len(self)))

    def channel_arrays(self, indices: Sequence[int] | np.ndarray | None = None):
        """Stacked channels ``(H, A)`` with shapes (S, L, M, N) and (S, L, M)."""
        if "H" not in self._cache:
            cfg = self.config
            ap = np.asarray(cfg.ap_positions, dtype=float)
            ue_ang = _angles(ap, self.ue_xy)  # (L, S, N)
            tgt_ang = _angles(ap, self.target_xy)  # (L, S)
            h = steering_vector(ue_ang, cfg.antennas_per_ap, cfg.spacing_ratio)  # (L,S,N,M)
            a = steering_vector(tgt_ang, cfg.antennas_per_ap, cfg.spacing_ratio)  # (L,S,M)
            H = np.ascontiguousarray(h.transpose(1, 0, 3, 2))
            A = np.ascontiguousarray(a.transpose(1, 0, 2))
            H.setflags(write=False)
            A.setflags(write=False)
            self._cache["H"], self._cache["A"] = H, A
        H, A = self._cache["H"], self._cache["A"]
        if indices is None:
            return H, A
        idx = np.asarray(indices, dtype=int)
        return H[idx], A[idx]


def generate_dataset(
    config: SystemConfig, size: int, train_fraction: float = 0.97, seed: int = 0
) -> Dataset:
    if size < 1:
        raise ConfigError("dataset size must be >= 1")
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError("train_fraction must be in (0, 1]")
    ue = np.empty((size, config.num_ues, 2))
    tgt = np.empty((size, 2))
    for i in range(size):
        p = sample_positions(config, scene_rng(seed, i))
        ue[i], tgt[i] = p.ue_xy, p.target_xy
    # rounding guard: 0.97 * 20000 must give 19400, not 19399
    split = math.floor(round(size * train_fraction, 9))
    return Dataset(config=config, ue_xy=ue, target_xy=tgt, split=split, seed=int(seed),
                   train_fraction=float(train_fraction))
