"""Wireless caching network: geometry, per-bit delays and the cost model.

Node index 0 is the macro base station (MBS); cache nodes are 1..N.
Cache matrices are stored as ``(N, F)`` arrays where row ``n - 1`` holds the
coded fractions cached at node ``n``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CAPACITY_EPS = 1e-9
MBS_DELAY_FACTOR = 3.0
MAX_USER_RESAMPLES = 100


class PlacementError(RuntimeError):
    """Raised when a user cannot be placed inside any cache node's coverage."""


@dataclass
class Topology:
    cache_positions: np.ndarray  # (N, 2) metres
    user_positions: np.ndarray  # (K, 2) metres
    coverage_radius: float
    per_bit_delay: np.ndarray  # (K, N + 1) seconds/bit, column 0 = MBS
    reachable_sets: list[list[int]] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.cache_positions)

    @property
    def n_users(self) -> int:
        return len(self.user_positions)

    def ordered_delays(self, user: int) -> np.ndarray:
        return self.per_bit_delay[user, self.reachable_sets[user]]

    def to_dict(self) -> dict:
        return {
            "cache_positions": self.cache_positions.tolist(),
            "user_positions": self.user_positions.tolist(),
            "coverage_radius": self.coverage_radius,
            "per_bit_delay": self.per_bit_delay.tolist(),
            "reachable_sets": [list(map(int, r)) for r in self.reachable_sets],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Topology":
        return cls(
            cache_positions=np.asarray(doc["cache_positions"], dtype=float).reshape(-1, 2),
            user_positions=np.asarray(doc["user_positions"], dtype=float).reshape(-1, 2),
            coverage_radius=float(doc["coverage_radius"]),
            per_bit_delay=np.asarray(doc["per_bit_delay"], dtype=float),
            reachable_sets=[list(map(int, r)) for r in doc["reachable_sets"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Topology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        d = self.per_bit_delay
        if not (np.all(np.isfinite(d)) and np.all(d > 0)):
            raise ValueError("per-bit delays must be finite and positive")
        for k, reach in enumerate(self.reachable_sets):
            if not reach or reach[-1] != 0:
                raise ValueError(f"user {k}: reachable set must end with the MBS")
            delays = d[k, reach]
            if np.any(np.diff(delays) < 0):
                raise ValueError(f"user {k}: reachable set not sorted by delay")
            if len(reach) > 1 and not np.all(delays[:-1] < delays[-1]):
                raise ValueError(f"user {k}: MBS must be the slowest node")


def per_bit_delay(
    distance_km: float,
    tx_power_w: float = 1.0,
    bandwidth_hz: float = 1e5,
    noise_psd_dbm_hz: float = -152.0,
    antenna_gain_dbi: float = 1.0,
) -> float:
    """Seconds per bit of a pathloss-only link, ``1 / (W log2(1 + SNR))``.

    Pathloss is ``148.1 + 37.6 log10(d_km)`` dB.
    """
    if bandwidth_hz <= 0 or tx_power_w <= 0:
        raise ValueError("bandwidth and transmit power must be positive")
    if distance_km <= 0:
        raise ValueError("distance must be positive")
    pathloss_db = 148.1 + 37.6 * math.log10(distance_km)
    rx_dbm = 10.0 * math.log10(tx_power_w * 1e3) + antenna_gain_dbi - pathloss_db
    noise_dbm = noise_psd_dbm_hz + 10.0 * math.log10(bandwidth_hz)
    snr = 10.0 ** ((rx_dbm - noise_dbm) / 10.0)
    return 1.0 / (bandwidth_hz * math.log2(1.0 + snr))


def hex_grid(n_nodes: int, spacing: float) -> np.ndarray:
    """Centres of ``n_nodes`` hexagonal cells filled outward from the origin, metres.

    ``n_nodes = 7`` gives one centre cell and its full first ring; other counts
    take the nearest cells, ties broken by angle.
    """
    if n_nodes < 1:
        raise ValueError("need at least one node")
    reach = 0
    while True:
        pts = []
        for q in range(-reach, reach + 1):
            for r in range(max(-reach, -q - reach), min(reach, -q + reach) + 1):
                x = spacing * (q + r / 2.0)
                y = spacing * (r * math.sqrt(3) / 2.0)
                pts.append((x, y))
        if len(pts) >= n_nodes:
            break
        reach += 1
    pts.sort(key=lambda p: (round(math.hypot(*p), 6), math.atan2(p[1], p[0])))
    return np.asarray(pts[:n_nodes], dtype=float)


def _in_hexagon(pt: np.ndarray, centre: np.ndarray, inradius: float) -> bool:
    # pointy-side hexagon matching the axial grid above (flat top/bottom along y)
    dx, dy = abs(pt[0] - centre[0]), abs(pt[1] - centre[1])
    circ = inradius * 2.0 / math.sqrt(3)
    if dy > circ or dx > inradius:
        return False
    return dy <= circ - dx / math.sqrt(3)


def _link_delays(
    cache_positions: np.ndarray, user_positions: np.ndarray, link: dict
) -> np.ndarray:
    dist_km = np.linalg.norm(user_positions[:, None, :] - cache_positions[None, :, :], axis=2) / 1e3
    out = np.empty_like(dist_km)
    for idx, d in np.ndenumerate(dist_km):
        out[idx] = per_bit_delay(max(d, 1e-6), **link)
    return out


def topology_from_positions(
    cache_positions: Sequence[Sequence[float]],
    user_positions: Sequence[Sequence[float]],
    coverage_radius: float,
    **link,
) -> Topology:
    """Build a Topology from explicit geometry.

    The MBS per-bit delay is ``MBS_DELAY_FACTOR`` times the largest delay over
    all in-coverage (user, cache node) links, shared by every user.
    """
    cache_positions = np.asarray(cache_positions, dtype=float).reshape(-1, 2)
    user_positions = np.asarray(user_positions, dtype=float).reshape(-1, 2)
    cache_delay = _link_delays(cache_positions, user_positions, link)
    dist = np.linalg.norm(user_positions[:, None, :] - cache_positions[None, :, :], axis=2)
    covered = dist <= coverage_radius
    if not covered.any():
        raise PlacementError("no user is covered by any cache node")
    mbs = MBS_DELAY_FACTOR * cache_delay[covered].max()

    K = len(user_positions)
    delays = np.empty((K, len(cache_positions) + 1))
    delays[:, 0] = mbs
    delays[:, 1:] = cache_delay
    reachable = []
    for k in range(K):
        nodes = [n + 1 for n in np.flatnonzero(covered[k])]
        nodes.sort(key=lambda n: (delays[k, n], n))
        reachable.append(nodes + [0])
    topo = Topology(cache_positions, user_positions, float(coverage_radius), delays, reachable)
    topo.validate()
    return topo


def build_hex_topology(
    n_nodes: int = 7,
    inter_node_distance: float = 500.0,
    n_users: int = 20,
    coverage_radius: float = 500.0,
    inner_exclusion_radius: float = 50.0,
    rng_seed: int = 0,
    **link,
) -> Topology:
    """Hexagonal multi-cell layout with users dropped uniformly over the cells.

    Users closer than ``inner_exclusion_radius`` to a node, or outside every
    node's coverage, are redrawn (at most ``MAX_USER_RESAMPLES`` times each).
    """
    if inner_exclusion_radius >= coverage_radius:
        raise ValueError("inner exclusion radius must be below the coverage radius")
    nodes = hex_grid(n_nodes, inter_node_distance)
    rng = np.random.default_rng(rng_seed)
    inradius = inter_node_distance / 2.0
    circ = inradius * 2.0 / math.sqrt(3)
    users = np.empty((n_users, 2))
    for k in range(n_users):
        for _ in range(MAX_USER_RESAMPLES):
            cell = nodes[rng.integers(n_nodes)]
            while True:
                pt = cell + rng.uniform([-inradius, -circ], [inradius, circ])
                if _in_hexagon(pt, cell, inradius):
                    break
            dist = np.linalg.norm(nodes - pt, axis=1)
            if dist.min() >= inner_exclusion_radius and dist.min() <= coverage_radius:
                users[k] = pt
                break
        else:
            raise PlacementError(f"user {k}: no valid position after {MAX_USER_RESAMPLES} draws")
    return topology_from_positions(nodes, users, coverage_radius, **link)


def check_cache(lam: np.ndarray, capacity: float, eps: float = CAPACITY_EPS) -> None:
    """Raise ``ValueError`` unless ``lam`` satisfies box and row-capacity limits."""
    lam = np.asarray(lam)
    if lam.ndim != 2:
        raise ValueError("cache matrix must be 2-D (nodes x files)")
    if np.any(lam < -eps) or np.any(lam > 1 + eps):
        raise ValueError("cached fractions must lie in [0, 1]")
    if np.any(lam.sum(axis=1) > capacity + eps):
        raise ValueError("node capacity exceeded")


def is_feasible(lam: np.ndarray, capacity: float, eps: float = CAPACITY_EPS) -> bool:
    try:
        check_cache(lam, capacity, eps)
    except ValueError:
        return False
    return True


def file_delay(topology: Topology, lam: np.ndarray, user: int, file: int, file_size: float = 1.0) -> float:
    """Download delay of one file for one user: max over ``j`` of the partial-set delays."""
    reach = topology.reachable_sets[user]
    delays = topology.per_bit_delay[user, reach]
    fracs = np.array([lam[n - 1, file] for n in reach[:-1]])
    cum = np.concatenate([[0.0], np.cumsum(fracs)])
    best = -np.inf
    for j in range(len(reach)):
        d = file_size * (np.dot(fracs[:j], delays[:j]) + (1.0 - cum[j]) * delays[j])
        best = max(best, d)
    return float(best)


def delay_matrix(topology: Topology, lam: np.ndarray, file_size: float = 1.0) -> np.ndarray:
    """``(K, F)`` matrix of per-request download delays under cache ``lam``."""
    lam = np.asarray(lam, dtype=float)
    K, F = topology.n_users, lam.shape[1]
    out = np.empty((K, F))
    for k, reach in enumerate(topology.reachable_sets):
        delays = topology.per_bit_delay[k, reach]
        fr = lam[np.asarray(reach[:-1], dtype=int) - 1]  # (J-1, F)
        paid = np.vstack([np.zeros(F), np.cumsum(fr * delays[:-1, None], axis=0)])
        cum = np.vstack([np.zeros(F), np.cumsum(fr, axis=0)])
        cand = paid + (1.0 - cum) * delays[:, None]
        out[k] = file_size * cand.max(axis=0)
    return out


def transmission_cost(
    topology: Topology, lam: np.ndarray, demand: np.ndarray, file_size: float = 1.0
) -> float:
    """Total delay to serve a ``(K, F)`` demand matrix."""
    demand = np.asarray(demand, dtype=float)
    if np.any(demand < 0):
        raise ValueError("request counts must be non-negative")
    return float(np.sum(demand * delay_matrix(topology, lam, file_size)))


def replacement_cost(prev: np.ndarray, nxt: np.ndarray) -> float:
    prev, nxt = np.asarray(prev, dtype=float), np.asarray(nxt, dtype=float)
    if prev.shape != nxt.shape:
        raise ValueError(f"shape mismatch {prev.shape} vs {nxt.shape}")
    return float(np.maximum(nxt - prev, 0.0).sum())


@dataclass(frozen=True)
class CostParams:
    beta: float = 1.5
    gamma: float = 0.99

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def network_cost(c_d: float, c_r: float, params: CostParams) -> float:
    return c_d + params.beta * c_r


def discounted_return(costs: Sequence[float], gamma: float) -> float:
    total, w = 0.0, 1.0
    for c in costs:
        total += w * c
        w *= gamma
        if w == 0.0:
            break
    return total
