"""Topology-aware shot allocation.

Fragments are anchored to sites of a physical connectivity graph (a
heavy-hex generator is provided). An exponential-decay kernel over graph
distance builds the base covariance, which is shrunk by each fragment's
filter uncertainty. Budgets are split by the closed-form water-filling rule
shots ~ u^(2/3) and projected to integers by a marginal-change greedy that
is exact for this separable convex objective.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .drifttrack import KalmanState
from .errors import ConfigurationError, DomainError, InfeasibilityError, NumericError


@dataclass(frozen=True)
class Topology:
    """Connected physical layout plus fragment -> site anchoring."""

    graph: nx.Graph
    anchors: Mapping[int, int]

    def __post_init__(self) -> None:
        if self.graph.number_of_nodes() == 0:
            raise ConfigurationError("topology graph is empty")
        if not nx.is_connected(self.graph):
            raise ConfigurationError("topology graph must be connected")
        object.__setattr__(self, "anchors", dict(self.anchors))
        for frag, node in self.anchors.items():
            if node not in self.graph:
                raise ConfigurationError(f"fragment {frag} anchored to unknown node {node}")
        object.__setattr__(self, "_dist_cache", {})

    def fragment_ids(self) -> list[int]:
        return sorted(self.anchors)

    def distance(self, frag_a: int, frag_b: int) -> int:
        """Hop distance between anchor sites (BFS, cached per source node)."""
        a, b = self.anchors[frag_a], self.anchors[frag_b]
        if a == b:
            return 0
        cache: dict[int, dict[int, int]] = self._dist_cache  # type: ignore[attr-defined]
        if a not in cache:
            cache[a] = nx.single_source_shortest_path_length(self.graph, a)
        try:
            return cache[a][b]
        except KeyError:
            raise DomainError(f"no path between anchors {a} and {b}") from None


def heavy_hex(rows: int, cols: int) -> nx.Graph:
    """Heavy-hex lattice from the standard 12-site cell tiling.

    rows+1 horizontal qubit lines of 4*cols+1 sites each, with bridge sites
    between consecutive lines every 4 columns, offset alternating 0/2: each
    enclosed cell is a 12-site loop (5 + 5 line sites + 2 bridges).
    """
    if rows < 1 or cols < 1:
        raise ConfigurationError("heavy-hex needs rows >= 1 and cols >= 1")
    width = 4 * cols + 1
    g = nx.Graph()
    def line_node(r: int, c: int) -> int:
        return r * width + c
    n_line = (rows + 1) * width
    for r in range(rows + 1):
        for c in range(width - 1):
            g.add_edge(line_node(r, c), line_node(r, c + 1))
    bridge = n_line
    for r in range(rows):
        offset = 0 if r % 2 == 0 else 2
        for c in range(offset, width, 4):
            g.add_edge(line_node(r, c), bridge)
            g.add_edge(bridge, line_node(r + 1, c))
            bridge += 1
    return g


def load_topology_graph(source: str) -> nx.Graph:
    """`heavyhex:RxC` or a path to an edge-list file (`u v` per line)."""
    if source.startswith("heavyhex:"):
        dims = source.split(":", 1)[1]
        r, c = (int(x) for x in dims.lower().split("x"))
        return heavy_hex(r, c)
    g = nx.Graph()
    with open(source, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            u, v = line.split()
            g.add_edge(int(u), int(v))
    return g


@dataclass(frozen=True)
class KernelParams:
    sigma_k2: float
    ell: float

    def __post_init__(self) -> None:
        if self.sigma_k2 <= 0 or self.ell <= 0:
            raise ConfigurationError("kernel variance and length scale must be positive")


def kernel(d: float, params: KernelParams) -> float:
    """Exponential-decay kernel over hop distance: sigma_k2 * exp(-d/ell)."""
    if d < 0:
        raise DomainError("distance must be nonnegative")
    return params.sigma_k2 * math.exp(-d / params.ell)


@dataclass(frozen=True)
class CovarianceModel:
    sigma: np.ndarray
    sigma_tilde: np.ndarray

    def __post_init__(self) -> None:
        for name in ("sigma", "sigma_tilde"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DomainError(f"{name} must be square")
            if not np.allclose(m, m.T, atol=1e-12):
                raise DomainError(f"{name} must be symmetric")
            m = m.copy()
            m.setflags(write=False)
            object.__setattr__(self, name, m)


def build_covariance(
    topology: Topology,
    fragments: Sequence[int],
    params: KernelParams,
    kalman_p: Sequence[float],
) -> CovarianceModel:
    """Kernel covariance over anchor distances, shrunk by filter uncertainty."""
    n = len(fragments)
    if len(kalman_p) != n:
        raise DomainError("kalman_p length must match fragments")
    p = np.asarray(kalman_p, dtype=float)
    if (p < 0).any():
        raise DomainError("filter covariances must be nonnegative")
    sigma = np.empty((n, n))
    for i, fi in enumerate(fragments):
        sigma[i, i] = params.sigma_k2
        for j in range(i + 1, n):
            sigma[i, j] = sigma[j, i] = kernel(topology.distance(fi, fragments[j]), params)
    return CovarianceModel(sigma=sigma, sigma_tilde=sigma + np.diag(p))


@dataclass(frozen=True)
class TailParams:
    rho: float
    n_obs: int

    def __post_init__(self) -> None:
        if not 0 < self.rho < 1:
            raise ConfigurationError("rho must be in (0,1)")
        if self.n_obs < 1 or self.rho >= self.n_obs:
            raise ConfigurationError("need 0 < rho < n_obs")


def tail_factor(sigma_hat: float, tail: TailParams) -> float:
    """Confidence-scaled uncertainty u = sigma_hat * sqrt(ln(N/rho))."""
    if sigma_hat < 0:
        raise DomainError("sigma_hat must be nonnegative")
    ratio = tail.n_obs / tail.rho
    if ratio < 1:
        raise DomainError("N/rho must be >= 1")
    return sigma_hat * math.sqrt(math.log(ratio))


def variance_bound(u: Sequence[float], shots: Sequence[float], cov: CovarianceModel) -> float:
    """Stitched-variance bound: (u/s)^T Sigma_tilde (u/s)."""
    u_arr = np.asarray(u, dtype=float)
    s_arr = np.asarray(shots, dtype=float)
    if u_arr.shape != s_arr.shape or cov.sigma_tilde.shape[0] != u_arr.size:
        raise DomainError("dimension mismatch")
    if (s_arr <= 0).any():
        raise DomainError("all shot counts must be positive")
    y = u_arr / s_arr
    return float(y @ cov.sigma_tilde @ y)


def _lambda_max(m: np.ndarray) -> float:
    try:
        return float(np.linalg.eigvalsh(m)[-1])
    except np.linalg.LinAlgError:
        # Power iteration fallback; m is symmetric PSD in all callers.
        v = np.ones(m.shape[0]) / math.sqrt(m.shape[0])
        lam = 0.0
        for _ in range(10_000):
            w = m @ v
            norm = float(np.linalg.norm(w))
            if norm == 0.0:
                return 0.0
            v_new = w / norm
            if abs(norm - lam) <= 1e-10 * max(1.0, abs(norm)):
                return norm
            v, lam = v_new, norm
        raise NumericError("power iteration did not converge")


def spectral_bound(u: Sequence[float], shots: Sequence[float], cov: CovarianceModel) -> float:
    """Relaxed bound lambda_max(Sigma_tilde) * sum(u_i^2 / s_i^2); >= variance_bound."""
    u_arr = np.asarray(u, dtype=float)
    s_arr = np.asarray(shots, dtype=float)
    if (s_arr <= 0).any():
        raise DomainError("all shot counts must be positive")
    return _lambda_max(np.asarray(cov.sigma_tilde)) * float(np.sum((u_arr / s_arr) ** 2))


@dataclass(frozen=True)
class ShotPlan:
    shots: tuple[int, ...]
    total: int
    s_min: int

    def __post_init__(self) -> None:
        if sum(self.shots) != self.total:
            raise DomainError(f"plan sums to {sum(self.shots)}, expected {self.total}")
        if any(s < self.s_min for s in self.shots):
            raise DomainError("plan entry below the floor")
        if self.s_min >= 1 and any(s < 1 for s in self.shots):
            raise DomainError("plan entry below 1")


def waterfill(u: Sequence[float], total: float, s_min: float) -> np.ndarray:
    """Continuous optimum of sum(u_i^2/s_i^2) s.t. sum(s)=total, s >= s_min.

    Closed form s_i = total * u_i^(2/3) / Z without active floors; active
    floors are pinned at s_min and the closed form re-applied to the
    remaining budget until no new floor activates. Fragments with u_i = 0
    sit exactly at the floor.
    """
    u_arr = np.asarray(u, dtype=float)
    n = u_arr.size
    if n == 0:
        raise DomainError("empty uncertainty vector")
    if (u_arr < 0).any():
        raise DomainError("uncertainties must be nonnegative")
    if not (u_arr > 0).any():
        raise DomainError("at least one uncertainty must be positive")
    if total < n * s_min - 1e-9:
        raise InfeasibilityError(f"budget {total} < {n} * floor {s_min}")

    alloc = np.full(n, float(s_min))
    free = u_arr > 0
    while True:
        budget = total - s_min * float(np.sum(~free))
        w = u_arr[free] ** (2.0 / 3.0)
        share = budget * w / w.sum()
        newly = share < s_min - 1e-12
        if not newly.any():
            alloc[free] = share
            return alloc
        free_idx = np.flatnonzero(free)
        free[free_idx[newly]] = False
        if not free.any():
            return alloc


def _objective(u2: np.ndarray, s: np.ndarray) -> float:
    return float(np.sum(u2 / s.astype(float) ** 2))


def integer_project(
    continuous: Sequence[float], total: int, u: Sequence[float], s_min: int
) -> ShotPlan:
    """Round to integers summing exactly to total, keeping floors.

    Nearest-integer rounding, then greedy unit increments (largest objective
    decrease) or decrements (smallest objective increase) until the sum is
    exact, then single-shot exchange repair (skipped for inputs that are
    already integral, which are returned unchanged). Ties break toward the
    lowest fragment index. For a separable convex objective a point with no
    improving single-unit transfer is a global integer optimum.
    """
    cont = np.asarray(continuous, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    n = cont.size
    if u_arr.size != n:
        raise DomainError("u and continuous must have the same length")
    if abs(cont.sum() - total) > 1e-6 * max(1.0, total):
        raise DomainError("continuous allocation must sum to the budget")
    if total < n * s_min:
        raise InfeasibilityError(f"budget {total} < {n} * floor {s_min}")

    integral_input = bool(np.all(np.abs(cont - np.round(cont)) < 1e-9))
    s = np.maximum(np.floor(cont + 0.5).astype(np.int64), s_min)
    u2 = u_arr**2

    def inc_gain(vals: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            g = u2 / vals.astype(float) ** 2 - u2 / (vals + 1).astype(float) ** 2
        return np.where(u2 > 0, g, 0.0)

    def dec_cost(vals: np.ndarray) -> np.ndarray:
        out = np.full(n, np.inf)
        ok = vals > s_min
        with np.errstate(divide="ignore", invalid="ignore"):
            c = u2 / (vals - 1).astype(float) ** 2 - u2 / vals.astype(float) ** 2
        out[ok] = np.where(u2[ok] > 0, c[ok], 0.0)
        return out

    delta = int(total - s.sum())
    while delta > 0:
        s[int(np.argmax(inc_gain(s)))] += 1
        delta -= 1
    while delta < 0:
        costs = dec_cost(s)
        j = int(np.argmin(costs))
        if not np.isfinite(costs[j]):
            raise InfeasibilityError("cannot decrement without breaking the floor")
        s[j] -= 1
        delta += 1

    if not integral_input:
        for _ in range(100_000):
            gains = inc_gain(s)
            costs = dec_cost(s)
            best = None
            i = int(np.argmax(gains))
            j = int(np.argmin(costs))
            candidates = [(i, j)]
            if i == j:
                order_g = np.argsort(-gains, kind="stable")
                order_c = np.argsort(costs, kind="stable")
                if n > 1:
                    candidates = [(i, int(order_c[1])), (int(order_g[1]), j)]
            for ci, cj in candidates:
                if ci == cj or not np.isfinite(costs[cj]):
                    continue
                improve = gains[ci] - costs[cj]
                if improve > 1e-15 and (best is None or improve > best[0]):
                    best = (improve, ci, cj)
            if best is None:
                break
            _, ci, cj = best
            s[ci] += 1
            s[cj] -= 1
        else:
            raise NumericError("exchange repair did not terminate")

    return ShotPlan(shots=tuple(int(x) for x in s), total=int(total), s_min=int(s_min))


def cadence_events(executed_shots: int, cadence: int) -> int:
    """Reallocation events produced over a horizon: one per `cadence` executed shots."""
    if cadence <= 0:
        raise ConfigurationError("cadence must be positive")
    return int(executed_shots) // int(cadence)


def allocate(
    states: Sequence[KalmanState],
    topology: Topology,
    params: KernelParams,
    tail: TailParams,
    total: int,
    s_min: int,
    cadence: int = 500,
) -> ShotPlan:
    """One reallocation event: tail factors -> covariance -> water-fill -> project.

    Callers invoke this once per cadence event (every `cadence` executed
    shots); see cadence_events for the event arithmetic.
    """
    fragments = topology.fragment_ids()
    if len(states) != len(fragments):
        raise DomainError("one Kalman state per anchored fragment required")
    if cadence <= 0:
        raise ConfigurationError("cadence must be positive")
    u = [tail_factor(math.sqrt(st.mean), tail) for st in states]
    build_covariance(topology, fragments, params, [st.p for st in states])
    cont = waterfill(u, float(total), float(s_min))
    return integer_project(cont, total, u, s_min)
