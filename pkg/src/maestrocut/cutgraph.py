"""Gate hypergraph model, normalized partition objective, and incremental FM refinement.

A cut circuit is modeled as a hypergraph whose vertices are gate instances
and whose hyperedges connect each gate to its wire/time predecessors (the
latest earlier gate on each of its qubits). A partition into K blocks
induces a cut set; the optimization objective is a convex combination of
three dimensionless terms: cut count over budget, e-bit cost over a moving
reference, and expected queue delay over a moving reference.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property

from .errors import (
    AssignmentError,
    ConfigurationError,
    DomainError,
    FeasibilityError,
    InfeasibilityError,
)
from . import rng as rngmod


@dataclass(frozen=True)
class Gate:
    """A gate instance: unique id, the logical qubits it touches, depth index."""

    gid: int
    qubits: frozenset[int]
    depth: int

    def __post_init__(self) -> None:
        if not self.qubits:
            raise DomainError(f"gate {self.gid} touches no qubits")
        if self.depth < 0:
            raise DomainError(f"gate {self.gid} has negative depth {self.depth}")


@dataclass(frozen=True)
class Hyperedge:
    eid: int
    members: frozenset[int]
    weight: float = 1.0

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise DomainError(f"hyperedge {self.eid} has {len(self.members)} member(s), needs >= 2")
        if self.weight < 0:
            raise DomainError(f"hyperedge {self.eid} has negative weight")


@dataclass(frozen=True)
class Hypergraph:
    gates: tuple[Gate, ...]
    edges: tuple[Hyperedge, ...]

    def __post_init__(self) -> None:
        ids = [g.gid for g in self.gates]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate gate ids")
        known = set(ids)
        for e in self.edges:
            missing = e.members - known
            if missing:
                raise DomainError(f"hyperedge {e.eid} references unknown vertices {sorted(missing)}")

    @cached_property
    def gate_by_id(self) -> dict[int, Gate]:
        return {g.gid: g for g in self.gates}

    @cached_property
    def edges_by_vertex(self) -> dict[int, tuple[Hyperedge, ...]]:
        out: dict[int, list[Hyperedge]] = {g.gid: [] for g in self.gates}
        for e in self.edges:
            for v in e.members:
                out[v].append(e)
        return {v: tuple(es) for v, es in out.items()}

    @cached_property
    def qubits(self) -> frozenset[int]:
        return frozenset(q for g in self.gates for q in g.qubits)


def from_gates(gates: Sequence[Gate]) -> Hypergraph:
    """Build the hypergraph whose edges span each gate's wire/time predecessors.

    For gate v, the predecessor on qubit q is the latest gate before v (by
    depth, then id) acting on q; the edge is {v} union its predecessors.
    Gates with no predecessors contribute no edge.
    """
    ordered = sorted(gates, key=lambda g: (g.depth, g.gid))
    last_on_qubit: dict[int, int] = {}
    edges: list[Hyperedge] = []
    eid = 0
    for g in ordered:
        preds = {last_on_qubit[q] for q in g.qubits if q in last_on_qubit}
        if preds:
            edges.append(Hyperedge(eid=eid, members=frozenset(preds | {g.gid})))
            eid += 1
        for q in g.qubits:
            last_on_qubit[q] = g.gid
    return Hypergraph(gates=tuple(ordered), edges=tuple(edges))


def parse_circuit(text: str) -> Hypergraph:
    """Parse the line format ``gate <id> q=<q1,q2,...> d=<depth>``."""
    gates: list[Gate] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[0] != "gate":
            raise DomainError(f"line {lineno}: expected 'gate <id> q=<...> d=<...>', got {raw!r}")
        gid = int(parts[1])
        if not parts[2].startswith("q=") or not parts[3].startswith("d="):
            raise DomainError(f"line {lineno}: malformed fields in {raw!r}")
        qubits = frozenset(int(tok) for tok in parts[2][2:].split(","))
        depth = int(parts[3][2:])
        gates.append(Gate(gid=gid, qubits=qubits, depth=depth))
    return from_gates(gates)


def circuit_from_json(doc: Mapping | str) -> Hypergraph:
    """Accept the structured form: {"gates": [{"id":..,"qubits":[..],"depth":..}, ...]}."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    gates = [
        Gate(gid=int(g["id"]), qubits=frozenset(int(q) for q in g["qubits"]), depth=int(g["depth"]))
        for g in doc["gates"]
    ]
    return from_gates(gates)


def load_circuit(path: str) -> Hypergraph:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return circuit_from_json(text)
    return parse_circuit(text)


@dataclass(frozen=True)
class BlockCaps:
    """Per-block limits: distinct logical qubits and distinct depth layers."""

    max_qubits: int
    max_depth: int

    def __post_init__(self) -> None:
        if self.max_qubits < 1 or self.max_depth < 1:
            raise ConfigurationError("block caps must be >= 1")


@dataclass(frozen=True)
class Partition:
    """Assignment of every vertex to a block in 1..num_blocks."""

    assignment: Mapping[int, int]
    caps: BlockCaps
    cut_budget: int
    num_blocks: int

    def __post_init__(self) -> None:
        if self.cut_budget < 0:
            raise ConfigurationError("cut budget must be nonnegative")
        if self.num_blocks < 1:
            raise ConfigurationError("need at least one block")
        object.__setattr__(self, "assignment", dict(self.assignment))
        for v, b in self.assignment.items():
            if not 1 <= b <= self.num_blocks:
                raise DomainError(f"vertex {v} assigned to block {b} outside 1..{self.num_blocks}")

    def block_of(self, v: int) -> int:
        return self.assignment[v]

    def with_move(self, v: int, block: int) -> "Partition":
        new = dict(self.assignment)
        new[v] = block
        return Partition(new, self.caps, self.cut_budget, self.num_blocks)


@dataclass(frozen=True)
class PolicyWeights:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("policy weights must be nonnegative")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-12:
            raise ConfigurationError("policy weights must sum to 1")


@dataclass(frozen=True)
class NormalizationRefs:
    """Moving-average references that make the objective terms dimensionless.

    `window` is the half-life (in refinement events) of the exponential
    moving average used by `updated`; references initialize from the first
    observation.
    """

    e_ref: float
    q_ref: float
    window: int = 8

    def __post_init__(self) -> None:
        if self.e_ref <= 0 or self.q_ref <= 0:
            raise ConfigurationError("normalization references must be positive")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")

    def updated(self, e_obs: float, q_obs: float) -> "NormalizationRefs":
        decay = 0.5 ** (1.0 / self.window)
        return NormalizationRefs(
            e_ref=decay * self.e_ref + (1 - decay) * e_obs,
            q_ref=decay * self.q_ref + (1 - decay) * q_obs,
            window=self.window,
        )

    @classmethod
    def from_first(cls, e_obs: float, q_obs: float, window: int = 8) -> "NormalizationRefs":
        return cls(e_ref=e_obs, q_ref=q_obs, window=window)


@dataclass(frozen=True)
class PartitionObjective:
    c_bar: float
    e_bar: float
    q_bar: float
    j: float

    def __post_init__(self) -> None:
        for name in ("c_bar", "e_bar", "q_bar", "j"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise DomainError(f"{name}={val} must be finite and >= 0")

    @classmethod
    def from_terms(cls, weights: PolicyWeights, c_bar: float, e_bar: float, q_bar: float) -> "PartitionObjective":
        j = weights.alpha * c_bar + weights.beta * e_bar + weights.gamma * q_bar
        return cls(c_bar=c_bar, e_bar=e_bar, q_bar=q_bar, j=j)


# --- cut set and objective ------------------------------------------------


def cut_set(hg: Hypergraph, part: Partition) -> frozenset[int]:
    """Ids of hyperedges whose members span at least two blocks."""
    assign = part.assignment
    missing = [g.gid for g in hg.gates if g.gid not in assign]
    if missing:
        raise AssignmentError(f"vertices not assigned: {sorted(missing)[:8]}")
    cut = []
    for e in hg.edges:
        it = iter(e.members)
        first = assign[next(it)]
        if any(assign[v] != first for v in it):
            cut.append(e.eid)
    return frozenset(cut)


def e_bits(hg: Hypergraph, part: Partition, ebit_cost: float | Mapping[int, float] = 1.0) -> float:
    """Entanglement cost of the cut: sum of per-edge e-bit cost over cut edges."""
    cut = cut_set(hg, part)
    if isinstance(ebit_cost, Mapping):
        return float(sum(ebit_cost.get(eid, 1.0) for eid in cut))
    return float(ebit_cost) * len(cut)


def expected_queue(part: Partition, queue_model: Mapping[int, float] | None) -> float:
    """Mean expected queue delay (ms) over occupied blocks; 0 without a model."""
    if queue_model is None:
        return 0.0
    occupied = sorted(set(part.assignment.values()))
    return float(sum(queue_model.get(b, 0.0) for b in occupied)) / len(occupied)


def objective(
    hg: Hypergraph,
    part: Partition,
    weights: PolicyWeights,
    refs: NormalizationRefs,
    ebit_cost: float | Mapping[int, float] = 1.0,
    queue_model: Mapping[int, float] | None = None,
) -> PartitionObjective:
    """Normalized composite objective: weighted sum of cut, e-bit, queue terms."""
    if part.cut_budget == 0:
        raise ConfigurationError("cut budget of 0 makes the cut term undefined")
    c_bar = len(cut_set(hg, part)) / part.cut_budget
    e_bar = e_bits(hg, part, ebit_cost) / refs.e_ref
    q_bar = expected_queue(part, queue_model) / refs.q_ref
    return PartitionObjective.from_terms(weights, c_bar, e_bar, q_bar)


# --- caps and feasibility -------------------------------------------------


def block_loads(hg: Hypergraph, assignment: Mapping[int, int]) -> dict[int, tuple[set[int], set[int]]]:
    """Per-block (qubit set, depth-layer set)."""
    loads: dict[int, tuple[set[int], set[int]]] = {}
    for g in hg.gates:
        b = assignment[g.gid]
        qs, ds = loads.setdefault(b, (set(), set()))
        qs.update(g.qubits)
        ds.add(g.depth)
    return loads


def caps_respected(hg: Hypergraph, assignment: Mapping[int, int], caps: BlockCaps) -> bool:
    for qs, ds in block_loads(hg, assignment).values():
        if len(qs) > caps.max_qubits or len(ds) > caps.max_depth:
            return False
    return True


def _move_feasible(hg: Hypergraph, part: Partition, v: int, block: int) -> bool:
    # Only the destination block can gain load from a single move.
    qs: set[int] = set()
    ds: set[int] = set()
    for g in hg.gates:
        if g.gid == v or part.assignment[g.gid] == block:
            qs.update(g.qubits)
            ds.add(g.depth)
    return len(qs) <= part.caps.max_qubits and len(ds) <= part.caps.max_depth


def move_gain(
    hg: Hypergraph,
    part: Partition,
    vertex: int,
    target_block: int,
    weights: PolicyWeights,
    refs: NormalizationRefs,
    ebit_cost: float | Mapping[int, float] = 1.0,
    queue_model: Mapping[int, float] | None = None,
) -> float:
    """Marginal objective drop J(part) - J(part with vertex moved); positive improves."""
    if vertex not in part.assignment:
        raise AssignmentError(f"vertex {vertex} not assigned")
    if not 1 <= target_block <= part.num_blocks:
        raise FeasibilityError(f"block {target_block} outside 1..{part.num_blocks}")
    if not _move_feasible(hg, part, vertex, target_block):
        raise FeasibilityError(f"moving {vertex} to block {target_block} violates caps")
    before = objective(hg, part, weights, refs, ebit_cost, queue_model).j
    after = objective(hg, part.with_move(vertex, target_block), weights, refs, ebit_cost, queue_model).j
    return before - after


# --- multilevel initial partition ------------------------------------------


def _pair_weights(hg: Hypergraph, members: Mapping[int, frozenset[int]]) -> dict[tuple[int, int], float]:
    """Connectivity between coarse vertices: sum over edges of w/(span-1)."""
    owner = {g: cv for cv, gs in members.items() for g in gs}
    weights: dict[tuple[int, int], float] = {}
    for e in hg.edges:
        coarse = sorted({owner[v] for v in e.members})
        if len(coarse) < 2:
            continue
        share = e.weight / (len(coarse) - 1)
        for i in range(len(coarse)):
            for j in range(i + 1, len(coarse)):
                key = (coarse[i], coarse[j])
                weights[key] = weights.get(key, 0.0) + share
    return weights


def _coarsen_once(
    hg: Hypergraph, members: dict[int, frozenset[int]], rank: Mapping[int, float]
) -> dict[int, frozenset[int]] | None:
    """One heavy-edge matching pass; None when no pair can merge."""
    pw = _pair_weights(hg, members)
    if not pw:
        return None

    def cv_rank(cv: int) -> float:
        return min(rank[g] for g in members[cv])

    matched: set[int] = set()
    merged: dict[int, frozenset[int]] = {}
    nxt = 0
    for (a, b), _w in sorted(pw.items(), key=lambda kv: (-kv[1], cv_rank(kv[0][0]), cv_rank(kv[0][1]))):
        if a in matched or b in matched:
            continue
        matched.update((a, b))
        merged[nxt] = members[a] | members[b]
        nxt += 1
    if not merged:
        return None
    for cv, gs in members.items():
        if cv not in matched:
            merged[nxt] = gs
            nxt += 1
    return merged


def _seed_blocks(
    hg: Hypergraph,
    members: Mapping[int, frozenset[int]],
    caps: BlockCaps,
    k: int,
    rank: Mapping[int, float],
) -> dict[int, int]:
    """First-fit-decreasing assignment of coarse vertices into k blocks."""
    gate_by_id = hg.gate_by_id
    loads = {b: (set(), set()) for b in range(1, k + 1)}

    def size(gs: frozenset[int]) -> int:
        return len({q for g in gs for q in gate_by_id[g].qubits})

    assignment: dict[int, int] = {}
    for cv in sorted(members, key=lambda cv: (-size(members[cv]), min(rank[g] for g in members[cv]))):
        gs = members[cv]
        qs = {q for g in gs for q in gate_by_id[g].qubits}
        ds = {gate_by_id[g].depth for g in gs}
        best, best_load = None, None
        for b in range(1, k + 1):
            bq, bd = loads[b]
            if len(bq | qs) <= caps.max_qubits and len(bd | ds) <= caps.max_depth:
                load = (len(bq | qs), len(bq))
                if best is None or load < best_load:
                    best, best_load = b, load
        if best is None:
            # Fallback keeps the seed total; caps are re-validated at the end.
            best = min(loads, key=lambda b: len(loads[b][0]))
        loads[best][0].update(qs)
        loads[best][1].update(ds)
        for g in gs:
            assignment[g] = best
    return assignment


def initial_partition(
    hg: Hypergraph,
    caps: BlockCaps,
    cut_budget: int,
    k: int,
    seed: int,
    weights: PolicyWeights | None = None,
    refs: NormalizationRefs | None = None,
) -> Partition:
    """Multilevel coarsen-seed-uncoarsen construction respecting caps.

    Coarsening pairs heavy-edge-connected vertices (ratio 0.5 per level,
    stopping at <= 2k coarse vertices); seeding is first-fit decreasing;
    uncoarsening refines at each level.
    """
    total_qubits = len(hg.qubits)
    if k * caps.max_qubits < total_qubits:
        raise InfeasibilityError(
            f"sum of per-block qubit caps {k * caps.max_qubits} < {total_qubits} distinct qubits"
        )
    weights = weights or PolicyWeights(1.0, 0.0, 0.0)
    refs = refs or NormalizationRefs(e_ref=1.0, q_ref=1.0)

    # Seed-driven ranks break ties in matching and seeding order.
    gen = rngmod.stream(seed, "initial-partition")
    ranks = gen.permutation(len(hg.gates))
    rank = {g.gid: int(ranks[i]) for i, g in enumerate(hg.gates)}

    levels: list[dict[int, frozenset[int]]] = [{i: frozenset({g.gid}) for i, g in enumerate(hg.gates)}]
    while len(levels[-1]) > 2 * k:
        nxt = _coarsen_once(hg, levels[-1], rank)
        if nxt is None or len(nxt) >= len(levels[-1]):
            break
        levels.append(nxt)

    coarse = levels[-1]
    coarse_assign = _seed_blocks(hg, coarse, caps, k, rank)
    if not caps_respected(hg, coarse_assign, caps):
        # Tight caps: re-seed at the finest level, where packing is easiest.
        coarse_assign = _seed_blocks(hg, levels[0], caps, k, rank)
    part = Partition(coarse_assign, caps, cut_budget, k)
    part = fm_refine(hg, part, weights, refs, max_passes=2, enforce_budget=False)
    for lvl in reversed(levels[:-1]):
        # Projection is identity on gate ids; refine at the finer level.
        part = fm_refine(hg, part, weights, refs, max_passes=2, enforce_budget=False)
        del lvl
    if not caps_respected(hg, part.assignment, caps):
        raise InfeasibilityError("could not construct a cap-respecting partition")
    return part


# --- FM refinement ----------------------------------------------------------


def cut_pressure(hg: Hypergraph, part: Partition, v: int) -> int:
    """Count of cut hyperedges incident to v (the boundary heap key)."""
    assign = part.assignment
    n = 0
    for e in hg.edges_by_vertex[v]:
        blocks = {assign[m] for m in e.members}
        if len(blocks) > 1:
            n += 1
    return n


def boundary_vertices(hg: Hypergraph, part: Partition) -> list[int]:
    return [g.gid for g in hg.gates if cut_pressure(hg, part, g.gid) > 0]


def _neighbor_blocks(hg: Hypergraph, part: Partition, v: int) -> set[int]:
    assign = part.assignment
    blocks = {assign[m] for e in hg.edges_by_vertex[v] for m in e.members}
    blocks.discard(assign[v])
    return blocks


def fm_refine(
    hg: Hypergraph,
    part: Partition,
    weights: PolicyWeights,
    refs: NormalizationRefs,
    ebit_cost: float | Mapping[int, float] = 1.0,
    queue_model: Mapping[int, float] | None = None,
    max_passes: int = 8,
    enforce_budget: bool = True,
) -> Partition:
    """Boundary-move refinement: accepts only strictly improving feasible moves.

    Each pass walks boundary vertices in descending cut-pressure order (ties
    by id ascending) and moves a vertex to its best strictly improving
    neighbor block. The cut budget is never exceeded mid-pass; if the input
    already exceeds it, only cut-nonincreasing moves are allowed.
    """
    current = part
    j_curr = objective(hg, current, weights, refs, ebit_cost, queue_model).j
    cuts_curr = len(cut_set(hg, current))
    budget = part.cut_budget if enforce_budget else max(part.cut_budget, cuts_curr, len(hg.edges))

    for _ in range(max_passes):
        order = sorted(boundary_vertices(hg, current), key=lambda v: (-cut_pressure(hg, current, v), v))
        moved = False
        for v in order:
            if cut_pressure(hg, current, v) == 0:
                continue  # no longer on the boundary after earlier moves
            best_j, best_part, best_cuts = j_curr, None, cuts_curr
            for b in sorted(_neighbor_blocks(hg, current, v)):
                if not _move_feasible(hg, current, v, b):
                    continue
                cand = current.with_move(v, b)
                cuts_cand = len(cut_set(hg, cand))
                if cuts_cand > budget and cuts_cand > cuts_curr:
                    continue
                j_cand = objective(hg, cand, weights, refs, ebit_cost, queue_model).j
                if j_cand < best_j - 1e-15:
                    best_j, best_part, best_cuts = j_cand, cand, cuts_cand
            if best_part is not None:
                current, j_curr, cuts_curr = best_part, best_j, best_cuts
                moved = True
        if not moved:
            break
    return current
