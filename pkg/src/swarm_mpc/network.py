"""Position-dependent communication graph, clusters and plug-in/plug-out detection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .geometry import Disc, HPolytope, intersects, translate


@dataclass(frozen=True)
class CommGraph:
    k: int
    nodes: tuple
    edges: frozenset  # of (i, j) with i < j

    def has_edge(self, i, j) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    def adjacency(self) -> dict:
        adj = {v: set() for v in self.nodes}
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj


@dataclass(frozen=True)
class ClusterTopology:
    clusters: tuple  # tuple of sorted tuples, ordered by smallest member

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self, agent) -> tuple:
        for c in self.clusters:
            if agent in c:
                return c
        raise KeyError(agent)

    def assignment(self) -> dict:
        return {a: idx for idx, c in enumerate(self.clusters) for a in c}


@dataclass(frozen=True)
class PlugEvent:
    agent: int
    kind: str  # "plug-in" | "plug-out"
    neighbors: frozenset


def build_graph(positions: Sequence, comm: Sequence[Union[Disc, HPolytope]], k: int = 0,
                ids: Sequence = None) -> CommGraph:
    """Edge ``{i, j}`` iff the communication sets placed at the agents' positions meet.

    Discs are compared analytically (touching counts); polytopes go through a
    feasibility LP on the intersection.
    """
    P = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(comm) != len(P):
        raise ValueError("one communication set per agent required")
    ids = tuple(range(len(P))) if ids is None else tuple(ids)
    edges = set()
    for a in range(len(P)):
        for b in range(a + 1, len(P)):
            ca, cb = comm[a], comm[b]
            if isinstance(ca, Disc) and isinstance(cb, Disc):
                gap = np.linalg.norm((P[a] + ca.center) - (P[b] + cb.center))
                linked = gap <= ca.radius + cb.radius
            else:
                linked = intersects(_as_poly(ca, P[a]), _as_poly(cb, P[b]))
            if linked:
                i, j = ids[a], ids[b]
                edges.add((min(i, j), max(i, j)))
    return CommGraph(k=k, nodes=ids, edges=frozenset(edges))


def _as_poly(c, p):
    if isinstance(c, HPolytope):
        return translate(c, p)
    from .geometry import inscribe_polytope
    # a disc enters the LP test through a fine circumscribed polygon
    inner = inscribe_polytope(Disc(np.zeros(2), c.radius / np.cos(np.pi / 64)), 64)
    return translate(inner, p + c.center)


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.size = {x: 1 for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def connected_components(g: CommGraph) -> ClusterTopology:
    uf = _UnionFind(g.nodes)
    for i, j in sorted(g.edges):
        uf.union(i, j)
    groups = {}
    for v in g.nodes:
        groups.setdefault(uf.find(v), []).append(v)
    clusters = sorted((tuple(sorted(c)) for c in groups.values()), key=lambda c: c[0])
    return ClusterTopology(tuple(clusters))


def neighbors(topology: ClusterTopology, g: CommGraph, i) -> frozenset:
    """Direct neighbours of ``i`` including ``i`` itself."""
    if i not in g.nodes:
        raise KeyError(f"unknown agent {i}")
    out = {i}
    for a, b in g.edges:
        if a == i:
            out.add(b)
        elif b == i:
            out.add(a)
    return frozenset(out)


def diff_topology(prev: ClusterTopology, cur: ClusterTopology) -> list:
    """Per-agent changes of cluster membership between two steps.

    An agent that gains cluster mates produces a plug-in event, one that loses
    mates a plug-out event; both can happen in the same step.
    """
    before = {a: set(c) for c in prev.clusters for a in c}
    after = {a: set(c) for c in cur.clusters for a in c}
    if set(before) != set(after):
        raise ValueError("topologies cover different agents")
    events = []
    for a in sorted(after):
        gained = after[a] - before[a]
        lost = before[a] - after[a]
        if gained:
            events.append(PlugEvent(a, "plug-in", frozenset(gained)))
        if lost:
            events.append(PlugEvent(a, "plug-out", frozenset(lost)))
    return events


def classify_case(events: list, agent) -> str:
    """Map an agent's events in one step to the feasibility case I (no change),
    II (only losses), III (only gains) or IV (both)."""
    kinds = {e.kind for e in events if e.agent == agent}
    if not kinds:
        return "I"
    if kinds == {"plug-out"}:
        return "II"
    if kinds == {"plug-in"}:
        return "III"
    return "IV"


def snapshot(g: CommGraph, topology: ClusterTopology, positions=None) -> dict:
    out = {"k": int(g.k), "edges": [list(e) for e in sorted(g.edges)],
           "clusters": [list(c) for c in topology.clusters]}
    if positions is not None:
        out["positions"] = [[float(v) for v in p] for p in np.asarray(positions)]
    return out


def write_snapshot(path, g: CommGraph, topology: ClusterTopology, positions=None) -> None:
    with open(path, "w") as fh:
        json.dump(snapshot(g, topology, positions), fh, indent=1)
