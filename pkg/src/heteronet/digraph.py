"""Directed graphs and the structural predicates used to gate realizations.

Vertices are addressed either by position (``int``) or by label (``str``).
Adjacency is a dense boolean matrix; graphs here have tens of vertices at
most, so nothing is sparse.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "Digraph",
    "GateReport",
    "GraphParseError",
    "parse_digraph",
    "load_digraph",
    "serialize_digraph",
    "to_dot",
    "is_transitive",
    "find_two_cycles",
    "find_delta_cliques",
    "splitting_vertices",
    "induced_subgraph",
    "cycle_decomposition",
    "strongly_connected_components",
    "realization_gate",
]

Vertex = Union[int, str]


class GraphParseError(ValueError):
    """Raised for malformed graph documents."""


@dataclass(frozen=True, eq=False)
class Digraph:
    adj: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        adj = np.array(self.adj, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise ValueError("adjacency must be a non-empty square matrix")
        n = adj.shape[0]
        loops = np.flatnonzero(np.diag(adj))
        labels = tuple(self.labels) if self.labels else tuple(str(i + 1) for i in range(n))
        if len(labels) != n:
            raise ValueError(f"expected {n} labels, got {len(labels)}")
        if len(set(labels)) != n:
            raise ValueError("vertex labels must be unique")
        if loops.size:
            raise GraphParseError(f"1-cycle at vertex {labels[loops[0]]}")
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def index(self, v: Vertex) -> int:
        if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            if not 0 <= v < self.n:
                raise KeyError(f"vertex index {v} out of range")
            return int(v)
        try:
            return self.labels.index(str(v))
        except ValueError:
            raise KeyError(f"unknown vertex {v!r}") from None

    def label(self, i: int) -> str:
        return self.labels[i]

    def out_neighbors(self, v: Vertex) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.adj[self.index(v)])]

    def in_neighbors(self, v: Vertex) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.adj[:, self.index(v)])]

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adj))]

    def edge_labels(self) -> list[tuple[str, str]]:
        return [(self.labels[i], self.labels[j]) for i, j in self.edges()]

    def __eq__(self, other):
        if not isinstance(other, Digraph):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.labels, self.adj.tobytes()))

    def __repr__(self):
        edges = ", ".join(f"{a}->{b}" for a, b in self.edge_labels())
        return f"Digraph(n={self.n}, edges=[{edges}])"

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]], vertices: Sequence[str] = ()) -> "Digraph":
        labels = [str(v) for v in vertices]
        if len(set(labels)) != len(labels):
            raise GraphParseError("duplicate vertex labels")
        known = set(labels)
        pairs = []
        for a, b in edges:
            a, b = str(a), str(b)
            if a == b:
                raise GraphParseError(f"1-cycle at vertex {a}")
            for v in (a, b):
                if v not in known:
                    if vertices:
                        raise GraphParseError(f"dangling label {v!r} not in vertex list")
                    known.add(v)
                    labels.append(v)
            pairs.append((a, b))
        if not labels:
            raise GraphParseError("graph has no vertices")
        pos = {v: i for i, v in enumerate(labels)}
        adj = np.zeros((len(labels), len(labels)), dtype=bool)
        for a, b in pairs:
            adj[pos[a], pos[b]] = True
        return cls(adj, tuple(labels))


_EDGE_RE = re.compile(r"^\s*(\S+?)\s*->\s*(\S+)\s*$")


def parse_digraph(text: str) -> Digraph:
    """Parse a JSON graph document or an edge-list text.

    Edge lists hold one ``src -> dst`` per line; ``#`` starts a comment.  A
    line with a single token declares an isolated vertex, which is how the
    one-vertex graph is written.
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise GraphParseError(f"invalid JSON graph document: {exc}") from exc
        if not isinstance(doc, dict) or "edges" not in doc:
            raise GraphParseError("JSON graph document needs an 'edges' list")
        vertices = doc.get("vertices", [])
        edges = doc["edges"]
        if not isinstance(vertices, list) or not isinstance(edges, list):
            raise GraphParseError("'vertices' and 'edges' must be lists")
        for e in edges:
            if not isinstance(e, (list, tuple)) or len(e) != 2:
                raise GraphParseError(f"edge {e!r} is not a [src, dst] pair")
        return Digraph.from_edges([tuple(e) for e in edges], vertices)

    edges = []
    vertices: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _EDGE_RE.match(line)
        if m:
            edges.append((m.group(1), m.group(2)))
        elif len(line.split()) == 1 and "->" not in line:
            vertices.append(line)
        else:
            raise GraphParseError(f"line {lineno}: cannot parse {raw.strip()!r}")
    # declared isolated vertices come first, edge endpoints are appended in order
    labels = list(dict.fromkeys(vertices + [v for e in edges for v in e]))
    return Digraph.from_edges(edges, labels)


def load_digraph(path) -> Digraph:
    with open(path, encoding="utf-8") as fh:
        return parse_digraph(fh.read())


def serialize_digraph(g: Digraph) -> str:
    doc = {"vertices": list(g.labels), "edges": [list(e) for e in g.edge_labels()]}
    return json.dumps(doc)


def to_dot(g: Digraph, name: str = "G") -> str:
    lines = [f"digraph {name} {{"]
    lines += [f'  "{v}";' for v in g.labels]
    lines += [f'  "{a}" -> "{b}";' for a, b in g.edge_labels()]
    lines.append("}")
    return "\n".join(lines) + "\n"


def _reachable(adj: np.ndarray, start: int) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u] & ~seen):
            seen[v] = True
            queue.append(int(v))
    return seen


def is_transitive(g: Digraph) -> bool:
    """True iff there is a directed path between every ordered pair of distinct vertices."""
    if g.n == 1:
        return True
    return bool(_reachable(g.adj, 0).all() and _reachable(g.adj.T, 0).all())


def strongly_connected_components(g: Digraph) -> list[list[int]]:
    """Components as sorted index lists, ordered by smallest member."""
    fwd = [_reachable(g.adj, i) for i in range(g.n)]
    assigned = np.zeros(g.n, dtype=bool)
    comps = []
    for i in range(g.n):
        if assigned[i]:
            continue
        members = [j for j in range(g.n) if fwd[i][j] and fwd[j][i]]
        assigned[members] = True
        comps.append(members)
    return comps


def find_two_cycles(g: Digraph) -> list[tuple[str, str]]:
    both = g.adj & g.adj.T
    return [(g.labels[i], g.labels[j]) for i, j in zip(*np.nonzero(np.triu(both, 1)))]


def find_delta_cliques(g: Digraph) -> list[tuple[str, str, str]]:
    """Triples (i, j, k) with edges i->j, j->k and the shortcut i->k."""
    a = g.adj
    out = []
    for i in range(g.n):
        for j in np.flatnonzero(a[i]):
            for k in np.flatnonzero(a[j] & a[i]):
                out.append((g.labels[i], g.labels[j], g.labels[int(k)]))
    return out


def splitting_vertices(g: Digraph) -> dict[str, int]:
    result = {}
    for w in range(g.n):
        outs = np.flatnonzero(g.adj[w])
        if outs.size < 2:
            continue
        # only w -> v_j edges may live on {w} ∪ out(w)
        if g.adj[np.ix_(outs, outs)].any() or g.adj[outs, w].any():
            continue
        result[g.labels[w]] = int(outs.size)
    return result


def induced_subgraph(g: Digraph, subset: Iterable[Vertex]) -> Digraph:
    idx = sorted({g.index(v) for v in subset})
    if not idx:
        raise ValueError("induced subgraph needs at least one vertex")
    return Digraph(g.adj[np.ix_(idx, idx)], tuple(g.labels[i] for i in idx))


def _canonical(cycle: Sequence[int]) -> tuple[int, ...]:
    k = cycle.index(min(cycle))
    return tuple(cycle[k:]) + tuple(cycle[:k])


def _shortest_paths(adj: np.ndarray, src: int, dst: int) -> list[list[int]]:
    """All shortest directed paths src -> dst (inclusive)."""
    n = adj.shape[0]
    dist = np.full(n, -1)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(int(v))
    if dist[dst] < 0:
        return []
    paths = []

    def walk(path):
        u = path[-1]
        if u == dst:
            paths.append(list(path))
            return
        for v in np.flatnonzero(adj[u]):
            if dist[v] == dist[u] + 1 and (dist[v] < dist[dst] or v == dst):
                path.append(int(v))
                walk(path)
                path.pop()

    walk([src])
    return paths


def cycle_decomposition(g: Digraph) -> list[tuple[str, ...]]:
    """Cover the edge set by shortest cycles, one per edge.

    Each cycle is rotated to start at its smallest vertex index; among equally
    short cycles through an edge the lexicographically smallest wins.  The
    result is deduplicated and sorted by (length, vertex sequence).
    """
    if not is_transitive(g):
        raise ValueError("graph is not transitive: no cycle decomposition covers all edges")
    found: set[tuple[int, ...]] = set()
    for u, v in g.edges():
        candidates = [_canonical([u] + p[:-1]) for p in _shortest_paths(g.adj, v, u)]
        found.add(min(candidates))
    ordered = sorted(found, key=lambda c: (len(c), c))
    return [tuple(g.labels[i] for i in c) for c in ordered]


@dataclass(frozen=True)
class GateReport:
    transitive: bool
    one_cycles: list[str]
    two_cycles: list[tuple[str, str]]
    delta_cliques: list[tuple[str, str, str]]

    @property
    def eligible(self) -> bool:
        return self.transitive and not (self.one_cycles or self.two_cycles or self.delta_cliques)

    def to_dict(self) -> dict:
        return {
            "transitive": self.transitive,
            "one_cycles": list(self.one_cycles),
            "two_cycles": [list(p) for p in self.two_cycles],
            "delta_cliques": [list(t) for t in self.delta_cliques],
            "eligible": self.eligible,
        }


def realization_gate(g: Digraph) -> GateReport:
    one_cycles = [g.labels[i] for i in np.flatnonzero(np.diag(g.adj))]
    return GateReport(
        transitive=is_transitive(g),
        one_cycles=one_cycles,
        two_cycles=find_two_cycles(g),
        delta_cliques=find_delta_cliques(g),
    )
