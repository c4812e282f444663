"""Undirected graphs on the latent tube components and separation queries.

Vertices are labels ``U<d>`` (scatter) and ``V<d>`` (intensity) for each
development stage ``d``. Responses are named ``Y_<zone><stage>`` and
``C_<zone><stage>``; their single latent parent is ``U<stage>`` and
``V<stage>`` respectively.
"""

from __future__ import annotations

import itertools
import re
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .data_model import STAGES, ZONES
from .errors import PreconditionError

LABELS: tuple[str, ...] = ("U1", "U2", "U3", "V1", "V2", "V3")

_RESPONSE = re.compile(r"^([YC])_([A-Z])(\d+)$")


def _pair(a: str, b: str, order: tuple[str, ...]) -> tuple[str, str]:
    return (a, b) if order.index(a) < order.index(b) else (b, a)


@dataclass(frozen=True)
class LatentGraph:
    vertices: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        for a, b in self.edges:
            if a == b:
                raise PreconditionError(f"self-loop on {a}")
            if a not in self.vertices or b not in self.vertices:
                raise PreconditionError(f"edge {a}-{b} uses an unknown vertex")

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]], vertices: Iterable[str] = LABELS) -> "LatentGraph":
        verts = tuple(vertices)
        out = set()
        for a, b in edges:
            if a == b:
                raise PreconditionError(f"self-loop on {a}")
            if a not in verts or b not in verts:
                raise PreconditionError(f"edge {a}-{b} uses an unknown vertex")
            out.add(_pair(a, b, verts))
        return cls(verts, frozenset(out))

    @classmethod
    def empty(cls, vertices: Iterable[str] = LABELS) -> "LatentGraph":
        return cls(tuple(vertices), frozenset())

    @classmethod
    def saturated(cls, vertices: Iterable[str] = LABELS) -> "LatentGraph":
        verts = tuple(vertices)
        return cls(verts, frozenset(itertools.combinations(verts, 2)))

    def sorted_edges(self) -> list[tuple[str, str]]:
        idx = {v: i for i, v in enumerate(self.vertices)}
        return sorted(self.edges, key=lambda e: (idx[e[0]], idx[e[1]]))

    def has_edge(self, a: str, b: str) -> bool:
        return a != b and _pair(a, b, self.vertices) in self.edges

    def neighbors(self, v: str) -> set[str]:
        return {b if a == v else a for a, b in self.edges if v in (a, b)}

    def with_edge(self, a: str, b: str) -> "LatentGraph":
        return LatentGraph(self.vertices, self.edges | {_pair(a, b, self.vertices)})

    def without_edge(self, a: str, b: str) -> "LatentGraph":
        return LatentGraph(self.vertices, self.edges - {_pair(a, b, self.vertices)})

    def __len__(self) -> int:
        return len(self.edges)


def separates(graph: LatentGraph, S: Iterable[str], A: Iterable[str], B: Iterable[str]) -> bool:
    """True iff every path from ``A`` to ``B`` meets ``S``.

    Breadth-first reachability from ``A`` in the graph with ``S`` removed.
    """
    S, A, B = set(S), set(A), set(B)
    if not A or not B:
        raise PreconditionError("A and B must be non-empty")
    if A & B or A & S or B & S:
        raise PreconditionError(f"A, B and S must be pairwise disjoint (A={A}, B={B}, S={S})")
    unknown = (A | B | S) - set(graph.vertices)
    if unknown:
        raise PreconditionError(f"unknown vertices {sorted(unknown)}")

    adj = {v: set() for v in graph.vertices}
    for a, b in graph.edges:
        adj[a].add(b)
        adj[b].add(a)
    seen = set(A)
    queue = deque(A)
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w in S or w in seen:
                continue
            if w in B:
                return False
            seen.add(w)
            queue.append(w)
    return True


def latent_parent(response: str) -> str:
    m = _RESPONSE.match(response)
    if not m:
        raise PreconditionError(f"bad response identifier {response!r}; expected e.g. 'Y_A1'")
    kind, _, stage = m.groups()
    return ("U" if kind == "Y" else "V") + stage


def stage_responses(stage: int, zones: Iterable[str] = ZONES) -> frozenset[str]:
    """All scatter and intensity responses of one stage, e.g. Y_A1, C_A1, ..."""
    return frozenset(f"{k}_{z}{stage}" for k in "YC" for z in zones)


@dataclass(frozen=True)
class CIStatement:
    """``A`` is conditionally independent of ``B`` given latent labels ``S``."""

    A: frozenset[str]
    B: frozenset[str]
    S: frozenset[str]

    def __post_init__(self):
        if not self.A or not self.B:
            raise PreconditionError("A and B must be non-empty")
        if self.A & self.B:
            raise PreconditionError("A and B must be disjoint")

    def __str__(self) -> str:
        f = lambda s: "{" + ", ".join(sorted(s)) + "}"  # noqa: E731
        return f"{f(self.A)} _||_ {f(self.B)} | {f(self.S)}"


def minimal_separator(graph: LatentGraph, A: Iterable[str], B: Iterable[str]) -> frozenset[str] | None:
    """Smallest separating set drawn from the remaining vertices, or None.

    Subsets are tried by size, then in vertex order, so the answer is
    deterministic.
    """
    A, B = set(A), set(B)
    rest = [v for v in graph.vertices if v not in A | B]
    for size in range(len(rest) + 1):
        for S in itertools.combinations(rest, size):
            if separates(graph, S, A, B):
                return frozenset(S)
    return None


def induced_separation(
    graph: LatentGraph, stageA: Iterable[str], stageB: Iterable[str]
) -> CIStatement | None:
    """Conditional independence of two response sets given latent components.

    The separating set is always made of latent labels: conditioning on the
    corresponding responses does not in general give independence.
    """
    stageA, stageB = frozenset(stageA), frozenset(stageB)
    if not stageA or not stageB:
        raise PreconditionError("response sets must be non-empty")
    A = {latent_parent(r) for r in stageA}
    B = {latent_parent(r) for r in stageB}
    if A & B:
        raise PreconditionError(f"response sets share latent parents {sorted(A & B)}")
    unknown = (A | B) - set(graph.vertices)
    if unknown:
        raise PreconditionError(f"latent parents {sorted(unknown)} are not graph vertices")
    S = minimal_separator(graph, A, B)
    if S is None:
        return None
    return CIStatement(stageA, stageB, S)


def to_dot(graph: LatentGraph, name: str = "latent") -> str:
    lines = [f"graph {name} {{"]
    lines += [f"  {v};" for v in graph.vertices]
    lines += [f"  {a} -- {b};" for a, b in graph.sorted_edges()]
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dag(graph: LatentGraph, zones: Iterable[str] = ZONES) -> str:
    """DOT document: latent-latent edges (bidirected) plus latent -> response arrows."""
    zones = tuple(zones)
    stages = sorted({int(v[1:]) for v in graph.vertices})
    lines = ["graph dag {", "  node [shape=circle];"]
    lines += [f"  {v};" for v in graph.vertices]
    lines.append("  node [shape=box];")
    responses = []
    for d in stages:
        for kind in "YC":
            parent = ("U" if kind == "Y" else "V") + str(d)
            if parent not in graph.vertices:
                continue
            for z in zones:
                responses.append((parent, f"{kind}_{z}{d}"))
    lines += [f"  {r};" for _, r in responses]
    lines += [f"  {a} -- {b} [dir=both];" for a, b in graph.sorted_edges()]
    lines += [f"  {p} -- {r} [dir=forward];" for p, r in responses]
    lines.append("}")
    return "\n".join(lines) + "\n"


_DOT_EDGE = re.compile(r"^\s*(\w+)\s*--\s*(\w+)\s*(\[(.*)\])?\s*;?\s*$")


def parse_dot(text: str) -> tuple[set[tuple[str, str]], set[tuple[str, str]]]:
    """Read back the edge lists written by :func:`to_dot` / :func:`export_dag`.

    Returns ``(undirected, directed)``; ``dir=forward`` edges are directed.
    """
    undirected, directed = set(), set()
    for line in text.splitlines():
        m = _DOT_EDGE.match(line)
        if not m:
            continue
        a, b, _, attrs = m.groups()
        if attrs and "dir=forward" in attrs.replace(" ", ""):
            directed.add((a, b))
        else:
            undirected.add((a, b))
    return undirected, directed


def graph_from_dot(text: str, vertices: Iterable[str] = LABELS) -> LatentGraph:
    undirected, _ = parse_dot(text)
    return LatentGraph.from_edges(undirected, vertices)


__all__ = [
    "LABELS",
    "STAGES",
    "CIStatement",
    "LatentGraph",
    "export_dag",
    "graph_from_dot",
    "induced_separation",
    "latent_parent",
    "minimal_separator",
    "parse_dot",
    "separates",
    "stage_responses",
    "to_dot",
]
