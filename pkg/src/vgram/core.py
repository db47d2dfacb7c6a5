"""Domain types for the joint vision-language structure.

Dependency trees are stored as head arrays (index 0 is the artificial
ROOT, tokens are 1-based). Scene graphs are typed node sets (OBJECT,
ATTRIBUTE, RELATIONSHIP) over image regions. Alignments map tree
instances (tokens, arcs, token triples) onto scene-graph nodes.

All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class NodeType(Enum):
    OBJECT = "OBJECT"
    ATTRIBUTE = "ATTRIBUTE"
    RELATIONSHIP = "RELATIONSHIP"


@dataclass(frozen=True)
class Token:
    """One token of a caption; ``index`` is 1-based sentence position."""

    index: int
    surface: str
    pos: int
    lemma: str = ""

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"token index must be >= 1, got {self.index}")
        if self.pos < 0:
            raise ValueError(f"pos tag id must be >= 0, got {self.pos}")


def validate_tree(heads: Sequence[int], n: Optional[int] = None) -> Optional[str]:
    """Check a head array for dependency-tree well-formedness.

    Returns None when ``heads`` encodes a valid single-root projective
    tree, otherwise a short report naming the first violated property.
    ``heads[i]`` is the head of token i+1; 0 means ROOT.
    """
    heads = list(heads)
    if n is None:
        n = len(heads)
    if len(heads) != n:
        return f"expected {n} head entries, got {len(heads)}"
    if n == 0:
        return "empty sentence"
    for i, h in enumerate(heads):
        if not 0 <= h <= n:
            return f"head of token {i + 1} out of range: {h}"
        if h == i + 1:
            return f"token {i + 1} is its own head"
    # Cycle check: every token must reach ROOT by following heads.
    for start in range(1, n + 1):
        seen = set()
        cur = start
        while cur != 0:
            if cur in seen:
                return f"cycle through token {start}"
            seen.add(cur)
            cur = heads[cur - 1]
    roots = [i + 1 for i, h in enumerate(heads) if h == 0]
    if len(roots) != 1:
        return f"expected exactly one root, found {len(roots)}"
    # Projectivity: all tokens strictly between h and d must descend from h.
    for d in range(1, n + 1):
        h = heads[d - 1]
        if h == 0:
            continue
        lo, hi = min(h, d), max(h, d)
        for m in range(lo + 1, hi):
            cur = m
            while cur != 0 and cur != h:
                cur = heads[cur - 1]
            if cur != h:
                return f"arc {h}->{d} crosses token {m}"
    return None


@dataclass(frozen=True)
class DependencyTree:
    """A projective dependency tree over a tokenized caption.

    ``heads`` has one entry per token (0 = ROOT). ``types`` carries the
    per-token node type once assigned by the rewriting rules and
    ``parent_of`` the content-word parent (self for noun-phrase heads).
    ``labels`` holds typed dependency labels when the corpus provides
    silver trees.
    """

    tokens: tuple[Token, ...]
    heads: tuple[int, ...]
    types: Optional[tuple[NodeType, ...]] = None
    parent_of: Optional[tuple[int, ...]] = None
    labels: Optional[tuple[str, ...]] = None
    sentence_id: str = ""

    def __post_init__(self):
        report = validate_tree(self.heads, len(self.tokens))
        if report is not None:
            raise ValueError(f"invalid tree ({self.sentence_id or '?'}): {report}")
        for name, extra in (("types", self.types), ("parent_of", self.parent_of),
                            ("labels", self.labels)):
            if extra is not None and len(extra) != len(self.tokens):
                raise ValueError(f"{name} length does not match token count")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def root(self) -> int:
        return self.heads.index(0) + 1

    def children(self, h: int) -> list[int]:
        return [d + 1 for d, head in enumerate(self.heads) if head == h]


@dataclass(frozen=True)
class Instances:
    """Zero/first/second-order instances of a tree.

    ``second`` triples are canonical ``(x, m, y)`` with m the shared
    token: chains have an arc x->m->y, siblings have x and y both
    headed by m (x < y).
    """

    zero: tuple[int, ...]
    first: tuple[tuple[int, int], ...]
    second: tuple[tuple[int, int, int], ...]


def tree_to_instances(tree: DependencyTree | Sequence[int]) -> Instances:
    """Enumerate zero-order tokens, first-order arcs, second-order triples.

    ROOT arcs are excluded from ``first``. Second-order patterns cover
    grandparent chains g->h->d and sibling pairs d1<-h->d2, deduplicated.
    """
    heads = list(tree.heads) if isinstance(tree, DependencyTree) else list(tree)
    report = validate_tree(heads)
    if report is not None:
        raise ValueError(f"invalid tree: {report}")
    n = len(heads)
    zero = tuple(range(1, n + 1))
    first = tuple((heads[d - 1], d) for d in range(1, n + 1) if heads[d - 1] != 0)
    second = set()
    for (h, d) in first:
        g = heads[h - 1]
        if g != 0:
            second.add((g, h, d))
    by_head: dict[int, list[int]] = {}
    for (h, d) in first:
        by_head.setdefault(h, []).append(d)
    for h, deps in by_head.items():
        deps = sorted(deps)
        for i in range(len(deps)):
            for j in range(i + 1, len(deps)):
                second.add((deps[i], h, deps[j]))
    return Instances(zero=zero, first=first, second=tuple(sorted(second)))


def second_order_arcs(heads: Sequence[int], triple: tuple[int, int, int]
                      ) -> tuple[tuple[int, int], tuple[int, int]]:
    """The two tree arcs realizing a canonical second-order triple."""
    x, m, y = triple
    if heads[m - 1] == x:
        return (x, m), (m, y)
    if heads[x - 1] == m and heads[y - 1] == m:
        return (m, x), (m, y)
    raise ValueError(f"triple {triple} is not a chain or sibling pattern")


# ---------------------------------------------------------------------------
# Scene graphs


Box = tuple[float, float, float, float]


def check_box(bbox: Sequence[float]) -> Box:
    x1, y1, x2, y2 = (float(v) for v in bbox)
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {bbox}: need x1 < x2 and y1 < y2")
    return (x1, y1, x2, y2)


@dataclass(frozen=True)
class SGObject:
    id: str
    bbox: Optional[Box] = None
    label: Optional[str] = None
    feature: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SGAttribute:
    id: str
    owner: str
    label: Optional[str] = None
    feature: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SGRelationship:
    id: str
    src: str
    dst: str
    label: Optional[str] = None
    feature: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SceneGraph:
    """Typed scene-graph node set for one image.

    Gold graphs carry labels and boxes; feature vectors are optional and
    only required on the model side. Every object owns exactly one
    attribute node and each ordered object pair has at most one
    relationship node.
    """

    image_id: str
    objects: tuple[SGObject, ...]
    attributes: tuple[SGAttribute, ...] = ()
    relationships: tuple[SGRelationship, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes()})

    def validate(self) -> None:
        ids = [n.id for n in self.nodes()]
        if len(ids) != len(set(ids)):
            raise ValueError(f"{self.image_id}: duplicate node ids")
        obj_ids = {o.id for o in self.objects}
        owners = [a.owner for a in self.attributes]
        if sorted(owners) != sorted(obj_ids):
            raise ValueError(f"{self.image_id}: need exactly one attribute per object")
        for o in self.objects:
            if o.bbox is not None:
                check_box(o.bbox)
        pairs = set()
        for r in self.relationships:
            if r.src not in obj_ids or r.dst not in obj_ids:
                raise ValueError(f"{self.image_id}: relationship {r.id} has dangling endpoint")
            if r.src == r.dst:
                raise ValueError(f"{self.image_id}: relationship {r.id} is a self loop")
            if (r.src, r.dst) in pairs:
                raise ValueError(f"{self.image_id}: duplicate relationship for pair {(r.src, r.dst)}")
            pairs.add((r.src, r.dst))
        dims = {n.feature.shape[-1] for n in self.nodes() if n.feature is not None}
        if len(dims) > 1:
            raise ValueError(f"{self.image_id}: mixed feature dimensions {sorted(dims)}")

    def nodes(self) -> Iterable[SGObject | SGAttribute | SGRelationship]:
        yield from self.objects
        yield from self.attributes
        yield from self.relationships

    def node(self, node_id: str):
        return self._by_id.get(node_id)

    def node_type(self, node_id: str) -> Optional[NodeType]:
        n = self.node(node_id)
        if isinstance(n, SGObject):
            return NodeType.OBJECT
        if isinstance(n, SGAttribute):
            return NodeType.ATTRIBUTE
        if isinstance(n, SGRelationship):
            return NodeType.RELATIONSHIP
        return None

    def dummy_feature(self) -> np.ndarray:
        feats = [o.feature for o in self.objects if o.feature is not None]
        if not feats:
            raise ValueError(f"{self.image_id}: no object features for dummy node")
        return np.mean(np.stack(feats), axis=0)

    def adjacent(self, a: str, b: str) -> bool:
        """Structural adjacency between two nodes.

        Holds when one node is a relationship incident to the other,
        when an attribute meets its owner object, or when two objects
        are connected through one relationship node.
        """
        na, nb = self.node(a), self.node(b)
        if na is None or nb is None or a == b:
            return False
        for x, y in ((na, nb), (nb, na)):
            if isinstance(x, SGRelationship) and isinstance(y, SGObject):
                if y.id in (x.src, x.dst):
                    return True
            if isinstance(x, SGAttribute) and isinstance(y, SGObject):
                if x.owner == y.id:
                    return True
        if isinstance(na, SGObject) and isinstance(nb, SGObject):
            for r in self.relationships:
                if {r.src, r.dst} == {a, b}:
                    return True
        return False


# ---------------------------------------------------------------------------
# Alignments


@dataclass(frozen=True)
class FirstAlignment:
    """A tree arc grounded to a relationship node and its endpoints."""

    relationship: str
    endpoints: tuple[str, str]


@dataclass(frozen=True)
class VLAlignment:
    """Zero/first/second-order grounding of one sentence onto one scene graph."""

    sentence_id: str
    zero: dict[int, str] = field(default_factory=dict)
    first: dict[tuple[int, int], FirstAlignment] = field(default_factory=dict)
    second: dict[tuple[int, int, int], tuple[str, str, str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self, tree: DependencyTree, sg: SceneGraph) -> None:
        n = len(tree)
        arcs = set(tree_to_instances(tree).first)
        triples = set(tree_to_instances(tree).second)
        for t, node in self.zero.items():
            if not 1 <= t <= n:
                raise ValueError(f"{self.sentence_id}: zero entry for missing token {t}")
            if sg.node(node) is None:
                raise ValueError(f"{self.sentence_id}: zero entry maps to unknown node {node}")
        for arc, fa in self.first.items():
            if arc not in arcs:
                raise ValueError(f"{self.sentence_id}: first entry {arc} is not a tree arc")
            rel = sg.node(fa.relationship)
            if not isinstance(rel, SGRelationship):
                raise ValueError(f"{self.sentence_id}: first entry {arc} maps to non-relationship")
            for node in fa.endpoints:
                if sg.node(node) is None:
                    raise ValueError(f"{self.sentence_id}: first endpoint {node} unknown")
        for triple in self.second:
            if triple not in triples:
                raise ValueError(f"{self.sentence_id}: second entry {triple} not in tree")
