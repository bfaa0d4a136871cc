"""Marked plane trees and forests: critical binary genealogies.

A tree is stored in preorder (lexicographic plane order), one individual per
vertex.  Roots are individuals born at time 0; every vertex carries a
positive exponential lifetime and dies at ``birth + lifetime``, leaving 0 or
2 children.  All death times across a forest are pairwise distinct (enforced
by resampling, collisions have probability zero but float ties are possible).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod

DEFAULT_MAX_VERTICES = 1_000_000


class PopulationCapError(RuntimeError):
    """Raised when a Galton-Watson sample exceeds the vertex cap."""

    def __init__(self, cap: int):
        super().__init__(
            f"Galton-Watson population exceeded the hard cap of {cap} vertices; "
            f"raise max_vertices if this is intended"
        )
        self.cap = cap


@dataclass(frozen=True)
class MarkedPlaneTree:
    """Finite binary plane tree with birth/death markings, preorder storage."""

    parent: np.ndarray      # int64, -1 for the root
    children: np.ndarray    # (n, 2) int64, -1 where absent; column order = plane order
    birth_time: np.ndarray  # float64
    lifetime: np.ndarray    # float64, > 0
    meta: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.parent)

    @property
    def death_time(self) -> np.ndarray:
        return self.birth_time + self.lifetime

    def children_of(self, v: int) -> list[int]:
        return [int(c) for c in self.children[v] if c >= 0]

    def is_leaf(self, v: int) -> bool:
        return self.children[v, 0] < 0

    def validate(self) -> None:
        n = self.n_vertices
        assert n >= 1
        assert (self.lifetime > 0).all(), "lifetimes must be positive"
        death = self.death_time
        for v in range(n):
            kids = self.children_of(v)
            assert len(kids) in (0, 2), "binary tree"
            for c in kids:
                assert self.parent[c] == v
                assert c > v, "children follow parents in preorder"
                assert self.birth_time[c] == death[v], "child born at parent's death"
        assert len(np.unique(death)) == n, "death times must be distinct"


@dataclass(frozen=True)
class MarkedForest:
    """Ordered collection of trees whose roots are all born at time 0."""

    trees: tuple[MarkedPlaneTree, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest must contain at least one tree")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def all_death_times(self) -> np.ndarray:
        return np.concatenate([t.death_time for t in self.trees])

    def validate(self) -> None:
        for t in self.trees:
            t.validate()
            assert (t.birth_time[t.parent < 0] == 0.0).all()
        deaths = self.all_death_times()
        assert len(np.unique(deaths)) == len(deaths), "death-time collision in forest"


def _as_forest(tree_or_forest) -> MarkedForest:
    if isinstance(tree_or_forest, MarkedForest):
        return tree_or_forest
    return MarkedForest(trees=(tree_or_forest,))


# ---------------------------------------------------------------------------
# sampling

def _sample_tree_vertices(root_key, rate, cap, t_max):
    """Depth-first expansion with per-vertex streams chained along the path.

    Returns preorder lists (parent, child-pairs, birth, lifetime).  When
    ``t_max`` is given, vertices born at or after it are recorded but not
    expanded (their subtrees cannot affect the population before t_max).
    """
    parents, births, lifes, kidpairs = [], [], [], []
    # stack of (parent_index, stream_key, birth_time); process left child first
    stack = [(-1, root_key, 0.0)]
    while stack:
        par, key, birth = stack.pop()
        g = rngmod.generator(key)
        life = g.exponential(1.0 / rate)
        splits = bool(g.random() < 0.5)
        v = len(parents)
        if v >= cap:
            raise PopulationCapError(cap)
        parents.append(par)
        births.append(birth)
        lifes.append(life)
        kidpairs.append(None)
        if par >= 0:
            pair = kidpairs[par]
            pair[pair.index(-1)] = v
        death = birth + life
        expand = splits and (t_max is None or death < t_max)
        if expand:
            kidpairs[v] = [-1, -1]
            # push right first so the left child is visited next (preorder)
            stack.append((v, rngmod.child_key(key, 1), death))
            stack.append((v, rngmod.child_key(key, 0), death))
        else:
            kidpairs[v] = [-2, -2] if splits else [-1, -1]  # -2 marks censored
    return parents, births, lifes, kidpairs


def _finish_tree(parents, births, lifes, kidpairs, meta) -> MarkedPlaneTree:
    children = np.array(
        [[a if a >= 0 else -1 for a in pair] for pair in kidpairs], dtype=np.int64
    )
    censored = any(pair[0] == -2 for pair in kidpairs)
    meta = dict(meta)
    if censored:
        meta["censored"] = True
    return MarkedPlaneTree(
        parent=np.asarray(parents, dtype=np.int64),
        children=children,
        birth_time=np.asarray(births, dtype=np.float64),
        lifetime=np.asarray(lifes, dtype=np.float64),
        meta=meta,
    )


def sample_gw_forest(
    initial_count: int,
    rate: float,
    seed: int,
    *,
    max_vertices: int = DEFAULT_MAX_VERTICES,
    t_max: float | None = None,
) -> MarkedForest:
    """Critical binary Galton-Watson forest with Exponential(rate) lifetimes.

    Each individual lives Exp(rate), then leaves 2 offspring with probability
    1/2, else none.  Criticality makes the forest finite almost surely; the
    vertex cap guards against the heavy tail of the total progeny.  With
    ``t_max`` set, subtrees rooted after t_max are left unexpanded (the
    returned forest is exact on [0, t_max]).
    """
    if not (isinstance(initial_count, (int, np.integer)) and initial_count >= 1):
        raise ValueError("initial_count must be a positive integer")
    if not (np.isfinite(rate) and rate > 0):
        raise ValueError("rate must be a positive finite real")
    for attempt in range(16):
        trees = []
        total = 0
        ok = True
        for k in range(initial_count):
            key = rngmod.stream_key(seed, "gw-tree", k, attempt)
            parts = _sample_tree_vertices(key, rate, max_vertices - total, t_max)
            tree = _finish_tree(*parts, meta={"seed": seed, "rate": rate, "root_index": k})
            total += tree.n_vertices
            trees.append(tree)
        forest = MarkedForest(
            trees=tuple(trees),
            meta={"seed": seed, "rate": rate, "initial_count": initial_count,
                  "t_max": t_max},
        )
        deaths = forest.all_death_times()
        if len(np.unique(deaths)) == len(deaths):
            return forest
        ok = False  # collision: resample every tree with a perturbed stream index
    if not ok:
        raise RuntimeError("could not avoid death-time collisions after 16 resamples")


def _uniform_topology_steps(n: int, g: np.random.Generator) -> np.ndarray:
    """Preorder +1/-1 steps of a uniform full binary plane tree on n vertices.

    Cycle lemma: shuffle m up-steps (internal vertices) and m+1 down-steps
    (leaves); the unique rotation starting right after the first minimum of
    the prefix sums is a valid preorder code.
    """
    m = (n - 1) // 2
    steps = np.concatenate([np.ones(m, np.int64), -np.ones(m + 1, np.int64)])
    g.shuffle(steps)
    pref = np.cumsum(steps)
    k = int(np.argmin(pref))
    rot = np.concatenate([steps[k + 1:], steps[:k + 1]])
    pref = np.cumsum(rot)
    assert pref[-1] == -1 and (pref[:-1] >= 0).all()
    return rot


def sample_conditioned_tree(total_vertices: int, rate: float, seed: int) -> MarkedPlaneTree:
    """Uniform full binary plane tree on ``total_vertices`` with iid lifetimes.

    Equivalent to the critical binary Galton-Watson tree conditioned on its
    total progeny.  ``total_vertices`` counts all individuals (odd: a full
    binary plane tree with L leaves has 2L-1 vertices); the corresponding
    edge count of the genealogy rooted at an abstract ancestor equals the
    vertex count here.  Topology is exact (cycle lemma), lifetimes are
    attached independently afterward.
    """
    n = total_vertices
    if not (isinstance(n, (int, np.integer)) and n >= 1 and n % 2 == 1):
        raise ValueError(
            f"total_vertices must be an odd positive integer, got {n}: a full binary "
            f"plane tree with L leaves has 2L-1 vertices"
        )
    if not (np.isfinite(rate) and rate > 0):
        raise ValueError("rate must be a positive finite real")
    for attempt in range(16):
        g = rngmod.stream(seed, "conditioned-topology", attempt)
        steps = _uniform_topology_steps(n, g)
        parents = np.full(n, -1, dtype=np.int64)
        children = np.full((n, 2), -1, dtype=np.int64)
        stack = [-1]
        nxt = 0
        for i in range(n):
            par = stack.pop()
            parents[i] = par
            if par >= 0:
                children[par, 0 if children[par, 0] < 0 else 1] = i
            if steps[i] == 1:
                stack.append(i)
                stack.append(i)
        lifetimes = rngmod.stream(seed, "conditioned-lifetimes", attempt).exponential(
            1.0 / rate, size=n
        )
        births = np.zeros(n)
        for v in range(1, n):
            births[v] = births[parents[v]] + lifetimes[parents[v]]
        tree = MarkedPlaneTree(
            parent=parents,
            children=children,
            birth_time=births,
            lifetime=lifetimes,
            meta={"seed": seed, "rate": rate, "conditioned_n": int(n)},
        )
        if len(np.unique(tree.death_time)) == n:
            return tree
    raise RuntimeError("could not avoid death-time collisions after 16 resamples")


def sample_conditioned_tree_by_rejection(
    total_vertices: int, rate: float, seed: int, *, max_tries: int = 2_000_000
) -> MarkedPlaneTree:
    """Rejection sampling of the conditioned tree from unconditioned GW draws.

    Exponentially slow in ``total_vertices``; kept for cross-validating the
    exact sampler on small n, not for production use.
    """
    for k in range(max_tries):
        forest = sample_gw_forest(1, rate, seed + 7_919 * k)
        tree = forest.trees[0]
        if tree.n_vertices == total_vertices:
            return tree
    raise RuntimeError(f"rejection sampler failed after {max_tries} tries")


# ---------------------------------------------------------------------------
# queries

def alive_set(tree_or_forest, t: float) -> list[tuple[int, int]]:
    """Vertices alive at time t (birth <= t < death) in plane order.

    Returns (tree_index, vertex_index) pairs; preorder storage makes the
    in-tree ordering lexicographic.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    forest = _as_forest(tree_or_forest)
    out = []
    for k, tree in enumerate(forest.trees):
        death = tree.death_time
        alive = np.nonzero((tree.birth_time <= t) & (t < death))[0]
        out.extend((k, int(v)) for v in alive)
    return out


def extinction_time(tree_or_forest) -> float:
    forest = _as_forest(tree_or_forest)
    return float(max(t.death_time.max() for t in forest.trees))


def graph_distance(tree: MarkedPlaneTree, v1: int, v2: int) -> float:
    """Metric tree distance via the first common ancestor.

    d(v1, v2) = (h_{v1} - h_a) + (h_{v2} - h_a) where h is the death time and
    a the first common ancestor (interpreting each vertex as the top of its
    lifetime edge).
    """
    n = tree.n_vertices
    if not (0 <= v1 < n and 0 <= v2 < n):
        raise ValueError("vertex id out of range")
    death = tree.death_time
    anc = set()
    a = v1
    while a >= 0:
        anc.add(a)
        a = int(tree.parent[a])
    a = v2
    while a not in anc:
        a = int(tree.parent[a])
        if a < 0:
            raise ValueError("vertices lie in different trees")
    return float((death[v1] - death[a]) + (death[v2] - death[a]))


def forest_graph_distance(forest: MarkedForest, u: tuple[int, int], v: tuple[int, int]) -> float:
    if u[0] != v[0]:
        raise ValueError("vertices lie in different trees of the forest")
    return graph_distance(forest.trees[u[0]], u[1], v[1])


@dataclass(frozen=True)
class ContourPath:
    """Piecewise-linear unit-speed contour (Harris path) of a tree."""

    times: np.ndarray    # breakpoints merged with any requested uniform samples
    heights: np.ndarray
    visit_time: np.ndarray  # per vertex: a time at which the contour sits at its apex

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        return np.interp(t, self.times, self.heights)

    def implied_distance(self, v1: int, v2: int) -> float:
        s1, s2 = self.visit_time[v1], self.visit_time[v2]
        if s2 < s1:
            s1, s2 = s2, s1
        i1, i2 = np.searchsorted(self.times, [s1, s2])
        lo = np.min(self.heights[i1:i2 + 1]) if i2 >= i1 else np.inf
        lo = min(lo, float(self(s1)), float(self(s2)))
        return float(self(s1) + self(s2) - 2.0 * lo)


def contour_function(tree: MarkedPlaneTree, samples: int = 0) -> ContourPath:
    """Unit-speed depth-first trace of the tree in plane order.

    Total duration is twice the sum of lifetimes; the path starts and ends at
    height 0 with slope +-1.  ``samples`` adds that many uniformly spaced
    evaluation points to the returned grid (breakpoints are always kept, so
    the path is exact).
    """
    bp_t = [0.0]
    bp_h = [0.0]
    visit = np.zeros(tree.n_vertices)
    t = 0.0

    # iterative DFS: (vertex, phase) with phase 0 = climb edge, 1 = descend
    stack = [(0, 0)]
    heights = {(-1): 0.0}
    while stack:
        v, phase = stack.pop()
        if phase == 0:
            t += tree.lifetime[v]
            h = float(tree.death_time[v])
            bp_t.append(t)
            bp_h.append(h)
            visit[v] = t
            stack.append((v, 1))
            for c in reversed(tree.children_of(v)):
                stack.append((c, 0))
        else:
            t += tree.lifetime[v]
            par = int(tree.parent[v])
            h = float(tree.death_time[par]) if par >= 0 else 0.0
            bp_t.append(t)
            bp_h.append(h)
    times = np.asarray(bp_t)
    hts = np.asarray(bp_h)
    if samples > 0:
        uni = np.linspace(0.0, times[-1], samples)
        merged = np.unique(np.concatenate([times, uni]))
        hts = np.interp(merged, times, hts)
        times = merged
    return ContourPath(times=times, heights=hts, visit_time=visit)


# ---------------------------------------------------------------------------
# serialization

def tree_to_dict(tree: MarkedPlaneTree) -> dict:
    death = tree.death_time
    verts = [
        {
            "id": v,
            "parent": int(tree.parent[v]) if tree.parent[v] >= 0 else None,
            "children": tree.children_of(v),
            "birth": float(tree.birth_time[v]),
            "lifetime": float(tree.lifetime[v]),
            "death": float(death[v]),
        }
        for v in range(tree.n_vertices)
    ]
    out = {"vertices": verts}
    for k in ("seed", "rate", "conditioned_n"):
        if k in tree.meta:
            out[k] = tree.meta[k]
    return out


def forest_to_dict(forest: MarkedForest) -> dict:
    return {
        "trees": [tree_to_dict(t) for t in forest.trees],
        **{k: v for k, v in forest.meta.items() if v is not None},
    }


def tree_from_dict(d: dict) -> MarkedPlaneTree:
    verts = d["vertices"]
    n = len(verts)
    parent = np.full(n, -1, dtype=np.int64)
    children = np.full((n, 2), -1, dtype=np.int64)
    birth = np.zeros(n)
    life = np.zeros(n)
    for rec in verts:
        v = rec["id"]
        parent[v] = -1 if rec["parent"] is None else rec["parent"]
        for j, c in enumerate(rec["children"]):
            children[v, j] = c
        birth[v] = rec["birth"]
        life[v] = rec["lifetime"]
    meta = {k: d[k] for k in ("seed", "rate", "conditioned_n") if k in d}
    return MarkedPlaneTree(parent=parent, children=children, birth_time=birth,
                           lifetime=life, meta=meta)


def forest_from_dict(d: dict) -> MarkedForest:
    if "trees" in d:
        trees = tuple(tree_from_dict(td) for td in d["trees"])
        meta = {k: v for k, v in d.items() if k != "trees"}
        return MarkedForest(trees=trees, meta=meta)
    return MarkedForest(trees=(tree_from_dict(d),), meta={})


def save_forest(forest_or_tree, path) -> None:
    if isinstance(forest_or_tree, MarkedPlaneTree):
        doc = tree_to_dict(forest_or_tree)
    else:
        doc = forest_to_dict(forest_or_tree)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_forest(path) -> MarkedForest:
    with open(path) as f:
        return forest_from_dict(json.load(f))
