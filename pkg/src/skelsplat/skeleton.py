"""Skeleton discovery from superpoint motion.

Per candidate pair, a shared pivot is solved from the pair's relative
transforms over time; pairs are scored by how well a fixed pivot explains the
relative motion plus the disagreement of the two one-sided estimates. A
minimum spanning tree over the smoothed scores gives the skeleton.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import RigidTransform
from .superpoints import MotionSequence, knn_assign

LAMBDA_PAIR = 1.0   # weight of the two-sided joint disagreement term
EMA_MOMENTUM = 0.1
K_PRIME = 5
DAMPING = 1e-8


def relative_transform(t_a: RigidTransform, t_b: RigidTransform) -> RigidTransform:
    """Transform of part a expressed in part b's frame: (T_b)^-1 T_a."""
    return geom.compose(geom.inverse(t_b), t_a)


def solve_joint(relative_transforms):
    """Least-squares pivot from relative transforms over time.

    Minimizes sum_t ||t_r^t - (I - R_r^t) j||^2 via damped normal equations.
    Returns (joint, residual, degenerate) where degenerate means the relative
    motion carries no usable rotation signal.
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for rel in relative_transforms:
        E = np.eye(3) - rel.rotation
        A += E.T @ E
        b += E.T @ rel.translation
    degenerate = np.linalg.eigvalsh(A).max() < 1e-9
    j = np.linalg.solve(A + DAMPING * np.eye(3), b)
    residual = 0.0
    for rel in relative_transforms:
        E = np.eye(3) - rel.rotation
        residual += float(np.sum((rel.translation - E @ j) ** 2))
    return j, residual, degenerate


@dataclass
class CandidatePair:
    a: int
    b: int
    joint_ab: np.ndarray
    joint_ba: np.ndarray
    distance: float = 0.0       # raw score d_ab
    smoothed: float = 0.0       # EMA-smoothed score
    degenerate: bool = False


def joint_distance(joint_ab, joint_ba, relative_transforms,
                   lambda_pair=LAMBDA_PAIR):
    """Pair score: pivot-consistency residual plus two-sided disagreement."""
    d = 0.0
    for rel in relative_transforms:
        pred = joint_ab - rel.rotation @ joint_ab
        d += float(np.sum((rel.translation - pred) ** 2))
    d += lambda_pair * float(np.sum((joint_ab - joint_ba) ** 2))
    return d


def ema_update(smoothed, raw, momentum=EMA_MOMENTUM):
    return (1.0 - momentum) * smoothed + momentum * raw


def candidate_index_pairs(superpoint_positions, k_prime=K_PRIME):
    """Unordered pairs (a, b), a < b, where one is in the other's K'-NN."""
    m = len(superpoint_positions)
    k = min(k_prime, m - 1)
    nb = knn_assign(superpoint_positions, superpoint_positions, k + 1)
    pairs = set()
    for a in range(m):
        for b in nb[a]:
            if b != a:
                pairs.add((min(a, int(b)), max(a, int(b))))
    return sorted(pairs)


def evaluate_pair(a, b, motion: MotionSequence):
    """Build a CandidatePair with both one-sided joints and the raw score."""
    rel_ab = [relative_transform(s.transform(a), s.transform(b)) for s in motion]
    rel_ba = [relative_transform(s.transform(b), s.transform(a)) for s in motion]
    j_ab, _, degen_ab = solve_joint(rel_ab)
    j_ba, _, degen_ba = solve_joint(rel_ba)
    d = joint_distance(j_ab, j_ba, rel_ab)
    return CandidatePair(a, b, j_ab, j_ba, distance=d, smoothed=d,
                         degenerate=degen_ab and degen_ba)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def build_skeleton_edges(m, pairs):
    """Kruskal MST over candidate pairs with (score, a, b) tie-breaking."""
    uf = _UnionFind(m)
    edges = []
    for p in sorted(pairs, key=lambda p: (p.smoothed, p.a, p.b)):
        if uf.union(p.a, p.b):
            edges.append((p.a, p.b))
    if len(edges) != m - 1:
        comps = {}
        for i in range(m):
            comps.setdefault(uf.find(i), []).append(i)
        raise ValueError(
            "candidate graph is disconnected; components: "
            + "; ".join(str(c) for c in comps.values()))
    return edges


def _adjacency(m, edges):
    adj = [[] for _ in range(m)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    return adj


def _bfs_depths(adj, start):
    depth = [-1] * len(adj)
    depth[start] = 0
    queue = [start]
    for node in queue:
        for nxt in adj[node]:
            if depth[nxt] < 0:
                depth[nxt] = depth[node] + 1
                queue.append(nxt)
    return depth


def select_root(m, edges):
    """Tree center: node with minimum eccentricity, lowest index on ties."""
    adj = _adjacency(m, edges)
    best, best_ecc = 0, None
    for node in range(m):
        ecc = max(_bfs_depths(adj, node))
        if best_ecc is None or ecc < best_ecc:
            best, best_ecc = node, ecc
    return best


@dataclass
class SkeletonTree:
    """Rooted tree over superpoints; joints[k] is node k's pivot to its parent."""

    parents: np.ndarray            # (M,), parents[root] == root
    joints: np.ndarray             # (M, 3), row of the root is unused (zeros)
    root: int

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.joints = np.asarray(self.joints, dtype=float)
        if self.parents[self.root] != self.root:
            raise ValueError("root must be its own parent")
        order = self.topological_order()
        if len(order) != len(self.parents):
            raise ValueError("parent array does not form a single tree")

    def __len__(self):
        return len(self.parents)

    @property
    def edges(self):
        return [(k, int(self.parents[k])) for k in range(len(self.parents))
                if k != self.root]

    def children(self, node):
        return [k for k in range(len(self.parents))
                if self.parents[k] == node and k != self.root]

    def topological_order(self):
        """Root first, every parent before its children."""
        order = [self.root]
        seen = {self.root}
        adj = _adjacency(len(self.parents), self.edges)
        for node in order:
            for nxt in adj[node]:
                if nxt not in seen and self.parents[nxt] == node:
                    seen.add(nxt)
                    order.append(nxt)
        return order

    def ancestors(self, node):
        """Root-to-node chain of non-root nodes (whose joints are applied)."""
        chain = []
        while node != self.root:
            chain.append(node)
            node = int(self.parents[node])
        return list(reversed(chain))

    def to_dict(self):
        nodes = []
        for k in range(len(self.parents)):
            nodes.append({
                "index": k,
                "parent": int(self.parents[k]),
                "joint": [float(v) for v in self.joints[k]],
                "children": self.children(k),
            })
        return {"version": 1, "root": int(self.root), "nodes": nodes}

    @staticmethod
    def from_dict(doc):
        nodes = sorted(doc["nodes"], key=lambda n: n["index"])
        parents = np.array([n["parent"] for n in nodes])
        joints = np.array([n["joint"] for n in nodes])
        return SkeletonTree(parents, joints, int(doc["root"]))


def rooted_tree_from_edges(m, edges, root):
    parents = np.full(m, -1)
    parents[root] = root
    adj = _adjacency(m, edges)
    queue = [root]
    for node in queue:
        for nxt in adj[node]:
            if parents[nxt] < 0:
                parents[nxt] = node
                queue.append(nxt)
    if (parents < 0).any():
        raise ValueError("edge set does not span all nodes")
    return parents


def assign_joints(m, edges, root, pair_table):
    """Joint per non-root node: midpoint of the pair's two one-sided estimates."""
    parents = rooted_tree_from_edges(m, edges, root)
    joints = np.zeros((m, 3))
    for k in range(m):
        if k == root:
            continue
        key = (min(k, int(parents[k])), max(k, int(parents[k])))
        pair = pair_table[key]
        joints[k] = 0.5 * (pair.joint_ab + pair.joint_ba)
    return SkeletonTree(parents, joints, root)


def discover_skeleton(superpoint_positions, motion: MotionSequence,
                      k_prime=K_PRIME, pair_table=None):
    """Full pipeline: candidate pairs -> scores -> MST -> root -> joints.

    pair_table may carry EMA-smoothed scores from earlier iterations; freshly
    evaluated pairs fold into it.
    """
    pairs = {}
    for a, b in candidate_index_pairs(superpoint_positions, k_prime):
        pair = evaluate_pair(a, b, motion)
        if pair_table is not None and (a, b) in pair_table:
            pair.smoothed = ema_update(pair_table[(a, b)].smoothed, pair.distance)
        pairs[(a, b)] = pair
    m = len(superpoint_positions)
    edges = build_skeleton_edges(m, pairs.values())
    root = select_root(m, edges)
    tree = assign_joints(m, edges, root, pairs)
    return tree, pairs
