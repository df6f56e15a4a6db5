"""Relaxed K-D trees with pluggable split rules, plus generic information flows.

A tree over 2^d points is a full binary tree used as a computational graph,
not a search index.  Each internal node stores a division plane (unit normal
W and bias b); each leaf maps to one input point.  The split always produces
two equal halves: points are ordered by (projection, stable input index) and
the lower half goes left, which keeps the construction well-defined even when
projections collide (e.g. padded duplicate points).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .errors import DegenerateCloud, DimensionMismatch, NotPowerOfTwo
from .geometry import PointCloud
from .pca import choose_division_plane

_AXES = np.eye(3)


@dataclass(frozen=True)
class SplitRule:
    """Division-plane policy: axis-aligned (cycling by depth) or PCA-based."""

    kind: str  # "axis" or "pca"

    def __post_init__(self):
        if self.kind not in ("axis", "pca"):
            raise ValueError(f"unknown split rule {self.kind!r}")

    def normal(self, subcloud: PointCloud, layer: int) -> np.ndarray:
        if self.kind == "axis":
            return _AXES[layer % 3].copy()
        return choose_division_plane(subcloud)


AXIS_MEDIAN = SplitRule("axis")
PCA_MEDIAN = SplitRule("pca")


@dataclass(eq=False)
class Node:
    layer: int
    normal: Optional[np.ndarray] = None   # W_o, unit vector (internal nodes)
    bias: Optional[float] = None          # b_o
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    parent: Optional["Node"] = None
    point_index: Optional[int] = None     # p(o) (leaves)

    @property
    def is_leaf(self) -> bool:
        return self.point_index is not None

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, eq=False)
class KdTree:
    root: Node
    depth: int
    layers: List[List[Node]]   # layers[i] lists layer-i nodes left to right
    points: np.ndarray         # coordinates the tree was built on

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def leaves(self) -> List[Node]:
        return self.layers[self.depth]

    def leaf_order(self) -> np.ndarray:
        """Point index of each leaf, left to right."""
        return np.array([leaf.point_index for leaf in self.leaves], dtype=np.int64)

    def subtree_points(self, node: Node) -> frozenset:
        """Point indices reachable under ``node``."""
        if node.is_leaf:
            return frozenset((node.point_index,))
        return self.subtree_points(node.left) | self.subtree_points(node.right)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def build(cloud: PointCloud, rule: SplitRule) -> KdTree:
    """Recursive equal-split construction over 2^d points.

    At each node the rule picks the plane normal W, points are projected onto
    it, and the lower half under (projection, input index) order goes left.
    The stored bias is the midpoint of the two straddling projections (their
    shared value if equal, in which case the index order alone decides
    membership).  Deterministic for fixed input bits.
    """
    n = len(cloud)
    if not _is_pow2(n):
        raise NotPowerOfTwo(f"cloud has {n} points; pad to a power of two first")
    depth = n.bit_length() - 1
    points = cloud.points
    layers: List[List[Node]] = [[] for _ in range(depth + 1)]

    def arrange(indices: np.ndarray, layer: int) -> Node:
        if indices.size == 1:
            node = Node(layer=layer, point_index=int(indices[0]))
            layers[layer].append(node)
            return node
        sub = points[indices]
        if rule.kind == "pca" and np.all(sub == sub[0]):
            # Padding can create all-duplicate subsets with no principal
            # direction; any plane splits them, so fall back to the x axis
            # and let the index order decide.  A fully duplicate input cloud
            # still fails below through the rule itself.
            if indices.size < n:
                normal = _AXES[0].copy()
            else:
                normal = rule.normal(PointCloud(sub), layer)
        else:
            normal = rule.normal(PointCloud(sub), layer)
        proj = sub @ normal
        order = np.lexsort((indices, proj))
        half = indices.size // 2
        lo, hi = proj[order[half - 1]], proj[order[half]]
        node = Node(layer=layer, normal=normal, bias=float(0.5 * (lo + hi)))
        layers[layer].append(node)
        node.left = arrange(indices[order[:half]], layer + 1)
        node.right = arrange(indices[order[half:]], layer + 1)
        node.left.parent = node
        node.right.parent = node
        return node

    root = arrange(np.arange(n), 0)
    return KdTree(root=root, depth=depth, layers=layers, points=points)


def contains(tree: KdTree, node: Node, point: np.ndarray) -> bool:
    """True iff ``point`` satisfies every ancestor criterion on node's side.

    Left children hold W . p < b, right children W . p >= b.  Points that
    project exactly onto a division plane of a padded-duplicate split follow
    the geometric rule here, not the index tie-break used during build.
    """
    point = np.asarray(point, dtype=np.float64)
    child, parent = node, node.parent
    while parent is not None:
        side = float(parent.normal @ point) < parent.bias
        if side != (child is parent.left):
            return False
        child, parent = parent, parent.parent
    return True


@dataclass(frozen=True)
class InfoFlowResult:
    """Per-node vectors produced by a flow, plus per-layer dimensionalities."""

    values: Dict[Node, Any]
    layer_dims: List[Optional[int]]

    def __getitem__(self, node: Node) -> Any:
        return self.values[node]


def _dim_of(value: Any) -> Optional[int]:
    try:
        return len(value)
    except TypeError:
        return None


def _check_symmetric(merge: Callable, a: Any, b: Any, layer: int) -> None:
    try:
        forward, swapped = merge(a, b, layer), merge(b, a, layer)
        symmetric = bool(np.allclose(forward, swapped))
    except Exception:
        return  # values the probe cannot compare are the caller's business
    if not symmetric:
        raise AssertionError("merge must be symmetric in its child arguments")


def bottom_up(tree: KdTree, leaf_init: Callable[[np.ndarray], Any],
              merge: Callable[[Any, Any, int], Any]) -> InfoFlowResult:
    """Leaf-to-root flow: info(leaf) from its point, info(o) = merge of children.

    ``merge(left, right, layer)`` must be symmetric in the child arguments;
    a randomized probe asserts this on the first internal node in debug runs.
    """
    values: Dict[Node, Any] = {}
    layer_dims: List[Optional[int]] = [None] * (tree.depth + 1)
    for leaf in tree.leaves:
        values[leaf] = leaf_init(tree.points[leaf.point_index])
    if tree.leaves:
        layer_dims[tree.depth] = _dim_of(values[tree.leaves[0]])
    checked = not __debug__
    for layer in range(tree.depth - 1, -1, -1):
        for node in tree.layers[layer]:
            a, b = values[node.left], values[node.right]
            if not checked:
                _check_symmetric(merge, a, b, layer)
                checked = True
            values[node] = merge(a, b, layer)
        dims = {_dim_of(values[node]) for node in tree.layers[layer]}
        if len(dims) > 1:
            raise DimensionMismatch(f"layer {layer} produced mixed dims {dims}")
        layer_dims[layer] = dims.pop()
    return InfoFlowResult(values, layer_dims)


def top_down(tree: KdTree, self_info: Callable[[Node], Any],
             merge_carry: Callable[[Any, Any], Any]) -> InfoFlowResult:
    """Root-to-leaf flow: carry(root) = self(root), then
    carry(o) = merge_carry(self(o), carry(parent))."""
    values: Dict[Node, Any] = {tree.root: self_info(tree.root)}
    layer_dims: List[Optional[int]] = [None] * (tree.depth + 1)
    layer_dims[0] = _dim_of(values[tree.root])
    for layer in range(1, tree.depth + 1):
        for node in tree.layers[layer]:
            values[node] = merge_carry(self_info(node), values[node.parent])
        dims = {_dim_of(values[node]) for node in tree.layers[layer]}
        if len(dims) > 1:
            raise DimensionMismatch(f"layer {layer} produced mixed dims {dims}")
        layer_dims[layer] = dims.pop()
    return InfoFlowResult(values, layer_dims)


def dump(tree: KdTree) -> str:
    """Preorder text dump, one line per node, 17 significant digits."""
    lines: List[str] = []

    def fmt(x: float) -> str:
        return f"{x:.17g}"

    def rec(node: Node) -> None:
        if node.is_leaf:
            lines.append(f"L {node.layer} {node.point_index}")
        else:
            w = node.normal
            lines.append(f"N {node.layer} {fmt(w[0])} {fmt(w[1])} {fmt(w[2])} "
                         f"{fmt(node.bias)}")
            rec(node.left)
            rec(node.right)

    rec(tree.root)
    return "\n".join(lines) + "\n"


def node_partition(tree: KdTree, node: Node) -> Any:
    """Nested unordered partition of point indices rooted at ``node``.

    Two trees over the same points produce equal partitions iff they split
    the cloud identically at every node, regardless of which child is which.
    """
    if node.is_leaf:
        return frozenset((node.point_index,))

    def collect(x: Node) -> frozenset:
        return tree.subtree_points(x)

    return frozenset((
        (collect(node.left), node_partition(tree, node.left)),
        (collect(node.right), node_partition(tree, node.right)),
    ))


def same_partition(tree_a: KdTree, tree_b: KdTree) -> bool:
    """Unordered-children structural equality of two trees' leaf partitions."""
    if tree_a.depth != tree_b.depth or tree_a.n != tree_b.n:
        return False
    return node_partition(tree_a, tree_a.root) == node_partition(tree_b, tree_b.root)
