import numpy as np
import pytest

from conftest import FIXTURES, random_cloud, rotation_xyz
from pointtree.data import pad_to_pow2
from pointtree.errors import (DegenerateCloud, DimensionMismatch,
                              NotPowerOfTwo)
from pointtree.formats import read_xyz
from pointtree.geometry import AffineTransform, PointCloud, apply
from pointtree.kdtree import (AXIS_MEDIAN, PCA_MEDIAN, SplitRule, bottom_up,
                              build, contains, dump, node_partition,
                              same_partition, top_down)
from pointtree.rng import make_rng
from pointtree.sampler import sample_similarity


def oracle_partition(points, indices):
    """Equal-split construction redone from scratch with numpy's SVD."""
    indices = np.asarray(indices)
    if indices.size == 1:
        return frozenset((int(indices[0]),))
    sub = points[indices]
    centered = sub - sub.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = sub @ vt[0]
    order = np.lexsort((indices, proj))
    half = indices.size // 2
    left, right = indices[order[:half]], indices[order[half:]]
    return frozenset((
        (frozenset(int(i) for i in left), oracle_partition(points, left)),
        (frozenset(int(i) for i in right), oracle_partition(points, right)),
    ))


def built_partition(tree):
    return node_partition(tree, tree.root)


class TestBuild:
    def test_two_points(self):
        cloud = PointCloud([(0.0, 0, 0), (1.0, 0, 0)])
        tree = build(cloud, PCA_MEDIAN)
        assert tree.depth == 1
        left, right = tree.root.left, tree.root.right
        w, b = tree.root.normal, tree.root.bias
        assert float(w @ cloud.points[left.point_index]) < b
        assert float(w @ cloud.points[right.point_index]) >= b

    def test_four_collinear_axis_median(self):
        cloud = PointCloud([(0.0, 0, 0), (1.0, 0, 0), (2.0, 0, 0), (3.0, 0, 0)])
        tree = build(cloud, AXIS_MEDIAN)
        assert tree.subtree_points(tree.root.left) == frozenset({0, 1})
        assert tree.subtree_points(tree.root.right) == frozenset({2, 3})
        assert {leaf.point_index for leaf in tree.leaves} == {0, 1, 2, 3}

    def test_golden_dump_matches_fixture(self):
        cloud = read_xyz(FIXTURES / "collinear4.xyz")
        tree = build(cloud, AXIS_MEDIAN)
        expected = (FIXTURES / "collinear4_axis_tree.txt").read_text()
        assert dump(tree) == expected

    def test_matches_oracle_on_s_shape(self):
        cloud = read_xyz(FIXTURES / "s_shape8.xyz")
        tree = build(cloud, PCA_MEDIAN)
        assert built_partition(tree) == oracle_partition(cloud.points,
                                                         np.arange(8))

    def test_matches_oracle_on_random_clouds(self):
        for seed in range(5):
            cloud = random_cloud(32, seed=100 + seed)
            tree = build(cloud, PCA_MEDIAN)
            assert built_partition(tree) == oracle_partition(cloud.points,
                                                             np.arange(32))

    def test_not_power_of_two(self):
        with pytest.raises(NotPowerOfTwo):
            build(random_cloud(6, seed=0), PCA_MEDIAN)

    def test_single_point_tree(self):
        tree = build(PointCloud([(1.0, 2.0, 3.0)]), PCA_MEDIAN)
        assert tree.depth == 0
        assert tree.root.is_leaf and tree.root.point_index == 0

    def test_balance_every_split(self):
        tree = build(random_cloud(64, seed=5), PCA_MEDIAN)
        for layer_nodes in tree.layers[:-1]:
            for node in layer_nodes:
                left = tree.subtree_points(node.left)
                right = tree.subtree_points(node.right)
                assert len(left) == len(right)
                assert not left & right

    def test_balance_under_padded_duplicates(self):
        cloud = pad_to_pow2(random_cloud(5, seed=6), seed=0)
        tree = build(cloud, PCA_MEDIAN)
        assert tree.n == 8
        assert sorted(leaf.point_index for leaf in tree.leaves) == list(range(8))
        for layer_index, layer_nodes in enumerate(tree.layers):
            for node in layer_nodes:
                assert len(tree.subtree_points(node)) == 2 ** (tree.depth - layer_index)

    def test_fully_degenerate_cloud_raises(self):
        with pytest.raises(DegenerateCloud):
            build(PointCloud(np.ones((4, 3))), PCA_MEDIAN)

    def test_leaf_map_is_bijection(self):
        tree = build(random_cloud(128, seed=8), PCA_MEDIAN)
        order = tree.leaf_order()
        assert sorted(order.tolist()) == list(range(128))

    def test_unknown_rule_rejected(self):
        with pytest.raises(ValueError):
            SplitRule("median-of-medians")

    def test_deterministic(self):
        cloud = random_cloud(64, seed=9)
        assert dump(build(cloud, PCA_MEDIAN)) == dump(build(cloud, PCA_MEDIAN))


class TestInvariance:
    def test_similarity_invariance_pca_rule(self):
        cloud = random_cloud(64, seed=11)
        tree = build(cloud, PCA_MEDIAN)
        for i in range(10):
            sigma = sample_similarity(make_rng(80, i))
            assert same_partition(tree, build(apply(sigma, cloud), PCA_MEDIAN))

    def test_reflection_keeps_partition_up_to_child_swap(self):
        cloud = random_cloud(64, seed=12)
        tree = build(cloud, PCA_MEDIAN)
        mirror = AffineTransform(np.diag([-1.0, 1.0, 1.0]))
        assert same_partition(tree, build(apply(mirror, cloud), PCA_MEDIAN))

    def test_axis_rule_not_rotation_invariant(self):
        cloud = read_xyz(FIXTURES / "axis_witness.xyz")
        rot = AffineTransform(rotation_xyz(0.0, 0.0, 0.7))
        axis_a = build(cloud, AXIS_MEDIAN)
        axis_b = build(apply(rot, cloud), AXIS_MEDIAN)
        assert not same_partition(axis_a, axis_b)
        pca_a = build(cloud, PCA_MEDIAN)
        pca_b = build(apply(rot, cloud), PCA_MEDIAN)
        assert same_partition(pca_a, pca_b)


class TestContains:
    def test_root_contains_everything(self):
        tree = build(random_cloud(16, seed=13), PCA_MEDIAN)
        probe = make_rng(1).normal(size=3) * 100.0
        assert contains(tree, tree.root, probe)

    def test_leaf_contains_its_own_point(self):
        tree = build(random_cloud(32, seed=14), PCA_MEDIAN)
        for leaf in tree.leaves:
            assert contains(tree, leaf, tree.points[leaf.point_index])

    def test_agrees_with_direct_inequality_walk(self):
        tree = build(random_cloud(32, seed=13), PCA_MEDIAN)
        probes = make_rng(2).uniform(-1.5, 1.5, size=(20, 3))

        def path_to_root(node):
            chain = []
            while node.parent is not None:
                chain.append((node.parent, node is node.parent.left))
                node = node.parent
            return chain

        for layer_nodes in tree.layers:
            for node in layer_nodes:
                for probe in probes:
                    expected = all(
                        (float(anc.normal @ probe) < anc.bias) == is_left
                        for anc, is_left in path_to_root(node))
                    assert contains(tree, node, probe) == expected

    def test_locality(self):
        tree = build(random_cloud(64, seed=15), PCA_MEDIAN)
        for layer_nodes in tree.layers:
            for node in layer_nodes:
                members = tree.subtree_points(node)
                for i in range(tree.n):
                    assert (i in members) == contains(tree, node, tree.points[i])


class TestBottomUp:
    def test_counting_flow(self):
        tree = build(random_cloud(32, seed=16), PCA_MEDIAN)
        flow = bottom_up(tree, leaf_init=lambda p: 1, merge=lambda a, b, i: a + b)
        for layer_index, layer_nodes in enumerate(tree.layers):
            for node in layer_nodes:
                assert flow[node] == 2 ** (tree.depth - layer_index)

    def test_componentwise_max_flow(self):
        tree = build(random_cloud(16, seed=17), PCA_MEDIAN)
        rng = make_rng(3)
        leaf_vectors = {i: rng.normal(size=5) for i in range(16)}
        flow = bottom_up(
            tree,
            leaf_init=lambda p: leaf_vectors[_index_of(tree, p)],
            merge=lambda a, b, i: np.maximum(a, b))
        expected = np.max(np.stack(list(leaf_vectors.values())), axis=0)
        np.testing.assert_array_equal(flow[tree.root], expected)

    def test_random_linear_max_matches_recursive_oracle(self):
        tree = build(random_cloud(8, seed=18), PCA_MEDIAN)
        rng = make_rng(4)
        weights = [rng.normal(size=(4, 4)) for _ in range(tree.depth)]
        leaf_vecs = {i: rng.normal(size=4) for i in range(8)}

        def merge(a, b, layer):
            w = weights[layer]
            return np.maximum(w @ a, w @ b)

        flow = bottom_up(tree, lambda p: leaf_vecs[_index_of(tree, p)], merge)

        def oracle(node):
            if node.is_leaf:
                return leaf_vecs[node.point_index]
            w = weights[node.layer]
            return np.maximum(w @ oracle(node.left), w @ oracle(node.right))

        np.testing.assert_allclose(flow[tree.root], oracle(tree.root), atol=1e-12)
        assert flow.layer_dims == [4] * (tree.depth + 1)

    def test_asymmetric_merge_rejected_in_debug(self):
        tree = build(random_cloud(4, seed=19), PCA_MEDIAN)
        with pytest.raises(AssertionError):
            bottom_up(tree, lambda p: p.copy(), lambda a, b, i: a - b)

    def test_mixed_dims_raise(self):
        tree = build(random_cloud(4, seed=20), PCA_MEDIAN)
        counter = iter(range(100))

        def bad_merge(a, b, i):
            return np.zeros(2 + next(counter) % 2)

        with pytest.raises(DimensionMismatch):
            bottom_up(tree, lambda p: np.zeros(3), bad_merge)


class TestTopDown:
    def test_ancestor_counting(self):
        tree = build(random_cloud(32, seed=21), PCA_MEDIAN)
        flow = top_down(tree, self_info=lambda o: 1, merge_carry=lambda s, c: s + c)
        for layer_index, layer_nodes in enumerate(tree.layers):
            for node in layer_nodes:
                assert flow[node] == layer_index + 1

    def test_pass_through_carry(self):
        tree = build(random_cloud(16, seed=22), PCA_MEDIAN)
        rng = make_rng(5)
        self_vals = {id(n): rng.normal(size=3)
                     for layer_nodes in tree.layers for n in layer_nodes}
        flow = top_down(tree, lambda o: self_vals[id(o)], lambda s, c: c)
        for layer_nodes in tree.layers:
            for node in layer_nodes:
                np.testing.assert_array_equal(flow[node], self_vals[id(tree.root)])

    def test_matches_path_walk_oracle(self):
        tree = build(random_cloud(8, seed=23), PCA_MEDIAN)
        rng = make_rng(6)
        self_vals = {id(n): rng.normal(size=3)
                     for layer_nodes in tree.layers for n in layer_nodes}

        def merge_carry(s, c):
            return np.tanh(s + 0.5 * c)

        flow = top_down(tree, lambda o: self_vals[id(o)], merge_carry)

        def oracle(node):
            if node.parent is None:
                return self_vals[id(node)]
            return merge_carry(self_vals[id(node)], oracle(node.parent))

        for leaf in tree.leaves:
            np.testing.assert_allclose(flow[leaf], oracle(leaf), atol=1e-12)


def _index_of(tree, point) -> int:
    matches = np.flatnonzero(np.all(tree.points == point, axis=1))
    return int(matches[0])
