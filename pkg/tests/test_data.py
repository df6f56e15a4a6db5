import numpy as np
import pytest

from conftest import FIXTURES, random_cloud
from pointtree.data import (Record, S_SHAPE_8, ShapeSpec, generate,
                            make_classification_benchmark,
                            make_segmentation_benchmark, next_pow2,
                            pad_to_pow2, split)
from pointtree.errors import EmptySplit
from pointtree.formats import (format_xyz, ptc1_bytes, read_ptc1, read_xyz,
                               read_dataset_dir, write_dataset_dir, write_ptc1,
                               write_xyz)
from pointtree.geometry import PointCloud
from pointtree.pca import pca
from pointtree.sampler import TransformDistribution, transform_dataset


class TestGenerate:
    def test_s_shape_8_matches_committed_fixture(self):
        cloud = generate(ShapeSpec("s_shape", 8))
        fixture = read_xyz(FIXTURES / "s_shape8.xyz")
        np.testing.assert_array_equal(cloud.points, fixture.points)
        np.testing.assert_array_equal(cloud.points, S_SHAPE_8)

    def test_s_shape_generic_count_is_planar(self):
        cloud = generate(ShapeSpec("s_shape", 40))
        assert np.all(cloud.points[:, 2] == 0.0)

    def test_lollipop_has_two_part_labels(self):
        cloud = generate(ShapeSpec("lollipop", 64, seed=1))
        assert cloud.labels is not None
        assert set(cloud.labels.tolist()) == {0, 1}

    def test_deterministic_bytes(self):
        a = generate(ShapeSpec("random_uniform", 32, seed=7))
        b = generate(ShapeSpec("random_uniform", 32, seed=7))
        assert np.array_equal(a.points, b.points)

    def test_all_kinds_produce_valid_clouds(self):
        for kind in ("s_shape", "sphere_shell", "cube_faces", "lollipop",
                     "two_cluster", "random_uniform"):
            cloud = generate(ShapeSpec(kind, 50, noise=0.01, seed=3))
            assert len(cloud) == 50
            assert np.all(np.isfinite(cloud.points))

    def test_unique_principal_axes_at_zero_noise(self):
        # Every generator except the sphere shell (kept as a degenerate
        # stressor) has well-separated covariance spectrum.
        for kind in ("cube_faces", "lollipop", "two_cluster"):
            cloud = generate(ShapeSpec(kind, 256, seed=2))
            s = pca(cloud).singular_values
            assert s[0] - s[1] > 0.02 * s[0], kind
            assert s[1] - s[2] > 0.02 * s[0], kind

    def test_rejects_bad_specs(self):
        with pytest.raises(ValueError):
            ShapeSpec("torus", 8)
        with pytest.raises(ValueError):
            ShapeSpec("s_shape", 0)
        with pytest.raises(ValueError):
            ShapeSpec("s_shape", 8, noise=-1.0)


class TestPadToPow2:
    def test_power_of_two_unchanged(self):
        cloud = random_cloud(8, seed=1)
        assert pad_to_pow2(cloud, seed=0) is cloud

    def test_pads_and_flags(self):
        cloud = random_cloud(5, seed=2)
        padded = pad_to_pow2(cloud, seed=0)
        assert len(padded) == 8
        assert padded.duplicated.sum() == 3
        assert not padded.duplicated[:5].any()

    def test_duplicates_come_from_original_points(self):
        cloud = PointCloud(make_rng_points(11, 5), labels=np.arange(5))
        padded = pad_to_pow2(cloud, seed=4)
        originals = {tuple(p) for p in cloud.points}
        for i in range(5, 8):
            assert tuple(padded.points[i]) in originals
            src = np.flatnonzero(np.all(cloud.points == padded.points[i], axis=1))[0]
            assert padded.labels[i] == cloud.labels[src]

    def test_next_pow2(self):
        assert [next_pow2(n) for n in (1, 2, 3, 5, 8, 9)] == [1, 2, 4, 8, 8, 16]


def make_rng_points(seed, n):
    from pointtree.rng import make_rng
    return make_rng(seed).uniform(-1, 1, (n, 3))


class TestSplit:
    def _records(self, per_class=10, classes=3):
        return [Record(random_cloud(8, seed=100 * c + i), label=c)
                for c in range(classes) for i in range(per_class)]

    def test_all_in_train(self):
        records = self._records()
        s = split(records, (1.0, 0.0, 0.0), seed=0)
        assert len(s.train) == len(records)
        assert not s.val and not s.test

    def test_stratified_counts(self):
        records = self._records(per_class=10)
        s = split(records, (0.6, 0.2, 0.2), seed=1)
        for bucket, frac in ((s.train, 0.6), (s.val, 0.2), (s.test, 0.2)):
            for c in range(3):
                got = sum(1 for r in bucket if r.label == c)
                assert abs(got - frac * 10) <= 1

    def test_same_seed_same_split(self):
        records = self._records()
        a = split(records, (0.5, 0.25, 0.25), seed=5)
        b = split(records, (0.5, 0.25, 0.25), seed=5)
        for xa, xb in zip(a.train + a.val + a.test, b.train + b.val + b.test):
            assert xa is xb

    def test_disjoint_and_complete(self):
        records = self._records()
        s = split(records, (0.5, 0.3, 0.2), seed=2)
        ids = [id(r) for r in s.train + s.val + s.test]
        assert len(ids) == len(records)
        assert len(set(ids)) == len(records)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split(self._records(), (0.5, 0.2, 0.2), seed=0)

    def test_empty_split_raises(self):
        records = self._records(per_class=1, classes=1)
        with pytest.raises(EmptySplit):
            split(records, (0.0, 0.5, 0.5), seed=0)


class TestFormats:
    def test_xyz_round_trip_lossless(self, tmp_path):
        cloud = PointCloud(make_rng_points(3, 20), labels=np.arange(20) % 4)
        path = tmp_path / "cloud.xyz"
        write_xyz(cloud, path)
        back = read_xyz(path)
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.labels, cloud.labels)

    def test_xyz_comments_and_errors(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("# heading\n1 2 3\n# mid comment\n4 5 6 2\n")
        with pytest.raises(ValueError):
            read_xyz(path)  # label column on only some lines
        path.write_text("1 2 3\n4 5\n")
        with pytest.raises(ValueError):
            read_xyz(path)

    def test_ptc1_round_trip_is_f32_exact(self, tmp_path):
        cloud = PointCloud(make_rng_points(4, 33), labels=np.arange(33) % 5)
        path = tmp_path / "cloud.ptc1"
        write_ptc1(cloud, path)
        back = read_ptc1(path)
        np.testing.assert_array_equal(
            back.points, cloud.points.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(back.labels, cloud.labels)
        again = tmp_path / "again.ptc1"
        write_ptc1(back, again)
        assert again.read_bytes() == path.read_bytes()

    def test_ptc1_layout(self):
        cloud = PointCloud([(1.0, 2.0, 3.0)])
        blob = ptc1_bytes(cloud)
        assert blob[:4] == b"PTC1"
        assert blob[4:8] == (1).to_bytes(4, "little")
        assert blob[8] == 0
        assert len(blob) == 9 + 12

    def test_ptc1_label_range_check(self):
        cloud = PointCloud(np.zeros((1, 3)), labels=np.array([70000]))
        with pytest.raises(ValueError):
            ptc1_bytes(cloud)

    def test_dataset_dir_round_trip(self, tmp_path):
        records = make_classification_benchmark(per_class=3, n_points=16, seed=1)
        out = transform_dataset(records, TransformDistribution("affine"), 1, seed=2)
        write_dataset_dir(out, tmp_path / "ds")
        back = read_dataset_dir(tmp_path / "ds")
        assert len(back) == len(out)
        for a, b in zip(out, back):
            assert a.label == b.label
            assert b.provenance["transform_kind"] == "affine"
            assert b.provenance["seed_path"] == a.provenance["seed_path"]
            np.testing.assert_array_equal(
                b.cloud.points,
                a.cloud.points.astype(np.float32).astype(np.float64))


class TestBenchmarks:
    def test_classification_benchmark_shape(self):
        records = make_classification_benchmark(per_class=4, n_points=32, seed=0)
        assert len(records) == 12
        assert sorted({r.label for r in records}) == [0, 1, 2]
        assert all(len(r.cloud) == 32 for r in records)

    def test_segmentation_benchmark_has_labels(self):
        records = make_segmentation_benchmark(count=5, n_points=32, seed=0)
        assert len(records) == 5
        assert all(r.cloud.labels is not None for r in records)
