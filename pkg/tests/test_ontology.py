"""Taxonomy, affinity, and spectral-partition behavior."""

import math

import numpy as np
import pytest

from expertmix.errors import (
    InvalidArgumentError,
    InvalidDatasetError,
    InvariantError,
    ParseError,
    UnknownClassError,
)
from expertmix.ontology import (
    AffinityMatrix,
    KernelConfig,
    TaxonomyTree,
    build_semantic_matrix,
    build_two_layer_ontology,
    class_kernel_matrix,
    self_affinity_cap,
    semantic_affinity,
    spectral_partition,
    visual_affinity_matrix,
)


def star_tree(n_leaves=3):
    """Root plus n direct leaf children; every root->leaf path has 2 nodes."""
    records = [(0, None, "root")]
    records += [(i + 1, 0, f"leaf{i}") for i in range(n_leaves)]
    return TaxonomyTree.from_records(records)


def two_level_tree(n_categories, per_category):
    records = [(0, None, "root")]
    for c in range(n_categories):
        records.append((1 + c, 0, f"cat{c}"))
    nid = 1 + n_categories
    for c in range(n_categories):
        for _ in range(per_category):
            records.append((nid, 1 + c, f"leaf{nid}"))
            nid += 1
    return TaxonomyTree.from_records(records)


def random_tree(rng, n_nodes):
    """Random rooted tree: each node's parent drawn among earlier nodes."""
    records = [(0, None, "root")]
    for i in range(1, n_nodes):
        records.append((i, int(rng.integers(0, i)), f"n{i}"))
    return TaxonomyTree.from_records(records)


class TestTaxonomyTree:
    def test_star_tree_structure(self):
        tree = star_tree(3)
        assert tree.n_classes == 3
        assert tree.depth_max == 2
        assert tree.hop_count(0, 1) == 3  # leaf, root, leaf
        assert tree.hop_count(0, 0) == 1

    def test_two_roots_rejected(self):
        with pytest.raises(InvariantError):
            TaxonomyTree.from_records([(0, None, "a"), (1, None, "b")])

    def test_cycle_rejected(self):
        with pytest.raises(InvariantError):
            TaxonomyTree.from_records([(0, None, "r"), (1, 2, "a"), (2, 1, "b")])

    def test_unknown_parent_rejected(self):
        with pytest.raises(InvariantError):
            TaxonomyTree.from_records([(0, None, "r"), (1, 7, "a")])

    def test_duplicate_id_rejected(self):
        with pytest.raises(InvariantError):
            TaxonomyTree.from_records([(0, None, "r"), (1, 0, "a"), (1, 0, "b")])

    def test_unknown_class_lookup(self):
        tree = star_tree(3)
        with pytest.raises(UnknownClassError):
            tree.leaf_of_class(17)

    def test_tsv_round_trip(self, tmp_path):
        tree = two_level_tree(2, 3)
        path = tmp_path / "tax.tsv"
        tree.to_tsv(path)
        loaded = TaxonomyTree.from_tsv(path)
        assert loaded.leaves == tree.leaves
        assert loaded.depth_max == tree.depth_max
        assert [(n.id, n.parent, n.label) for n in loaded.nodes] == [
            (n.id, n.parent, n.label) for n in tree.nodes
        ]

    def test_tsv_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("0\t-\troot\n1\t0\n", encoding="utf-8")
        with pytest.raises(ParseError) as err:
            TaxonomyTree.from_tsv(path)
        assert err.value.line == 2

    def test_empty_tsv(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ParseError):
            TaxonomyTree.from_tsv(path)


class TestSemanticAffinity:
    def test_full_depth_path_scores_zero(self):
        # chain: root - mid - leaf0, root - mid2 - leaf1 gives D = 2H - 1;
        # build instead a custom distance returning exactly 2H
        tree = star_tree(2)
        assert semantic_affinity(tree, 0, 1, distance_fn=lambda t, i, j: 2 * t.depth_max) == 0.0

    def test_half_depth_path_scores_ln2(self):
        tree = star_tree(2)
        value = semantic_affinity(tree, 0, 1, distance_fn=lambda t, i, j: t.depth_max)
        assert value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_star_siblings(self):
        # hand count: leaf -> root -> leaf travels 3 nodes, H = 2
        tree = star_tree(3)
        assert semantic_affinity(tree, 0, 1) == pytest.approx(-math.log(3.0 / 4.0), abs=1e-12)

    def test_diagonal_equals_cap(self):
        tree = star_tree(3)
        assert semantic_affinity(tree, 1, 1) == pytest.approx(self_affinity_cap(tree), abs=1e-15)

    def test_symmetry_exhaustive_small_trees(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            tree = random_tree(rng, int(rng.integers(3, 12)))
            n = tree.n_classes
            if n > 8:
                continue
            for i in range(n):
                for j in range(n):
                    assert semantic_affinity(tree, i, j) == semantic_affinity(tree, j, i)

    def test_strictly_decreasing_in_distance(self):
        tree = star_tree(2)
        values = [semantic_affinity(tree, 0, 1, distance_fn=lambda t, i, j, d=d: d)
                  for d in range(1, 2 * tree.depth_max)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_unknown_class(self):
        tree = star_tree(3)
        with pytest.raises(UnknownClassError):
            semantic_affinity(tree, 0, 99)


class TestSemanticMatrix:
    def test_two_leaves_symmetric(self):
        aff = build_semantic_matrix(star_tree(2))
        assert aff.values[0, 1] == aff.values[1, 0]

    def test_star_off_diagonals(self):
        aff = build_semantic_matrix(star_tree(3))
        expected = -math.log(3.0 / 4.0)
        off = aff.values[~np.eye(3, dtype=bool)]
        assert np.allclose(off, expected, atol=1e-12)

    def test_matches_pairwise_oracle(self):
        tree = two_level_tree(2, 3)
        aff = build_semantic_matrix(tree)
        for i in range(tree.n_classes):
            for j in range(tree.n_classes):
                if i == j:
                    assert aff.values[i, j] == pytest.approx(self_affinity_cap(tree))
                else:
                    assert aff.values[i, j] == pytest.approx(semantic_affinity(tree, i, j))

    def test_transpose_equality(self):
        rng = np.random.default_rng(3)
        tree = random_tree(rng, 15)
        aff = build_semantic_matrix(tree)
        assert np.array_equal(aff.values, aff.values.T)

    def test_single_class_rejected(self):
        with pytest.raises(InvalidArgumentError):
            build_semantic_matrix(TaxonomyTree.from_records([(0, None, "r"), (1, 0, "only")]))


def block_affinity(sizes, within=1.0, across=0.0):
    n = sum(sizes)
    values = np.full((n, n), across)
    start = 0
    for size in sizes:
        values[start:start + size, start:start + size] = within
        start += size
    return AffinityMatrix(values, kind="visual")


class TestSpectralPartition:
    def test_k1_all_together(self):
        aff = block_affinity([3, 3])
        assert np.array_equal(spectral_partition(aff, 1, seed=0), np.zeros(6, dtype=int))

    def test_kn_singletons(self):
        aff = block_affinity([2, 2])
        assert np.array_equal(spectral_partition(aff, 4, seed=0), np.arange(4))

    def test_recovers_two_blocks(self):
        aff = block_affinity([3, 3])
        labels = spectral_partition(aff, 2, seed=0)
        assert np.array_equal(labels, [0, 0, 0, 1, 1, 1])

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        raw = rng.uniform(0, 1, (7, 7))
        aff = AffinityMatrix((raw + raw.T) / 2, kind="visual")
        a = spectral_partition(aff, 3, seed=5)
        b = spectral_partition(aff, 3, seed=5)
        assert np.array_equal(a, b)

    def test_every_category_nonempty(self):
        rng = np.random.default_rng(2)
        raw = rng.uniform(0, 1, (9, 9))
        aff = AffinityMatrix((raw + raw.T) / 2, kind="visual")
        for k in range(1, 10):
            labels = spectral_partition(aff, k, seed=1)
            assert len(set(labels.tolist())) == k

    def test_k_out_of_range(self):
        aff = block_affinity([2, 2])
        with pytest.raises(InvalidArgumentError):
            spectral_partition(aff, 5, seed=0)
        with pytest.raises(InvalidArgumentError):
            spectral_partition(aff, 0, seed=0)

    def test_asymmetric_input_rejected(self):
        aff = block_affinity([2, 2])
        aff.values[0, 1] = 0.5  # break symmetry behind validate's back
        with pytest.raises(InvariantError):
            spectral_partition(aff, 2, seed=0)


class TestTwoLayerOntology:
    def test_k1_identity_order(self):
        aff = block_affinity([2, 2])
        onto = build_two_layer_ontology(aff, 1, seed=0)
        assert onto.leaf_order == [0, 1, 2, 3]

    def test_blocks_contiguous(self):
        onto = build_two_layer_ontology(block_affinity([3, 3]), 2, seed=0)
        assert onto.categories == [[0, 1, 2], [3, 4, 5]]
        assert onto.leaf_order == [0, 1, 2, 3, 4, 5]

    def test_leaf_order_is_permutation(self):
        rng = np.random.default_rng(4)
        raw = rng.uniform(0, 1, (8, 8))
        aff = AffinityMatrix((raw + raw.T) / 2, kind="visual")
        for k in (2, 3, 5):
            onto = build_two_layer_ontology(aff, k, seed=9)
            assert sorted(onto.leaf_order) == list(range(8))
            onto.validate()

    def test_json_round_trip(self, tmp_path):
        onto = build_two_layer_ontology(block_affinity([3, 3]), 2, seed=0)
        path = tmp_path / "onto.json"
        onto.save(path)
        from expertmix.ontology import TwoLayerOntology

        loaded = TwoLayerOntology.load(path)
        assert loaded.categories == onto.categories
        assert loaded.leaf_order == onto.leaf_order


class TestVisualAffinity:
    def test_identical_feature_sets_match_diagonal(self):
        rng = np.random.default_rng(0)
        shared = rng.normal(0, 1, (4, 3))
        sim = class_kernel_matrix([shared, shared.copy()], KernelConfig(bandwidth=1.0))
        assert sim[0, 1] == pytest.approx(sim[0, 0], abs=1e-15)

    def test_coincident_single_vectors(self):
        x = np.array([[1.0, 2.0]])
        sim = class_kernel_matrix([x, x.copy()], KernelConfig(bandwidth=2.0))
        assert np.allclose(sim, 1.0)

    def test_two_class_hand_computed(self):
        # class A at {0, 0}, class B at {1, 1}, 1-D, bandwidth 1:
        # every cross pair has distance 1 -> mean kernel = exp(-1/2)
        a = np.array([[0.0], [0.0]])
        b = np.array([[1.0], [1.0]])
        sim = class_kernel_matrix([a, b], KernelConfig(bandwidth=1.0))
        assert sim[0, 1] == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_symmetric_and_order_invariant(self):
        rng = np.random.default_rng(5)
        feats = [rng.normal(0, 1, (5, 4)), rng.normal(0, 1, (6, 4)), rng.normal(0, 1, (4, 4))]
        sim = class_kernel_matrix(feats)
        shuffled = [f[rng.permutation(f.shape[0])] for f in feats]
        sim2 = class_kernel_matrix(shuffled)
        assert np.array_equal(sim, sim.T)
        assert np.array_equal(sim, sim2)

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(6)
        feats = [rng.normal(0, 2, (4, 3)) for _ in range(5)]
        sim = class_kernel_matrix(feats)
        assert np.all(sim > 0.0) and np.all(sim <= 1.0)

    def test_empty_class_rejected(self):
        with pytest.raises(InvalidDatasetError):
            class_kernel_matrix([np.zeros((0, 2)), np.zeros((3, 2))])

    def test_dataset_wrapper(self):
        from expertmix.dataset import SynthSpec, generate_synthetic

        dataset, _ = generate_synthetic(SynthSpec(2, 2, 3, 6, seed=1))
        aff = visual_affinity_matrix(dataset)
        assert aff.kind == "visual"
        assert aff.n == 4
        aff.validate()

    def test_csv_round_trip(self, tmp_path):
        aff = block_affinity([2, 3], within=0.8, across=0.1)
        path = tmp_path / "aff.csv"
        aff.to_csv(path)
        loaded = AffinityMatrix.from_csv(path, kind="visual")
        assert np.array_equal(loaded.values, aff.values)
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "0,1,2,3,4"
