from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taro.taxonomy import (
    CycleError,
    DuplicateNodeError,
    EmptyTaxonomyError,
    MultipleParentsError,
    TaxonomyError,
    TaxonomyForest,
    ancestors,
    load_taxonomy,
    multi_hot_target,
    parse_taxonomy,
    serialize_taxonomy,
    validate,
)


@pytest.fixture(scope="module")
def coco():
    return load_taxonomy(resources.files("taro") / "data" / "taxonomy_coco.txt")


def _brute_ancestors(forest, node):
    """Transitive closure of the edge relation, computed by fixed-point iteration."""
    closure = set(forest.edges)
    while True:
        extra = {(a, d) for a, b in closure for c, d in closure if b == c} - closure
        if not extra:
            break
        closure |= extra
    return {a for a, b in closure if b == node}


class TestParse:
    def test_single_edge(self):
        f = parse_taxonomy("Vehicles -> Car")
        assert [f.name(i) for i in f.roots] == ["Vehicles"]
        assert [f.name(i) for i in f.leaves] == ["Car"]
        assert [f.name(i) for i in f.nonleaves] == ["Vehicles"]

    def test_two_parents(self):
        with pytest.raises(MultipleParentsError):
            parse_taxonomy("A -> B\nC -> B\n")

    def test_cycle(self):
        with pytest.raises(CycleError):
            parse_taxonomy("A -> B\nB -> A\n")
        with pytest.raises(CycleError):
            parse_taxonomy("A -> A\n")

    def test_empty(self):
        with pytest.raises(EmptyTaxonomyError):
            parse_taxonomy("# only a comment\n\n")

    def test_duplicate_names(self):
        with pytest.raises(DuplicateNodeError):
            parse_taxonomy("Solo\nSolo\n")
        with pytest.raises(DuplicateNodeError):
            parse_taxonomy("A -> B\nB\n")
        with pytest.raises(DuplicateNodeError):
            parse_taxonomy("A -> B\nA -> B\n")

    def test_malformed_edge(self):
        with pytest.raises(TaxonomyError):
            parse_taxonomy("A -> \n")

    def test_comments_and_isolated(self):
        f = parse_taxonomy("# header\nA -> B\n\nLonely\n")
        lonely = f.id("Lonely")
        assert f.is_leaf(lonely) and lonely in f.roots

    def test_coco_sample_has_80_leaves(self, coco):
        assert len(coco.leaves) == 80

    def test_leaf_block_contiguous(self, coco):
        assert coco.leaves == list(range(coco.n_nonleaf, len(coco)))
        for i in coco.leaves:
            assert not coco.children(i)
        for i in coco.nonleaves:
            assert coco.children(i)

    def test_ids_ordered_by_depth_then_name(self, coco):
        for block in (coco.nonleaves, coco.leaves):
            keys = [(coco.nodes[i].depth, coco.nodes[i].name) for i in block]
            assert keys == sorted(keys)

    def test_id_assignment_independent_of_line_order(self):
        a = parse_taxonomy("R -> X\nR -> A\nA -> L2\nA -> L1\n")
        b = parse_taxonomy("A -> L1\nR -> A\nA -> L2\nR -> X\n")
        assert a == b
        assert a.names == b.names


class TestAncestors:
    def test_root_is_empty(self, coco):
        assert ancestors(coco, coco.id("Vehicles")) == []

    def test_car(self, coco):
        car = coco.id("Car")
        assert [coco.name(a) for a in ancestors(coco, car)] == ["Land Vehicle", "Vehicles"]
        assert set(ancestors(coco, car)) == _brute_ancestors(coco, car)

    def test_matches_transitive_closure_everywhere(self, coco):
        for node in coco.nodes:
            assert set(ancestors(coco, node.id)) == _brute_ancestors(coco, node.id)

    @pytest.mark.parametrize("depth", [0, 1, 3, 6])
    def test_chain(self, depth):
        names = [f"n{i}" for i in range(depth + 1)]
        text = "\n".join(f"{a} -> {b}" for a, b in zip(names, names[1:])) or "n0"
        f = parse_taxonomy(text)
        assert len(ancestors(f, f.id(names[-1]))) == depth

    def test_unknown_node(self, coco):
        with pytest.raises(TaxonomyError):
            ancestors(coco, 10_000)


class TestMultiHot:
    def test_single_node(self):
        f = parse_taxonomy("Only")
        np.testing.assert_array_equal(multi_hot_target(f, 0), [1.0])

    def test_car(self, coco):
        t = multi_hot_target(coco, coco.id("Car"))
        expected = {coco.id(n) for n in ("Car", "Land Vehicle", "Vehicles")}
        assert set(np.flatnonzero(t)) == expected

    def test_siblings_share_nonleaf_support(self, coco):
        a = multi_hot_target(coco, coco.id("Car"))
        b = multi_hot_target(coco, coco.id("Bus"))
        np.testing.assert_array_equal(a[: coco.n_nonleaf], b[: coco.n_nonleaf])

    def test_popcount_is_depth_plus_one(self, coco):
        for leaf in coco.leaves:
            assert multi_hot_target(coco, leaf).sum() == coco.nodes[leaf].depth + 1

    def test_non_leaf_rejected(self, coco):
        with pytest.raises(TaxonomyError):
            multi_hot_target(coco, coco.id("Vehicles"))


class TestValidate:
    def test_sample_ok(self, coco):
        assert validate(coco) == []

    def test_cycle_diagnostic(self):
        diags = validate([("A", "B"), ("B", "A")])
        assert any(d.startswith("cycle") for d in diags)

    def test_two_parents_diagnostic(self):
        diags = validate([("A", "B"), ("C", "B")])
        assert any(d.startswith("two-parents") for d in diags)

    def test_isolated_node_ok(self):
        assert validate(parse_taxonomy("Alone")) == []

    def test_lists_every_violation(self):
        diags = validate([("A", "B"), ("C", "B"), ("X", "Y"), ("Y", "X")])
        assert {d.split(":")[0] for d in diags} == {"two-parents", "cycle"}


class TestProperties:
    def test_sets_partition(self, coco):
        leaves, nonleaves = set(coco.leaves), set(coco.nonleaves)
        assert leaves | nonleaves == set(range(len(coco)))
        assert not leaves & nonleaves

    def test_ancestor_count_is_depth(self, coco):
        for node in coco.nodes:
            anc = ancestors(coco, node.id)
            assert node.id not in anc
            assert len(anc) == node.depth

    def test_roundtrip_sample(self, coco):
        assert parse_taxonomy(serialize_taxonomy(coco)) == coco


@st.composite
def random_forests(draw):
    n = draw(st.integers(1, 25))
    parents = [None] + [draw(st.one_of(st.none(), st.integers(0, i - 1))) for i in range(1, n)]
    names = [f"c{i}" for i in range(n)]
    edges = [(names[p], names[i]) for i, p in enumerate(parents) if p is not None]
    used = {x for e in edges for x in e}
    isolated = [nm for nm in names if nm not in used]
    return TaxonomyForest.from_edges(edges, isolated)


@settings(max_examples=60, deadline=None)
@given(random_forests())
def test_random_forest_roundtrip_and_invariants(forest):
    assert parse_taxonomy(serialize_taxonomy(forest)) == forest
    assert validate(forest) == []
    for node in forest.nodes:
        p = forest.parent(node.id)
        assert node.depth == (0 if p is None else forest.nodes[p].depth + 1)
    for leaf in forest.leaves:
        assert multi_hot_target(forest, leaf).sum() == forest.nodes[leaf].depth + 1
