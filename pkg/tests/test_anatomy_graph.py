"""Node layouts, availability masks, and contour graph operators."""

import json

import numpy as np
import pytest

from heteroseg import (
    ContourTopology,
    LabelAvailability,
    LandmarkSet,
    Structure,
    StructureLayout,
    availability_mask,
    build_contour_adjacency,
    build_layout,
    default_layout,
    default_topology,
    topology_from_json,
    topology_to_json,
)

L, H, C = Structure.LUNGS, Structure.HEART, Structure.CLAVICLES


def small_layout():
    return build_layout({L: 3, H: 2, C: 2})


class TestLayout:
    def test_block_offsets(self):
        layout = small_layout()
        assert layout.total_nodes == 7
        assert layout.block_slice(L) == slice(0, 3)
        assert layout.block_slice(H) == slice(3, 5)
        assert layout.block_slice(C) == slice(5, 7)

    def test_single_block(self):
        layout = build_layout({L: 94})
        assert layout.total_nodes == 94
        assert layout.structures == (L,)

    def test_mapping_reordered_to_canonical(self):
        layout = build_layout({"CLAVICLES": 16, "LUNGS": 40, "HEART": 20})
        assert layout.structures == (L, H, C)
        assert layout.block_slice(H) == slice(40, 60)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            build_layout({L: 0})

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            build_layout({L: 40, H: -3})

    def test_unknown_structure_rejected(self):
        with pytest.raises(ValueError):
            build_layout({"SPINE": 10})

    def test_noncanonical_block_order_rejected(self):
        with pytest.raises(ValueError):
            StructureLayout(((H, 20), (L, 40)))

    def test_truncation_keeps_prefix(self):
        layout = small_layout()
        sub = layout.truncated([L, H])
        assert sub.structures == (L, H)
        assert sub.total_nodes == 5

    def test_truncation_to_interior_subset_rejected(self):
        layout = small_layout()
        with pytest.raises(ValueError):
            layout.truncated([L, C])
        with pytest.raises(ValueError):
            layout.truncated([H])


class TestAvailabilityMask:
    def test_prefix_subset(self):
        mask = availability_mask(small_layout(), LabelAvailability.of(L, H))
        np.testing.assert_array_equal(mask, [1, 1, 1, 1, 1, 0, 0])

    def test_full_availability_all_true(self):
        mask = availability_mask(small_layout(), LabelAvailability.full())
        assert mask.all()

    def test_noncontiguous_subset(self):
        # lungs+clavicles without heart: mask has a hole, not a prefix
        mask = availability_mask(small_layout(), LabelAvailability.of(L, C))
        np.testing.assert_array_equal(mask, [1, 1, 1, 0, 0, 1, 1])

    def test_empty_availability_all_false(self):
        mask = availability_mask(small_layout(), LabelAvailability(frozenset()))
        assert not mask.any()

    def test_structure_outside_layout_rejected(self):
        layout = build_layout({L: 4})
        with pytest.raises(ValueError):
            availability_mask(layout, LabelAvailability.of(H))

    def test_union_is_elementwise_or(self):
        layout = small_layout()
        rng = np.random.default_rng(7)
        subsets = [frozenset(), {L}, {H}, {C}, {L, H}, {L, C}, {H, C}, {L, H, C}]
        for _ in range(30):
            a = LabelAvailability(frozenset(subsets[rng.integers(len(subsets))]))
            b = LabelAvailability(frozenset(subsets[rng.integers(len(subsets))]))
            merged = availability_mask(layout, a.union(b))
            np.testing.assert_array_equal(
                merged,
                availability_mask(layout, a) | availability_mask(layout, b),
            )

    def test_prefix_masks_are_index_ranges(self):
        layout = default_layout()
        for prefix in ([L], [L, H], [L, H, C]):
            mask = availability_mask(layout, LabelAvailability.of(*prefix))
            d = sum(layout.node_count(s) for s in prefix)
            assert mask[:d].all() and not mask[d:].any()


class TestAvailabilitySet:
    def test_membership_and_names(self):
        avail = LabelAvailability.of(L, C)
        assert L in avail and C in avail and H not in avail
        assert avail.names() == ["LUNGS", "CLAVICLES"]

    def test_without(self):
        avail = LabelAvailability.full().without(H)
        assert avail.present == frozenset({L, C})

    def test_intersect(self):
        avail = LabelAvailability.of(L, H).intersect([H, C])
        assert avail.present == frozenset({H})

    def test_string_members_coerced(self):
        avail = LabelAvailability(frozenset({"LUNGS", "HEART"}))
        assert avail.present == frozenset({L, H})


def cycle_polys(layout):
    """One closed cycle per block, in index order."""
    polys = {}
    for structure in layout.structures:
        block = layout.block_slice(structure)
        polys[structure] = [tuple(range(block.start, block.stop))]
    return polys


class TestContourGraph:
    def test_four_node_cycle_adjacency(self):
        layout = build_layout({L: 4})
        topo = build_contour_adjacency(layout, {L: [(0, 1, 2, 3)]})
        adj = topo.adjacency
        assert adj.shape == (4, 4)
        assert int((adj != 0).sum()) == 8
        assert np.array_equal(adj, adj.T)
        assert not adj.diagonal().any()
        np.testing.assert_array_equal(adj.sum(axis=0), [2, 2, 2, 2])

    def test_disjoint_blocks_stay_disconnected(self):
        layout = build_layout({L: 4, H: 3})
        topo = build_contour_adjacency(layout, cycle_polys(layout))
        assert not topo.adjacency[:4, 4:].any()
        assert not topo.adjacency[4:, :4].any()

    def test_cross_block_polyline_rejected(self):
        layout = build_layout({L: 4, H: 3})
        with pytest.raises(ValueError):
            build_contour_adjacency(layout, {L: [(0, 1, 4)]})

    def test_short_polyline_rejected(self):
        layout = build_layout({L: 4})
        with pytest.raises(ValueError):
            build_contour_adjacency(layout, {L: [(0, 1)]})

    def test_repeated_node_rejected(self):
        layout = build_layout({L: 4})
        with pytest.raises(ValueError):
            build_contour_adjacency(layout, {L: [(0, 1, 1)]})

    def test_triangle_operator_spectrum(self):
        # normalized Laplacian of a 3-cycle has eigenvalues {0, 1.5, 1.5};
        # after rescaling by 2/lmax and shifting by -I they land on {-1, 1, 1}
        layout = build_layout({L: 3})
        topo = build_contour_adjacency(layout, {L: [(0, 1, 2)]})
        eig = np.sort(np.linalg.eigvalsh(topo.operator))
        np.testing.assert_allclose(eig, [-1.0, 1.0, 1.0], atol=1e-12)

    def test_operator_spectrum_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            counts = {L: int(rng.integers(3, 12))}
            if rng.random() < 0.5:
                counts[H] = int(rng.integers(3, 12))
            layout = build_layout(counts)
            topo = build_contour_adjacency(layout, cycle_polys(layout))
            eig = np.linalg.eigvalsh(topo.operator)
            assert eig.min() >= -1.0 - 1e-9
            assert eig.max() <= 1.0 + 1e-9

    def test_operator_symmetric(self):
        topo = default_topology()
        np.testing.assert_allclose(topo.operator, topo.operator.T, atol=1e-12)

    def test_default_topology_contour_counts(self):
        topo = default_topology()
        assert topo.layout.total_nodes == 76
        assert len(topo.structure_polylines(L)) == 2
        assert len(topo.structure_polylines(H)) == 1
        assert len(topo.structure_polylines(C)) == 2
        # every node sits on exactly one closed contour, so degree is 2
        np.testing.assert_array_equal(topo.adjacency.sum(axis=0), np.full(76, 2.0))


class TestTopologyJson:
    def test_round_trip(self):
        topo = default_topology()
        restored = topology_from_json(topology_to_json(topo))
        assert restored.layout == topo.layout
        assert restored.polylines == topo.polylines
        np.testing.assert_array_equal(restored.adjacency, topo.adjacency)
        np.testing.assert_allclose(restored.operator, topo.operator, atol=1e-12)

    def test_document_shape(self):
        doc = json.loads(topology_to_json(default_topology()))
        assert set(doc) == {"blocks"}
        for entry in doc["blocks"]:
            assert set(entry) == {"structure", "nodes", "polylines"}
        assert [e["structure"] for e in doc["blocks"]] == ["LUNGS", "HEART", "CLAVICLES"]

    def test_empty_document_rejected(self):
        with pytest.raises(ValueError):
            topology_from_json("{}")


class TestLandmarkSet:
    def test_shape_mismatch_rejected(self):
        layout = small_layout()
        with pytest.raises(ValueError):
            LandmarkSet(layout, np.zeros((6, 2)))

    def test_nonfinite_rejected(self):
        layout = small_layout()
        coords = np.zeros((7, 2))
        coords[2, 1] = np.nan
        with pytest.raises(ValueError):
            LandmarkSet(layout, coords)

    def test_structure_coords_slices_block(self):
        layout = small_layout()
        coords = np.arange(14, dtype=np.float64).reshape(7, 2) / 14.0
        lm = LandmarkSet(layout, coords)
        np.testing.assert_array_equal(lm.structure_coords(H), coords[3:5])

    def test_denormalized_scales_axes_independently(self):
        layout = build_layout({L: 3})
        lm = LandmarkSet(layout, np.full((3, 2), 0.5))
        pix = lm.denormalized(width=128, height=64)
        np.testing.assert_allclose(pix[:, 0], 64.0)
        np.testing.assert_allclose(pix[:, 1], 32.0)

    def test_coords_are_immutable(self):
        lm = LandmarkSet(build_layout({L: 3}), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            lm.coords[0, 0] = 1.0
