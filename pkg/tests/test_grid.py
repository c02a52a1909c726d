import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlwg_deblur.grid import (
    Image,
    SelectionMap,
    extended_block,
    gather,
    make_partition,
    scatter,
    selection_map,
)


def test_image_layout_is_column_major():
    arr = np.arange(12.0).reshape(3, 4)[:, :3]
    img = Image.from_array(arr)
    # pixel (row a, col b) sits at b * n + a
    for a in range(3):
        for b in range(3):
            assert img.data[b * 3 + a] == arr[a, b]
    np.testing.assert_array_equal(img.to_array(), arr)


def test_image_rejects_bad_input():
    with pytest.raises(ValueError):
        Image(2, np.ones(3))
    with pytest.raises(ValueError):
        Image(2, np.array([0.0, np.nan, 1.0, 2.0]))
    # the unit box is deliberately not enforced
    assert Image(1, np.array([-3.5])).data[0] == -3.5


def test_image_data_is_read_only():
    img = Image.from_array(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.data[0] = 1.0


def test_make_partition_examples():
    p = make_partition(4, 2, 0)
    assert (p.b, p.q) == (4, 4)
    p = make_partition(512, 64, 8)
    assert (p.b, p.q) == (64, 4096)
    with pytest.raises(ValueError):
        make_partition(6, 2, 1)
    with pytest.raises(ValueError):
        make_partition(10, 4, 1)


def test_block_order_is_column_major():
    p = make_partition(8, 2, 0)
    assert p.block_coords(1) == (1, 0)
    assert p.block_coords(4) == (0, 1)
    assert p.block_id(3, 2) == 11
    assert p.pixel_block_map[5, 2] == p.block_id(2, 1)


def test_blocks_tile_the_image():
    p = make_partition(12, 4, 1)
    cores = np.concatenate([p.core_indices(i) for i in range(p.b)])
    np.testing.assert_array_equal(np.sort(cores), np.arange(p.d))


def _rr_sizes(m, r):
    return {(m + 2 * r) ** 2, (m + 4 * r) * (m + 2 * r), (m + 4 * r) ** 2}


@pytest.mark.parametrize("n,m,r", [(12, 4, 1), (24, 8, 2), (16, 4, 0), (15, 5, 2)])
def test_extended_block_sizes(n, m, r):
    p = make_partition(n, m, r)
    nb = n // m
    for i in range(p.b):
        br, bc = p.block_coords(i)
        rr = extended_block(p, i, "+rr").size
        one = extended_block(p, i, "+1").size
        if nb >= 3:
            assert rr in _rr_sizes(m, r)
            assert one in {(m + 1) ** 2, (m + 1) * (m + 2), (m + 2) ** 2}
        edges = (br in (0, nb - 1)) + (bc in (0, nb - 1))
        if nb >= 3 and edges == 0:
            assert rr == (m + 4 * r) ** 2
            assert one == (m + 2) ** 2
        if nb >= 2 and edges == 2:
            assert rr == (m + 2 * r) ** 2
            assert one == (m + 1) ** 2


def test_paper_scale_block_sizes():
    p = make_partition(512, 64, 8)
    assert extended_block(p, p.block_id(3, 3), "+rr").size == 9216
    assert extended_block(p, 0, "+rr").size == 6400


def test_zero_radius_frame_is_core():
    p = make_partition(8, 4, 0)
    for i in range(p.b):
        blk = extended_block(p, i, "+rr")
        assert blk.size == 16
        np.testing.assert_array_equal(blk.interior_offsets, np.arange(16))


def test_gather_interior_plus_one_by_hand():
    # 4x4 image, m = 2: block (1, 1) is id 3 and its +1 frame is rows 1..3, cols 1..3
    p = make_partition(4, 2, 0)
    img = Image.from_array(np.arange(16.0).reshape(4, 4, order="F"))
    blk = extended_block(p, 3, "+1")
    assert blk.rows == (1, 4) and blk.cols == (1, 4)
    expected = [5, 6, 7, 9, 10, 11, 13, 14, 15]
    np.testing.assert_array_equal(gather(img, blk), expected)
    np.testing.assert_array_equal(gather(img, blk)[blk.interior_offsets], [10, 11, 14, 15])


def test_gather_full_plus_one_frame_by_hand():
    # 6x6 image, m = 2: block (1, 1) is interior, its +1 block is rows 1..4, cols 1..4
    p = make_partition(6, 2, 0)
    img = Image.from_array(np.arange(36.0).reshape(6, 6, order="F"))
    blk = extended_block(p, p.block_id(1, 1), "+1")
    expected = [7, 8, 9, 10, 13, 14, 15, 16, 19, 20, 21, 22, 25, 26, 27, 28]
    np.testing.assert_array_equal(gather(img, blk), expected)
    np.testing.assert_array_equal(blk.interior_offsets, [5, 6, 9, 10])


def test_gather_identity_and_scatter_roundtrip():
    p = make_partition(8, 4, 1)
    x = np.random.default_rng(0).standard_normal(64)
    np.testing.assert_array_equal(gather(x, SelectionMap.identity(64)), x)
    out = np.zeros(64)
    for i in range(p.b):
        core = extended_block(p, i, "core")
        scatter(gather(x, core), core, out)
    np.testing.assert_array_equal(out, x)


def test_selection_map_complement_splits_source():
    sel = SelectionMap(10, [7, 2, 5])
    comp = sel.complement()
    assert sorted(np.concatenate([sel.index_table, comp.index_table]).tolist()) == list(range(10))
    v = np.arange(10.0)
    rebuilt = comp.embed(comp.apply(v), sel.embed(sel.apply(v)))
    np.testing.assert_array_equal(rebuilt, v)


def test_selection_map_rejects_duplicates():
    with pytest.raises(ValueError):
        SelectionMap(5, [1, 1])
    with pytest.raises(IndexError):
        SelectionMap(5, [5])


def test_invalid_block_id():
    p = make_partition(8, 4, 1)
    with pytest.raises(IndexError):
        extended_block(p, 4, "+1")
    with pytest.raises(ValueError):
        extended_block(p, 0, "+2")


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(8, 4, 1), (12, 4, 1), (16, 8, 2), (10, 5, 2)]), st.data())
def test_selection_map_consistency(geom, data):
    n, m, r = geom
    p = make_partition(n, m, r)
    i = data.draw(st.integers(0, p.b - 1))
    x = np.random.default_rng(i).standard_normal(p.d)
    core = gather(x, selection_map(p, i, "image", "core"))
    big = gather(x, selection_map(p, i, "image", "+rr"))
    # U_i applied to the +rr block picks out the core
    np.testing.assert_array_equal(selection_map(p, i, "+rr", "core").apply(big), core)
    np.testing.assert_array_equal(big[extended_block(p, i, "+rr").interior_offsets], core)
    mid = selection_map(p, i, "+rr", "+r").apply(big)
    np.testing.assert_array_equal(mid, gather(x, extended_block(p, i, "+r")))
