"""Block plans, generation orders, masks, and the brute-force mask oracle."""
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pixattn.blocks import (Block, BlockPlan, Scheme, attention_cost,
                            build_layout, build_mask, plan_1d, plan_2d,
                            plan_for_scheme, plan_full, validate_plan)
from pixattn.rng import Rng


def oracle_mask(plan, block_index):
    """Strict precedence predicate, written independently of build_mask:
    permitted iff the memory position was generated strictly earlier, plus
    the start bit at the first generated position's own column."""
    rank = {int(p): r for r, p in enumerate(plan.gen_order)}
    block = plan.blocks[block_index]
    out = np.zeros((plan.pad_to, len(block.memory)), dtype=bool)
    for i, qp in enumerate(block.query):
        for j, mp in enumerate(block.memory):
            if rank[int(mp)] < rank[int(qp)]:
                out[i, j] = True
            if rank[int(qp)] == 0 and int(mp) == int(qp):
                out[i, j] = True
    return out


# ---------------------------------------------------------------- Scheme

def test_scheme_validation():
    with pytest.raises(ValueError):
        Scheme("local1d", l_q=0)
    with pytest.raises(ValueError):
        Scheme("local1d", l_q=4, l_m=-1)
    with pytest.raises(ValueError):
        Scheme("local2d", h_q=0, w_q=2)
    with pytest.raises(ValueError):
        Scheme("diagonal")
    Scheme("full")
    Scheme("local1d", l_q=8, l_m=0)
    Scheme("local2d", h_q=2, w_q=2, h_m=0, w_m=0)


# ---------------------------------------------------------------- plan_full

def test_plan_full_8x8_single_block():
    plan = plan_full(192)
    assert plan.num_blocks == 1
    assert len(plan.blocks[0].query) == 192
    assert len(plan.blocks[0].memory) == 192


def test_plan_full_single_position():
    plan = plan_full(1)
    assert plan.num_blocks == 1 and plan.n_positions == 1


def test_plan_full_mask_all_true():
    mask = build_mask(plan_full(192), 0)
    assert mask.shape == (192, 192)
    assert mask.all()


# ---------------------------------------------------------------- plan_1d

def test_plan_1d_2x2_with_clipping():
    plan = plan_1d(2, 2, l_q=4, l_m=4)
    assert plan.num_blocks == 3
    expected = [
        (list(range(0, 4)), list(range(0, 4))),
        (list(range(4, 8)), list(range(0, 8))),
        (list(range(8, 12)), list(range(4, 12))),
    ]
    for block, (q, m) in zip(plan.blocks, expected):
        assert block.query.tolist() == q
        assert block.memory.tolist() == m


def test_plan_1d_32x32_block_count():
    plan = plan_1d(32, 32, l_q=256, l_m=256)
    assert plan.n_positions == 3072
    assert plan.num_blocks == 12


def test_plan_1d_paper_memory_split():
    # query 256 with 256 extra history = total interior memory 512.
    plan = plan_1d(32, 32, l_q=256, l_m=256)
    for block in plan.blocks[1:]:
        assert len(block.memory) == 512
    assert len(plan.blocks[0].memory) == 256


def test_plan_1d_gen_order_identity():
    plan = plan_1d(3, 5, l_q=7, l_m=3)
    np.testing.assert_array_equal(plan.gen_order, np.arange(45))


def test_plan_1d_short_final_block_padded():
    plan = plan_1d(1, 2, l_q=4, l_m=0)  # n=6 -> blocks of 4 and 2
    assert plan.pad_to == 4
    assert len(plan.blocks[1].query) == 2
    mask = build_mask(plan, 1)
    assert mask.shape == (4, 2)
    assert not mask[2:].any()  # pad rows all-false


def test_plan_1d_history_crosses_row_boundary():
    # raster adjacency is literal: history for a block starting mid-image
    # reaches back into the previous image row.
    plan = plan_1d(2, 2, l_q=6, l_m=4)
    assert plan.blocks[1].memory.tolist() == [2, 3, 4, 5, 6, 7, 8, 9, 10, 11]


# ---------------------------------------------------------------- plan_2d

def test_plan_2d_8x8_tiling():
    plan = plan_2d(8, 8, h_q=2, w_q=4, h_m=0, w_m=0)
    assert plan.num_blocks == 8
    for block in plan.blocks:
        assert len(block.query) == 24


def test_plan_2d_top_left_block_fully_clipped():
    # Full-width top block: every extension direction hits an image edge,
    # so clipping leaves memory equal to the query block.
    plan = plan_2d(8, 8, h_q=2, w_q=8, h_m=2, w_m=2)
    block = plan.blocks[0]
    np.testing.assert_array_equal(np.sort(block.memory),
                                  np.sort(block.query))


def test_plan_2d_top_left_keeps_right_extension():
    # With room to the right the top-left block still extends that way;
    # those positions are later in generation order and stay masked.
    plan = plan_2d(8, 8, h_q=2, w_q=2, h_m=2, w_m=2)
    block = plan.blocks[0]
    cols = np.unique(block.memory // 3 % 8)
    assert cols.tolist() == [0, 1, 2, 3]
    mask = build_mask(plan, 0)
    later = np.isin(block.memory, block.query, invert=True)
    assert not mask[:, later].any()


def test_plan_2d_interior_memory_rectangle():
    # Against an independent set construction on a 16x16 grid.
    h = w = 16
    h_q, w_q, h_m, w_m = 2, 2, 1, 2
    plan = plan_2d(h, w, h_q, w_q, h_m, w_m)
    blocks_per_row = w // w_q
    for idx, block in enumerate(plan.blocks):
        br, bc = divmod(idx, blocks_per_row)
        r0, c0 = br * h_q, bc * w_q
        if r0 - h_m < 0 or c0 - w_m < 0 or c0 + w_q - 1 + w_m > w - 1:
            continue  # boundary block
        expect = {(r, c)
                  for r in range(r0 - h_m, r0 + h_q)
                  for c in range(c0 - w_m, c0 + w_q + w_m)}
        assert len(expect) == (h_q + h_m) * (w_q + 2 * w_m)
        got = {(int(p) // 3 // w, int(p) // 3 % w) for p in block.memory}
        assert got == expect


def test_plan_2d_memory_never_below_query():
    plan = plan_2d(6, 6, h_q=2, w_q=3, h_m=1, w_m=1)
    for block in plan.blocks:
        max_q_row = (block.query // 3 // 6).max()
        assert (block.memory // 3 // 6).max() <= max_q_row


def test_plan_2d_gen_order_block_major():
    plan = plan_2d(4, 4, h_q=2, w_q=2, h_m=1, w_m=1)
    order = plan.gen_order
    np.testing.assert_array_equal(order[:12], plan.blocks[0].query)
    np.testing.assert_array_equal(order[12:24], plan.blocks[1].query)
    # Within a block, raster (row-major, channel-minor) order.
    assert list(plan.blocks[0].query) == sorted(plan.blocks[0].query)


def test_plan_2d_edge_blocks_clipped_then_padded():
    plan = plan_2d(3, 3, h_q=2, w_q=2, h_m=1, w_m=1)
    assert plan.pad_to == 2 * 2 * 3
    sizes = [len(b.query) for b in plan.blocks]
    assert sizes == [12, 6, 6, 3]


# ---------------------------------------------------------------- masks

def test_mask_first_position_start_slot_only():
    plan = plan_1d(2, 2, l_q=4, l_m=4)
    mask = build_mask(plan, 0)
    assert mask[0].tolist() == [True, False, False, False]


def test_mask_1d_block0_lower_triangular_with_start():
    plan = plan_1d(2, 2, l_q=4, l_m=0)
    mask = build_mask(plan, 0)
    expected = np.array([
        [1, 0, 0, 0],   # start slot only
        [1, 0, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 0],
    ], dtype=bool)
    np.testing.assert_array_equal(mask, expected)


def test_mask_last_position_l_m_zero_sees_in_block_history():
    plan = plan_1d(2, 2, l_q=4, l_m=0)
    mask = build_mask(plan, 1)
    assert mask[3].tolist() == [True, True, True, False]


def test_mask_self_inclusive_adds_diagonal():
    plan = plan_1d(2, 2, l_q=4, l_m=0)
    mask = build_mask(plan, 1, self_inclusive=True)
    strict = build_mask(plan, 1)
    own = np.eye(4, dtype=bool)
    np.testing.assert_array_equal(mask[:4], strict[:4] | own)


def test_mask_block_index_out_of_range():
    with pytest.raises(IndexError):
        build_mask(plan_1d(2, 2, 4, 4), 3)


def test_mask_rows_have_predecessor_when_l_m_positive():
    for h, w in [(2, 3), (4, 4)]:
        plan = plan_1d(h, w, l_q=5, l_m=2)
        for b in range(plan.num_blocks):
            mask = build_mask(plan, b)
            nq = len(plan.blocks[b].query)
            assert mask[:nq].any(axis=1).all()


def test_mask_oracle_exhaustive_small_images():
    # Every image size up to 4x4, fixed schemes, both variants.
    for h in range(1, 5):
        for w in range(1, 5):
            for plan in (plan_1d(h, w, l_q=5, l_m=3),
                         plan_2d(h, w, h_q=2, w_q=2, h_m=1, w_m=1)):
                for b in range(plan.num_blocks):
                    np.testing.assert_array_equal(
                        build_mask(plan, b), oracle_mask(plan, b),
                        err_msg=f"h={h} w={w} block={b}")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_mask_oracle_random_schemes(h, w, seed):
    rng = Rng(seed)
    l_q = int(rng.integers(1, 9, ())[()])
    l_m = int(rng.integers(0, 9, ())[()])
    p1 = plan_1d(h, w, l_q, l_m)
    h_q = int(rng.integers(1, 4, ())[()])
    w_q = int(rng.integers(1, 4, ())[()])
    h_m = int(rng.integers(0, 3, ())[()])
    w_m = int(rng.integers(0, 3, ())[()])
    p2 = plan_2d(h, w, h_q, w_q, h_m, w_m)
    for plan in (p1, p2):
        for b in range(plan.num_blocks):
            np.testing.assert_array_equal(build_mask(plan, b),
                                          oracle_mask(plan, b))


def test_mask_dmol_pixel_granularity():
    plan = plan_2d(4, 4, h_q=2, w_q=2, h_m=1, w_m=1, channels=1)
    assert plan.n_positions == 16
    for b in range(plan.num_blocks):
        np.testing.assert_array_equal(build_mask(plan, b), oracle_mask(plan, b))


# ---------------------------------------------------------------- validate

def test_validate_accepts_generated_plans():
    assert validate_plan(plan_1d(3, 4, 5, 2)) is None
    assert validate_plan(plan_2d(5, 7, 2, 3, 1, 1)) is None
    assert validate_plan(plan_full(17)) is None


def test_validate_detects_overlapping_queries():
    plan = plan_1d(2, 2, 4, 4)
    bad = dataclasses.replace(
        plan,
        blocks=[Block(np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3])),
                Block(np.array([3, 4, 5, 6]), np.array([0, 1, 2, 3, 4, 5, 6])),
                Block(np.array([7, 8, 9, 10, 11]), np.arange(12))])
    assert "partition" in validate_plan(bad)


def test_validate_detects_memory_missing_query():
    plan = plan_1d(2, 2, 4, 4)
    blocks = list(plan.blocks)
    blocks[1] = Block(blocks[1].query, blocks[1].memory[:-1])
    bad = dataclasses.replace(plan, blocks=blocks)
    assert "missing" in validate_plan(bad)


def test_validate_detects_bad_gen_order():
    plan = plan_1d(2, 2, 4, 4)
    order = plan.gen_order.copy()
    order[0] = order[1]
    bad = BlockPlan(plan.n_positions, plan.blocks, order, plan.pad_to)
    assert "permutation" in validate_plan(bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 9), st.integers(0, 9))
def test_validate_property_all_1d_plans_ok(h, w, l_q, l_m):
    assert validate_plan(plan_1d(h, w, l_q, l_m)) is None


# ---------------------------------------------------------------- cost

def test_cost_full_quadratic():
    assert attention_cost(plan_full(50), 8) == 50 * 50 * 8


def test_cost_linear_in_n_for_fixed_memory():
    # 768 -> 1536 positions with fixed block sizes: cost doubles up to
    # boundary effects from the first (history-clipped) block.
    c1 = attention_cost(plan_1d(16, 16, 64, 64), 4)   # n=768
    c2 = attention_cost(plan_1d(32, 16, 64, 64), 4)   # n=1536
    assert abs(c2 / c1 - 2.0) < 0.1


def test_cost_doubling_l_m_roughly_doubles():
    # Memory length is l_q + l_m, so the ratio approaches 2 only when the
    # history dominates the query block length.
    c1 = attention_cost(plan_1d(32, 32, 8, 128), 4)
    c2 = attention_cost(plan_1d(32, 32, 8, 256), 4)
    assert 1.85 < c2 / c1 <= 2.0


def test_plan_for_scheme_dispatch():
    assert plan_for_scheme(Scheme("full"), 2, 2).n_positions == 12
    assert plan_for_scheme(Scheme("local1d", l_q=4, l_m=2), 2, 2).pad_to == 4
    p = plan_for_scheme(Scheme("local2d", h_q=2, w_q=2, h_m=1, w_m=1), 4, 4,
                        channels=1)
    assert p.n_positions == 16


# ---------------------------------------------------------------- layouts


LAYOUT_PLANS = [
    plan_1d(2, 2, 4, 4),
    plan_1d(1, 1, 2, 1),            # ragged tail block of length 1
    plan_1d(2, 3, 5, 7),            # 18 positions, tail of 3
    plan_2d(4, 4, 2, 2, 1, 1),
    plan_2d(3, 5, 2, 3, 2, 1, channels=1),
    plan_full(7),
]


@pytest.mark.parametrize("plan", LAYOUT_PLANS, ids=range(len(LAYOUT_PLANS)))
def test_layout_gather_scatter_round_trip(plan):
    layout = build_layout(plan)
    x = Rng(5).uniform((plan.n_positions, 3))
    stacked = x[layout.q_index.reshape(-1)]
    np.testing.assert_array_equal(stacked[layout.flat_back], x)


@pytest.mark.parametrize("plan", LAYOUT_PLANS, ids=range(len(LAYOUT_PLANS)))
@pytest.mark.parametrize("self_inclusive", [False, True])
def test_layout_masks_match_per_block_masks(plan, self_inclusive):
    layout = build_layout(plan, self_inclusive=self_inclusive)
    for i, block in enumerate(plan.blocks):
        lm = len(block.memory)
        expected = build_mask(plan, i, self_inclusive=self_inclusive)
        np.testing.assert_array_equal(layout.mask[i, :, :lm], expected)
        assert not layout.mask[i, :, lm:].any()


@pytest.mark.parametrize("plan", LAYOUT_PLANS, ids=range(len(LAYOUT_PLANS)))
def test_layout_validity_flags_match_block_lengths(plan):
    layout = build_layout(plan)
    assert layout.q_index.shape == (plan.num_blocks, plan.pad_to)
    assert layout.m_index.shape[0] == plan.num_blocks
    for i, block in enumerate(plan.blocks):
        lq, lm = len(block.query), len(block.memory)
        np.testing.assert_array_equal(layout.q_index[i, :lq], block.query)
        np.testing.assert_array_equal(layout.m_index[i, :lm], block.memory)
        assert layout.q_valid[i, :lq].all() and not layout.q_valid[i, lq:].any()
        assert layout.m_valid[i, :lm].all() and not layout.m_valid[i, lm:].any()
        # pad slots gather a real row (0) but are flagged invalid
        assert (layout.q_index[i, lq:] == 0).all()
        assert (layout.m_index[i, lm:] == 0).all()


def test_layout_pad_query_rows_fully_masked():
    plan = plan_1d(1, 1, 2, 1)          # one full block [0,1], tail [2]
    layout = build_layout(plan, self_inclusive=True)
    assert layout.mask.shape == (2, 2, 2)   # memories [0,1] and [1,2]
    assert not layout.mask[1, 1, :].any()   # tail pad row sees nothing


def test_layout_self_inclusive_opens_own_column_only():
    plan = plan_1d(2, 2, 4, 4)
    strict = build_layout(plan, self_inclusive=False)
    incl = build_layout(plan, self_inclusive=True)
    extra = incl.mask & ~strict.mask
    # the added bits are exactly each real non-first query's own column
    count = 0
    for i, block in enumerate(plan.blocks):
        for s, qp in enumerate(block.query):
            cols = np.flatnonzero(extra[i, s])
            if plan.rank_of[qp] == 0:
                assert cols.size == 0   # start bit already present
            else:
                assert cols.size == 1
                assert block.memory[cols[0]] == qp
                count += 1
    assert count == plan.n_positions - 1
