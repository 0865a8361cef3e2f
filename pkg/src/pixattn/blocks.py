"""Query/memory block partitions, generation orders, and causal masks.

Local attention splits the flattened position sequence into non-overlapping
query blocks; each attends into a memory block that contains the query
positions plus earlier context.  The 1D scheme takes trailing raster
history; the 2D scheme extends a rectangle of pixels upward and sideways,
never below.  Masks enforce strict generation-order precedence: a position
only sees positions generated strictly before it.  Under shifted decoder
inputs the slot of the very first generated position holds the learned
start vector, so that slot doubles as the always-permitted "start" column
for the first position's otherwise empty attention row.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Scheme", "Block", "BlockPlan", "PlanLayout", "plan_full", "plan_1d",
    "plan_2d", "plan_for_scheme", "build_mask", "build_layout",
    "validate_plan", "attention_cost",
]


@dataclass(frozen=True)
class Scheme:
    """Attention neighborhood description.

    full: every position sees every position (encoder use).
    local1d: query blocks of l_q flattened positions with l_m positions of
    trailing history.  local2d: h_q x w_q pixel blocks with h_m rows above
    and w_m columns on each side.
    """

    variant: str
    l_q: int = 0
    l_m: int = 0
    h_q: int = 0
    w_q: int = 0
    h_m: int = 0
    w_m: int = 0

    def __post_init__(self):
        if self.variant == "full":
            return
        if self.variant == "local1d":
            if self.l_q < 1:
                raise ValueError(f"l_q must be >= 1, got {self.l_q}")
            if self.l_m < 0:
                raise ValueError(f"l_m must be >= 0, got {self.l_m}")
            return
        if self.variant == "local2d":
            if self.h_q < 1 or self.w_q < 1:
                raise ValueError(
                    f"query block extents must be >= 1, got {self.h_q}x{self.w_q}")
            if self.h_m < 0 or self.w_m < 0:
                raise ValueError(
                    f"memory extensions must be >= 0, got h_m={self.h_m} w_m={self.w_m}")
            return
        raise ValueError(f"unknown scheme variant {self.variant!r}")


@dataclass(frozen=True)
class Block:
    query: np.ndarray   # position indices, ascending raster order
    memory: np.ndarray  # superset of query


@dataclass
class BlockPlan:
    """Partition of [0, n) into query blocks plus a generation order."""

    n_positions: int
    blocks: list[Block]
    gen_order: np.ndarray
    pad_to: int
    causal: bool = True
    channels: int = 3
    h: int = 0
    w: int = 0
    rank_of: np.ndarray = field(init=False)

    def __post_init__(self):
        rank = np.empty(self.n_positions, dtype=np.int64)
        rank[self.gen_order] = np.arange(self.n_positions)
        self.rank_of = rank

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


def plan_full(n: int) -> BlockPlan:
    """One block over everything, mask all-true; for encoder attention."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    pos = np.arange(n)
    return BlockPlan(n, [Block(pos, pos.copy())], pos.copy(), pad_to=n,
                     causal=False, channels=1, h=1, w=n)


def plan_1d(h: int, w: int, l_q: int, l_m: int, channels: int = 3) -> BlockPlan:
    """Raster sequence cut into ceil(n/l_q) blocks with trailing history.

    Block k's memory is the l_m positions immediately before k*l_q
    (clipped at 0) followed by the query positions; history runs straight
    through image-row boundaries.
    """
    Scheme("local1d", l_q=l_q, l_m=l_m)
    n = h * w * channels
    blocks = []
    for start in range(0, n, l_q):
        q = np.arange(start, min(start + l_q, n))
        hist = np.arange(max(0, start - l_m), start)
        blocks.append(Block(q, np.concatenate([hist, q])))
    return BlockPlan(n, blocks, np.arange(n), pad_to=l_q,
                     channels=channels, h=h, w=w)


def plan_2d(h: int, w: int, h_q: int, w_q: int, h_m: int, w_m: int,
            channels: int = 3) -> BlockPlan:
    """Pixel grid tiled by h_q x w_q rectangles in raster block order.

    Memory is the rectangle extended h_m rows up and w_m columns to both
    sides, clipped to the image; no rows below the query block.  Pixel sets
    expand to all channels, channel-minor.  Generation order walks blocks
    in raster order, positions raster within each block.
    """
    Scheme("local2d", h_q=h_q, w_q=w_q, h_m=h_m, w_m=w_m)
    n = h * w * channels

    def positions(r0, r1, c0, c1):
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1),
                             indexing="ij")
        pix = (rr * w + cc).reshape(-1)
        return (pix[:, None] * channels + np.arange(channels)).reshape(-1)

    blocks = []
    order = []
    for r0 in range(0, h, h_q):
        r1 = min(r0 + h_q, h) - 1
        for c0 in range(0, w, w_q):
            c1 = min(c0 + w_q, w) - 1
            q = positions(r0, r1, c0, c1)
            m = positions(max(0, r0 - h_m), r1,
                          max(0, c0 - w_m), min(w - 1, c1 + w_m))
            blocks.append(Block(q, m))
            order.append(q)
    return BlockPlan(n, blocks, np.concatenate(order),
                     pad_to=h_q * w_q * channels, channels=channels, h=h, w=w)


def plan_for_scheme(scheme: Scheme, h: int, w: int, channels: int = 3) -> BlockPlan:
    if scheme.variant == "full":
        return plan_full(h * w * channels)
    if scheme.variant == "local1d":
        return plan_1d(h, w, scheme.l_q, scheme.l_m, channels)
    return plan_2d(h, w, scheme.h_q, scheme.w_q, scheme.h_m, scheme.w_m, channels)


def build_mask(plan: BlockPlan, block_index: int,
               self_inclusive: bool = False) -> np.ndarray:
    """Boolean [pad_to, l_mem]; True = attention permitted.

    Strict precedence: memory rank < query rank.  The globally first
    generated position gets its own memory column permitted (the start
    slot; with shifted inputs that slot carries the start vector, not an
    intensity).  self_inclusive additionally opens every position's own
    column.  Query pad rows are all-false.
    """
    if not 0 <= block_index < len(plan.blocks):
        raise IndexError(
            f"block index {block_index} out of range [0, {len(plan.blocks)})")
    block = plan.blocks[block_index]
    q, m = block.query, block.memory
    mask = np.zeros((plan.pad_to, len(m)), dtype=bool)
    if not plan.causal:
        mask[: len(q), :] = True
        return mask
    qr = plan.rank_of[q]
    mr = plan.rank_of[m]
    mask[: len(q), :] = mr[None, :] < qr[:, None]
    own = m[None, :] == q[:, None]
    if self_inclusive:
        mask[: len(q), :] |= own
    first = qr == 0
    if first.any():
        mask[: len(q), :] |= own & first[:, None]
    return mask


@dataclass(frozen=True)
class PlanLayout:
    """Index arrays that run every block of a plan as one batched attention.

    Gathering rows of a [n, d] sequence with q_index/m_index (flattened)
    and reshaping yields [nb, pad_to, d] query and [nb, m_max, d] memory
    stacks; mask is the matching [nb, pad_to, m_max] permission tensor.
    Pad slots gather row 0 as a dummy; their mask entries are all false and
    flat_back never selects their outputs, so they contribute nothing.
    flat_back[p] is the row of the flattened [nb*pad_to, d] query output
    holding position p, so gathering with it restores sequence order.
    """

    q_index: np.ndarray    # [nb, pad_to] int64
    q_valid: np.ndarray    # [nb, pad_to] bool
    m_index: np.ndarray    # [nb, m_max] int64
    m_valid: np.ndarray    # [nb, m_max] bool
    mask: np.ndarray       # [nb, pad_to, m_max] bool
    flat_back: np.ndarray  # [n] int64


def build_layout(plan: BlockPlan, self_inclusive: bool = False) -> PlanLayout:
    """Batched index arrays plus per-block masks for the whole plan."""
    nb, pad_to = plan.num_blocks, plan.pad_to
    m_max = max(len(b.memory) for b in plan.blocks)
    q_index = np.zeros((nb, pad_to), dtype=np.int64)
    q_valid = np.zeros((nb, pad_to), dtype=bool)
    m_index = np.zeros((nb, m_max), dtype=np.int64)
    m_valid = np.zeros((nb, m_max), dtype=bool)
    mask = np.zeros((nb, pad_to, m_max), dtype=bool)
    flat_back = np.zeros(plan.n_positions, dtype=np.int64)
    for i, block in enumerate(plan.blocks):
        lq, lm = len(block.query), len(block.memory)
        q_index[i, :lq] = block.query
        q_valid[i, :lq] = True
        m_index[i, :lm] = block.memory
        m_valid[i, :lm] = True
        mask[i, :, :lm] = build_mask(plan, i, self_inclusive=self_inclusive)
        flat_back[block.query] = i * pad_to + np.arange(lq)
    return PlanLayout(q_index, q_valid, m_index, m_valid, mask, flat_back)


def validate_plan(plan: BlockPlan) -> str | None:
    """None when all invariants hold, else a description of the first
    violation found."""
    n = plan.n_positions
    seen = np.concatenate([b.query for b in plan.blocks]) if plan.blocks else \
        np.empty(0, dtype=np.int64)
    if len(seen) != n or not np.array_equal(np.sort(seen), np.arange(n)):
        return (f"query blocks do not partition [0, {n}): "
                f"{len(seen)} positions with {len(np.unique(seen))} unique")
    for i, b in enumerate(plan.blocks):
        if not np.all(np.isin(b.query, b.memory)):
            missing = b.query[~np.isin(b.query, b.memory)]
            return f"block {i} memory is missing query positions {missing.tolist()}"
        if len(b.query) > plan.pad_to:
            return (f"block {i} query length {len(b.query)} exceeds "
                    f"pad_to {plan.pad_to}")
    if not np.array_equal(np.sort(plan.gen_order), np.arange(n)):
        return "gen_order is not a permutation"
    for i, b in enumerate(plan.blocks):
        ranks = np.sort(plan.rank_of[b.query])
        if not np.array_equal(ranks, np.arange(ranks[0], ranks[0] + len(ranks))):
            return f"block {i} positions are not contiguous in gen_order"
    return None


def attention_cost(plan: BlockPlan, d: int) -> int:
    """Flop estimate for one score matmul side: sum of pad_to * l_mem * d."""
    return sum(plan.pad_to * len(b.memory) * d for b in plan.blocks)
