import random

import pytest
from hypothesis import given, settings, strategies as st

from parvio import datatypes as dt
from parvio.datatypes import Base, BaseType, Contiguous, HIndexed, HVector, Struct, Vector, normalize
from parvio.viewdesc import (
    AccessDesc,
    BasicBlock,
    ByteRun,
    EtypeMismatch,
    NotAligned,
    absolute_offset,
    build_descriptor,
    byte_to_etype,
    count_accessible,
    enumerate_runs,
    etype_to_byte,
    fill_counts,
    pack_descriptor,
    period_runs,
    unpack_descriptor,
)

from oracles import run_bytes, tiled_offsets, tree_offsets

INT = Base(BaseType.INT)
CHAR = Base(BaseType.CHAR)
BYTE = Base(BaseType.BYTE)


def worked_descriptor():
    """Two-level descriptor: outer 3x(2 instances, stride 20), inner 2x(5 bytes, stride 5)."""
    inner = AccessDesc([BasicBlock(0, 2, 5, 5)])
    outer = AccessDesc([BasicBlock(0, 3, 2, 20, subtype=inner)])
    return outer


class TestBuildDescriptor:
    def test_hvector_gap(self):
        d, contig = build_descriptor(normalize(HVector(2, 5, 40, INT)))
        b = d.blocks[0]
        assert (b.repeat, b.count, b.stride) == (2, 20, 20)
        assert not contig

    def test_hindexed_gap(self):
        t = HIndexed((1, 2, 3), (0, 20, 40), INT)
        d, _ = build_descriptor(normalize(t))
        assert [b.offset for b in d.blocks] == [0, 16, 12]
        assert [b.count for b in d.blocks] == [4, 8, 12]

    def test_struct_offsets(self):
        t = Struct((3, 2, 16), (0, 20, 60), (INT, Base(BaseType.DOUBLE), CHAR))
        d, _ = build_descriptor(normalize(t))
        assert [b.offset for b in d.blocks] == [0, 8, 24]

    def test_contiguous_flag(self):
        d, contig = build_descriptor(normalize(Contiguous(10, Base(BaseType.DOUBLE))))
        assert contig
        assert d.blocks[0].count == 80

    def test_etype_check(self):
        with pytest.raises(EtypeMismatch):
            build_descriptor(normalize(Vector(2, 1, 3, INT)), etype=BaseType.DOUBLE)


class TestFillCounts:
    def test_inner_block(self):
        inner = AccessDesc([BasicBlock(0, 2, 5, 5)])
        assert fill_counts(inner) == (15, 10)

    def test_worked_two_level(self):
        ext, act = fill_counts(worked_descriptor())
        assert (act, ext) == (60, 130)

    def test_leaf_identity(self):
        d = AccessDesc([BasicBlock(0, 1, 7, 0)])
        assert fill_counts(d) == (7, 7)

    def test_skip_adds_to_extent(self):
        d = AccessDesc([BasicBlock(0, 1, 4, 0)], skip=6)
        assert fill_counts(d) == (10, 4)


class TestAbsoluteOffset:
    def test_worked_first_period(self):
        d = worked_descriptor()
        fill_counts(d)
        assert absolute_offset(d, 23) == 53

    def test_zero(self):
        d = worked_descriptor()
        fill_counts(d)
        assert absolute_offset(d, 0) == 0

    def test_circular_wrap_against_enumeration(self):
        # the translation of view offset 143 is 2 full periods (2 * 130)
        # plus the in-period position of offset 23, i.e. 313; a reading
        # that drops one period's extent would give 303 instead, and the
        # enumeration oracle below pins 313.
        d = worked_descriptor()
        fill_counts(d)
        period = [off for off, ln in period_runs(d) for off in range(off, off + ln)]
        assert len(period) == 60
        two_more = period + [130 + o for o in period] + [260 + o for o in period]
        assert two_more[143] == 313
        assert absolute_offset(d, 143) == 313

    def test_strictly_increasing_and_periodic(self):
        d = worked_descriptor()
        fill_counts(d)
        vals = [absolute_offset(d, k) for k in range(60)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        for k in range(0, 130, 7):
            assert absolute_offset(d, k + 60) == absolute_offset(d, k) + 130


class TestEnumerateRuns:
    def test_contiguous_single_run(self):
        d, _ = build_descriptor(normalize(Contiguous(64, BYTE)))
        assert enumerate_runs(d, 0, 0, 64) == [ByteRun(0, 64)]

    def test_vector_runs(self):
        d, _ = build_descriptor(normalize(Vector(3, 2, 3, BYTE)))
        assert enumerate_runs(d, 0, 0, 6) == [ByteRun(0, 2), ByteRun(3, 2), ByteRun(6, 2)]

    def test_vector_runs_shifted_start(self):
        d, _ = build_descriptor(normalize(Vector(3, 2, 3, BYTE)))
        assert enumerate_runs(d, 0, 1, 3) == [ByteRun(1, 1), ByteRun(3, 2)]

    def test_disp_shifts_everything(self):
        d, _ = build_descriptor(normalize(Vector(2, 1, 2, BYTE)))
        assert enumerate_runs(d, 100, 0, 2) == [ByteRun(100, 1), ByteRun(102, 1)]

    def test_lengths_always_sum(self):
        d = worked_descriptor()
        fill_counts(d)
        for start in (0, 3, 59, 60, 61, 130):
            for length in (0, 1, 17, 60, 200):
                runs = enumerate_runs(d, 5, start, length)
                assert sum(r.length for r in runs) == length

    def test_period_tiling_coalesces(self):
        d, _ = build_descriptor(normalize(Contiguous(4, BYTE)))
        assert enumerate_runs(d, 0, 0, 12) == [ByteRun(0, 12)]


class TestCountAccessible:
    def test_clips_tail(self):
        d, _ = build_descriptor(normalize(Vector(3, 2, 3, BYTE)))
        fill_counts(d)
        # period: bytes 0,1,3,4,6,7 accessible within extent 8
        assert count_accessible(d, 0, 8) == 6
        assert count_accessible(d, 0, 7) == 5
        assert count_accessible(d, 0, 4) == 3
        assert count_accessible(d, 2, 4) == 2
        assert count_accessible(d, 9, 4) == 0


class TestUnitConversion:
    def test_exact(self):
        assert byte_to_etype(80, BaseType.DOUBLE) == 10
        assert byte_to_etype(0, BaseType.INT) == 0
        assert etype_to_byte(10, BaseType.DOUBLE) == 80

    def test_not_aligned(self):
        with pytest.raises(NotAligned):
            byte_to_etype(10, BaseType.INT)


@st.composite
def normalized_trees(draw):
    depth = draw(st.integers(1, 3))

    def build(d):
        if d == 0:
            return Base(draw(st.sampled_from([BaseType.BYTE, BaseType.SHORT, BaseType.INT])))
        kind = draw(st.sampled_from(["contiguous", "vector", "indexed", "leaf"]))
        if kind == "leaf":
            return Base(draw(st.sampled_from([BaseType.BYTE, BaseType.SHORT])))
        child = build(d - 1)
        if kind == "contiguous":
            return Contiguous(draw(st.integers(1, 6)), child)
        if kind == "vector":
            blocklen = draw(st.integers(1, 4))
            stride = draw(st.integers(blocklen, 8))
            return Vector(draw(st.integers(1, 6)), blocklen, stride, child)
        n = draw(st.integers(1, 3))
        blocklens = [draw(st.integers(1, 4)) for _ in range(n)]
        displs = []
        pos = 0
        for b in blocklens:
            displ = pos + draw(st.integers(0, 6))
            displs.append(displ)
            pos = displ + b
        return dt.Indexed(tuple(blocklens), tuple(displs), child)

    return normalize(build(depth))


class TestOracleEquivalence:
    @settings(max_examples=250, deadline=None)
    @given(normalized_trees())
    def test_runs_match_tree_expansion(self, t):
        offsets = tree_offsets(t)
        if len(offsets) > 4096:
            return
        d, contig = build_descriptor(t)
        runs = enumerate_runs(d, 0, 0, len(offsets))
        assert run_bytes(runs) == offsets
        assert contig == (offsets == list(range(len(offsets))))
        assert d.total_extent == dt.extent(t)
        assert d.total_actual == len(offsets)

    @settings(max_examples=120, deadline=None)
    @given(normalized_trees(), st.integers(0, 300))
    def test_absolute_offset_matches_tiling(self, t, k):
        d, _ = build_descriptor(t)
        offsets = tree_offsets(t)
        if not offsets:
            return
        period, idx = divmod(k, len(offsets))
        assert absolute_offset(d, k) == period * dt.extent(t) + offsets[idx]

    def test_randomized_window_slices(self):
        rng = random.Random(3)
        for _ in range(60):
            blocklen = rng.randint(1, 4)
            t = normalize(Vector(rng.randint(1, 5), blocklen, blocklen + rng.randint(0, 5), BYTE))
            d, _ = build_descriptor(t)
            limit = rng.randint(1, 200)
            all_offsets = tiled_offsets(t, 0, limit)
            if not all_offsets:
                continue
            start = rng.randint(0, len(all_offsets) - 1)
            length = rng.randint(0, len(all_offsets) - start)
            runs = enumerate_runs(d, 0, start, length)
            assert run_bytes(runs) == all_offsets[start:start + length]


class TestSerialization:
    def test_roundtrip_worked(self):
        d = worked_descriptor()
        fill_counts(d)
        blob = pack_descriptor(d)
        back = unpack_descriptor(blob)
        assert back.total_extent == 130 and back.total_actual == 60
        assert absolute_offset(back, 23) == 53

    @settings(max_examples=80, deadline=None)
    @given(normalized_trees())
    def test_roundtrip_random(self, t):
        d, _ = build_descriptor(t)
        back = unpack_descriptor(pack_descriptor(d))
        assert (back.total_extent, back.total_actual) == (d.total_extent, d.total_actual)
        n = min(d.total_actual, 64)
        assert [absolute_offset(back, k) for k in range(n)] == [
            absolute_offset(d, k) for k in range(n)
        ]
