"""Recursive strided-access descriptors and byte-run enumeration.

An AccessDesc is a list of basic blocks plus a trailing ``skip``.  Each
block skips ``offset`` bytes, then ``repeat`` times transfers ``count``
units (bytes at the leaf, subtype instances otherwise) and advances by
``stride`` bytes between repetitions; the trailing stride of the last
repetition is not consumed.  One full pass over all blocks plus ``skip``
is one period of the view; views tile periodically over a file.

``fill_counts`` computes, bottom up, the byte extent of one period
(holes included) and the accessible byte count (holes excluded).
``absolute_offset`` translates a view-relative byte offset into the
absolute byte offset, treating the view as circular: offsets past one
period's accessible bytes wrap, adding a full period extent per wrap.
``enumerate_runs`` materializes the contiguous byte runs backing a view
range, which is what the storage servers scatter/gather against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import datatypes as dt


class ViewError(Exception):
    pass


class EtypeMismatch(ViewError):
    """Element type disagrees with the leaf type of the view pattern."""


class NotAligned(ViewError):
    """Byte count is not a multiple of the element extent."""


@dataclass
class BasicBlock:
    offset: int
    repeat: int
    count: int
    stride: int
    subtype: "AccessDesc | None" = None
    # filled by fill_counts: byte extent / accessible bytes of one subtype
    # instance (1 for leaf blocks, where the unit is the byte itself)
    sub_count: int = 1
    sub_actual: int = 1

    def block_extent(self) -> int:
        if self.repeat == 0 or self.count == 0:
            return self.offset
        return (
            self.offset
            + self.repeat * (self.count * self.sub_count + self.stride)
            - self.stride
        )

    def block_actual(self) -> int:
        return self.repeat * self.count * self.sub_actual


@dataclass
class AccessDesc:
    blocks: list[BasicBlock] = field(default_factory=list)
    skip: int = 0
    # period totals, populated by fill_counts
    total_extent: int = 0
    total_actual: int = 0
    _filled: bool = False

    @property
    def no_blocks(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class ByteRun:
    file_offset: int
    length: int


def fill_counts(d: AccessDesc) -> tuple[int, int]:
    """Populate per-block and per-descriptor extent/actual totals.

    Returns (total_extent, total_actual) for one period.  The extent
    includes inter-repetition strides and per-level skips but never a
    trailing stride.
    """
    ext = 0
    act = 0
    for b in d.blocks:
        if b.repeat == 1 and b.stride != 0:
            raise ViewError("stride must be zero when repeat is one")
        if b.subtype is not None:
            b.sub_count, b.sub_actual = fill_counts(b.subtype)
        else:
            b.sub_count = b.sub_actual = 1
        ext += b.block_extent()
        act += b.block_actual()
    ext += d.skip
    d.total_extent = ext
    d.total_actual = act
    d._filled = True
    return ext, act


def _require_filled(d: AccessDesc) -> None:
    if not d._filled:
        raise ViewError("fill_counts must run before using descriptor totals")


def absolute_offset(d: AccessDesc, view_offset: int) -> int:
    """Translate an accessible-byte offset into an absolute byte offset.

    Total on all view_offset >= 0 by circularity: each full period of
    accessible bytes adds one period extent.
    """
    _require_filled(d)
    if view_offset < 0:
        raise ViewError("view offset must be >= 0")
    if d.total_actual == 0:
        raise ViewError("view selects no bytes")
    wraps, rem = divmod(view_offset, d.total_actual)
    return wraps * d.total_extent + _descend(d, rem)


def _descend(d: AccessDesc, rem: int) -> int:
    base = 0
    for b in d.blocks:
        ba = b.block_actual()
        if rem >= ba:
            rem -= ba
            base += b.block_extent()
            continue
        instance, inner = divmod(rem, b.sub_actual)
        pos = base + b.offset + instance * b.sub_count + (instance // b.count) * b.stride
        if b.subtype is not None:
            return pos + _descend(b.subtype, inner)
        return pos
    raise ViewError("offset beyond period accessible bytes")  # unreachable


def period_runs(d: AccessDesc) -> list[tuple[int, int]]:
    """Contiguous (offset, length) runs of one period, in view order."""
    _require_filled(d)
    runs: list[tuple[int, int]] = []

    def emit(off: int, length: int) -> None:
        if length <= 0:
            return
        if runs and runs[-1][0] + runs[-1][1] == off:
            prev = runs[-1]
            runs[-1] = (prev[0], prev[1] + length)
        else:
            runs.append((off, length))

    def walk(desc: AccessDesc, base: int) -> None:
        for b in desc.blocks:
            pos = base + b.offset
            for rep in range(b.repeat):
                if b.subtype is None:
                    emit(pos, b.count)
                    pos += b.count
                else:
                    for _ in range(b.count):
                        walk(b.subtype, pos)
                        pos += b.sub_count
                if rep < b.repeat - 1:
                    pos += b.stride
            base += b.block_extent()

    walk(d, 0)
    return runs


def enumerate_runs(d: AccessDesc, disp: int, view_start: int, length: int) -> list[ByteRun]:
    """Byte runs covering ``length`` accessible bytes from ``view_start``.

    Every run is shifted by the global displacement ``disp``; adjacent
    runs are coalesced.  The run lengths always sum to ``length``.
    """
    _require_filled(d)
    if length < 0:
        raise ViewError("length must be >= 0")
    if length == 0:
        return []
    if d.total_actual == 0:
        raise ViewError("view selects no bytes")
    runs = period_runs(d)
    out: list[ByteRun] = []

    def emit(off: int, ln: int) -> None:
        if out and out[-1].file_offset + out[-1].length == off:
            out[-1] = ByteRun(out[-1].file_offset, out[-1].length + ln)
        else:
            out.append(ByteRun(off, ln))

    period, pos = divmod(view_start, d.total_actual)
    remaining = length
    while remaining > 0:
        base = disp + period * d.total_extent
        covered = 0
        for off, ln in runs:
            if pos >= covered + ln:
                covered += ln
                continue
            inner = pos - covered
            take = min(ln - inner, remaining)
            emit(base + off + inner, take)
            pos += take
            remaining -= take
            covered += ln
            if remaining == 0:
                break
        if remaining > 0:
            period += 1
            pos = 0
    return out


def count_accessible(d: AccessDesc, disp: int, file_size: int) -> int:
    """Accessible view bytes whose absolute offset falls inside the file."""
    _require_filled(d)
    if d.total_actual == 0 or file_size <= disp:
        return 0
    limit = file_size - disp
    full, rem_bytes = divmod(limit, d.total_extent)
    n = full * d.total_actual
    # count accessible bytes of the partial trailing period
    for off, ln in period_runs(d):
        if off >= rem_bytes:
            break
        n += min(ln, rem_bytes - off)
    return n


def build_descriptor(t: dt.Node, etype: dt.BaseType | None = None) -> tuple[AccessDesc, bool]:
    """Map a normalized datatype tree onto an access descriptor.

    Returns the filled descriptor and a flag that is true iff the
    flattened pattern has no holes.  When ``etype`` is given it must equal
    the leaf type of the tree.
    """
    if etype is not None and dt.element_type_of(t) is not etype:
        raise EtypeMismatch(
            f"element type {etype.label} does not match view leaves "
            f"{dt.element_type_of(t).label}"
        )
    d = _build(t)
    ext, act = fill_counts(d)
    return d, ext == act


def _is_basic(t: dt.Node) -> bool:
    return isinstance(t, dt.Base)


def _leaf_count(n: int, child: dt.Node) -> tuple[int, AccessDesc | None]:
    """Unit count and subtype for a block of n child instances."""
    if _is_basic(child):
        return n * dt.extent(child), None
    return n, _build(child)


def _build(t: dt.Node) -> AccessDesc:
    if isinstance(t, dt.Base):
        return AccessDesc([BasicBlock(0, 1, t.base.extent, 0)])
    if isinstance(t, dt.Contiguous):
        count, sub = _leaf_count(t.count, t.child)
        return AccessDesc([BasicBlock(0, 1, count, 0, sub)])
    if isinstance(t, dt.HVector):
        count, sub = _leaf_count(t.blocklen, t.child)
        gap = t.stride - t.blocklen * dt.extent(t.child)
        if t.count <= 1:
            gap = 0
        if gap < 0:
            raise ViewError(f"overlapping vector stride {t.stride}")
        return AccessDesc([BasicBlock(0, t.count, count, gap, sub)])
    if isinstance(t, dt.HIndexed):
        ext = dt.extent(t.child)
        blocks = []
        for i, (bl, displ) in enumerate(zip(t.blocklens, t.displs)):
            count, sub = _leaf_count(bl, t.child)
            if i == 0:
                offset = displ
            else:
                offset = displ - t.blocklens[i - 1] * ext - t.displs[i - 1]
            if offset < 0:
                raise ViewError("indexed displacements must be increasing and disjoint")
            blocks.append(BasicBlock(offset, 1, count, 0, sub))
        return AccessDesc(blocks)
    if isinstance(t, dt.Struct):
        blocks = []
        pos = 0
        for bl, displ, child in zip(t.blocklens, t.displs, t.children):
            if dt._is_empty(child):
                continue
            n, sub = _leaf_count(bl, child)
            offset = displ - pos
            if offset < 0:
                raise ViewError("struct displacements must be increasing and disjoint")
            blocks.append(BasicBlock(offset, 1, n, 0, sub))
            pos = displ + bl * dt.extent(child)
        if not blocks:
            return AccessDesc([])
        return AccessDesc(blocks)
    if isinstance(t, dt.Resized):
        inner = _build(t.child)
        fill_counts(inner)
        pattern_end = t.lb + inner.total_extent
        if pattern_end > t.extent:
            raise ViewError(f"pattern of {pattern_end} bytes exceeds pinned extent {t.extent}")
        if inner.blocks:
            inner.blocks[0].offset += t.lb
        inner.skip = t.extent - pattern_end + inner.skip
        return AccessDesc(inner.blocks, inner.skip)
    raise ViewError(f"tree must be normalized before descriptor construction: {t!r}")


def byte_to_etype(n: int, et: dt.BaseType) -> int:
    """Exact conversion of a byte count into element units."""
    if n % et.extent:
        raise NotAligned(f"{n} bytes is not a multiple of {et.label} extent {et.extent}")
    return n // et.extent


def etype_to_byte(n: int, et: dt.BaseType) -> int:
    return n * et.extent


# ---------------------------------------------------------------------------
# canonical binary form (embedded in view-setting messages)
#
# depth first; per descriptor: u32 no_blocks, u64 skip; per block five u64
# fields (offset, repeat, count, stride, reserved) plus a u8 subtype
# presence flag, the subtype following immediately when present.

_DESC_HEAD = struct.Struct("<Iq")
_BLOCK = struct.Struct("<5qB")


def pack_descriptor(d: AccessDesc) -> bytes:
    out = bytearray(_DESC_HEAD.pack(len(d.blocks), d.skip))
    for b in d.blocks:
        out += _BLOCK.pack(b.offset, b.repeat, b.count, b.stride, 0, 1 if b.subtype else 0)
        if b.subtype is not None:
            out += pack_descriptor(b.subtype)
    return bytes(out)


def unpack_descriptor(buf: bytes) -> AccessDesc:
    d, used = _unpack_at(buf, 0)
    if used != len(buf):
        raise ViewError(f"trailing bytes after descriptor: {len(buf) - used}")
    fill_counts(d)
    return d


def _unpack_at(buf: bytes, pos: int) -> tuple[AccessDesc, int]:
    try:
        nblocks, skip = _DESC_HEAD.unpack_from(buf, pos)
    except struct.error as exc:
        raise ViewError(f"truncated descriptor: {exc}") from None
    pos += _DESC_HEAD.size
    blocks = []
    for _ in range(nblocks):
        try:
            offset, repeat, count, stride, _, has_sub = _BLOCK.unpack_from(buf, pos)
        except struct.error as exc:
            raise ViewError(f"truncated descriptor block: {exc}") from None
        pos += _BLOCK.size
        sub = None
        if has_sub:
            sub, pos = _unpack_at(buf, pos)
        blocks.append(BasicBlock(offset, repeat, count, stride, sub))
    return AccessDesc(blocks), pos
