"""Recursive derived-datatype trees over fixed-size base elements.

A datatype tree describes a (possibly holey) byte access template.  The
user-facing constructors mirror the classic message-passing set
(contiguous / vector / hvector / indexed / hindexed / struct) plus the
array constructors (subarray, darray).  ``normalize`` rewrites every tree
into the closed kernel {Contiguous, HVector, HIndexed, Struct, Resized,
Base}: element-unit forms become byte-unit forms, trivially contiguous
vectors collapse, and subarray/darray lower to vector/struct compositions
whose period is pinned to the full array extent via ``Resized``.

Also provides the canonical text form used by the CLI, e.g.::

    vector(3,2,3;int)
    darray(size=4,rank=2,[9,10],[cyclic(2),cyclic(2)],[2,2],C;int)
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from math import prod


class DatatypeError(Exception):
    """Base class for datatype errors."""


class InvalidArguments(DatatypeError):
    pass


class RankOutOfRange(DatatypeError):
    pass


class HeterogeneousLeaves(DatatypeError):
    """Struct blocks bottom out in different base types."""


class BaseType(enum.Enum):
    """Base element kinds with fixed byte extents."""

    BYTE = ("byte", 1)
    CHAR = ("char", 1)
    SHORT = ("short", 2)
    USHORT = ("ushort", 2)
    INT = ("int", 4)
    UINT = ("uint", 4)
    FLOAT = ("float", 4)
    LONG = ("long", 8)
    ULONG = ("ulong", 8)
    DOUBLE = ("double", 8)

    def __init__(self, label: str, extent: int):
        self.label = label
        self.extent = extent

    @classmethod
    def from_label(cls, label: str) -> "BaseType":
        for bt in cls:
            if bt.label == label:
                return bt
        raise InvalidArguments(f"unknown base type {label!r}")


class Order(enum.Enum):
    C = "C"
    FORTRAN = "F"


class Distribution(enum.Enum):
    """Per-dimension distribution kind for darray."""

    NONE = "none"
    BLOCK = "block"
    CYCLIC = "cyclic"


class _DefaultDarg(enum.Enum):
    DEFAULT = enum.auto()


#: Sentinel for "use the default distribution argument".
DEFAULT_DARG = _DefaultDarg.DEFAULT

Darg = int | _DefaultDarg


class Node:
    """Common base for datatype tree nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class Base(Node):
    base: BaseType


@dataclass(frozen=True)
class Contiguous(Node):
    count: int
    child: "Node"


@dataclass(frozen=True)
class Vector(Node):
    count: int
    blocklen: int
    stride: int  # in elements of child
    child: "Node"


@dataclass(frozen=True)
class HVector(Node):
    count: int
    blocklen: int
    stride: int  # in bytes
    child: "Node"


@dataclass(frozen=True)
class Indexed(Node):
    blocklens: tuple[int, ...]
    displs: tuple[int, ...]  # in elements of child
    child: "Node"


@dataclass(frozen=True)
class HIndexed(Node):
    blocklens: tuple[int, ...]
    displs: tuple[int, ...]  # in bytes
    child: "Node"


@dataclass(frozen=True)
class Struct(Node):
    blocklens: tuple[int, ...]
    displs: tuple[int, ...]  # in bytes
    children: tuple["Node", ...]


@dataclass(frozen=True)
class Subarray(Node):
    sizes: tuple[int, ...]
    subsizes: tuple[int, ...]
    starts: tuple[int, ...]
    order: Order
    child: "Node"


@dataclass(frozen=True)
class Darray(Node):
    size: int
    rank: int
    gsizes: tuple[int, ...]
    distribs: tuple[Distribution, ...]
    dargs: tuple[Darg, ...]
    psizes: tuple[int, ...]
    order: Order
    child: "Node"


@dataclass(frozen=True)
class Resized(Node):
    """Internal node pinning a pattern at byte ``lb`` inside a fixed extent.

    Produced by normalize for subarray/darray so that tiling one period
    advances exactly one full array, holes included.
    """

    child: "Node"
    lb: int
    extent: int


def extent(t: Node) -> int:
    """Span in bytes from the first to one past the last byte of the type."""
    if isinstance(t, Base):
        return t.base.extent
    if isinstance(t, Contiguous):
        return t.count * extent(t.child)
    if isinstance(t, Vector):
        if t.count == 0:
            return 0
        return ((t.count - 1) * t.stride + t.blocklen) * extent(t.child)
    if isinstance(t, HVector):
        if t.count == 0:
            return 0
        return (t.count - 1) * t.stride + t.blocklen * extent(t.child)
    if isinstance(t, Indexed):
        ext = extent(t.child)
        return max((d + b) * ext for d, b in zip(t.displs, t.blocklens)) if t.blocklens else 0
    if isinstance(t, HIndexed):
        ext = extent(t.child)
        return max(d + b * ext for d, b in zip(t.displs, t.blocklens)) if t.blocklens else 0
    if isinstance(t, Struct):
        ends = [
            d + b * extent(c)
            for d, b, c in zip(t.displs, t.blocklens, t.children)
            if not _is_empty(c)
        ]
        return max(ends) if ends else 0
    if isinstance(t, Subarray):
        return prod(t.sizes) * extent(t.child)
    if isinstance(t, Darray):
        return prod(t.gsizes) * extent(t.child)
    if isinstance(t, Resized):
        return t.extent
    raise InvalidArguments(f"unknown node {t!r}")


def _is_empty(t: Node) -> bool:
    """True for patterns that select no bytes at all (empty darray ranks)."""
    if isinstance(t, (Contiguous, Vector, HVector)):
        return t.count == 0 or getattr(t, "blocklen", 1) == 0 or _is_empty(t.child)
    if isinstance(t, Resized):
        return _is_empty(t.child)
    return False


def element_type_of(t: Node, require_homogeneous: bool = False) -> BaseType:
    """Base type at the leaves; for Struct, the first block's chain.

    With ``require_homogeneous`` a Struct whose blocks bottom out in
    different base types raises HeterogeneousLeaves.
    """
    if isinstance(t, Base):
        return t.base
    if isinstance(t, (Contiguous, Vector, HVector, Indexed, HIndexed, Subarray, Darray, Resized)):
        return element_type_of(t.child, require_homogeneous)
    if isinstance(t, Struct):
        leaves = [element_type_of(c, require_homogeneous) for c in t.children]
        if require_homogeneous and len(set(leaves)) > 1:
            raise HeterogeneousLeaves(f"struct leaves disagree: {[b.label for b in leaves]}")
        return leaves[0]
    raise InvalidArguments(f"unknown node {t!r}")


def _positive(name: str, values) -> None:
    for v in values:
        if v < 1:
            raise InvalidArguments(f"{name} must be >= 1, got {v}")


def _validate(t: Node) -> None:
    if isinstance(t, Contiguous):
        if t.count < 0:
            raise InvalidArguments(f"count must be >= 0, got {t.count}")
    elif isinstance(t, (Vector, HVector)):
        # count 0 only arises internally for empty darray ranks
        if t.count < 0 or t.blocklen < 1:
            raise InvalidArguments(f"bad vector arguments {t}")
    elif isinstance(t, (Indexed, HIndexed)):
        if len(t.blocklens) != len(t.displs) or not t.blocklens:
            raise InvalidArguments("blocklens and displs must be non-empty, equal length")
        _positive("blocklens", t.blocklens)
    elif isinstance(t, Struct):
        if not (len(t.blocklens) == len(t.displs) == len(t.children)) or not t.children:
            raise InvalidArguments("struct arrays must be non-empty, equal length")
        _positive("blocklens", t.blocklens)
    elif isinstance(t, Subarray):
        n = len(t.sizes)
        if n < 1 or len(t.subsizes) != n or len(t.starts) != n:
            raise InvalidArguments("subarray dimension arrays disagree")
        _positive("sizes", t.sizes)
        _positive("subsizes", t.subsizes)
        for sz, sub, st in zip(t.sizes, t.subsizes, t.starts):
            if sub > sz:
                raise InvalidArguments(f"subsize {sub} exceeds size {sz}")
            if st < 0 or st > sz - sub:
                raise InvalidArguments(f"start {st} outside [0, {sz - sub}]")
    elif isinstance(t, Darray):
        n = len(t.gsizes)
        if n < 1 or not (len(t.distribs) == len(t.dargs) == len(t.psizes) == n):
            raise InvalidArguments("darray dimension arrays disagree")
        _positive("gsizes", t.gsizes)
        _positive("psizes", t.psizes)
        if prod(t.psizes) != t.size:
            raise InvalidArguments(f"product of psizes {t.psizes} must equal size {t.size}")
        if not 0 <= t.rank < t.size:
            raise RankOutOfRange(f"rank {t.rank} outside process group of {t.size}")
        for g, dist, darg, p in zip(t.gsizes, t.distribs, t.dargs, t.psizes):
            if dist is Distribution.NONE:
                continue
            if isinstance(darg, int):
                if darg < 1:
                    raise InvalidArguments(f"distribution argument must be >= 1, got {darg}")
                # block placement is single-shot, so the blocks must cover the
                # dimension; cyclic blocks wrap and carry no such constraint
                if dist is Distribution.BLOCK and darg * p < g:
                    raise InvalidArguments(
                        f"distribution argument {darg} * grid {p} must cover dimension {g}"
                    )


def grid_coords(rank: int, psizes: tuple[int, ...] | list[int]) -> list[int]:
    """Map a process rank onto grid coordinates, first dimension slowest."""
    total = prod(psizes)
    if not 0 <= rank < total:
        raise RankOutOfRange(f"rank {rank} outside grid of {total}")
    coords = []
    procs = total
    tmp = rank
    for p in psizes:
        procs //= p
        coords.append(tmp // procs)
        tmp %= procs
    return coords


def darray_block_params(
    kind: Distribution,
    gsize: int,
    darg: Darg,
    nprocs: int,
    coord: int,
) -> dict:
    """Per-rank block bookkeeping for one darray dimension.

    Returns count (regular full-size blocks), last_blksize (size of the
    trailing irregular block, or 0 when the rank has none), my_size
    (elements assigned to the rank) and start_offset (element offset of
    the rank's first block within the dimension).
    """
    if not 0 <= coord < nprocs:
        raise RankOutOfRange(f"coordinate {coord} outside dimension of {nprocs}")
    if kind is Distribution.NONE:
        return {"count": 1, "last_blksize": 0, "my_size": gsize, "start_offset": 0}
    if kind is Distribution.BLOCK:
        blksize = (gsize + nprocs - 1) // nprocs if darg is DEFAULT_DARG else darg
        my_size = max(0, min(blksize, gsize - blksize * coord))
        return {
            "count": 1 if my_size else 0,
            "last_blksize": 0,
            "my_size": my_size,
            "start_offset": blksize * coord,
        }
    blksize = 1 if darg is DEFAULT_DARG else darg
    nblocks = (gsize + blksize - 1) // blksize
    count = nblocks // nprocs
    left_over = nblocks - count * nprocs
    if coord < left_over:
        count += 1
    last_blksize = 0
    remaining = gsize % (nprocs * blksize)
    if remaining != 0:
        last = remaining - blksize * coord
        if 0 < last < blksize:
            count -= 1
            last_blksize = last
    return {
        "count": count,
        "last_blksize": last_blksize,
        "my_size": count * blksize + last_blksize,
        "start_offset": blksize * coord,
    }


def _lower_subarray(t: Subarray) -> Node:
    if t.order is Order.FORTRAN:
        rev = Subarray(t.sizes[::-1], t.subsizes[::-1], t.starts[::-1], Order.C, t.child)
        return _lower_subarray(rev)
    child = t.child
    ext = extent(child)
    ndims = len(t.sizes)
    if ndims == 1:
        core: Node = Contiguous(t.subsizes[0], child)
    else:
        core = HVector(t.subsizes[-2], t.subsizes[-1], t.sizes[-1] * ext, child)
        size = t.sizes[-1] * ext
        for i in range(ndims - 3, -1, -1):
            size *= t.sizes[i + 1]
            core = HVector(t.subsizes[i], 1, size, core)
    disp = t.starts[-1]
    mult = 1
    for i in range(ndims - 2, -1, -1):
        mult *= t.sizes[i + 1]
        disp += mult * t.starts[i]
    return Resized(core, disp * ext, prod(t.sizes) * ext)


def _cyclic_dim(
    gsize: int,
    darg: Darg,
    nprocs: int,
    coord: int,
    inner_elems: int,
    base_ext: int,
    type_old: Node,
) -> Node:
    """One cyclic-distributed dimension over the already built inner type.

    ``inner_elems`` is the number of base elements spanned by one step in
    this dimension (product of the faster-varying global sizes).
    """
    params = darray_block_params(Distribution.CYCLIC, gsize, darg, nprocs, coord)
    blksize = 1 if darg is DEFAULT_DARG else darg
    count, last = params["count"], params["last_blksize"]
    sub_stride = base_ext * inner_elems
    stride = nprocs * blksize * sub_stride
    if inner_elems == 1:
        regular: Node = HVector(count, blksize, stride, type_old)
    else:
        sub_block = HVector(blksize, 1, sub_stride, type_old)
        regular = HVector(count, 1, stride, sub_block)
    if not last:
        return regular
    irregular: Node
    if inner_elems == 1:
        irregular = Contiguous(last, type_old)
    else:
        irregular = HVector(last, 1, sub_stride, type_old)
    if count == 0:
        # the partial block is the rank's first (and only) block
        return irregular
    # the partial block follows the rank's regular blocks at the cyclic cadence
    return Struct((1, 1), (0, count * stride), (regular, irregular))


def _lower_darray(t: Darray) -> Node:
    coords = grid_coords(t.rank, t.psizes)
    if t.order is Order.FORTRAN:
        rev = Darray(
            t.size, t.rank, t.gsizes[::-1], t.distribs[::-1], t.dargs[::-1],
            t.psizes[::-1], Order.C, t.child,
        )
        # grid coordinates pair with the original dimension order
        return _lower_darray_c(rev, coords[::-1])
    return _lower_darray_c(t, coords)


def _lower_darray_c(t: Darray, coords: list[int]) -> Node:
    base_ext = extent(t.child)
    ndims = len(t.gsizes)
    type_old = t.child
    st_offsets = [0] * ndims
    for dim in range(ndims - 1, -1, -1):
        kind, darg, nprocs, coord = t.distribs[dim], t.dargs[dim], t.psizes[dim], coords[dim]
        inner_elems = prod(t.gsizes[dim + 1:]) if dim + 1 < ndims else 1
        if kind is Distribution.NONE:
            kind, darg, nprocs, coord = Distribution.BLOCK, DEFAULT_DARG, 1, 0
        if kind is Distribution.BLOCK:
            params = darray_block_params(kind, t.gsizes[dim], darg, nprocs, coord)
            my_size = params["my_size"]
            if dim == ndims - 1:
                type_new: Node = Contiguous(my_size, type_old)
            else:
                type_new = HVector(my_size, 1, base_ext * inner_elems, type_old)
            st_offsets[dim] = params["start_offset"]
        else:
            type_new = _cyclic_dim(
                t.gsizes[dim], darg, nprocs, coord, inner_elems, base_ext, type_old
            )
            st_offsets[dim] = darray_block_params(
                kind, t.gsizes[dim], darg, nprocs, coord
            )["start_offset"]
        type_old = type_new
    disp = st_offsets[ndims - 1]
    mult = 1
    for i in range(ndims - 2, -1, -1):
        mult *= t.gsizes[i + 1]
        disp += mult * st_offsets[i]
    return Resized(type_old, disp * base_ext, prod(t.gsizes) * base_ext)


def normalize(t: Node) -> Node:
    """Rewrite to the byte-unit kernel, collapsing contiguous patterns.

    The enumerated absolute byte-offset sequence of the type is preserved
    exactly; extent is preserved for all user constructors.
    """
    _validate(t)
    if isinstance(t, Base):
        return t
    if isinstance(t, Contiguous):
        return Contiguous(t.count, normalize(t.child))
    if isinstance(t, Vector):
        child = normalize(t.child)
        if t.blocklen == t.stride or t.count == 1:
            return Contiguous(t.count * t.blocklen, child)
        return HVector(t.count, t.blocklen, t.stride * extent(child), child)
    if isinstance(t, HVector):
        child = normalize(t.child)
        if t.count == 1 or t.stride == t.blocklen * extent(child):
            return Contiguous(t.count * t.blocklen, child)
        return HVector(t.count, t.blocklen, t.stride, child)
    if isinstance(t, Indexed):
        child = normalize(t.child)
        ext = extent(child)
        return HIndexed(t.blocklens, tuple(d * ext for d in t.displs), child)
    if isinstance(t, HIndexed):
        return HIndexed(t.blocklens, t.displs, normalize(t.child))
    if isinstance(t, Struct):
        return Struct(t.blocklens, t.displs, tuple(normalize(c) for c in t.children))
    if isinstance(t, Subarray):
        lowered = _lower_subarray(Subarray(t.sizes, t.subsizes, t.starts, t.order, normalize(t.child)))
        return _norm_internal(lowered)
    if isinstance(t, Darray):
        lowered = _lower_darray(
            Darray(t.size, t.rank, t.gsizes, t.distribs, t.dargs, t.psizes, t.order, normalize(t.child))
        )
        return _norm_internal(lowered)
    if isinstance(t, Resized):
        return Resized(_norm_internal(t.child), t.lb, t.extent)
    raise InvalidArguments(f"unknown node {t!r}")


def _norm_internal(t: Node) -> Node:
    """Collapse trivial vectors in lowered trees without re-validation."""
    if isinstance(t, Resized):
        return Resized(_norm_internal(t.child), t.lb, t.extent)
    if isinstance(t, HVector):
        child = _norm_internal(t.child)
        if t.count == 1 or (t.count > 0 and t.stride == t.blocklen * extent(child)):
            return Contiguous(t.count * t.blocklen, child)
        return HVector(t.count, t.blocklen, t.stride, child)
    if isinstance(t, Contiguous):
        return Contiguous(t.count, _norm_internal(t.child))
    if isinstance(t, Struct):
        return Struct(t.blocklens, t.displs, tuple(_norm_internal(c) for c in t.children))
    return t


# ---------------------------------------------------------------------------
# canonical text form


_NAME_RE = re.compile(r"[a-z]+")


def format_datatype(t: Node) -> str:
    if isinstance(t, Base):
        return t.base.label
    if isinstance(t, Contiguous):
        return f"contiguous({t.count};{format_datatype(t.child)})"
    if isinstance(t, Vector):
        return f"vector({t.count},{t.blocklen},{t.stride};{format_datatype(t.child)})"
    if isinstance(t, HVector):
        return f"hvector({t.count},{t.blocklen},{t.stride};{format_datatype(t.child)})"
    if isinstance(t, Indexed):
        return (
            f"indexed([{','.join(map(str, t.blocklens))}],"
            f"[{','.join(map(str, t.displs))}];{format_datatype(t.child)})"
        )
    if isinstance(t, HIndexed):
        return (
            f"hindexed([{','.join(map(str, t.blocklens))}],"
            f"[{','.join(map(str, t.displs))}];{format_datatype(t.child)})"
        )
    if isinstance(t, Struct):
        return (
            f"struct([{','.join(map(str, t.blocklens))}],"
            f"[{','.join(map(str, t.displs))}];"
            f"[{','.join(format_datatype(c) for c in t.children)}])"
        )
    if isinstance(t, Subarray):
        return (
            f"subarray([{','.join(map(str, t.sizes))}],"
            f"[{','.join(map(str, t.subsizes))}],"
            f"[{','.join(map(str, t.starts))}],"
            f"{t.order.value};{format_datatype(t.child)})"
        )
    if isinstance(t, Darray):
        dists = []
        for dist, darg in zip(t.distribs, t.dargs):
            if dist is Distribution.NONE:
                dists.append("none")
            elif darg is DEFAULT_DARG:
                dists.append(dist.value)
            else:
                dists.append(f"{dist.value}({darg})")
        return (
            f"darray(size={t.size},rank={t.rank},"
            f"[{','.join(map(str, t.gsizes))}],"
            f"[{','.join(dists)}],"
            f"[{','.join(map(str, t.psizes))}],"
            f"{t.order.value};{format_datatype(t.child)})"
        )
    raise InvalidArguments(f"cannot format {t!r}")


class _Parser:
    def __init__(self, text: str):
        self.text = text.replace(" ", "")
        self.pos = 0

    def error(self, what: str) -> InvalidArguments:
        return InvalidArguments(f"{what} at position {self.pos} in {self.text!r}")

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def name(self) -> str:
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            raise self.error("expected a name")
        self.pos = m.end()
        return m.group(0)

    def integer(self) -> int:
        m = re.compile(r"-?\d+").match(self.text, self.pos)
        if not m:
            raise self.error("expected an integer")
        self.pos = m.end()
        return int(m.group(0))

    def int_list(self) -> tuple[int, ...]:
        self.expect("[")
        vals = [self.integer()]
        while self.peek() == ",":
            self.pos += 1
            vals.append(self.integer())
        self.expect("]")
        return tuple(vals)

    def order(self) -> Order:
        ch = self.peek()
        if ch not in ("C", "F"):
            raise self.error("expected order C or F")
        self.pos += 1
        return Order.C if ch == "C" else Order.FORTRAN

    def dist_list(self) -> tuple[tuple[Distribution, Darg], ...]:
        self.expect("[")
        out = [self.dist()]
        while self.peek() == ",":
            self.pos += 1
            out.append(self.dist())
        self.expect("]")
        return tuple(out)

    def dist(self) -> tuple[Distribution, Darg]:
        name = self.name()
        try:
            kind = Distribution(name)
        except ValueError:
            raise self.error(f"unknown distribution {name!r}") from None
        darg: Darg = DEFAULT_DARG
        if self.peek() == "(":
            self.pos += 1
            darg = self.integer()
            self.expect(")")
        return kind, darg

    def node(self) -> Node:
        name = self.name()
        if self.peek() != "(":
            return Base(BaseType.from_label(name))
        self.expect("(")
        t = self._construct(name)
        self.expect(")")
        return t

    def _construct(self, name: str) -> Node:
        if name == "contiguous":
            count = self.integer()
            self.expect(";")
            return Contiguous(count, self.node())
        if name in ("vector", "hvector"):
            count = self.integer()
            self.expect(",")
            blocklen = self.integer()
            self.expect(",")
            stride = self.integer()
            self.expect(";")
            cls = Vector if name == "vector" else HVector
            return cls(count, blocklen, stride, self.node())
        if name in ("indexed", "hindexed"):
            blocklens = self.int_list()
            self.expect(",")
            displs = self.int_list()
            self.expect(";")
            cls = Indexed if name == "indexed" else HIndexed
            return cls(blocklens, displs, self.node())
        if name == "struct":
            blocklens = self.int_list()
            self.expect(",")
            displs = self.int_list()
            self.expect(";")
            self.expect("[")
            children = [self.node()]
            while self.peek() == ",":
                self.pos += 1
                children.append(self.node())
            self.expect("]")
            return Struct(blocklens, displs, tuple(children))
        if name == "subarray":
            sizes = self.int_list()
            self.expect(",")
            subsizes = self.int_list()
            self.expect(",")
            starts = self.int_list()
            self.expect(",")
            order = self.order()
            self.expect(";")
            return Subarray(sizes, subsizes, starts, order, self.node())
        if name == "darray":
            for key in ("size",):
                if self.name() != key:
                    raise self.error(f"expected {key}=")
                self.expect("=")
            size = self.integer()
            self.expect(",")
            if self.name() != "rank":
                raise self.error("expected rank=")
            self.expect("=")
            rank = self.integer()
            self.expect(",")
            gsizes = self.int_list()
            self.expect(",")
            dists = self.dist_list()
            self.expect(",")
            psizes = self.int_list()
            self.expect(",")
            order = self.order()
            self.expect(";")
            child = self.node()
            return Darray(
                size, rank, gsizes,
                tuple(d for d, _ in dists), tuple(a for _, a in dists),
                psizes, order, child,
            )
        raise self.error(f"unknown constructor {name!r}")


def parse_datatype(text: str) -> Node:
    """Parse the canonical text form; inverse of format_datatype."""
    p = _Parser(text)
    t = p.node()
    if p.pos != len(p.text):
        raise p.error("trailing input")
    _validate(t)
    return t
