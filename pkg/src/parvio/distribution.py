"""Compiler-facing distribution layer: runtime descriptors to access descriptors.

A runtime descriptor arrives from the compiler as a flat integer sequence:

    [a, b_1..b_a, c, d, e, f_11 f_12 f_13 f_14, ..., f_e1 f_e2 f_e3 f_e4]

where ``a`` is the processor grid rank, ``b_i`` the grid extent per
dimension, ``c`` an opaque element type code, ``d`` the element size in
bytes, ``e`` the number of data dimensions and each per-dimension group
holds (global length, local length, distribution kind, distribution
argument).  Dimension 1 is stored first and varies fastest in the file
(column-major array files); descriptors are built outermost dimension
first, so the dimension-e descriptor sits at the root and dimension 1 at
the leaves.

Supported distribution kinds are no distribution, BLOCK(n) and CYCLIC(n);
generic-block and indirect distributions are rejected.  The local length
carried by the descriptor is re-derived from the distribution and any
disagreement is a hard error: a silently wrong local length corrupts the
layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

from .viewdesc import AccessDesc, BasicBlock, enumerate_runs, fill_counts


class DistributionError(Exception):
    pass


class MalformedDescriptor(DistributionError):
    pass


class RankOutOfRange(DistributionError):
    pass


class UnsupportedDistribution(DistributionError):
    pass


DIST_NONE = 0
DIST_BLOCK = 1
DIST_CYCLIC = 2
DIST_GEN_BLOCK = 3
DIST_INDIRECT = 4

_KIND_NAMES = {DIST_NONE: "none", DIST_BLOCK: "block", DIST_CYCLIC: "cyclic"}
_KIND_CODES = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class DimSpec:
    global_len: int
    local_len: int  # -1 when left to be derived
    dist_kind: int
    dist_arg: int


@dataclass(frozen=True)
class RuntimeDescriptor:
    grid_sizes: tuple[int, ...]
    elem_type_code: int
    elem_size: int
    dims: tuple[DimSpec, ...]

    @property
    def grid_ndims(self) -> int:
        return len(self.grid_sizes)

    @property
    def data_ndims(self) -> int:
        return len(self.dims)

    def nprocs(self) -> int:
        return prod(self.grid_sizes)

    def total_bytes(self) -> int:
        return prod(d.global_len for d in self.dims) * self.elem_size


@dataclass
class ProcessView:
    rank: int
    coords: tuple[int, ...]
    descriptor: AccessDesc
    total_bytes: int


@dataclass
class CoverReport:
    nbytes: int
    per_rank_bytes: dict[int, int]
    overlaps: list[int]
    gaps: list[int]

    @property
    def exact_partition(self) -> bool:
        return not self.overlaps and not self.gaps


def parse_runtime_descriptor(ints) -> RuntimeDescriptor:
    """Decode the flat integer layout; raises MalformedDescriptor."""
    seq = list(ints)
    if not seq or seq[0] < 1:
        raise MalformedDescriptor("missing processor grid dimension count")
    a = seq[0]
    head = a + 4
    if len(seq) < head:
        raise MalformedDescriptor(f"descriptor header needs {head} integers, got {len(seq)}")
    grid = tuple(seq[1:1 + a])
    if any(b < 1 for b in grid):
        raise MalformedDescriptor(f"grid sizes must be >= 1, got {grid}")
    elem_type_code = seq[a + 1]
    elem_size = seq[a + 2]
    if elem_size < 1:
        raise MalformedDescriptor(f"element size must be >= 1, got {elem_size}")
    e = seq[a + 3]
    if e != a:
        raise MalformedDescriptor(f"data dimensions {e} must match processor grid dimensions {a}")
    if len(seq) != head + 4 * e:
        raise MalformedDescriptor(
            f"expected {head + 4 * e} integers for {e} dimensions, got {len(seq)}"
        )
    dims = []
    for j in range(e):
        g, loc, kind, arg = seq[head + 4 * j: head + 4 * j + 4]
        if g < 1:
            raise MalformedDescriptor(f"global length must be >= 1, got {g}")
        if loc > g:
            raise MalformedDescriptor(f"local length {loc} exceeds global length {g}")
        if kind in (DIST_GEN_BLOCK, DIST_INDIRECT):
            raise UnsupportedDistribution(f"distribution code {kind} is not supported")
        if kind not in _KIND_NAMES:
            raise MalformedDescriptor(f"unknown distribution code {kind}")
        if kind != DIST_NONE and arg < 1:
            raise MalformedDescriptor(f"distribution argument must be >= 1, got {arg}")
        if kind == DIST_BLOCK and arg * grid[j] < g:
            raise MalformedDescriptor(
                f"block argument {arg} over {grid[j]} processors cannot cover {g} elements"
            )
        dims.append(DimSpec(g, loc, kind, arg))
    return RuntimeDescriptor(grid, elem_type_code, elem_size, tuple(dims))


def descriptor_to_json(rd: RuntimeDescriptor) -> dict:
    return {
        "grid": list(rd.grid_sizes),
        "elem_type": rd.elem_type_code,
        "elem_size": rd.elem_size,
        "dims": [
            {
                "global": d.global_len,
                "local": d.local_len,
                "dist": _KIND_NAMES[d.dist_kind],
                "arg": d.dist_arg,
            }
            for d in rd.dims
        ],
    }


def descriptor_from_json(obj: dict) -> RuntimeDescriptor:
    try:
        grid = tuple(int(b) for b in obj["grid"])
        dims = []
        for d in obj["dims"]:
            kind = d["dist"]
            if kind in ("gen_block", "indirect"):
                raise UnsupportedDistribution(f"distribution {kind!r} is not supported")
            if kind not in _KIND_CODES:
                raise MalformedDescriptor(f"unknown distribution {kind!r}")
            dims.append(
                DimSpec(
                    int(d["global"]),
                    int(d.get("local", -1)),
                    _KIND_CODES[kind],
                    int(d.get("arg", 0)),
                )
            )
        rd = RuntimeDescriptor(grid, int(obj.get("elem_type", 0)), int(obj["elem_size"]), tuple(dims))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedDescriptor(f"bad descriptor object: {exc}") from None
    if rd.grid_ndims != rd.data_ndims:
        raise MalformedDescriptor(
            f"data dimensions {rd.data_ndims} must match grid dimensions {rd.grid_ndims}"
        )
    return rd


def rank_coords(rd: RuntimeDescriptor, rank: int) -> tuple[int, ...]:
    """Grid coordinates per data dimension, dimension 1 varying fastest."""
    if not 0 <= rank < rd.nprocs():
        raise RankOutOfRange(f"rank {rank} outside grid of {rd.nprocs()}")
    coords = []
    rest = rank
    for b in rd.grid_sizes:
        coords.append(rest % b)
        rest //= b
    return tuple(coords)


@dataclass(frozen=True)
class _DimBlocks:
    """Element-level placement of one rank along one dimension."""

    offset: int        # elements before the first owned block
    repeat: int        # regular full-size blocks
    count: int         # elements per regular block
    stride: int        # elements between starts of consecutive regular blocks, minus count
    irr_offset: int    # gap from end of the regular pattern to the partial block
    irr_count: int     # elements in the partial block (0 when absent)
    local: int         # total owned elements

    def consumed(self) -> int:
        if not self.local:
            return 0
        end = self.offset
        if self.repeat and self.count:
            end += self.repeat * self.count + (self.repeat - 1) * self.stride
        if self.irr_count:
            end += self.irr_offset + self.irr_count
        return end


def _dim_blocks(dim: DimSpec, nprocs: int, coord: int) -> _DimBlocks:
    g, kind, arg = dim.global_len, dim.dist_kind, dim.dist_arg
    if kind == DIST_NONE:
        return _DimBlocks(0, g, 1, 0, 0, 0, g)
    if kind == DIST_BLOCK:
        local = max(0, min(arg, g - arg * coord))
        return _DimBlocks(arg * coord, 1 if local else 0, local, 0, 0, 0, local)
    # cyclic: block b of size arg goes to coordinate b mod nprocs; the last
    # block may be partial and is carried as a separate irregular block
    nblocks = (g + arg - 1) // arg
    owned = len(range(coord, nblocks, nprocs))
    last_size = g - arg * (nblocks - 1)
    has_irr = owned > 0 and (nblocks - 1) % nprocs == coord and last_size < arg
    repeat = owned - (1 if has_irr else 0)
    local = repeat * arg + (last_size if has_irr else 0)
    offset = arg * coord
    stride = (nprocs - 1) * arg
    if repeat <= 1:
        stride = 0
    irr_offset = 0
    if has_irr:
        reg_end = offset + repeat * arg + max(0, repeat - 1) * stride if repeat else offset
        irr_offset = (nblocks - 1) * arg - reg_end
    return _DimBlocks(offset, repeat, arg if repeat else 0, stride, irr_offset,
                      last_size if has_irr else 0, local)


def build_process_view(rd: RuntimeDescriptor, rank: int) -> ProcessView:
    """Nested access descriptor for one rank, outermost dimension at the root.

    One descriptor period spans the whole array file; offsets, strides and
    skips are byte values scaled by the faster dimensions and the element
    size, leaf counts by the element size alone.
    """
    coords = rank_coords(rd, rank)
    ts = rd.elem_size
    inner_desc: AccessDesc | None = None
    inner = 1  # elements spanned by one step of the current dimension
    for j, (dim, nprocs, coord) in enumerate(zip(rd.dims, rd.grid_sizes, coords)):
        blocks = _dim_blocks(dim, nprocs, coord)
        if dim.local_len >= 0 and dim.local_len != blocks.local:
            raise MalformedDescriptor(
                f"dimension {j + 1}: descriptor local length {dim.local_len} "
                f"disagrees with derived {blocks.local}"
            )
        leaf = inner_desc is None
        unit = inner * ts
        count = blocks.count * (ts if leaf else 1)
        desc_blocks = []
        if blocks.repeat and blocks.count:
            desc_blocks.append(
                BasicBlock(
                    offset=blocks.offset * unit,
                    repeat=blocks.repeat,
                    count=count,
                    stride=blocks.stride * unit,
                    subtype=None if leaf else inner_desc,
                )
            )
            irr_gap = blocks.irr_offset
        else:
            irr_gap = blocks.offset + blocks.irr_offset
        if blocks.irr_count:
            desc_blocks.append(
                BasicBlock(
                    offset=irr_gap * unit,
                    repeat=1,
                    count=blocks.irr_count * (ts if leaf else 1),
                    stride=0,
                    subtype=None if leaf else inner_desc,
                )
            )
        skip = (dim.global_len - blocks.consumed()) * unit
        inner_desc = AccessDesc(desc_blocks, skip)
        inner *= dim.global_len
    assert inner_desc is not None
    ext, act = fill_counts(inner_desc)
    if ext != rd.total_bytes():
        raise MalformedDescriptor(
            f"descriptor period {ext} bytes does not span the array of {rd.total_bytes()}"
        )
    return ProcessView(rank, coords, inner_desc, act)


def cover_check(rd: RuntimeDescriptor) -> CoverReport:
    """Expand every rank and report whether the ranks partition the file.

    Dimensions distributed with "no distribution" replicate, so only fully
    distributed descriptors can partition exactly.
    """
    nbytes = rd.total_bytes()
    counts = bytearray(nbytes)
    per_rank = {}
    for rank in range(rd.nprocs()):
        view = build_process_view(rd, rank)
        per_rank[rank] = view.total_bytes
        if view.total_bytes == 0:
            continue
        for run in enumerate_runs(view.descriptor, 0, 0, view.total_bytes):
            for pos in range(run.file_offset, run.file_offset + run.length):
                counts[pos] += 1
    overlaps = [i for i, c in enumerate(counts) if c > 1]
    gaps = [i for i, c in enumerate(counts) if c == 0]
    return CoverReport(nbytes, per_rank, overlaps, gaps)
