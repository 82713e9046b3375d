"""Formal model of a sequential record file.

This module is the correctness oracle for every byte path in the system:
the rest of the package moves bytes between buffers, views and disks, and
the tests reduce each of those paths to the record operations defined here.

A file is an ordered sequence of equally sized, non-empty records.  A
handle carries the file, a mode set, a record position and a mapping (a
tuple of 1-based record indices describing a remapped "view" of the file;
indices may repeat).  Record indices are 1-based inside this module only;
everything above it speaks 0-based byte offsets.

The READ transfer count obeys

    i = min(n, floor(dsize(buf) / record_size), viewlen - position)

and errors when i <= 0.  WRITE and INSERT operate on the underlying file
at the handle position (not through the mapping); WRITE never shrinks a
file and INSERT always grows it by exactly n records.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class FileModelError(Exception):
    """Base class for file model errors."""


class OutOfView(FileModelError):
    """Seek target exceeds the mapped view length."""


class NotReadable(FileModelError):
    """Handle was not opened for reading."""


class NotWritable(FileModelError):
    """Handle was not opened for writing."""


class Exhausted(FileModelError):
    """The READ count formula yielded zero transferable records."""


class BufferTooShort(FileModelError):
    """Fewer records in the buffer than the requested write count."""


class RecordSizeMismatch(FileModelError):
    """Buffer records are not homogeneous or disagree with the file."""


class IndexBeyondFile(FileModelError):
    """A mapping index addresses a record past the end of the file."""


#: The zero-size record.
NIL: bytes = b""

READ = "read"
WRITE = "write"


@dataclass
class ModelFile:
    """Sequence of equally sized records."""

    records: list[bytes] = field(default_factory=list)

    def __post_init__(self) -> None:
        sizes = {len(r) for r in self.records}
        if len(sizes) > 1:
            raise RecordSizeMismatch(f"mixed record sizes {sorted(sizes)}")
        if sizes == {0} and self.records:
            raise RecordSizeMismatch("file records must differ from nil")

    @property
    def record_size(self) -> int:
        """Byte size of each record; 0 for the empty file."""
        return len(self.records[0]) if self.records else 0

    def flen(self) -> int:
        return len(self.records)

    def frec(self, i: int) -> bytes:
        """1-based record access; indices past the end yield nil."""
        if i < 1:
            raise IndexBeyondFile(f"record indices are 1-based, got {i}")
        return self.records[i - 1] if i <= len(self.records) else NIL


@dataclass(frozen=True)
class MappingFunction:
    """Tuple of 1-based record indices, or the identity mapping.

    ``indices is None`` denotes the identity mapping, for which every file
    is a fixpoint.  The empty tuple maps every file to the empty file.
    """

    indices: tuple[int, ...] | None = None

    @classmethod
    def identity(cls) -> "MappingFunction":
        return cls(None)

    @classmethod
    def empty(cls) -> "MappingFunction":
        return cls(())

    def view_len(self, f: ModelFile) -> int:
        return f.flen() if self.indices is None else len(self.indices)

    def view_index(self, k: int) -> int:
        """1-based file index of 1-based view position ``k``."""
        if self.indices is None:
            return k
        return self.indices[k - 1]


@dataclass
class DataBuffer:
    """Ordered record container used by READ and WRITE.

    For reads only the total byte capacity matters; the records are
    replaced by what was read.  For writes the records must be homogeneous
    and, for a non-empty file, equal to the file's record size.
    """

    records: list[bytes] = field(default_factory=list)

    def dlen(self) -> int:
        return len(self.records)

    def dsize(self) -> int:
        return sum(len(r) for r in self.records)

    def uniform_size(self) -> int | None:
        """Common record size, or None if records are heterogeneous."""
        sizes = {len(r) for r in self.records}
        return sizes.pop() if len(sizes) == 1 else None


@dataclass
class ModelHandle:
    file: ModelFile
    modes: frozenset[str]
    position: int
    mapping: MappingFunction

    def view_len(self) -> int:
        return self.mapping.view_len(self.file)


def apply_mapping(t: MappingFunction, f: ModelFile) -> ModelFile:
    """Materialize the mapped file <frec(f,t_1), ..., frec(f,t_n)>.

    Unlike raw ``frec``, indices beyond the file are an error here: a nil
    record cannot round-trip through byte-level I/O.
    """
    if t.indices is None:
        return ModelFile(list(f.records))
    out = []
    for i in t.indices:
        if i < 1 or i > f.flen():
            raise IndexBeyondFile(f"index {i} beyond file of length {f.flen()}")
        out.append(f.frec(i))
    return ModelFile(out)


def model_open(f: ModelFile, modes: set[str], mapping: MappingFunction) -> ModelHandle:
    """Open always succeeds: handle starts at position 0."""
    if not modes or not modes <= {READ, WRITE}:
        raise ValueError(f"modes must be a non-empty subset of {{read, write}}, got {modes!r}")
    return ModelHandle(f, frozenset(modes), 0, mapping)


def model_close(h: ModelHandle) -> ModelHandle:
    """Reset to an empty read-only handle; later reads fail as Exhausted."""
    h.file = ModelFile([])
    h.modes = frozenset({READ})
    h.position = 0
    h.mapping = MappingFunction.empty()
    return h


def model_seek(h: ModelHandle, n: int) -> ModelHandle:
    if n < 0:
        raise ValueError("seek target must be >= 0")
    if n > h.view_len():
        raise OutOfView(f"seek to {n} in view of length {h.view_len()}")
    h.position = n
    return h


def model_read(h: ModelHandle, n: int, buf: DataBuffer) -> int:
    """Copy records from the view into buf; returns the transfer count i."""
    if n < 1:
        raise ValueError("read count must be >= 1")
    if READ not in h.modes:
        raise NotReadable("handle not open for reading")
    if h.file.flen() == 0:
        i = 0
    else:
        rec_size = h.file.record_size
        i = min(n, buf.dsize() // rec_size, h.view_len() - h.position)
    if i <= 0:
        raise Exhausted(f"no records transferable at position {h.position}")
    view = apply_mapping(h.mapping, h.file)
    got = [view.frec(h.position + k) for k in range(1, i + 1)]
    buf.records = got
    h.position += i
    return i


def _check_write_buffer(h: ModelHandle, n: int, buf: DataBuffer) -> None:
    if n < 1:
        raise ValueError("write count must be >= 1")
    if WRITE not in h.modes:
        raise NotWritable("handle not open for writing")
    if n > buf.dlen():
        raise BufferTooShort(f"need {n} records, buffer holds {buf.dlen()}")
    size = DataBuffer(buf.records[:n]).uniform_size()
    if size is None or size == 0:
        raise RecordSizeMismatch("buffer records must be homogeneous and non-nil")
    if h.file.flen() > 0 and size != h.file.record_size:
        raise RecordSizeMismatch(
            f"buffer record size {size} differs from file record size {h.file.record_size}"
        )


def model_write(h: ModelHandle, n: int, buf: DataBuffer) -> ModelFile:
    """Overwrite/append records p+1 .. p+n of the underlying file."""
    _check_write_buffer(h, n, buf)
    p = h.position
    recs = h.file.records
    new = recs[:p] + buf.records[:n] + recs[p + n:]
    h.file.records = new
    h.position = p + n
    return h.file


def model_insert(h: ModelHandle, n: int, buf: DataBuffer) -> ModelFile:
    """Insert n records after position p; flen grows by exactly n."""
    _check_write_buffer(h, n, buf)
    p = h.position
    recs = h.file.records
    h.file.records = recs[:p] + buf.records[:n] + recs[p:]
    h.position = p + n
    return h.file
