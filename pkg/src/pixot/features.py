"""Feature maps, the RFM1 binary format and dataset manifests.

A feature map is an ``h x w`` grid of ``d``-dimensional float32 pixel vectors.
On disk it is stored as RFM1 (all little-endian)::

    0-3    b"RFM1"
    4      version, 0x01
    5      domain, 0x00 real / 0x01 sim
    6-7    zero padding
    8-11   h (u32)
    12-15  w (u32)
    16-19  d (u32)
    20     zero
    21...  h*w*d binary32 values, row-major (row, column, channel)

The file carries no identifier; readers take it from the manifest entry or
fall back to the file stem.
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    FormatError,
    IoError,
    ManifestError,
    PixotError,
    PoolError,
    ShapeError,
    TruncationError,
)

MAGIC = b"RFM1"
VERSION = 1
HEADER = struct.Struct("<4sBBxxIIIx")
HEADER_SIZE = HEADER.size  # 21

assert HEADER_SIZE == 21


class Domain(enum.Enum):
    REAL = "real"
    SIM = "sim"

    @property
    def code(self) -> int:
        return 0 if self is Domain.REAL else 1

    @classmethod
    def from_code(cls, code: int) -> "Domain":
        if code == 0:
            return cls.REAL
        if code == 1:
            return cls.SIM
        raise FormatError(f"unknown domain byte 0x{code:02x}")

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ManifestError(f"unknown domain {value!r}, expected 'real' or 'sim'") from None


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One encoder output: ``data`` has shape ``(h, w, d)`` and dtype float32.

    The array is copied on construction and made read-only, so instances are
    safe to share between threads.
    """

    id: str
    domain: Domain
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"feature map {self.id!r}: expected a 3-D array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"feature map {self.id!r}: every dimension must be >= 1, got {arr.shape}")
        arr = np.array(arr, dtype=np.float32, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise DataError(f"feature map {self.id!r} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "domain", Domain.parse(self.domain))

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    d = dim

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def n_pixels(self) -> int:
        return self.h * self.w

    def pixels(self) -> np.ndarray:
        """Pixel vectors as an ``(h*w, d)`` view in row-major pixel order."""
        return self.data.reshape(self.n_pixels, self.dim)

    def mean_vector(self) -> np.ndarray:
        return self.pixels().mean(axis=0, dtype=np.float64)

    def replace(self, **changes) -> "FeatureMap":
        fields = {"id": self.id, "domain": self.domain, "data": self.data}
        fields.update(changes)
        return FeatureMap(**fields)

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain is other.domain
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        return hash((self.id, self.domain, self.shape))

    def __repr__(self):
        h, w, d = self.shape
        return f"FeatureMap(id={self.id!r}, domain={self.domain.value}, h={h}, w={w}, d={d})"


def encode_feature_map(fm: FeatureMap) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, fm.domain.code, fm.h, fm.w, fm.dim)
    return header + fm.data.astype("<f4", copy=False).tobytes()


def decode_feature_map(buf: bytes, id: str = "") -> FeatureMap:
    """Decode RFM1 bytes, validating every header field."""
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise FormatError("bad magic")
        raise TruncationError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes")
    if buf[20] != 0:
        raise FormatError("reserved byte 20 is not zero")
    magic, version, domain_code, h, w, d = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if buf[6] != 0 or buf[7] != 0:
        raise FormatError("padding bytes 6-7 are not zero")
    domain = Domain.from_code(domain_code)
    if h == 0 or w == 0 or d == 0:
        raise FormatError(f"zero dimension in header (h={h}, w={w}, d={d})")
    expected = HEADER_SIZE + 4 * h * w * d
    if len(buf) < expected:
        raise TruncationError(f"payload truncated: {len(buf)} of {expected} bytes")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=h * w * d, offset=HEADER_SIZE)
    if not np.isfinite(data).all():
        raise DataError("payload contains non-finite values")
    return FeatureMap(id, domain, data.reshape(h, w, d))


def read_feature_map(path, id: str | None = None) -> FeatureMap:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return decode_feature_map(buf, id=path.stem if id is None else id)
    except PixotError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def write_feature_map(fm: FeatureMap, path) -> None:
    # FeatureMap validates on construction; re-check in case data was swapped underneath.
    if not np.isfinite(fm.data).all():
        raise DataError(f"feature map {fm.id!r} contains non-finite values")
    payload = encode_feature_map(fm)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc


def read_npy(path, domain, id: str | None = None) -> FeatureMap:
    """Import a 3-D float32 ``.npy`` array as a feature map (decode only)."""
    path = Path(path)
    try:
        arr = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: not a valid .npy array ({exc})") from None
    if not isinstance(arr, np.ndarray) or arr.dtype.kind != "f" or arr.dtype.itemsize != 4:
        raise FormatError(f"{path}: expected float32 data, got {getattr(arr, 'dtype', type(arr))}")
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D (h, w, d) array, got shape {arr.shape}")
    try:
        return FeatureMap(path.stem if id is None else id, Domain.parse(domain), arr)
    except PixotError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def avg_pool(fm: FeatureMap, k: int) -> FeatureMap:
    """Average non-overlapping ``k x k`` blocks; ``k`` must divide h and w."""
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise PoolError(f"pool factor must be a positive integer, got {k!r}")
    if k == 1:
        return fm
    h, w, d = fm.shape
    if h % k or w % k:
        raise PoolError(f"pool factor {k} does not divide the {h}x{w} map {fm.id!r}")
    blocks = fm.data.reshape(h // k, k, w // k, k, d)
    pooled = blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    return FeatureMap(fm.id, fm.domain, pooled)


@dataclass(frozen=True)
class ManifestItem:
    id: str
    path: Path
    domain: Domain


@dataclass(frozen=True)
class Manifest:
    items: tuple[ManifestItem, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def count(self, domain) -> int:
        domain = Domain.parse(domain)
        return sum(1 for item in self.items if item.domain is domain)

    @property
    def n_real(self) -> int:
        return self.count(Domain.REAL)

    @property
    def n_sim(self) -> int:
        return self.count(Domain.SIM)

    def load(self, item: ManifestItem) -> FeatureMap:
        return read_feature_map(item.path, id=item.id)


def _check_items(items, validate_files: bool):
    seen = set()
    for item in items:
        if item.id in seen:
            raise ManifestError(f"duplicate id {item.id!r}")
        seen.add(item.id)
        if not validate_files:
            continue
        if not item.path.is_file():
            raise ManifestError(f"item {item.id!r}: file {item.path} does not exist")
        try:
            fm = read_feature_map(item.path, id=item.id)
        except PixotError as exc:
            raise ManifestError(f"item {item.id!r}: {exc}") from exc
        if fm.domain is not item.domain:
            raise ManifestError(
                f"item {item.id!r}: manifest says {item.domain.value} but {item.path} is {fm.domain.value}"
            )


def make_manifest(items, validate_files: bool = True) -> Manifest:
    items = tuple(
        it if isinstance(it, ManifestItem) else ManifestItem(str(it[0]), Path(it[1]), Domain.parse(it[2]))
        for it in items
    )
    _check_items(items, validate_files)
    return Manifest(items)


def read_manifest(path, validate_files: bool = True) -> Manifest:
    """Parse and validate a manifest; relative item paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
        raw_items = doc["items"]
        if not isinstance(raw_items, list):
            raise TypeError("'items' must be a list")
        base = path.parent
        items = []
        for raw in raw_items:
            item_path = Path(raw["path"])
            if not item_path.is_absolute():
                item_path = base / item_path
            items.append(ManifestItem(str(raw["id"]), item_path, Domain.parse(raw["domain"])))
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ManifestError):
            raise ManifestError(f"{path}: {exc}") from None
        raise ManifestError(f"{path}: malformed manifest ({exc})") from None
    try:
        _check_items(items, validate_files)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return Manifest(tuple(items))


def relative_path(target, base_dir) -> str:
    """``target`` relative to ``base_dir`` when possible, forward slashes."""
    try:
        rel = os.path.relpath(target, base_dir)
    except ValueError:
        rel = os.path.abspath(target)
    return Path(rel).as_posix()


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    base = path.parent
    doc = {
        "items": [
            {"id": it.id, "path": relative_path(it.path, base), "domain": it.domain.value}
            for it in manifest.items
        ]
    }
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"{path}: {exc.strerror or exc}") from exc
