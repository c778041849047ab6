"""Binary container for per-layer feature matrices plus a CSV manifest.

File layout (all multi-byte integers little-endian):

    bytes 0-3  ASCII "SSLF"
    u16 version (=1), u16 reserved (=0)
    u16 len(utt_id)   + UTF-8 bytes
    u16 len(model_id) + UTF-8 bytes
    u16 stored layer count L_s
    u32 feat_dim D, u32 num_frames T, u8 dtype_code (0 = f32 LE)
    L_s x u16 layer_index, strictly ascending
    L_s x T x D x f32 data, layer-major, row-major [T][D]

Files are immutable once written; any number of readers may touch a file
concurrently. Layer data is randomly accessible: the j-th stored layer
starts at header_length + j*T*D*4.
"""

from __future__ import annotations

import csv
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SSLF"
VERSION = 1
DTYPE_F32_LE = 0

SPLITS = ("train", "validation", "test")


class FeatureStoreError(Exception):
    """Base error for feature-store problems."""


class BadMagicError(FeatureStoreError):
    pass


class UnsupportedVersionError(FeatureStoreError):
    pass


class UnsupportedDtypeError(FeatureStoreError):
    pass


class TruncatedFileError(FeatureStoreError):
    pass


class MissingLayerError(FeatureStoreError):
    pass


class InvariantError(FeatureStoreError):
    """Raised when data handed to the writer violates a type invariant."""


class ManifestError(FeatureStoreError):
    pass


@dataclass
class FeatureHeader:
    utt_id: str
    model_id: str
    stored_layer_indices: list[int]
    feat_dim: int
    num_frames: int
    dtype_code: int = DTYPE_F32_LE
    version: int = VERSION
    # Byte offset where layer data begins; filled in by the reader/writer.
    data_offset: int = 0

    def validate(self) -> None:
        if self.version != VERSION:
            raise InvariantError(f"unsupported version {self.version}")
        if self.dtype_code != DTYPE_F32_LE:
            raise InvariantError(f"unsupported dtype code {self.dtype_code}")
        idx = self.stored_layer_indices
        if not idx:
            raise InvariantError("at least one stored layer is required")
        if any(i < 1 for i in idx) or any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvariantError(
                f"layer indices must be strictly increasing and >= 1, got {idx}"
            )
        if self.feat_dim < 1 or self.num_frames < 1:
            raise InvariantError(
                f"feat_dim and num_frames must be >= 1, got D={self.feat_dim} T={self.num_frames}"
            )

    def layer_position(self, layer_index: int) -> int:
        try:
            return self.stored_layer_indices.index(layer_index)
        except ValueError:
            raise MissingLayerError(
                f"layer {layer_index} not stored (available: {self.stored_layer_indices})"
            ) from None

    @property
    def layer_nbytes(self) -> int:
        return self.num_frames * self.feat_dim * 4


@dataclass
class UtteranceFeatures:
    header: FeatureHeader
    layers: dict[int, np.ndarray]

    def validate(self) -> None:
        self.header.validate()
        if sorted(self.layers) != self.header.stored_layer_indices:
            raise InvariantError(
                f"layers {sorted(self.layers)} do not match header "
                f"{self.header.stored_layer_indices}"
            )
        shape = (self.header.num_frames, self.header.feat_dim)
        for idx, mat in self.layers.items():
            if mat.shape != shape:
                raise InvariantError(
                    f"layer {idx} has shape {mat.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(mat)):
                raise InvariantError(f"layer {idx} contains non-finite values")


@dataclass
class ManifestEntry:
    utt_id: str
    path: str  # relative to the manifest's directory
    mos: float
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise InvariantError(f"string too long for u16 length prefix: {len(b)} bytes")
    return struct.pack("<H", len(b)) + b


def header_bytes(header: FeatureHeader) -> bytes:
    parts = [
        MAGIC,
        struct.pack("<HH", header.version, 0),
        _pack_str(header.utt_id),
        _pack_str(header.model_id),
        struct.pack(
            "<HIIB",
            len(header.stored_layer_indices),
            header.feat_dim,
            header.num_frames,
            header.dtype_code,
        ),
        struct.pack(f"<{len(header.stored_layer_indices)}H", *header.stored_layer_indices),
    ]
    return b"".join(parts)


def write_feature_file(features: UtteranceFeatures, destination: Path | str) -> None:
    """Write a feature file; rejects invariant violations before touching disk."""
    features.validate()
    h = features.header
    blob = header_bytes(h)
    with open(destination, "wb") as f:
        f.write(blob)
        for idx in h.stored_layer_indices:
            mat = np.ascontiguousarray(features.layers[idx], dtype="<f4")
            f.write(mat.tobytes())


class _Cursor:
    """Sequential reader that raises TruncatedFileError on short reads."""

    def __init__(self, f, path):
        self.f = f
        self.path = path

    def read(self, n: int) -> bytes:
        b = self.f.read(n)
        if len(b) != n:
            raise TruncatedFileError(f"{self.path}: truncated header")
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _read_header(f, path) -> FeatureHeader:
    cur = _Cursor(f, path)
    magic = cur.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    version, _reserved = cur.unpack("<HH")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    (n_utt,) = cur.unpack("<H")
    utt_id = cur.read(n_utt).decode("utf-8")
    (n_model,) = cur.unpack("<H")
    model_id = cur.read(n_model).decode("utf-8")
    n_layers, feat_dim, num_frames, dtype_code = cur.unpack("<HIIB")
    if dtype_code != DTYPE_F32_LE:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype code {dtype_code}")
    indices = list(cur.unpack(f"<{n_layers}H")) if n_layers else []
    header = FeatureHeader(
        utt_id=utt_id,
        model_id=model_id,
        stored_layer_indices=indices,
        feat_dim=feat_dim,
        num_frames=num_frames,
        dtype_code=dtype_code,
        version=version,
        data_offset=f.tell(),
    )
    try:
        header.validate()
    except InvariantError as e:
        raise TruncatedFileError(f"{path}: malformed header ({e})") from e
    return header


def read_header(source: Path | str) -> FeatureHeader:
    """Parse the header only; never touches the layer data."""
    with open(source, "rb") as f:
        return _read_header(f, source)


def read_feature_layer(source: Path | str, layer_index: int) -> np.ndarray:
    """Read a single layer's [T, D] matrix, seeking past the other layers."""
    with open(source, "rb") as f:
        header = _read_header(f, source)
        pos = header.layer_position(layer_index)
        f.seek(header.data_offset + pos * header.layer_nbytes)
        raw = f.read(header.layer_nbytes)
    if len(raw) != header.layer_nbytes:
        raise TruncatedFileError(f"{source}: truncated data for layer {layer_index}")
    mat = np.frombuffer(raw, dtype="<f4").reshape(header.num_frames, header.feat_dim)
    return mat.copy()


def read_feature_file(source: Path | str) -> UtteranceFeatures:
    """Read header plus every stored layer."""
    with open(source, "rb") as f:
        header = _read_header(f, source)
        layers = {}
        for idx in header.stored_layer_indices:
            raw = f.read(header.layer_nbytes)
            if len(raw) != header.layer_nbytes:
                raise TruncatedFileError(f"{source}: truncated data for layer {idx}")
            layers[idx] = (
                np.frombuffer(raw, dtype="<f4")
                .reshape(header.num_frames, header.feat_dim)
                .copy()
            )
    return UtteranceFeatures(header=header, layers=layers)


MANIFEST_COLUMNS = ["utt_id", "path", "mos", "split"]


def load_manifest(source: Path | str) -> DatasetManifest:
    """Parse a manifest CSV, validating every row (errors carry row numbers)."""
    source = Path(source)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(source, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{source}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{source}: expected header {','.join(MANIFEST_COLUMNS)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{source}:{lineno}: expected 4 fields, got {len(row)}")
            utt_id, path, mos_s, split = row
            if utt_id in seen:
                raise ManifestError(f"{source}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            try:
                mos = float(mos_s)
            except ValueError:
                raise ManifestError(f"{source}:{lineno}: bad mos {mos_s!r}") from None
            if not (1.0 <= mos <= 5.0):
                raise ManifestError(f"{source}:{lineno}: mos {mos} outside [1, 5]")
            if split not in SPLITS:
                raise ManifestError(f"{source}:{lineno}: unknown split {split!r}")
            entries.append(ManifestEntry(utt_id, path, mos, split))
    return DatasetManifest(entries=entries, root=source.parent)


def write_manifest(manifest: DatasetManifest, destination: Path | str) -> None:
    with open(destination, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.utt_id, e.path, format(e.mos, "g"), e.split])


@dataclass
class ValidationItem:
    utt_id: str
    problem: str


@dataclass
class ValidationReport:
    items: list[ValidationItem]

    @property
    def ok(self) -> bool:
        return not self.items


def validate_store(
    manifest: DatasetManifest, required_layers: list[int]
) -> ValidationReport:
    """Check every manifest entry's file; problems are report items, not errors.

    Shape consistency is judged against the majority (D, T) over readable
    headers, so a single odd file is flagged rather than the rest.
    """
    items: list[ValidationItem] = []
    headers: dict[str, FeatureHeader] = {}
    for e in manifest.entries:
        path = manifest.resolve(e)
        if not path.is_file():
            items.append(ValidationItem(e.utt_id, f"missing file {e.path}"))
            continue
        try:
            headers[e.utt_id] = read_header(path)
        except FeatureStoreError as exc:
            items.append(ValidationItem(e.utt_id, f"unreadable header: {exc}"))
    if headers:
        majority_shape, _ = Counter(
            (h.feat_dim, h.num_frames) for h in headers.values()
        ).most_common(1)[0]
        for e in manifest.entries:
            h = headers.get(e.utt_id)
            if h is None:
                continue
            if (h.feat_dim, h.num_frames) != majority_shape:
                items.append(
                    ValidationItem(
                        e.utt_id,
                        f"shape (D={h.feat_dim}, T={h.num_frames}) differs from "
                        f"majority (D={majority_shape[0]}, T={majority_shape[1]})",
                    )
                )
            missing = [k for k in required_layers if k not in h.stored_layer_indices]
            if missing:
                items.append(
                    ValidationItem(e.utt_id, f"missing layers {missing}")
                )
    return ValidationReport(items=items)
