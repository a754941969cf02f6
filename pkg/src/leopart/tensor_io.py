"""Binary tensor files, dataset manifests and checkpoint serialization.

The on-disk tensor format is deliberately minimal and fixed little-endian
so that files are byte-identical across platforms:

    magic "LPT1" | dtype code (1 byte) | ndim (1 byte) | dims (u32 LE each)
    | raw row-major data (LE)

Supported dtypes: f32 (code 1), u16 (code 2), u8 (code 3).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LPT1"
CHECKPOINT_MAGIC = b"LPC1"

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<u2"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}

MAX_NDIM = 4


class TensorFormatError(ValueError):
    """Raised on malformed tensor files or unsupported tensors."""


class ManifestError(ValueError):
    """Raised on malformed or inconsistent dataset manifests."""


def _check_tensor(t: np.ndarray) -> np.ndarray:
    t = np.ascontiguousarray(t)
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype}; use f32/u16/u8")
    if t.ndim < 1 or t.ndim > MAX_NDIM:
        raise TensorFormatError(f"ndim must be 1..{MAX_NDIM}, got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise TensorFormatError(f"shape entries must be >= 1, got {t.shape}")
    return t.astype(dt, copy=False)


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write *t* to *path* in the LPT1 format (fixed little-endian layout)."""
    t = _check_tensor(t)
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(t.tobytes())
    except OSError as exc:
        raise TensorFormatError(f"cannot write tensor to {path}: {exc}") from exc


def tensor_bytes(t: np.ndarray) -> bytes:
    """LPT1 serialization of *t* as a byte string (used inside checkpoints)."""
    t = _check_tensor(t)
    header = MAGIC + struct.pack("<BB", _DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.tobytes()


def _read_tensor_from(buf: bytes, offset: int, origin: str) -> tuple[np.ndarray, int]:
    if buf[offset : offset + 4] != MAGIC:
        raise TensorFormatError(f"{origin}: bad magic {buf[offset:offset + 4]!r}")
    offset += 4
    if len(buf) < offset + 2:
        raise TensorFormatError(f"{origin}: truncated header")
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{origin}: unknown dtype code {code}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise TensorFormatError(f"{origin}: bad ndim {ndim}")
    if len(buf) < offset + 4 * ndim:
        raise TensorFormatError(f"{origin}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"{origin}: zero dimension in {shape}")
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(buf) < offset + nbytes:
        raise TensorFormatError(
            f"{origin}: payload truncated, need {nbytes} bytes, "
            f"have {len(buf) - offset}"
        )
    data = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=offset)
    return data.reshape(shape).copy(), offset + nbytes


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an LPT1 tensor file back into a numpy array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"cannot read tensor from {path}: {exc}") from exc
    t, end = _read_tensor_from(buf, 0, str(path))
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return t


@dataclass
class ManifestRecord:
    id: str
    feature_path: Path
    attention_path: Path | None = None
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    """Line-per-record dataset index.

    Record lines look like ``id=<s> feature=<path> [attention=<path>]
    [mask=<path>]``; paths are relative to the manifest file. The token
    grid and feature dimensionality may be declared in ``# grid=HxW`` /
    ``# dim=D`` comment lines, otherwise they are taken from the first
    feature tensor loaded; every later load is validated against them.
    """

    records: list[ManifestRecord]
    token_grid: tuple[int, int] | None = None
    feature_dim: int | None = None
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def load_features(self, rec: ManifestRecord) -> np.ndarray:
        """Load the D x H' x W' feature tensor of *rec*, validating shape."""
        t = read_tensor(self.root / rec.feature_path)
        if t.ndim != 3:
            raise ManifestError(f"{rec.id}: feature tensor must be D x H' x W'")
        d, h, w = t.shape
        if self.feature_dim is None:
            self.feature_dim = d
        if self.token_grid is None:
            self.token_grid = (h, w)
        if d != self.feature_dim or (h, w) != self.token_grid:
            raise ManifestError(
                f"{rec.id}: feature tensor {t.shape} does not match manifest "
                f"dim={self.feature_dim} grid={self.token_grid}"
            )
        return t

    def load_attention(self, rec: ManifestRecord) -> np.ndarray | None:
        if rec.attention_path is None:
            return None
        t = read_tensor(self.root / rec.attention_path)
        if t.ndim == 2:
            t = t[None]
        if self.token_grid is not None and tuple(t.shape[1:]) != self.token_grid:
            raise ManifestError(
                f"{rec.id}: attention grid {t.shape[1:]} != {self.token_grid}"
            )
        return t

    def load_mask(self, rec: ManifestRecord) -> np.ndarray | None:
        if rec.mask_path is None:
            return None
        return read_tensor(self.root / rec.mask_path)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest file."""
    path = Path(path)
    token_grid = None
    feature_dim = None
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            meta = line.lstrip("#").strip()
            if meta.startswith("grid="):
                h, w = meta.removeprefix("grid=").split("x")
                token_grid = (int(h), int(w))
            elif meta.startswith("dim="):
                feature_dim = int(meta.removeprefix("dim="))
            continue
        fields = {}
        for part in line.split():
            if "=" not in part:
                raise ManifestError(f"{path}:{lineno}: malformed field {part!r}")
            key, value = part.split("=", 1)
            fields[key] = value
        if "id" not in fields:
            raise ManifestError(f"{path}:{lineno}: missing id")
        if "feature" not in fields:
            raise ManifestError(
                f"{path}:{lineno}: record {fields['id']!r} missing feature path"
            )
        if fields["id"] in seen:
            raise ManifestError(f"{path}: duplicate id {fields['id']!r}")
        seen.add(fields["id"])
        records.append(
            ManifestRecord(
                id=fields["id"],
                feature_path=Path(fields["feature"]),
                attention_path=Path(fields["attention"]) if "attention" in fields else None,
                mask_path=Path(fields["mask"]) if "mask" in fields else None,
            )
        )
    return DatasetManifest(
        records=records,
        token_grid=token_grid,
        feature_dim=feature_dim,
        root=path.parent,
    )


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = []
    if manifest.token_grid is not None:
        lines.append(f"# grid={manifest.token_grid[0]}x{manifest.token_grid[1]}")
    if manifest.feature_dim is not None:
        lines.append(f"# dim={manifest.feature_dim}")
    for rec in manifest.records:
        parts = [f"id={rec.id}", f"feature={rec.feature_path}"]
        if rec.attention_path is not None:
            parts.append(f"attention={rec.attention_path}")
        if rec.mask_path is not None:
            parts.append(f"mask={rec.mask_path}")
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")


PROTO_NORM_TOL = 1e-5


@dataclass
class Checkpoint:
    """Named parameter tensors plus step counter and config hash."""

    tensors: dict[str, np.ndarray]
    step: int
    config_hash: str

    def validate(self) -> None:
        for name, t in self.tensors.items():
            is_param = not name.startswith(("adam_m/", "adam_v/"))
            if name.split("/")[-1] == "prototypes" and is_param:
                norms = np.linalg.norm(t.astype(np.float64), axis=1)
                if not np.allclose(norms, 1.0, atol=PROTO_NORM_TOL):
                    raise TensorFormatError(
                        f"checkpoint tensor {name!r}: prototype rows not unit-norm "
                        f"(max deviation {np.abs(norms - 1).max():.2e})"
                    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    ckpt.validate()
    hash_bytes = ckpt.config_hash.encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<QH", ckpt.step, len(hash_bytes))
    out += hash_bytes
    out += struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        name_bytes = name.encode()
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += tensor_bytes(ckpt.tensors[name])
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise TensorFormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    step, hash_len = struct.unpack_from("<QH", buf, 4)
    offset = 4 + 10
    config_hash = buf[offset : offset + hash_len].decode()
    offset += hash_len
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode()
        offset += name_len
        tensors[name], offset = _read_tensor_from(buf, offset, f"{path}:{name}")
    ckpt = Checkpoint(tensors=tensors, step=step, config_hash=config_hash)
    ckpt.validate()
    return ckpt


def config_hash(text: str) -> str:
    """Stable hash of a canonical config rendering."""
    return hashlib.sha256(text.encode()).hexdigest()[:16]
