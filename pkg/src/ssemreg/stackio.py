"""File formats: section directories, model checkpoints, vector-map files.

Stacks live as directories of grayscale PNG/TIFF images with zero-padded
numeric names. Checkpoints and vector maps use small custom little-endian
binary containers so round trips are bit-exact and trivially verifiable.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from ssemreg.autoencoder import ArchitectureSpec, AutoencoderModel
from ssemreg.ndgrad import Tensor
from ssemreg.stacks import SectionStack, StackError
from ssemreg.warpfield import VectorMap

__all__ = [
    "CheckpointError",
    "VectorMapError",
    "load_image",
    "save_image",
    "load_stack",
    "save_stack",
    "save_checkpoint",
    "load_checkpoint",
    "save_vector_map",
    "load_vector_map",
    "VECTOR_MAP_HEADER_BYTES",
]

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")

CHECKPOINT_MAGIC = b"SSEMNET1"
CHECKPOINT_VERSION = 1

VECTOR_MAP_MAGIC = b"SSEMVEC1"
VECTOR_MAP_HEADER = struct.Struct("<8sIIIIII")  # magic, kind, interp, gh, gw, H, W
VECTOR_MAP_HEADER_BYTES = VECTOR_MAP_HEADER.size
_VM_KINDS = ("coarse", "dense")
_VM_INTERP = ("bilinear", "tps")


class CheckpointError(RuntimeError):
    """Malformed, corrupted, or mismatching checkpoint file."""


class VectorMapError(RuntimeError):
    """Malformed vector-map file or wrong coarse/dense kind."""


# ---------------------------------------------------------------------------
# images and stacks


def load_image(path, kind: str = "raw") -> np.ndarray:
    """One grayscale section. Raw images are normalized to [0,1] by their
    bit-depth maximum; label images keep integer IDs."""
    path = Path(path)
    with Image.open(path) as img:
        mode = img.mode
        if mode == "L":
            arr = np.asarray(img, dtype=np.uint8)
            maxval = 255.0
        elif mode in ("I;16", "I"):
            arr = np.asarray(img, dtype=np.int32)
            maxval = 65535.0
        else:
            raise StackError(f"{path.name}: unsupported mode {mode!r}; sections must be grayscale")
    if kind == "label":
        return arr.astype(np.int32)
    return (arr / maxval).astype(np.float32)


def save_image(arr: np.ndarray, path, kind: str = "raw") -> None:
    """Raw sections are clamped to [0,1] and written 8-bit; labels 16-bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if kind == "label":
        arr = np.asarray(arr)
        if arr.min() < 0 or arr.max() > 65535:
            raise StackError(f"label values outside the 16-bit range in {path.name}")
        Image.fromarray(arr.astype(np.uint16)).save(path)
        return
    data = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="L").save(path)


def _section_files(directory: Path):
    files = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.isdigit():
            files.append((int(p.stem), p))
    files.sort(key=lambda t: t[0])
    return files


def load_stack(directory, kind: str = "raw") -> SectionStack:
    """Lazily loadable stack from a directory of index-named sections.

    Extents are validated up front from image headers; pixel data is read
    on demand. Gaps in the index sequence warn but do not fail.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise StackError(f"{directory} is not a directory")
    files = _section_files(directory)
    if not files:
        raise StackError(f"empty stack: no numerically named sections in {directory}")
    indices = [i for i, _ in files]
    if len(set(indices)) != len(indices):
        dup = [i for i in set(indices) if indices.count(i) > 1][0]
        raise StackError(f"duplicate section index {dup:04d} in {directory}")
    gaps = [b for a, b in zip(indices, indices[1:]) if b != a + 1]
    if gaps:
        warnings.warn(f"gap in section index sequence of {directory} before index {gaps[0]}")

    extents = None
    for idx, p in files:
        with Image.open(p) as img:
            size = (img.height, img.width)
        if extents is None:
            extents = size
        elif size != extents:
            raise StackError(f"{p.name} has extents {size}, expected {extents}")

    paths = [p for _, p in files]
    return SectionStack(indices, extents, kind, lambda pos: load_image(paths[pos], kind))


def save_stack(stack: SectionStack, directory, force: bool = False) -> None:
    """Write one index-named PNG per section. Refuses a non-empty target
    directory unless `force` is given."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise StackError(f"{directory} already contains files; pass force=True to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    for pos in range(stack.depth):
        save_image(stack.section(pos), directory / f"{stack.indices[pos]:04d}.png", stack.kind)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: AutoencoderModel, path) -> None:
    """Container layout: magic, version, JSON header (architecture and
    parameter table), float32 payload, trailing CRC32 over everything."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f"enc{i}" for i in range(len(model.encoder))] + [f"dec{i}" for i in range(len(model.decoder))]
    params = model.parameters()
    header = {
        "architecture": model.spec.to_dict(),
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in zip(names, params)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for p in params:
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    path.write_bytes(bytes(blob))


def load_checkpoint(path, expect_arch: ArchitectureSpec | None = None) -> AutoencoderModel:
    """Load and verify a checkpoint. `expect_arch` turns an architecture
    difference into a :class:`CheckpointError` instead of a surprise later."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError(f"{path.name}: file too short to be a checkpoint")
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic {blob[:8]!r}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path.name}: checksum mismatch (truncated or corrupted file)")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {version}")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
        spec = ArchitectureSpec.from_dict(header["architecture"])
        param_table = header["params"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path.name}: malformed header: {exc}") from exc

    expected_shapes = spec.encoder_shapes() + spec.decoder_shapes()
    if len(param_table) != len(expected_shapes):
        raise CheckpointError(f"{path.name}: {len(param_table)} parameter arrays, architecture needs {len(expected_shapes)}")
    for entry, shape in zip(param_table, expected_shapes):
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(
                f"{path.name}: parameter {entry['name']} has shape {tuple(entry['shape'])}, architecture needs {shape}"
            )
    if expect_arch is not None and spec.to_dict() != expect_arch.to_dict():
        raise CheckpointError(
            f"{path.name}: architecture mismatch: file holds {spec.name!r}, caller expects {expect_arch.name!r}"
        )

    offset = 16 + header_len
    tensors = []
    for entry in param_table:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(blob) - 4:
            raise CheckpointError(f"{path.name}: payload shorter than the parameter table promises")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
        tensors.append(Tensor(arr.astype(np.float32), (), None, op="leaf"))
        offset += nbytes
    n_enc = len(spec.layers)
    return AutoencoderModel(spec, tensors[:n_enc], tensors[n_enc:])


# ---------------------------------------------------------------------------
# vector maps and dense flows


def save_vector_map(obj, path, interpolation: str | None = None) -> None:
    """Serialize a coarse :class:`VectorMap` or a dense (H,W,2) flow.

    Fixed 32-byte header, then row-major little-endian float32 (drow, dcol)
    pairs; round trips are bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, VectorMap):
        kind = "coarse"
        interp = obj.interpolation
        gh, gw = obj.grid_shape
        h, w = obj.image_shape
        payload = obj.displacements
    else:
        arr = np.asarray(obj, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise VectorMapError(f"dense flow must be (H,W,2), got {arr.shape}")
        kind = "dense"
        interp = interpolation or "bilinear"
        gh, gw = arr.shape[0], arr.shape[1]
        h, w = gh, gw
        payload = arr
    header = VECTOR_MAP_HEADER.pack(
        VECTOR_MAP_MAGIC, _VM_KINDS.index(kind), _VM_INTERP.index(interp), gh, gw, h, w
    )
    path.write_bytes(header + np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_vector_map(path, expect: str | None = None):
    """Load a vector-map file; returns a VectorMap (coarse) or ndarray
    (dense). `expect` ('coarse'|'dense') guards consumers that can only
    handle one kind."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < VECTOR_MAP_HEADER_BYTES:
        raise VectorMapError(f"{path.name}: file shorter than the header")
    magic, kind_i, interp_i, gh, gw, h, w = VECTOR_MAP_HEADER.unpack_from(blob)
    if magic != VECTOR_MAP_MAGIC:
        raise VectorMapError(f"{path.name}: bad magic {magic!r}")
    if kind_i >= len(_VM_KINDS) or interp_i >= len(_VM_INTERP):
        raise VectorMapError(f"{path.name}: unknown kind/interpolation tags {kind_i}/{interp_i}")
    kind = _VM_KINDS[kind_i]
    expected_bytes = VECTOR_MAP_HEADER_BYTES + gh * gw * 8
    if len(blob) != expected_bytes:
        raise VectorMapError(f"{path.name}: size {len(blob)} does not match header (expected {expected_bytes})")
    if expect is not None and kind != expect:
        raise VectorMapError(f"{path.name}: holds a {kind} map but a {expect} map was expected")
    data = np.frombuffer(blob, dtype="<f4", offset=VECTOR_MAP_HEADER_BYTES).reshape(gh, gw, 2)
    data = data.astype(np.float32)
    if kind == "dense":
        return data
    return VectorMap(data, (h, w), _VM_INTERP[interp_i])
