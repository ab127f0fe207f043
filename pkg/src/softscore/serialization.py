"""Manifest + binary-blob persistence shared by encoder and checkpoint files.

A saved artifact is a JSON manifest next to a `.bin` blob of little-endian
32-bit floats, tensors concatenated in the order the manifest declares.
The manifest carries the blob's SHA-256 so corruption is detected at load.
"""

import hashlib
import json
import math
from pathlib import Path

import numpy as np


def sha256_hex(data):
    return hashlib.sha256(data).hexdigest()


def pack_arrays(arrays):
    """Concatenate arrays as little-endian float32 bytes."""
    parts = [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(parts)


def unpack_arrays(blob, shapes):
    """Split a float32 blob back into float64 arrays of the given shapes."""
    expected = sum(math.prod(s) for s in shapes)
    flat = np.frombuffer(blob, dtype="<f4")
    if flat.size != expected:
        raise ValueError(f"blob holds {flat.size} floats but the manifest declares {expected}")
    out, offset = [], 0
    for shape in shapes:
        n = math.prod(shape)
        out.append(flat[offset : offset + n].astype(np.float64).reshape(shape))
        offset += n
    return out


def round_f32(a):
    """Quantize to float32 precision while staying float64 in memory."""
    return a.astype(np.float32).astype(np.float64)


def write_manifest_and_blob(directory, manifest_name, blob_name, manifest, arrays):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = pack_arrays(arrays)
    manifest = dict(manifest)
    manifest["blob_sha256"] = sha256_hex(blob)
    (directory / blob_name).write_bytes(blob)
    with open(directory / manifest_name, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return directory / manifest_name


def read_manifest_and_blob(manifest_path):
    """Load (manifest, blob bytes); the caller checks the checksum so it can
    raise its own error type."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    blob_name = manifest.get("blob_file")
    if blob_name is None:
        raise ValueError(f"{manifest_path}: manifest lacks a blob_file field")
    blob = (manifest_path.parent / blob_name).read_bytes()
    return manifest, blob
