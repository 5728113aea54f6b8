"""On-disk formats: ISACTNSR tensors, binary PPM, loss CSVs and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ISACTNSR"
LOSS_COLUMNS = ("t", "lambda_ins", "lambda_cls", "L_ins", "L_cls", "L_total", "x_hash_before", "x_hash_after")


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:8] != MAGIC:
        raise ValueError("not an ISACTNSR tensor")
    (rank,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{rank}I", data, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) != offset + 4 * count:
        raise ValueError("ISACTNSR payload size does not match its header")
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(shape).copy()


def write_tensor(path, arr) -> None:
    atomic_write(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_ppm(image: np.ndarray) -> bytes:
    """Binary P6 with maxval 255 from an (H, W, 3) float image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    H, W = pix.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + pix.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Inverse of encode_ppm (returns floats in [0, 1])."""
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("only 8-bit binary PPM is supported")
    W, H = int(fields[1]), int(fields[2])
    pix = np.frombuffer(data, dtype=np.uint8, count=H * W * 3, offset=pos)
    return pix.reshape(H, W, 3).astype(np.float64) / 255.0


def write_ppm(path, image) -> None:
    atomic_write(path, encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def losses_csv(reports, hashes) -> bytes:
    """One row per timestep with losses rounded to 6 decimals and latent hashes."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for rep, (before, after) in zip(reports, hashes):
        row = rep.row()
        writer.writerow([_fmt(row[c]) for c in LOSS_COLUMNS[:6]] + [before, after])
    return buf.getvalue().encode()


def read_losses_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rows_csv(rows, columns) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue().encode()


def dumps_kv(obj: dict) -> bytes:
    """Structured key-value text (JSON with sorted keys)."""
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(dumps_kv(config_dict)).hexdigest()
