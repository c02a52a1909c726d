"""Image, sample-dump, CSV and manifest files.

Sample dumps are a 32-byte header followed by little-endian float64 data:

    bytes  0-7   magic b"MLWGSMP1"
    bytes  8-15  n        (uint64, image side)
    bytes 16-23  n_saved  (uint64)
    bytes 24-31  chain id (uint64)

then ``n_saved * n * n`` values, one saved state after another, pixels in
column-major order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "DUMP_MAGIC",
    "read_image",
    "write_pgm",
    "write_png",
    "write_image",
    "write_sample_dump",
    "read_sample_dump",
    "write_csv",
    "read_csv",
    "sha256_file",
    "write_manifest",
    "BLOCK_COLUMNS",
    "SUMMARY_COLUMNS",
    "TRACE_COLUMNS",
]

DUMP_MAGIC = b"MLWGSMP1"
_HEADER = struct.Struct("<8sQQQ")

BLOCK_COLUMNS = ("chain", "block", "block_row", "block_col", "accept_rate", "tau")
SUMMARY_COLUMNS = ("min_ness_pct", "tau_mean", "accept_mean", "max_psrf", "median_psrf", "converged")
TRACE_COLUMNS = ("iteration", "objective")


# -- images -------------------------------------------------------------------------


def _read_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return raster.reshape(height, width).astype(float) / maxval


def read_image(path) -> np.ndarray:
    """Load a grayscale image scaled to [0, 1] as a ``[row, col]`` array.

    ``.npy`` files are returned unchanged; PGM (P5) is read natively; other
    formats go through Pillow when it is installed.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        img = np.load(path)
    elif suffix == ".pgm":
        img = _read_pgm(path.read_bytes())
    else:
        try:
            from PIL import Image as PILImage
        except ImportError:
            raise ValueError(f"{path}: reading {suffix} needs Pillow; use PGM or .npy") from None
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("I;16") if im.mode in ("I", "I;16") else im.convert("L"))
        img = arr.astype(float) / (65535.0 if arr.dtype == np.uint16 else 255.0)
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"{path}: expected a grayscale image, got shape {img.shape}")
    return img


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM; values are clamped to [0, 1]."""
    raster = _to_bytes(np.asarray(img, dtype=float))
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(_to_bytes(np.asarray(img, dtype=float)), mode="L").save(path)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png(path, img)
    elif path.suffix.lower() == ".npy":
        np.save(path, np.asarray(img, dtype=float))
    else:
        write_pgm(path, img)


# -- sample dumps ---------------------------------------------------------------------


def write_sample_dump(path, samples: np.ndarray, n: int, chain_id: int) -> None:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != n * n:
        raise ValueError(f"samples must be (n_saved, {n * n}), got {samples.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, n, samples.shape[0], chain_id))
        fh.write(samples.astype("<f8").tobytes())


def read_sample_dump(path):
    """Returns ``(n, chain_id, samples)`` with ``samples`` shaped ``(n_saved, n*n)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a sample dump")
    magic, n, n_saved, chain_id = _HEADER.unpack_from(data)
    if magic != DUMP_MAGIC:
        raise ValueError(f"{path}: not a sample dump")
    expected = _HEADER.size + 8 * n * n * n_saved
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    samples = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n_saved, n * n)
    return int(n), int(chain_id), samples.astype(float)


# -- tables and provenance -----------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"package": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(outdir, command: str, config: dict, config_digest: str, seed: int, files) -> Path:
    """``manifest.json`` with the configuration, its hash, versions and file checksums."""
    outdir = Path(outdir)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_digest,
        "seed": seed,
        "versions": _versions(),
        "files": {Path(f).name: sha256_file(f) for f in sorted(files, key=lambda p: Path(p).name)},
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
