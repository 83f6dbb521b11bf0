"""File formats: PFM / PGM image dumps and the JSON-headed float array container.

PFM follows the de-facto standard: ``Pf``/``PF`` magic, ``W H``, a negative
scale for little-endian, rows bottom-to-top.  The array container is a single
JSON header line (utf-8) followed by raw little-endian float64 data; it backs
policy checkpoints and optimizer snapshots.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        magic, data = b"Pf", image[::-1]
    elif image.ndim == 3 and image.shape[2] == 3:
        magic, data = b"PF", image[::-1]
    else:
        raise ValueError(f"PFM wants (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(data.astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: magic {magic!r}")
        w, h = (int(tok) for tok in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h * channels), dtype=dtype)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit preview; input is clipped to [0, 1] then scaled to 255."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        image = image.mean(axis=2)
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat little-endian float64 arrays after one JSON header line."""
    names = sorted(arrays)
    header = {
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
