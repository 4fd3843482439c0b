"""File formats: PFM depth maps, PGM/PPM images, and parameter checkpoints.

PFM is written 32-bit little-endian with scale field -1.0 (the sign is the
endianness flag). Checkpoints are a flat binary of float64 values behind a
versioned text manifest listing name, shape, and offset for every array,
so a load is bit-exact.
"""

from __future__ import annotations

import io
import os

import numpy as np

PFM_SCALE = -1.0  # negative -> little-endian
CHECKPOINT_MAGIC = "depthgeo-checkpoint"
CHECKPOINT_VERSION = 1


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray):
    """Grayscale (H, W) or color (H, W, 3) PFM, bottom-up row order."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM wants (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n{PFM_SCALE}\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip().decode("ascii")
        if header not in ("Pf", "PF"):
            raise ValueError(f"not a PFM file: header {header!r}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == "PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if header == "PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# -- PGM / PPM ---------------------------------------------------------------

def write_pnm(path, image: np.ndarray):
    """8-bit binary PGM for (H, W), PPM for (H, W, 3). Floats in [0, 1]
    are quantized; integer arrays are taken as-is."""
    img = np.asarray(image)
    if np.issubdtype(img.dtype, np.floating):
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    else:
        img = img.astype(np.uint8)
    if img.ndim == 2:
        magic = "P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = "P6"
    else:
        raise ValueError(f"PNM wants (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Returns float64 in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.readline().strip().decode("ascii")
        if magic not in ("P5", "P6"):
            raise ValueError(f"unsupported PNM magic {magic!r}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        n = w * h * (3 if magic == "P6" else 1)
        data = np.frombuffer(f.read(n), dtype=np.uint8, count=n)
    shape = (h, w, 3) if magic == "P6" else (h, w)
    return data.reshape(shape).astype(np.float64) / maxval


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """arrays: name -> array-like (stored float64 LE). meta: str -> str."""
    blobs = []
    manifest = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    for k, v in (meta or {}).items():
        if any(ch in f"{k}{v}" for ch in "\n|"):
            raise ValueError("meta entries must not contain newlines or '|'")
        manifest.append(f"meta|{k}|{v}")
    offset = 0
    for name in sorted(arrays):
        v = arrays[name]
        if not isinstance(v, np.ndarray) and hasattr(v, "data"):
            v = v.data  # parameter tensor
        a = np.asarray(v).astype("<f8", copy=False)
        shape = ",".join(str(s) for s in a.shape)
        manifest.append(f"array|{name}|{shape}|{offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = "\n".join(manifest) + "\nend\n"
    with open(path, "wb") as f:
        f.write(f"{len(head.encode('ascii')):012d}\n".encode("ascii"))
        f.write(head.encode("ascii"))
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns (arrays: name -> float64 array, meta: dict)."""
    with open(path, "rb") as f:
        head_len = int(f.readline())
        head = f.read(head_len).decode("ascii").splitlines()
        if not head or not head[0].startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a depthgeo checkpoint")
        version = int(head[0].rsplit("v", 1)[1])
        if version > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} too new")
        meta, entries = {}, []
        for line in head[1:]:
            if line == "end":
                break
            kind, rest = line.split("|", 1)
            if kind == "meta":
                k, v = rest.split("|", 1)
                meta[k] = v
            elif kind == "array":
                name, shape, offset = rest.split("|")
                shape = tuple(int(s) for s in shape.split(",")) if shape else ()
                entries.append((name, shape, int(offset)))
            else:
                raise ValueError(f"unknown manifest entry kind {kind!r}")
        payload = f.read()
    arrays = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            payload, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
    return arrays, meta


def assign_checkpoint(arrays: dict, named_tensors: dict):
    """Copy checkpoint arrays into live parameter tensors, strict on names
    and shapes."""
    missing = set(named_tensors) - set(arrays)
    extra = set(arrays) - set(named_tensors)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, t in named_tensors.items():
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"{name}: shape {arrays[name].shape} != "
                             f"{t.data.shape}")
        t.data[...] = arrays[name]
