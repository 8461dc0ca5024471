"""On-disk formats: NetPBM images, raw float32 sidecars, OBJ meshes, ASCII PLY."""

from __future__ import annotations

import json
import os

import numpy as np


def fmt_float(x) -> str:
    """Stable shortish decimal rendering used by every CSV writer."""
    return format(float(x), ".9g")


def save_ppm(path, image) -> None:
    """Write a float image in [0, 1], shape (H, W, 3), as binary P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic, rest = _pnm_header(raw, b"P6")
    w, h, maxval, data = rest
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return img.astype(np.float64) / float(maxval)


def save_pgm(path, gray) -> None:
    """Write a bool mask or float image in [0, 1], shape (H, W), as binary P5."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {arr.shape}")
    if arr.dtype == bool:
        data = np.where(arr, 255, 0).astype(np.uint8)
    else:
        data = np.rint(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic, rest = _pnm_header(raw, b"P5")
    w, h, maxval, data = rest
    img = np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)
    return img.astype(np.float64) / float(maxval)


def _pnm_header(raw: bytes, magic: bytes):
    # Header tokens may be separated by any whitespace; comments start with '#'.
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    tokens = []
    i = len(magic)
    while len(tokens) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        tokens.append(raw[i:j])
        i = j
    i += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    return magic, (w, h, maxval, raw[i:])


def save_float_raw(path, array) -> None:
    """Raw little-endian float32 planes plus a JSON sidecar header at path + '.json'."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        h, w = arr.shape
        channels = 1
    elif arr.ndim == 3:
        h, w, channels = arr.shape
    else:
        raise ValueError(f"expected 2-D or 3-D array, got {arr.shape}")
    header = {
        "width": int(w),
        "height": int(h),
        "channels": int(channels),
        "dtype": "float32",
        "byte_order": "little",
    }
    with open(path, "wb") as f:
        f.write(arr.astype("<f4").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_float_raw(path):
    with open(str(path) + ".json") as f:
        header = json.load(f)
    w, h, c = header["width"], header["height"], header["channels"]
    data = np.fromfile(path, dtype="<f4", count=w * h * c)
    arr = data.astype(np.float64)
    return arr.reshape(h, w) if c == 1 else arr.reshape(h, w, c)


def save_obj(path, vertices, faces) -> None:
    """Wavefront OBJ with 1-indexed triangle faces. Units are mm."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    lines = []
    for x, y, z in v:
        lines.append(f"v {fmt_float(x)} {fmt_float(y)} {fmt_float(z)}")
    for a, b, c in f + 1:
        lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def save_ply(path, points, indentation) -> None:
    """ASCII PLY point cloud with per-point indentation depth (mm)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dep = np.asarray(indentation, dtype=np.float64).reshape(-1)
    if len(pts) != len(dep):
        raise ValueError("points and indentation lengths differ")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property float indentation",
        "end_header",
    ]
    rows = [
        f"{fmt_float(x)} {fmt_float(y)} {fmt_float(z)} {fmt_float(d)}"
        for (x, y, z), d in zip(pts, dep)
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(header + rows) + "\n")


def load_ply(path):
    with open(path) as fh:
        text = fh.read().splitlines()
    n = 0
    body_at = 0
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.strip() == "end_header":
            body_at = i + 1
            break
    data = np.array([[float(v) for v in row.split()] for row in text[body_at : body_at + n]])
    if data.size == 0:
        return np.zeros((0, 3)), np.zeros((0,))
    return data[:, :3], data[:, 3]


def sha256_of_json(obj) -> str:
    """Short content hash of a JSON-serializable object, for manifests."""
    import hashlib

    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return str(path)
