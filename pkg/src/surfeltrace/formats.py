"""File formats: PFM/PNG images, scene JSON, checkpoints, environment maps."""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .scene import PARAM_NAMES, Scene

SCENE_VERSION = 1
CHECKPOINT_MAGIC = b"SFTCKPT\x01"
GAMMA = 2.2


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# ------------------------------------------------------------------ images

def save_pfm(path, image) -> None:
    """Little-endian PFM; rows are written bottom to top."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"cannot store shape {img.shape} as PFM")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        parts = data.split(b"\n", 3)
        tag, dims, scale, body = parts[0].strip(), parts[1].split(), float(parts[2]), parts[3]
        w, h = int(dims[0]), int(dims[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    if tag not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    ch = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * ch
    if len(body) < 4 * count:
        raise FormatError(f"{path}: truncated PFM data")
    img = np.frombuffer(body[: 4 * count], dtype=dtype).astype(np.float32)
    img = img.reshape(h, w, ch)[::-1]
    return np.ascontiguousarray(img[..., 0] if ch == 1 else img)


def encode_display(image) -> np.ndarray:
    """Linear float -> gamma 2.2 encoded uint8 (negatives clamp to 0)."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * x ** (1.0 / GAMMA)).astype(np.uint8)


def save_png(path, image) -> None:
    from PIL import Image

    Image.fromarray(encode_display(image)).save(path)


def load_png(path, linear: bool = True) -> np.ndarray:
    """8-bit image as float in [0, 1]; decoded to linear unless ``linear=False``."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"))
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: unreadable image") from exc
    x = arr.astype(np.float64) / 255.0
    if linear:
        x[..., :3] = x[..., :3] ** GAMMA
    return x


def save_image(path, image) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        save_pfm(path, image)
    elif path.suffix.lower() == ".png":
        save_png(path, image)
    else:
        raise FormatError(f"unsupported image extension: {path.suffix}")


def load_image(path, linear: bool = True) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return load_pfm(path).astype(np.float64)
    return load_png(path, linear)


# ------------------------------------------------------------------- scene

def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "count": len(scene),
        "activation": {
            "mu": "identity", "rot": "unit quaternion (w, x, y, z)", "scale_raw": "exp",
            "opacity_raw": "sigmoid", "sh": "identity (+0.5 DC offset, clamp >= 0)",
            "albedo_raw": "sigmoid", "roughness_raw": "sigmoid",
        },
        "fields": {name: getattr(scene, name).detach().numpy().tolist() for name in PARAM_NAMES},
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("version") != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {doc.get('version')!r}")
    try:
        fields = doc["fields"]
        return Scene(*(np.asarray(fields[name], dtype=np.float64) for name in PARAM_NAMES))
    except (KeyError, ValueError, RuntimeError) as exc:
        raise FormatError(f"malformed scene document: {exc}") from exc


def save_scene(path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def load_scene(path) -> Scene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON") from exc
    return scene_from_dict(doc)


# -------------------------------------------------------------- checkpoint

def save_container(path, meta: dict, arrays: dict) -> None:
    """Deterministic binary container: magic, JSON header, raw array bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        dt = a.dtype if a.dtype.itemsize == 1 else a.dtype.newbyteorder("<")
        raw = a.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    n = struct.unpack("<Q", data[8:16])[0]
    header = json.loads(data[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


# ------------------------------------------------------------- environment

def equirect_lookup(img, dirs) -> np.ndarray:
    """Bilinear sample of a z-up equirect map; row 0 is the +z pole."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    H, W = img.shape[:2]
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    x = (phi + math.pi) / (2 * math.pi) * W - 0.5
    y = theta / math.pi * H - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    xa, xb = x0 % W, (x0 + 1) % W
    ya, yb = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    return ((1 - fx) * (1 - fy) * img[ya, xa] + fx * (1 - fy) * img[ya, xb]
            + (1 - fx) * fy * img[yb, xa] + fx * fy * img[yb, xb])


def equirect_directions(H: int, W: int) -> np.ndarray:
    phi = (np.arange(W) + 0.5) / W * 2 * math.pi - math.pi
    theta = (np.arange(H) + 0.5) / H * math.pi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1)


def equirect_to_cube(img, resolution: int = 32) -> np.ndarray:
    from .cubemap import texel_directions

    img = np.asarray(img, dtype=np.float64)
    out = equirect_lookup(img, texel_directions(resolution))
    return out if img.ndim == 3 else out[..., 0]


def cube_to_equirect(cube, H: int, W: int) -> np.ndarray:
    from .cubemap import lookup

    return lookup(np.asarray(cube, dtype=np.float64), equirect_directions(H, W))


def load_env(path, resolution: int = 32):
    """Equirectangular PFM -> :class:`~surfeltrace.shading.EnvCubemap`."""
    from .shading import EnvCubemap

    path = Path(path)
    if path.suffix.lower() != ".pfm":
        raise FormatError(f"{path}: environment maps must be float PFM")
    img = load_pfm(path).astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if not np.all(np.isfinite(img)):
        raise FormatError(f"{path}: non-finite radiance")
    return EnvCubemap.from_radiance(np.maximum(equirect_to_cube(img, resolution), 0.0))


def save_env(path, env, height: int = 64) -> None:
    rad = env.numpy() if hasattr(env, "numpy") else np.asarray(env)
    save_pfm(path, cube_to_equirect(rad, height, 2 * height))
