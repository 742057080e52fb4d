"""Loader for nerf-synthetic style datasets (``transforms_<split>.json``)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FormatError, load_image, save_image
from .renderer import Camera

# OpenGL camera (y up, looking down -z) to ours (y down, looking down +z)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(Exception):
    """Base class for dataset problems."""


class MissingManifestError(DatasetError):
    pass


class MissingFileError(DatasetError):
    def __init__(self, path):
        super().__init__(f"missing file: {path}")
        self.path = Path(path)


class ImageDecodeError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) linear
    mask: np.ndarray  # (H, W) in [0, 1]
    name: str = ""
    split: str = "train"
    extras: dict = field(default_factory=dict)


@dataclass
class Dataset:
    views: list
    root: Path | None = None
    env_path: Path | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [v for v in self.views if v.split == name]

    def __len__(self) -> int:
        return len(self.views)

    def point_cloud(self) -> np.ndarray | None:
        pts = self.meta.get("points")
        return None if pts is None else np.asarray(pts, dtype=np.float64)


def focal_from_fov(width: int, fov_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * fov_x)


def _resolve(root: Path, rel: str, exts=(".png", ".pfm")) -> Path:
    p = (root / rel).resolve()
    if p.suffix:
        return p
    for ext in exts:
        if p.with_suffix(ext).exists():
            return p.with_suffix(ext)
    return p.with_suffix(exts[0])


def _read(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(path)
    try:
        return load_image(path)
    except (FormatError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def load_split(root, split: str, background=(0.0, 0.0, 0.0)) -> list:
    root = Path(root)
    manifest = root / f"transforms_{split}.json"
    if not manifest.exists():
        raise MissingManifestError(f"missing manifest: {manifest}")
    try:
        doc = json.loads(manifest.read_text())
        fov = float(doc["camera_angle_x"])
        frames = doc["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MissingManifestError(f"malformed manifest {manifest}: {exc}") from exc
    bg = np.asarray(background, dtype=np.float64)
    views = []
    for i, fr in enumerate(frames):
        img = _read(_resolve(root, fr["file_path"]))
        H, W = img.shape[:2]
        if "w" in doc and "h" in doc and (int(doc["w"]), int(doc["h"])) != (W, H):
            raise DimensionMismatchError(f"{fr['file_path']}: {W}x{H}, manifest says {doc['w']}x{doc['h']}")
        if img.ndim == 3 and img.shape[2] == 4:
            alpha = img[..., 3]
            rgb = img[..., :3] * alpha[..., None] + (1 - alpha[..., None]) * bg
        else:
            rgb = img if img.ndim == 3 else np.repeat(img[..., None], 3, 2)
            alpha = np.ones((H, W))
        if "mask_path" in fr:
            m = _read(_resolve(root, fr["mask_path"]))
            if m.shape[:2] != (H, W):
                raise DimensionMismatchError(f"{fr['mask_path']}: mask size differs from image")
            alpha = m if m.ndim == 2 else m[..., 0]
        f = focal_from_fov(W, fov)
        pose = np.asarray(fr["transform_matrix"], dtype=np.float64) @ GL_TO_CV
        cam = Camera(W, H, f, f, W / 2.0, H / 2.0, pose)
        extras = {}
        for key in ("albedo_path", "normal_path", "roughness_path"):
            if key in fr:
                extras[key.removesuffix("_path")] = _read(_resolve(root, fr[key]))
        views.append(View(cam, rgb, alpha, fr.get("name", f"{split}_{i:03d}"), split, extras))
    return views


def load_dataset(root, splits=("train", "test"), background=(0.0, 0.0, 0.0)) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise MissingManifestError(f"dataset directory not found: {root}")
    views = []
    found = False
    for split in splits:
        if (root / f"transforms_{split}.json").exists():
            found = True
            views += load_split(root, split, background)
    if not found:
        raise MissingManifestError(f"no transforms_*.json manifest in {root}")
    meta = {}
    if (root / "points.json").exists():
        meta["points"] = json.loads((root / "points.json").read_text())
    env = root / "env.pfm"
    return Dataset(views, root, env if env.exists() else None, meta)


def write_split(root, split: str, views, fov_x: float, fmt: str = ".pfm") -> None:
    """Write views (camera, image, mask) in the loader's format."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, v in enumerate(views):
        rel = f"{split}/r_{i:03d}"
        save_image(root / (rel + fmt), v.image)
        fr = {"file_path": "./" + rel, "transform_matrix": (v.camera.pose @ GL_TO_CV).tolist(),
              "mask_path": "./" + rel + "_mask"}
        if v.name:
            fr["name"] = v.name
        save_image(root / (rel + "_mask" + fmt), v.mask)
        for key, img in v.extras.items():
            save_image(root / f"{rel}_{key}{fmt}", img)
            fr[f"{key}_path"] = f"./{rel}_{key}"
        frames.append(fr)
    doc = {"camera_angle_x": fov_x, "frames": frames}
    if views:
        doc["w"], doc["h"] = views[0].camera.width, views[0].camera.height
    (root / f"transforms_{split}.json").write_text(json.dumps(doc, indent=1))
