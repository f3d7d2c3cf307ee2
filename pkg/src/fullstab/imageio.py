"""Frame, mask and frame-directory I/O (PNG / binary PGM / PPM)."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import Frame

FRAME_PATTERN = "{:05d}.png"
_INDEX_RE = re.compile(r"^(\d+)\.(png|ppm|pgm)$")


def _to_u8(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, data: np.ndarray) -> None:
    """Write an HxW or HxWx{1,3} array in [0, 1] as PNG, PGM or PPM."""
    path = Path(path)
    arr = _to_u8(data)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image extension: {path.suffix}")
    if path.suffix.lower() == ".ppm" and arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if path.suffix.lower() == ".pgm" and arr.ndim == 3:
        arr = _to_u8(Frame(arr / 255.0).gray())
    Image.fromarray(arr).save(path, format=fmt)


def read_image(path) -> np.ndarray:
    """Read an image as float32 HxWxC in [0, 1] (C = 1 or 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK") else im.convert("L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(
        path, format="PPM")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_confidence(path, conf: np.ndarray) -> None:
    write_image(Path(path).with_suffix(".pgm"), np.clip(conf, 0.0, 1.0))


def list_frame_files(directory) -> list[Path]:
    """Numbered frame files in ``directory``; raises on gaps in the numbering."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    found = {}
    for p in directory.iterdir():
        m = _INDEX_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise FileNotFoundError(f"no frame files in {directory}")
    lo, hi = min(found), max(found)
    for i in range(lo, hi + 1):
        if i not in found:
            raise FileNotFoundError(f"missing frame file: {directory / FRAME_PATTERN.format(i)}")
    return [found[i] for i in range(lo, hi + 1)]


def read_frames(directory, mask_dir=None) -> list[Frame]:
    frames = []
    for p in list_frame_files(directory):
        data = read_image(p)
        valid = None
        if mask_dir is not None:
            mp = Path(mask_dir) / (p.stem + ".pgm")
            if mp.exists():
                valid = read_mask(mp)
        frames.append(Frame(data, valid))
    sizes = {f.data.shape for f in frames}
    if len(sizes) != 1:
        raise ValueError(f"frames in {directory} differ in size: {sorted(sizes)}")
    return frames


def write_frames(directory, frames, mask_dir=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if mask_dir is not None:
        Path(mask_dir).mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_image(directory / FRAME_PATTERN.format(i), f.data)
        if mask_dir is not None:
            write_mask(Path(mask_dir) / f"{i:05d}.pgm", f.valid)
