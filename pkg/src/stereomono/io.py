"""PNG and PFM readers/writers."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import Image


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale little-endian PFM; NaN marks invalid pixels. Rows are stored bottom-up."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = map(int, dims.groups())
        scale = float(f.readline().rstrip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(f.read(), dtype=endian + "f4")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_png(path, img: Image, bits: int = 16) -> None:
    s = np.clip(img.samples, 0.0, 1.0)
    if img.channels == 3 or bits == 8:
        arr = np.rint(s * 255).astype(np.uint8)
        PILImage.fromarray(arr).save(path)
    else:
        arr = np.rint(s * 65535).astype(np.uint16)
        PILImage.fromarray(arr).save(path)


def read_png(path, mask_path=None) -> Image:
    with PILImage.open(path) as im:
        arr = np.array(im)
    if arr.dtype == np.uint8:
        s = arr / 255.0
    elif arr.dtype in (np.uint16, np.int32):
        s = arr.astype(np.float64) / 65535.0
    else:
        raise ValueError(f"{path}: unsupported PNG sample type {arr.dtype}")
    if s.ndim == 3 and s.shape[2] == 4:
        s = s[:, :, :3]
    valid = None
    if mask_path is not None and Path(mask_path).exists():
        valid = read_mask(mask_path)
    return Image(s, valid)


def write_mask(path, valid: np.ndarray) -> None:
    PILImage.fromarray(np.where(valid, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.array(im.convert("L")) > 127


def write_label_png(path, labels: np.ndarray) -> None:
    """Indexed PNG for small integer label maps (e.g. fusion source masks)."""
    im = PILImage.fromarray(labels.astype(np.uint8), mode="P")
    palette = [0, 0, 255, 255, 0, 0, 0, 0, 0] + [0] * (768 - 9)
    im.putpalette(palette)
    im.save(path)


def read_label_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.array(im)
