"""Read and write 8-bit grayscale/RGB images as PGM (P5) or PNG."""
import os
import re

import numpy as np

_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM holds one channel, got shape {img.shape}")
    data = np.ascontiguousarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = blob[m.end() : m.end() + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_png(path, img):
    from PIL import Image

    data = np.ascontiguousarray(img, dtype=np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im).copy()


def read_image(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".pnm"):
        return read_pgm(path)
    return read_png(path)


def read_mask(path):
    """Load a vessel mask: pixels above 127 are vessel."""
    img = read_image(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img > 127


def write_mask(path, mask):
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_pgm(path, img)


def to_uint8(img):
    """Map a float image in [0, 1] to 8 bits with rounding."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
