"""Binary PGM (P5) read/write for grayscale panels.

Images are float arrays in [0, 1]; files are 8 bit.  A config hash can be
embedded as a header comment so artifacts are traceable to their run."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray, config_hash: str | None = None) -> None:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("pixel values outside [0, 1]")
    h, w = img.shape
    data = np.rint(img * 255.0).astype(np.uint8)
    header = "P5\n"
    if config_hash:
        header += f"# config_hash={config_hash}\n"
    header += f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    """Returns (image in [0, 1], comment lines without the leading '#')."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError("not a binary PGM")
    comments: list[str] = []
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            end = blob.index(b"\n", pos)
            comments.append(blob[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos:pos + w * h]
    if len(raster) != w * h:
        raise ValueError("truncated raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w) / 255.0
    return img, comments
