"""Byte-level dataset fixtures, built by hand rather than with the package writers."""

import struct
from pathlib import Path

import numpy as np


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + payload


def idx_pair(root: Path, n_images=4, n_labels=4, h=5, w=6, prefix="train"):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(n_images, h, w), dtype=np.uint8)
    labels = (np.arange(n_labels) % 3).astype(np.uint8)
    img = root / f"{prefix}-images-idx3-ubyte"
    lab = root / f"{prefix}-labels-idx1-ubyte"
    img.write_bytes(idx_bytes(0x803, (n_images, h, w), pixels.tobytes()))
    lab.write_bytes(idx_bytes(0x801, (n_labels,), labels.tobytes()))
    return img, lab, pixels, labels


def cifar_records(labels, fill=None) -> tuple[bytes, list[np.ndarray]]:
    """Records whose R, G and B planes hold distinct constant-plus-ramp patterns."""
    out, planes = b"", []
    for i, lab in enumerate(labels):
        img = np.zeros((3, 32, 32), dtype=np.uint8)
        for c in range(3):
            img[c] = (np.arange(1024).reshape(32, 32) + 50 * c + 7 * i) % 256
        out += bytes([lab]) + img.tobytes()
        planes.append(img)
    return out, planes


def malformed(root: Path) -> dict[str, tuple[Path, Path, str]]:
    """name -> (images path, labels path, expected error class name)."""
    root.mkdir(parents=True, exist_ok=True)
    cases = {}
    px = bytes(2 * 3 * 3)
    lab = bytes(2)

    def pair(name, img, lbl, err):
        ip, lp = root / f"{name}-img", root / f"{name}-lbl"
        ip.write_bytes(img)
        lp.write_bytes(lbl)
        cases[name] = (ip, lp, err)

    good_l = idx_bytes(0x801, (2,), lab)
    good_i = idx_bytes(0x803, (2, 3, 3), px)
    pair("image-magic", idx_bytes(0x802, (2, 3, 3), px), good_l, "BadMagicError")
    pair("label-magic", good_i, idx_bytes(0x803, (2, 1, 1), lab), "BadMagicError")
    pair("swapped", good_l, good_i, "BadMagicError")
    pair("empty", b"", good_l, "TruncatedFileError")
    pair("short-header", struct.pack(">I", 0x803) + struct.pack(">I", 2), good_l, "TruncatedFileError")
    pair("short-pixels", idx_bytes(0x803, (2, 3, 3), px[:-1]), good_l, "TruncatedFileError")
    pair("short-labels", good_i, idx_bytes(0x801, (2,), lab[:1]), "TruncatedFileError")
    pair("count", idx_bytes(0x803, (4, 3, 3), bytes(36)), idx_bytes(0x801, (3,), bytes(3)), "CountMismatchError")
    pair("trailing", good_i + b"\x00", good_l, "DatasetFormatError")
    return cases
