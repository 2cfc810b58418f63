"""Portable anymap (PGM/PPM) and mask/kernel text files.

Images hold values in [0, 1]; on disk they are scaled by ``maxval`` and rounded.
``maxval <= 255`` uses one byte per sample, larger values two big-endian bytes,
as the netpbm format prescribes. Binary (P5/P6) is written; P2/P3/P5/P6 are read.

Run-length mask text format::

    RLE <rows> <cols>
    <run> <run> <run> ...

Runs alternate between 0 and 1 in row-major order, starting with 0 (a leading
run may be 0). Kernel files are plain whitespace-separated 2-D arrays.
"""

import re

import numpy as np

from .errors import FormatError


def write_pnm(path, image, maxval=255):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must lie in [1, 65535]")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    dtype = ">u1" if maxval < 256 else ">u2"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (img.shape[1], img.shape[0], maxval))
        fh.write(q.astype(dtype).tobytes())


def read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    token_re = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = token_re.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad header") from exc
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P2", b"P3"):
        values = np.array(data[pos:].split(), dtype=np.int64)
    else:
        raw = data[pos + 1:]
        dtype = ">u1" if maxval < 256 else ">u2"
        need = count * np.dtype(dtype).itemsize
        if len(raw) < need:
            raise FormatError(f"{path}: truncated pixel data")
        values = np.frombuffer(raw[:need], dtype=dtype)
    if values.size != count:
        raise FormatError(f"{path}: expected {count} samples, found {values.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape).astype(np.float64) / maxval


def write_mask_rle(path, mask):
    flat = np.asarray(mask, dtype=bool).ravel()
    runs, current, n = [], False, 0
    for v in flat:
        if v == current:
            n += 1
        else:
            runs.append(n)
            current, n = v, 1
    runs.append(n)
    rows, cols = np.shape(mask)
    with open(path, "w") as fh:
        fh.write(f"RLE {rows} {cols}\n")
        fh.write(" ".join(str(r) for r in runs) + "\n")


def read_mask_rle(path):
    with open(path) as fh:
        header = fh.readline().split()
        body = fh.read().split()
    if len(header) != 3 or header[0] != "RLE":
        raise FormatError(f"{path}: missing RLE header")
    rows, cols = int(header[1]), int(header[2])
    runs = [int(r) for r in body]
    if sum(runs) != rows * cols or any(r < 0 for r in runs):
        raise FormatError(f"{path}: runs do not cover a {rows}x{cols} mask")
    values = np.concatenate([np.full(r, i % 2 == 1) for i, r in enumerate(runs)]) if runs else np.zeros(0, bool)
    return values.reshape(rows, cols)


def read_mask(path):
    """Binary mask from an RLE text file or a PGM (nonzero = 1)."""
    with open(path, "rb") as fh:
        head = fh.read(3)
    if head.startswith(b"RLE"):
        return read_mask_rle(path)
    return read_pnm(path) > 0


def write_kernel(path, kernel):
    np.savetxt(path, np.asarray(kernel, dtype=np.float64), fmt="%.17g")


def read_kernel(path):
    k = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if not np.all(np.isfinite(k)):
        raise FormatError(f"{path}: kernel has non-finite entries")
    return k
