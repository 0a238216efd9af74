"""Dataset directory format.

One subdirectory per sample, each holding::

    genes.txt    gene name per line, optionally "<name>\\tMARKER"
    spots.csv    spot_id,x,y,patch_index
    expr.csv     header of gene names, one row per spot (spots.csv order)
    patches.bin  b"CMRP" u32 version, count, H, W, C(=3), then u8 pixels
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .dataset import SampleDataset, SpotRecord

PATCH_MAGIC = b"CMRP"
PATCH_VERSION = 1
SPOTS_HEADER = ["spot_id", "x", "y", "patch_index"]


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def write_patches(path: Path, patches: np.ndarray) -> None:
    patches = np.asarray(patches)
    if patches.dtype != np.uint8 or patches.ndim != 4 or patches.shape[3] != 3:
        raise DataError(f"{path}: patches must be u8 N x H x W x 3, got {patches.dtype} {patches.shape}")
    n, h, w, c = patches.shape
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC + struct.pack("<5I", PATCH_VERSION, n, h, w, c))
        f.write(np.ascontiguousarray(patches).tobytes())


def read_patches(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{path}: missing patch pack")
    blob = path.read_bytes()
    if len(blob) < 24:
        raise DataError(f"{path}: offset 0: truncated header ({len(blob)} bytes)")
    if blob[:4] != PATCH_MAGIC:
        raise DataError(f"{path}: offset 0: bad magic {blob[:4]!r}")
    version, n, h, w, c = struct.unpack("<5I", blob[4:24])
    if version != PATCH_VERSION:
        raise DataError(f"{path}: offset 4: unsupported version {version}")
    if c != 3:
        raise DataError(f"{path}: offset 20: expected 3 channels, got {c}")
    expected = 24 + n * h * w * c
    if len(blob) != expected:
        raise DataError(f"{path}: offset 24: payload is {len(blob) - 24} bytes, header implies {expected - 24}")
    return np.frombuffer(blob, dtype=np.uint8, offset=24).reshape(n, h, w, c).copy()


def save_sample(ds: SampleDataset, out_dir) -> None:
    d = Path(out_dir) / ds.sample_id
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "genes.txt", "w", newline="\n") as f:
        for name, flag in zip(ds.gene_names, ds.marker_flags):
            f.write(f"{name}\tMARKER\n" if flag else f"{name}\n")
    with open(d / "spots.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPOTS_HEADER)
        for s in ds.spots:
            w.writerow([s.spot_id, s.x, s.y, s.patch_index])
    with open(d / "expr.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ds.gene_names)
        for row in ds.expr:
            w.writerow([_fmt(v) for v in row])
    write_patches(d / "patches.bin", ds.patches)


def save_dataset(datasets: list[SampleDataset], out_dir) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        save_sample(ds, out_dir)


def _read_genes(path: Path) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise DataError(f"{path}: missing gene list")
    names, flags = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) > 2 or (len(parts) == 2 and parts[1] != "MARKER"):
            raise DataError(f"{path}: line {lineno}: expected '<name>' or '<name>\\tMARKER'")
        names.append(parts[0])
        flags.append(len(parts) == 2)
    return names, np.array(flags, dtype=bool)


def _read_spots(path: Path) -> list[SpotRecord]:
    if not path.exists():
        raise DataError(f"{path}: missing spot table")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != SPOTS_HEADER:
        raise DataError(f"{path}: line 1: header must be {','.join(SPOTS_HEADER)}")
    spots = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
        try:
            spots.append(SpotRecord(row[0], int(row[1]), int(row[2]), int(row[3])))
        except ValueError as err:
            raise DataError(f"{path}: line {lineno}: {err}") from err
    return spots


def _read_expr(path: Path, genes: list[str]) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{path}: missing expression table")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: line 1: empty file")
    if rows[0] != genes:
        raise DataError(f"{path}: line 1: header does not match genes.txt ({len(rows[0])} vs {len(genes)} names)")
    out = np.empty((len(rows) - 1, len(genes)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(genes):
            raise DataError(f"{path}: line {i + 2}: expected {len(genes)} values, got {len(row)}")
        try:
            out[i] = [float(v) for v in row]
        except ValueError as err:
            raise DataError(f"{path}: line {i + 2}: {err}") from err
    if np.any(out < 0) or not np.all(np.isfinite(out)):
        bad = int(np.argwhere((out < 0) | ~np.isfinite(out))[0][0])
        raise DataError(f"{path}: line {bad + 2}: expression must be finite and nonnegative")
    return out


def load_sample(sample_dir) -> SampleDataset:
    d = Path(sample_dir)
    genes, flags = _read_genes(d / "genes.txt")
    spots = _read_spots(d / "spots.csv")
    expr = _read_expr(d / "expr.csv", genes)
    if len(expr) != len(spots):
        raise DataError(f"{d / 'expr.csv'}: {len(expr)} expression rows but spots.csv lists {len(spots)} spots")
    patches = read_patches(d / "patches.bin")
    return SampleDataset(d.name, spots, expr, genes, flags, patches)


def load_dataset(dir_path) -> list[SampleDataset]:
    root = Path(dir_path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subdirs:
        raise DataError(f"{root}: no samples found")
    return [load_sample(p) for p in subdirs]
