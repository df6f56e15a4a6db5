"""File formats: XYZ text, PTC1 binary point records, and dataset directories.

XYZ: one point per line, three decimal floats separated by single spaces, an
optional fourth integer column for per-point labels; '#' starts a comment.

PTC1: magic ``PTC1``, u32 LE point count, u8 label flag, then n x 3 f32 LE
coordinates, then (if flagged) n u16 LE labels.  Coordinates round-trip
exactly at f32 precision.

A dataset directory holds one PTC1 file per record plus ``manifest.tsv`` with
columns file, class_label, transform_kind, seed_path.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

import numpy as np

from .data import Record
from .geometry import PointCloud

MANIFEST_COLUMNS = ("file", "class_label", "transform_kind", "seed_path")


def write_xyz(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_xyz(cloud))


def format_xyz(cloud: PointCloud) -> str:
    lines = []
    for i, (x, y, z) in enumerate(cloud.points):
        line = f"{x:.17g} {y:.17g} {z:.17g}"
        if cloud.labels is not None:
            line += f" {int(cloud.labels[i])}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def read_xyz(path) -> PointCloud:
    points: List[List[float]] = []
    labels: List[int] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 floats "
                                 f"(+ optional label), got {len(parts)} fields")
            points.append([float(p) for p in parts[:3]])
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if labels and len(labels) != len(points):
        raise ValueError(f"{path}: label column present on only some lines")
    return PointCloud(np.array(points), labels=np.array(labels) if labels else None)


PTC1_MAGIC = b"PTC1"


def write_ptc1(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ptc1_bytes(cloud))


def ptc1_bytes(cloud: PointCloud) -> bytes:
    has_labels = cloud.labels is not None
    out = [PTC1_MAGIC, struct.pack("<IB", len(cloud), 1 if has_labels else 0),
           cloud.points.astype("<f4").tobytes()]
    if has_labels:
        labels = cloud.labels
        if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
            raise ValueError("labels must fit in u16")
        out.append(labels.astype("<u2").tobytes())
    return b"".join(out)


def read_ptc1(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PTC1_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    n, flag = struct.unpack_from("<IB", blob, 4)
    offset = 9
    coords = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=offset)
    offset += 12 * n
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=offset).astype(np.int64)
    return PointCloud(coords.reshape(n, 3).astype(np.float64), labels=labels)


def read_cloud(path, fmt: Optional[str] = None) -> PointCloud:
    fmt = fmt or ("ptc1" if str(path).endswith(".ptc1") else "xyz")
    return read_ptc1(path) if fmt == "ptc1" else read_xyz(path)


def write_cloud(cloud: PointCloud, path, fmt: Optional[str] = None) -> None:
    fmt = fmt or ("ptc1" if str(path).endswith(".ptc1") else "xyz")
    if fmt == "ptc1":
        write_ptc1(cloud, path)
    else:
        write_xyz(cloud, path)


def _seed_path_str(provenance: dict) -> str:
    sp = provenance.get("seed_path")
    return "-" if sp is None else ":".join(str(p) for p in sp)


def write_dataset_dir(records: Sequence[Record], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    width = max(6, len(str(len(records))))
    for i, rec in enumerate(records):
        name = f"{i:0{width}d}.ptc1"
        write_ptc1(rec.cloud, directory / name)
        rows.append((name,
                     "-" if rec.label is None else str(rec.label),
                     rec.provenance.get("transform_kind", "-"),
                     _seed_path_str(rec.provenance)))
    with open(directory / "manifest.tsv", "w", encoding="ascii") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def read_dataset_dir(directory) -> List[Record]:
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    records: List[Record] = []
    with open(manifest, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != MANIFEST_COLUMNS:
            raise ValueError(f"{manifest}: unexpected columns {header}")
        for raw in fh:
            name, label, kind, seed_path = raw.rstrip("\n").split("\t")
            cloud = read_ptc1(directory / name)
            prov = {"file": name}
            if kind != "-":
                prov["transform_kind"] = kind
            if seed_path != "-":
                prov["seed_path"] = tuple(int(p) for p in seed_path.split(":"))
            records.append(Record(cloud, label=None if label == "-" else int(label),
                                  provenance=prov))
    return records


def write_metrics_tsv(rows: Sequence[tuple], fh: TextIO) -> None:
    fh.write("epoch\tsplit\tloss\taccuracy\n")
    for epoch, split_name, loss, acc in rows:
        fh.write(f"{epoch}\t{split_name}\t{loss:.17g}\t{acc:.17g}\n")
