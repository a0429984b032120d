"""Point-cloud and result file I/O.

Formats: whitespace-separated XYZ (meters, '#' comments), ASCII or
binary-little-endian PLY (x, y, z properties of the vertex element; other
properties ignored), transform JSON documents, and simulator dataset
directories (per-station XYZ + labels + a manifest with the ground-truth
transforms).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import EmptyFile, ParseError
from .geometry import PointCloud, RigidTransform
from .projection import ScannerSpec
from .simulator import ScanDataset

__all__ = [
    "load_cloud",
    "save_cloud_xyz",
    "transform_to_json_dict",
    "transform_from_json_dict",
    "save_transform",
    "load_transform",
    "write_dataset",
    "load_dataset_dir",
]

_FLOAT_FORMAT = "%.17g"  # round-trips float64 exactly


def load_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a point cloud from an XYZ or PLY file.

    The format is inferred from the extension unless given explicitly.
    """
    path = Path(path)
    if fmt is None:
        fmt = path.suffix.lower().lstrip(".")
    if fmt == "ply":
        return _load_ply(path)
    if fmt in ("xyz", "txt", "pts"):
        return _load_xyz(path)
    raise ParseError(f"unsupported cloud format {fmt!r}", path=path)


def _load_xyz(path: Path) -> PointCloud:
    points = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split()
            if len(fields) < 3:
                raise ParseError(
                    f"expected at least 3 columns, got {len(fields)}",
                    path=path,
                    line=lineno,
                )
            try:
                points.append((float(fields[0]), float(fields[1]), float(fields[2])))
            except ValueError as exc:
                raise ParseError(f"bad coordinate: {exc}", path=path, line=lineno) from exc
    if not points:
        raise EmptyFile(f"{path}: no points")
    return PointCloud(np.array(points))


_PLY_DTYPES = {
    "float": ("f4", float),
    "float32": ("f4", float),
    "double": ("f8", float),
    "float64": ("f8", float),
    "char": ("i1", int),
    "int8": ("i1", int),
    "uchar": ("u1", int),
    "uint8": ("u1", int),
    "short": ("i2", int),
    "int16": ("i2", int),
    "ushort": ("u2", int),
    "uint16": ("u2", int),
    "int": ("i4", int),
    "int32": ("i4", int),
    "uint": ("u4", int),
    "uint32": ("u4", int),
}


def _load_ply(path: Path) -> PointCloud:
    with open(path, "rb") as fh:
        line = fh.readline()
        if line.strip() != b"ply":
            raise ParseError("not a PLY file (missing 'ply' magic)", path=path, line=1)
        fmt = None
        elements: list[tuple[str, int, list[tuple[str, str]]]] = []
        lineno = 1
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                raise ParseError("unexpected end of header", path=path, line=lineno)
            tokens = line.decode("ascii", "replace").strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise ParseError("property before element", path=path, line=lineno)
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[-1]))
                else:
                    elements[-1][2].append((tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ParseError(f"unsupported PLY format {fmt!r}", path=path)
        if not elements or elements[0][0] != "vertex":
            raise ParseError("PLY vertex element must come first", path=path)
        _, count, props = elements[0]
        names = [name for _, name in props]
        for needed in ("x", "y", "z"):
            if needed not in names:
                raise ParseError(f"vertex element missing property {needed!r}", path=path)
        if any(kind == "list" for kind, _ in props):
            raise ParseError("list properties on vertices are unsupported", path=path)
        if count == 0:
            raise EmptyFile(f"{path}: no vertices")

        if fmt == "ascii":
            rows = []
            for i in range(count):
                line = fh.readline()
                lineno += 1
                fields = line.split()
                if len(fields) < len(props):
                    raise ParseError(
                        f"vertex row has {len(fields)} fields, expected {len(props)}",
                        path=path,
                        line=lineno,
                    )
                try:
                    rows.append([float(f) for f in fields[: len(props)]])
                except ValueError as exc:
                    raise ParseError(f"bad vertex value: {exc}", path=path, line=lineno) from exc
            data = np.array(rows)
            xyz = data[:, [names.index("x"), names.index("y"), names.index("z")]]
        else:
            try:
                dtype = np.dtype(
                    [(name, "<" + _PLY_DTYPES[kind][0]) for kind, name in props]
                )
            except KeyError as exc:
                raise ParseError(f"unsupported property type {exc}", path=path) from exc
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise ParseError("binary vertex data truncated", path=path)
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            xyz = np.column_stack(
                [rec["x"].astype(np.float64), rec["y"].astype(np.float64),
                 rec["z"].astype(np.float64)]
            )
    return PointCloud(xyz)


def save_cloud_xyz(path, cloud: PointCloud, header: str | None = None) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        np.savetxt(fh, cloud.xyz, fmt=_FLOAT_FORMAT, delimiter=" ")


def transform_to_json_dict(t: RigidTransform, frame: str = "target→reference") -> dict:
    return {
        "rotation": t.rotation.tolist(),
        "translation": t.translation.tolist(),
        "frame": frame,
    }


def transform_from_json_dict(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]), np.array(d["translation"]))


def save_transform(path, t: RigidTransform, frame: str = "target→reference") -> None:
    Path(path).write_text(json.dumps(transform_to_json_dict(t, frame), indent=2) + "\n")


def load_transform(path) -> RigidTransform:
    return transform_from_json_dict(json.loads(Path(path).read_text()))


def write_dataset(dataset: ScanDataset, out_dir) -> dict:
    """Write one XYZ + labels file per station plus a manifest.

    The manifest records the scanner spec, seed, station poses, pairwise
    ground-truth transforms, and the per-station file names. Returns the
    manifest dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stations = []
    for k, (station, scan) in enumerate(zip(dataset.stations, dataset.scans)):
        cloud_name = f"scan_{k + 1}.xyz"
        label_name = f"scan_{k + 1}_labels.txt"
        save_cloud_xyz(out / cloud_name, scan.cloud)
        np.savetxt(out / label_name, scan.labels, fmt="%d")
        stations.append(
            {
                "index": k,
                "cloud_file": cloud_name,
                "label_file": label_name,
                "position": station.position.tolist(),
                "world_to_scanner": transform_to_json_dict(
                    station.world_to_scanner, frame="world→scanner"
                ),
            }
        )
    manifest = {
        "kind": "treereg-dataset",
        "seed": dataset.seed,
        "noise_sigma": dataset.noise_sigma,
        "scanner": {"phi": dataset.spec.phi, "vartheta": dataset.spec.vartheta},
        "stations": stations,
        "ground_truth_to_first": [
            transform_to_json_dict(
                dataset.transform_between(k, 0), frame=f"scan{k + 1}→scan1"
            )
            for k in range(len(dataset.stations))
        ],
        "primitive_groups": {
            str(pid): dataset.model.primitive_group(pid)
            for pid in range(len(dataset.model.primitives()))
        },
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset_dir(path) -> dict:
    """Load a dataset directory into clouds, labels and metadata.

    Returns a dict with 'clouds', 'labels', 'spec', 'ground_truth_to_first',
    'group_of_label', and the raw manifest.
    """
    root = Path(path)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise ParseError("dataset.json not found", path=root)
    manifest = json.loads(manifest_path.read_text())
    clouds = []
    labels = []
    for st in manifest["stations"]:
        clouds.append(load_cloud(root / st["cloud_file"]))
        labels.append(np.loadtxt(root / st["label_file"], dtype=np.int64, ndmin=1))
    spec = ScannerSpec(manifest["scanner"]["phi"], manifest["scanner"]["vartheta"])
    gts = [transform_from_json_dict(d) for d in manifest["ground_truth_to_first"]]
    groups = {int(k): v for k, v in manifest.get("primitive_groups", {}).items()}
    return {
        "clouds": clouds,
        "labels": labels,
        "spec": spec,
        "ground_truth_to_first": gts,
        "group_of_label": lambda pid: groups.get(int(pid), f"primitive_{pid}"),
        "manifest": manifest,
    }
