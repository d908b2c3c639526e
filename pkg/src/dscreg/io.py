"""ASCII point clouds, correspondence CSVs and JSON reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InconsistentColumns, ParseError, UnsupportedFormat
from .geom import Correspondences, RigidTransform

HEADER = ["x1", "y1", "z1", "x2", "y2", "z2"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _float(token: str, path, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"not a number: {token!r}", path, line) from None
    if not np.isfinite(value):
        raise ParseError(f"non-finite value: {token!r}", path, line)
    return value


def _read_xyz(lines, path) -> np.ndarray:
    pts = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, found {len(fields)}", path, lineno)
        pts.append([_float(f, path, lineno) for f in fields])
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _read_ply(lines, path) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise UnsupportedFormat(f"only ASCII PLY is supported, got {' '.join(tokens[1:2])}",
                                        path, lineno)
        elif key == "element":
            in_vertex = len(tokens) >= 3 and tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tokens[2]!r}", path, lineno) from None
        elif key == "property" and in_vertex:
            if tokens[1] == "list":
                raise ParseError("list properties on vertices are not supported", path, lineno)
            props.append(tokens[-1])
        elif key == "end_header":
            end = lineno
            break
    if end is None:
        raise ParseError("missing end_header", path)
    if n_vertex is None:
        raise ParseError("no 'element vertex' in header", path)
    try:
        cols = [props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x, y, z properties", path) from None

    pts = []
    lineno = end
    body = lines[end:]
    for offset, raw in enumerate(body):
        if len(pts) == n_vertex:
            break
        lineno = end + offset + 1
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) < len(props):
            raise ParseError(f"expected {len(props)} values, found {len(tokens)}", path, lineno)
        pts.append([_float(tokens[c], path, lineno) for c in cols])
    if len(pts) != n_vertex:
        raise ParseError(f"header declares {n_vertex} vertices, found {len(pts)}", path, lineno)
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def read_point_cloud(path) -> np.ndarray:
    """Read an ASCII XYZ or ASCII PLY file into an ``(n, 3)`` array.

    The format is chosen by content: a first line equal to ``ply`` selects PLY.
    """
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(b"ply") and b"binary_" in data.split(b"end_header", 1)[0]:
        raise UnsupportedFormat("binary PLY is not supported", path)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise UnsupportedFormat("file is not ASCII", path) from None
    lines = text.splitlines()
    if lines and lines[0].strip() == "ply":
        return _read_ply(lines, path)
    return _read_xyz(lines, path)


def read_correspondences(path) -> Correspondences:
    """Read ``x1,y1,z1,x2,y2,z2[,label]`` rows; a header row is optional."""
    path = Path(path)
    rows = []
    labels = []
    ncols = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row) or row[0].startswith("#"):
                continue
            if lineno == 1 and row[:6] == HEADER:
                if len(row) not in (6, 7) or (len(row) == 7 and row[6] != "label"):
                    raise ParseError(f"unexpected header {row}", path, lineno)
                continue
            if len(row) not in (6, 7):
                raise ParseError(f"expected 6 or 7 columns, found {len(row)}", path, lineno)
            if ncols is None:
                ncols = len(row)
            elif len(row) != ncols:
                raise InconsistentColumns(f"row has {len(row)} columns, earlier rows have {ncols}",
                                          path, lineno)
            rows.append([_float(c, path, lineno) for c in row[:6]])
            if len(row) == 7:
                if row[6] not in ("0", "1"):
                    raise ParseError(f"label must be 0 or 1, got {row[6]!r}", path, lineno)
                labels.append(row[6] == "1")
    coords = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return Correspondences.from_array(coords, labels if ncols == 7 else None)


def write_correspondences(corrs: Correspondences, path) -> None:
    with_labels = corrs.labels is not None
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER + (["label"] if with_labels else []))
        for i, row in enumerate(corrs.coords):
            out = [_fmt(x) for x in row]
            if with_labels:
                out.append("1" if corrs.labels[i] else "0")
            writer.writerow(out)


def transform_to_dict(t: RigidTransform) -> dict:
    return {"rotation": [float(x) for x in t.rotation.ravel()],
            "translation": [float(x) for x in t.translation]}


def transform_from_dict(d: dict) -> RigidTransform:
    rot = np.array(d["rotation"], dtype=np.float64)
    trans = np.array(d["translation"], dtype=np.float64)
    if rot.size != 9 or trans.size != 3:
        raise ParseError("transform needs 9 rotation and 3 translation values")
    return RigidTransform(rot.reshape(3, 3), trans)


def _dump(obj, indent=0) -> str:
    """JSON text with floats written to 17 significant digits."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {_dump(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        if not np.isfinite(obj):
            return "null"
        return _fmt(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    return json.dumps(obj)


def write_json(obj, path) -> None:
    path = Path(path)
    try:
        path.write_text(_dump(obj) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_transform(t: RigidTransform, path) -> None:
    write_json(transform_to_dict(t), path)


def read_transform(path) -> RigidTransform:
    path = Path(path)
    try:
        return transform_from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad transform document: {exc}", path) from exc


def report_to_dict(report) -> dict:
    d = transform_to_dict(report.transform)
    d.update({
        "labels": [int(x) for x in report.labels],
        "num_correspondences": len(report.labels),
        "num_inliers": int(np.count_nonzero(report.labels)),
        "best_seed": int(report.best_seed),
        "hypotheses_evaluated": int(report.hypotheses_evaluated),
        "refine_iterations": int(report.refine_iterations),
        "consensus": int(report.consensus),
        "timing_ms": {k: 1000.0 * v for k, v in report.timing.items()},
    })
    return d


def write_report(report, path) -> None:
    """JSON report: row-major rotation, translation, 0/1 labels, counts and stage timings (ms)."""
    write_json(report_to_dict(report), path)


def read_report(path) -> dict:
    """Parse a report written by :func:`write_report`; ``transform`` and ``labels`` are decoded."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        doc["transform"] = transform_from_dict(doc)
        doc["labels"] = np.array(doc["labels"], dtype=bool)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad report document: {exc}", path) from exc
    return doc
