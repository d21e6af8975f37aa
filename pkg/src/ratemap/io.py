"""Sensorgram tables and nodal map files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError
from .kinetics import InjectionGrid, SensorgramSet
from .mesh import TriMesh


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_sensorgrams(data: SensorgramSet, path) -> None:
    """CSV with header ``t,C_1,...,C_NC``; concentrations go to a JSON sidecar."""
    path = Path(path)
    rows = ["t," + ",".join(f"C_{j + 1}" for j in range(data.grid.n_conc))]
    for t, row in zip(data.grid.times, data.values):
        rows.append(fmt(t) + "," + ",".join(fmt(v) for v in row))
    path.write_text("\n".join(rows) + "\n")
    side = {"concentrations": [fmt(c) for c in data.grid.concentrations], "meta": data.meta}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_sensorgrams(path) -> SensorgramSet:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t":
        raise ValidationError(f"{path}: first column must be 't'")
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    side_path = path.with_suffix(".json")
    if not side_path.exists():
        raise ValidationError(f"{path}: missing concentration sidecar {side_path.name}")
    side = json.loads(side_path.read_text())
    conc = np.array([float(c) for c in side["concentrations"]])
    if body.shape[1] - 1 != conc.size:
        raise DimensionError(f"{path}: {body.shape[1] - 1} columns for {conc.size} concentrations")
    grid = InjectionGrid(body[:, 0], conc)
    return SensorgramSet(grid, body[:, 1:], side.get("meta", {}))


def write_nodal(mesh: TriMesh, columns: dict, path) -> None:
    """Node table ``node,x,y,<columns...>``."""
    names = list(columns)
    arrs = [np.asarray(columns[k], dtype=float) for k in names]
    for a in arrs:
        if a.shape != (mesh.n_nodes,):
            raise DimensionError("nodal column length does not match mesh")
    rows = ["node,x,y" + "".join("," + k for k in names)]
    for i, (x, y) in enumerate(mesh.nodes.tolist()):
        rows.append(f"{i},{fmt(x)},{fmt(y)}" + "".join("," + fmt(a[i]) for a in arrs))
    Path(path).write_text("\n".join(rows) + "\n")


def read_nodal(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    return {k: body[:, i] for i, k in enumerate(head)}


def write_table(path, header, rows) -> None:
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")
