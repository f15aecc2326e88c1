"""Legacy-VTK ASCII output for background meshes and cut surfaces."""

import logging
import os
from typing import Dict, Optional

import numpy as np

from background_mesh import BackgroundMesh
from cut_geometry import CutSurface

logger = logging.getLogger(__name__)

VTK_TETRA = 10
VTK_HEXAHEDRON = 12


def _prepare(path: str) -> str:
    path = os.path.abspath(os.path.expanduser(os.fspath(path)))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    return path


def _write_data(fp, arrays: Dict[str, np.ndarray], count: int):
    for name, values in arrays.items():
        values = np.asarray(values)
        if len(values) != count:
            raise ValueError(f"Array '{name}' has {len(values)} entries, expected {count}")
        if values.ndim == 1:
            kind = "int" if np.issubdtype(values.dtype, np.integer) else "double"
            fp.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
            np.savetxt(fp, values, fmt="%d" if kind == "int" else "%.12e")
        elif values.shape[1:] == (3,):
            fp.write(f"{'NORMALS' if name == 'normal' else 'VECTORS'} {name} double\n")
            np.savetxt(fp, values, fmt="%.12e")
        else:
            raise ValueError(f"Array '{name}' must be scalar or 3-vector valued")


def write_mesh_vtk(path: str, mesh: BackgroundMesh, cells: Optional[np.ndarray] = None,
                   point_data: Optional[Dict[str, np.ndarray]] = None,
                   cell_data: Optional[Dict[str, np.ndarray]] = None) -> str:
    """
    Write the background mesh (or a subset of its cells) as an unstructured grid.

    Args:
        path: Output file
        mesh: Background mesh
        cells: Cell indices to write, all cells by default; unused vertices are dropped
        point_data: Arrays over all mesh vertices, e.g. {"displacement": (n, 3)}
        cell_data: Arrays over the written cells

    Returns:
        The absolute path written
    """
    path = _prepare(path)
    cells = np.arange(mesh.n_cells) if cells is None else np.asarray(cells, dtype=int)
    connectivity = mesh.cells[cells]
    used, local = np.unique(connectivity, return_inverse=True)
    local = local.reshape(connectivity.shape)
    k = connectivity.shape[1]
    cell_type = VTK_TETRA if mesh.cell_kind == "tet4" else VTK_HEXAHEDRON

    with open(path, "w", encoding="utf-8") as fp:
        fp.write("# vtk DataFile Version 2.0\n")
        fp.write(f"membrane-cutfem {mesh.cell_kind} mesh\n")
        fp.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fp.write(f"POINTS {len(used)} double\n")
        np.savetxt(fp, mesh.vertices[used], fmt="%.12e")
        fp.write(f"CELLS {len(cells)} {len(cells) * (k + 1)}\n")
        np.savetxt(fp, np.hstack([np.full((len(cells), 1), k), local]), fmt="%d")
        fp.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(fp, np.full(len(cells), cell_type), fmt="%d")
        if point_data:
            fp.write(f"POINT_DATA {len(used)}\n")
            _write_data(fp, {name: np.asarray(values)[used] for name, values in point_data.items()}, len(used))
        if cell_data:
            fp.write(f"CELL_DATA {len(cells)}\n")
            _write_data(fp, cell_data, len(cells))
    logger.debug("Wrote %d cells to %s", len(cells), path)
    return path


def write_surface_vtk(path: str, surface: CutSurface, cell_data: Optional[Dict[str, np.ndarray]] = None,
                      point_data: Optional[Dict[str, np.ndarray]] = None) -> str:
    """
    Write the cut surface as polydata, one polygon per triangle.

    Per-triangle normal and parent-cell arrays are always written.

    Args:
        path: Output file
        surface: Cut surface
        cell_data: Extra per-triangle arrays
        point_data: Per-vertex arrays of shape (T * 3, ...) in triangle order

    Returns:
        The absolute path written
    """
    path = _prepare(path)
    n = surface.n_triangles
    data = {"normal": surface.normals, "parent": surface.parents.astype(int)}
    data.update(cell_data or {})

    with open(path, "w", encoding="utf-8") as fp:
        fp.write("# vtk DataFile Version 2.0\n")
        fp.write("membrane-cutfem cut surface\n")
        fp.write("ASCII\nDATASET POLYDATA\n")
        fp.write(f"POINTS {3 * n} double\n")
        np.savetxt(fp, surface.vertices.reshape(-1, 3), fmt="%.12e")
        fp.write(f"POLYGONS {n} {4 * n}\n")
        np.savetxt(fp, np.hstack([np.full((n, 1), 3), np.arange(3 * n).reshape(n, 3)]), fmt="%d")
        fp.write(f"CELL_DATA {n}\n")
        _write_data(fp, data, n)
        if point_data:
            fp.write(f"POINT_DATA {3 * n}\n")
            _write_data(fp, point_data, 3 * n)
    logger.debug("Wrote %d surface triangles to %s", n, path)
    return path


def triangle_average(surface: CutSurface, values: np.ndarray) -> np.ndarray:
    """Weighted average of quadrature-point values over each triangle."""
    values = np.asarray(values, dtype=float)
    weights = surface.qp_weights.reshape((-1,) + (1,) * (values.ndim - 1))
    out = np.zeros((surface.n_triangles,) + values.shape[1:])
    np.add.at(out, surface.qp_triangle, weights * values)
    return out / surface.areas.reshape((-1,) + (1,) * (values.ndim - 1))


def read_vtk_counts(path: str) -> Dict[str, object]:
    """Dataset type, point count and cell count of a legacy-VTK file."""
    counts: Dict[str, object] = {"dataset": None, "points": None, "cells": None}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            words = line.split()
            if not words:
                continue
            if words[0] == "DATASET":
                counts["dataset"] = words[1]
            elif words[0] == "POINTS":
                counts["points"] = int(words[1])
            elif words[0] in ("CELLS", "POLYGONS"):
                counts["cells"] = int(words[1])
    return counts
