"""Reading and writing ASCII OBJ and ASCII / binary little-endian PLY files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, WeightedPointCloud


class MeshFormatError(ValueError):
    """Raised when a mesh or cloud file cannot be parsed."""


_PLY_TYPES = {
    "char": "b", "int8": "b",
    "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i",
    "uint": "I", "uint32": "I",
    "float": "f", "float32": "f",
    "double": "d", "float64": "d",
}


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Load a triangle mesh from an OBJ or PLY file.

    Polygonal faces are fan-triangulated. ``format`` defaults to the file
    suffix.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return _read_obj(path)
    if fmt == "ply":
        data = read_ply(path)
        if data["faces"] is None:
            raise MeshFormatError(f"{path}: PLY file has no face element")
        return TriangleMesh(data["vertices"], data["faces"])
    raise MeshFormatError(f"{path}: unsupported format {fmt!r}")


def _read_obj(path: Path) -> TriangleMesh:
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(t) for t in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        # negative indices are relative to the current vertex count
                        idx.append(i - 1 if i > 0 else len(vertices) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
    return TriangleMesh(np.asarray(vertices, dtype=float).reshape(-1, 3),
                        np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def _parse_ply_header(fh, path):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise MeshFormatError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []
    offset = len(magic)
    while True:
        raw = fh.readline()
        if not raw:
            raise MeshFormatError(f"{path}: unterminated header")
        offset += len(raw)
        parts = raw.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element (offset {offset})")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], "list", parts[2], parts[3]))
            else:
                elements[-1]["props"].append((parts[2], parts[1], None, None))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path) -> dict:
    """Parse a PLY file into vertices, faces and named per-vertex properties.

    Returns a dict with keys ``vertices`` (N x 3), ``faces`` (F x 3 or None)
    and ``vertex_props`` (name -> array).
    """
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        body = fh.read()

    result = {"vertices": None, "faces": None, "vertex_props": {}}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0

        def take(kind):
            nonlocal pos
            if pos >= len(tokens):
                raise MeshFormatError(f"{path}: unexpected end of data at token {pos}")
            tok = tokens[pos]
            pos += 1
            try:
                return float(tok) if _PLY_TYPES[kind] in "fd" else int(tok)
            except ValueError as exc:
                raise MeshFormatError(f"{path}: bad value {tok!r} at token {pos - 1}") from exc
    else:
        pos = 0

        def take(kind):
            nonlocal pos
            code = "<" + _PLY_TYPES[kind]
            size = struct.calcsize(code)
            if pos + size > len(body):
                raise MeshFormatError(f"{path}: unexpected end of data at byte {pos}")
            (val,) = struct.unpack_from(code, body, pos)
            pos += size
            return val

    for el in elements:
        props = el["props"]
        simple = all(p[1] != "list" for p in props)
        if fmt == "binary_little_endian" and simple and el["count"] > 0:
            dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            nbytes = dtype.itemsize * el["count"]
            if pos + nbytes > len(body):
                raise MeshFormatError(f"{path}: truncated element {el['name']!r}")
            rec = np.frombuffer(body, dtype=dtype, count=el["count"], offset=pos)
            pos += nbytes
            columns = {p[0]: rec[p[0]].astype(float) for p in props}
            lists = {}
        else:
            columns = {p[0]: [] for p in props if p[1] != "list"}
            lists = {p[0]: [] for p in props if p[1] == "list"}
            for _ in range(el["count"]):
                for name, kind, count_kind, item_kind in props:
                    if kind == "list":
                        n = int(take(count_kind))
                        lists[name].append([int(take(item_kind)) for _ in range(n)])
                    else:
                        columns[name].append(take(kind))
            columns = {k: np.asarray(v, dtype=float) for k, v in columns.items()}

        if el["name"] == "vertex":
            try:
                result["vertices"] = np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
            except KeyError as exc:
                raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from exc
            result["vertex_props"] = {k: v for k, v in columns.items() if k not in "xyz"}
        elif el["name"] == "face":
            key = "vertex_indices" if "vertex_indices" in lists else next(iter(lists), None)
            if key is None:
                raise MeshFormatError(f"{path}: face element lacks an index list")
            tris = []
            for poly in lists[key]:
                if len(poly) < 3:
                    raise MeshFormatError(f"{path}: face with fewer than 3 vertices")
                for k in range(1, len(poly) - 1):
                    tris.append([poly[0], poly[k], poly[k + 1]])
            result["faces"] = np.asarray(tris, dtype=np.int64).reshape(-1, 3)

    if result["vertices"] is None:
        raise MeshFormatError(f"{path}: no vertex element")
    return result


def load_cloud(path) -> WeightedPointCloud:
    """Load a weighted point cloud.

    PLY files carrying a per-vertex ``weight`` property (as written by
    :func:`write_cloud_ply`) are read directly; any other mesh file is
    converted with :func:`~adsvfd.geometry.mesh_to_weighted_cloud`.
    """
    from .geometry import mesh_to_weighted_cloud

    path = Path(path)
    if path.suffix.lower() == ".ply":
        data = read_ply(path)
        props = data["vertex_props"]
        if "weight" in props:
            normals = None
            if all(k in props for k in ("nx", "ny", "nz")):
                normals = np.stack([props["nx"], props["ny"], props["nz"]], axis=1)
                normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            w = props["weight"]
            return WeightedPointCloud(data["vertices"], w / w.sum(), normals)
        if data["faces"] is None:
            n = len(data["vertices"])
            return WeightedPointCloud(data["vertices"], np.full(n, 1.0 / n))
        return mesh_to_weighted_cloud(TriangleMesh(data["vertices"], data["faces"]))
    return mesh_to_weighted_cloud(load_mesh(path))


def load_shape(path):
    """Load either a mesh (if the file has faces) or a bare cloud."""
    path = Path(path)
    if path.suffix.lower() == ".ply" and read_ply(path)["faces"] is None:
        return load_cloud(path)
    return load_mesh(path)


def write_cloud_ply(path, cloud: WeightedPointCloud, binary: bool = True) -> None:
    """Write a cloud as PLY with float32 x/y/z, optional normals and ``weight``."""
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    names.append("weight")
    cols.append(cloud.weights[:, None])
    table = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(table)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(table.tobytes())
        else:
            for row in table:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def write_points_ply(path, points: np.ndarray) -> None:
    """Write bare points (e.g. a geodesic snapshot) as binary PLY."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def write_mesh_ply(path, mesh: TriangleMesh, binary: bool = False) -> None:
    """Write a triangle mesh as PLY (ASCII by default)."""
    v = np.asarray(mesh.vertices, dtype=float)
    f = np.asarray(mesh.faces, dtype=np.int64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(v)}", "property double x", "property double y",
              "property double z", f"element face {len(f)}",
              "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(v.astype("<f8").tobytes())
            rec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = f
            fh.write(rec.tobytes())
        else:
            for row in v:
                fh.write(f"{float(row[0])!r} {float(row[1])!r} {float(row[2])!r}\n".encode("ascii"))
            for tri in f:
                fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
