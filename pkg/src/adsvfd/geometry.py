"""Shapes as weighted point clouds, unit-cube normalization and synthetic fixtures."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class GeometryError(ValueError):
    """Invalid geometric input (degenerate extents, bad indices, ...)."""


@dataclass
class WeightedPointCloud:
    """Points with non-negative weights summing to one and optional unit normals."""

    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.weights) != len(self.points):
            raise GeometryError("weights and points differ in length")
        if np.any(self.weights < 0):
            raise GeometryError("weights must be non-negative")
        if len(self.points) and abs(self.weights.sum() - 1.0) > 1e-9:
            raise GeometryError(f"weights sum to {self.weights.sum()!r}, expected 1")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise GeometryError("normals and points differ in length")
            if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
                raise GeometryError("normals must have unit length")

    @property
    def size(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "WeightedPointCloud":
        """Sub-cloud on ``idx`` with weights renormalized to sum to one."""
        idx = np.asarray(idx, dtype=np.int64)
        w = self.weights[idx]
        total = w.sum()
        w = w / total if total > 0 else np.full(len(idx), 1.0 / len(idx))
        n = None if self.normals is None else self.normals[idx]
        return WeightedPointCloud(self.points[idx], w, n)

    def with_points(self, points, normals=None) -> "WeightedPointCloud":
        return WeightedPointCloud(points, self.weights.copy(), normals)

    def diameter(self) -> float:
        """Length of the bounding-box diagonal."""
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                bad = self.faces[(self.faces < 0) | (self.faces >= len(self.vertices))][0]
                raise GeometryError(
                    f"face index {bad} out of range for {len(self.vertices)} vertices")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise GeometryError("face with repeated vertex indices")

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def is_closed(self) -> bool:
        """True when every undirected edge is shared by exactly two faces
        and every directed edge appears once (closed and consistently oriented)."""
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        undirected = np.sort(directed, axis=1)
        _, ucounts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1) and np.all(ucounts == 2))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(0), self.vertices.max(0)


@dataclass
class UnitCubeTransform:
    """Per-axis affine map ``y = x * scale + offset`` into [0, 1]^3."""

    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        if np.any(self.scale <= 0):
            raise GeometryError("scale components must be strictly positive")

    def apply(self, points):
        return np.asarray(points, dtype=float) * self.scale + self.offset

    def invert(self, points):
        return (np.asarray(points, dtype=float) - self.offset) / self.scale

    def apply_normals(self, normals):
        # normals transform with the inverse transpose of the (diagonal) Jacobian
        n = np.asarray(normals, dtype=float) / self.scale
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def invert_normals(self, normals):
        n = np.asarray(normals, dtype=float) * self.scale
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def apply_cloud(self, cloud: WeightedPointCloud) -> WeightedPointCloud:
        n = None if cloud.normals is None else self.apply_normals(cloud.normals)
        return WeightedPointCloud(self.apply(cloud.points), cloud.weights.copy(), n)

    def invert_cloud(self, cloud: WeightedPointCloud) -> WeightedPointCloud:
        n = None if cloud.normals is None else self.invert_normals(cloud.normals)
        return WeightedPointCloud(self.invert(cloud.points), cloud.weights.copy(), n)

    def to_dict(self) -> dict:
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d) -> "UnitCubeTransform":
        return cls(d["scale"], d["offset"])

    @classmethod
    def identity(cls) -> "UnitCubeTransform":
        return cls(np.ones(3), np.zeros(3))


def mesh_to_weighted_cloud(mesh: TriangleMesh) -> WeightedPointCloud:
    """One point per face centroid, weighted by normalized face area.

    Faces with area below ``1e-14`` times the total are dropped with a warning.
    """
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise GeometryError("all faces are degenerate (zero total area)")
    keep = areas >= 1e-14 * total
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} degenerate faces", stacklevel=2)
    v = mesh.vertices[mesh.faces[keep]]
    centroids = v.mean(axis=1)
    normals = mesh.face_normals()[keep]
    w = areas[keep]
    return WeightedPointCloud(centroids, w / w.sum(), normals)


def normalize_to_unit_cube(clouds):
    """Map the joint bounding box of ``clouds`` onto [0, 1]^3.

    Returns the transformed clouds and the shared :class:`UnitCubeTransform`.
    """
    clouds = list(clouds)
    if not clouds:
        raise GeometryError("no clouds to normalize")
    allpts = np.concatenate([c.points for c in clouds])
    lo, hi = allpts.min(0), allpts.max(0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise GeometryError(f"degenerate extent {extent.tolist()}")
    tr = UnitCubeTransform(1.0 / extent, -lo / extent)
    return [tr.apply_cloud(c) for c in clouds], tr


def subsample(cloud, M: int, seed=None) -> np.ndarray:
    """``M`` distinct indices drawn uniformly without replacement.

    ``cloud`` may be a :class:`WeightedPointCloud` or a size. ``seed`` is an
    int or a :class:`numpy.random.Generator`.
    """
    n = cloud if isinstance(cloud, (int, np.integer)) else cloud.size
    if M > n:
        raise GeometryError(f"cannot draw {M} points from a cloud of {n}")
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=M, replace=False)


# --------------------------------------------------------------------------
# vessel models and rotation-minimizing frames

@dataclass
class VesselPortion:
    name: str
    control_points: np.ndarray
    radii: np.ndarray
    reference: np.ndarray
    parent: str | None = None

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float).reshape(-1, 3)
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        self.reference = np.asarray(self.reference, dtype=float).reshape(3)
        if len(self.control_points) < 4:
            raise GeometryError(f"portion {self.name!r}: need at least 4 control points")
        if np.any(self.radii <= 0):
            raise GeometryError(f"portion {self.name!r}: radii must be positive")
        seg = np.linalg.norm(np.diff(self.control_points, axis=0), axis=1)
        if np.any(seg <= 0):
            raise GeometryError(f"portion {self.name!r}: repeated control points")
        t = np.concatenate([[0.0], np.cumsum(seg)])
        self._spline = CubicSpline(t, self.control_points, bc_type="natural")
        # arclength table for reparametrization by arclength fraction
        tt = np.linspace(0.0, t[-1], 2049)
        speed = np.linalg.norm(self._spline(tt, 1), axis=1)
        s = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(tt))])
        self._t_table, self._s_table = tt, s

    @property
    def length(self) -> float:
        return float(self._s_table[-1])

    def _param(self, fractions):
        s = np.clip(np.asarray(fractions, dtype=float), 0.0, 1.0) * self._s_table[-1]
        return np.interp(s, self._s_table, self._t_table)

    def centerline(self, fractions) -> np.ndarray:
        return self._spline(self._param(fractions))

    def tangents(self, fractions) -> np.ndarray:
        d = self._spline(self._param(fractions), 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def radius(self, fractions) -> np.ndarray:
        f = np.asarray(fractions, dtype=float)
        if len(self.radii) == 1:
            return np.full(f.shape, self.radii[0])
        return np.interp(f, np.linspace(0.0, 1.0, len(self.radii)), self.radii)

    def frames(self, fractions) -> np.ndarray:
        """Bishop frames transported from the start along a dense grid."""
        fr = np.clip(np.asarray(fractions, dtype=float), 0.0, 1.0)
        dense = np.union1d(np.linspace(0.0, 1.0, 257), fr.ravel())
        F = bishop_frames(self.centerline(dense), self.reference, tangents=self.tangents(dense))
        return F[np.searchsorted(dense, fr)]

    def ring(self, fractions, n_angles: int, phase: float = 0.0) -> np.ndarray:
        """Contour points, shape (len(fractions), n_angles, 3)."""
        fr = np.asarray(fractions, dtype=float)
        c = self.centerline(fr)
        F = self.frames(fr)
        rho = self.radius(fr)
        th = phase + 2.0 * np.pi * np.arange(n_angles) / n_angles
        dirs = (np.cos(th)[None, :, None] * F[:, None, 1, :]
                + np.sin(th)[None, :, None] * F[:, None, 2, :])
        return c[:, None, :] + rho[:, None, None] * dirs


@dataclass
class VesselModel:
    portions: list[VesselPortion] = field(default_factory=list)

    def __post_init__(self):
        names = [p.name for p in self.portions]
        if len(set(names)) != len(names):
            raise GeometryError("portion names must be unique")
        for p in self.portions:
            if p.parent is not None and p.parent not in names:
                raise GeometryError(f"portion {p.name!r}: unknown parent {p.parent!r}")

    def portion(self, name) -> VesselPortion:
        for p in self.portions:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.portions]

    def root(self) -> VesselPortion:
        return next(p for p in self.portions if p.parent is None)

    def anchors(self):
        """Inlet center and outlet normal of the root portion."""
        root = self.root()
        return root.centerline([0.0])[0], root.tangents([1.0])[0]

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "VesselModel":
        """Model under ``x -> scale * R x + t``; radii scale, references rotate."""
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        return VesselModel([
            VesselPortion(p.name, scale * p.control_points @ R.T + t, scale * p.radii,
                          R @ p.reference, p.parent)
            for p in self.portions
        ])

    def surface_points(self, rings: int = 64, n_angles: int = 32) -> dict[str, np.ndarray]:
        """Dense lateral-surface samples per portion (for hull pruning)."""
        fr = np.linspace(0.0, 1.0, rings)
        return {p.name: p.ring(fr, n_angles).reshape(-1, 3) for p in self.portions}

    def to_json(self) -> str:
        return json.dumps({"portions": [
            {"name": p.name, "control_points": p.control_points.tolist(),
             "radii": p.radii.tolist(), "reference": p.reference.tolist(),
             "parent": p.parent}
            for p in self.portions]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "VesselModel":
        d = json.loads(text)
        return cls([VesselPortion(p["name"], p["control_points"], p["radii"],
                                  p["reference"], p.get("parent")) for p in d["portions"]])


def bishop_frames(points, reference, tangents=None) -> np.ndarray:
    """Rotation-minimizing frames along a sampled curve.

    Uses the double-reflection transport. Returns an array of shape
    (n, 3, 3) whose rows are ``(tangent, r, s)`` with ``s = t x r``; the
    initial ``r`` is ``reference`` projected onto the normal plane.
    """
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(x) < 2:
        raise GeometryError("need at least 2 curve samples")
    seg = np.diff(x, axis=0)
    seglen = np.linalg.norm(seg, axis=1)
    if np.any(seglen <= 1e-15):
        raise GeometryError("zero-length curve segment")
    if tangents is None:
        t = np.empty_like(x)
        t[0] = seg[0]
        t[-1] = seg[-1]
        t[1:-1] = x[2:] - x[:-2]
    else:
        t = np.asarray(tangents, dtype=float).reshape(-1, 3).copy()
    t /= np.linalg.norm(t, axis=1, keepdims=True)

    ref = np.asarray(reference, dtype=float).reshape(3)
    r = ref - (ref @ t[0]) * t[0]
    nr = np.linalg.norm(r)
    if nr < 1e-8 * max(np.linalg.norm(ref), 1e-300):
        raise GeometryError("reference vector is parallel to the initial tangent")
    r /= nr

    frames = np.empty((len(x), 3, 3))
    frames[0] = [t[0], r, np.cross(t[0], r)]
    for i in range(len(x) - 1):
        v1 = seg[i]
        c1 = v1 @ v1
        rL = r - (2.0 / c1) * (v1 @ r) * v1
        tL = t[i] - (2.0 / c1) * (v1 @ t[i]) * v1
        v2 = t[i + 1] - tL
        c2 = v2 @ v2
        r = rL - (2.0 / c2) * (v2 @ rL) * v2 if c2 > 1e-30 else rL
        # re-orthogonalize against round-off drift
        r = r - (r @ t[i + 1]) * t[i + 1]
        r /= np.linalg.norm(r)
        frames[i + 1] = [t[i + 1], r, np.cross(t[i + 1], r)]
    return frames


def endpoint_reference(portion: VesselPortion) -> np.ndarray:
    """Zero-angle reference from the chord joining the centerline endpoints,
    projected orthogonally onto the inlet normal plane."""
    ends = portion.centerline([0.0, 1.0])
    chord = ends[1] - ends[0]
    t0 = portion.tangents([0.0])[0]
    r = chord - (chord @ t0) * t0
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise GeometryError("endpoint chord is parallel to the inlet tangent")
    return r / n


# --------------------------------------------------------------------------
# synthetic shapes

def tube_model(radius=0.1, length=1.0, start=(0.0, 0.0, 0.0), direction=(0.0, 0.0, 1.0),
               reference=None, name="trunk", radii=None) -> VesselModel:
    """Straight single-portion vessel."""
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    s = np.asarray(start, dtype=float)
    cps = s + np.linspace(0.0, length, 5)[:, None] * d
    if reference is None:
        reference = _perpendicular(d)
    rad = np.atleast_1d(radius if radii is None else radii)
    return VesselModel([VesselPortion(name, cps, rad, reference)])


def y_branch_model(trunk_length=0.6, trunk_radius=0.1, branch_length=0.5,
                   branch_radius=0.06, angle_deg=35.0) -> VesselModel:
    """Trunk along +z splitting into two curved branches in the xz-plane."""
    trunk = np.linspace(0.0, trunk_length, 5)[:, None] * np.array([0.0, 0.0, 1.0])
    top = trunk[-1]
    a = np.radians(angle_deg)
    portions = [VesselPortion("trunk", trunk, [trunk_radius], [1.0, 0.0, 0.0])]
    for sign, name in ((1.0, "left"), (-1.0, "right")):
        # starts along the trunk axis and bends out to the branch angle
        s = np.linspace(0.0, 1.0, 5)
        ang = a * np.sqrt(s)
        dirs = np.stack([sign * np.sin(ang), np.zeros_like(ang), np.cos(ang)], axis=1)
        steps = np.diff(s)[:, None] * branch_length * 0.5 * (dirs[1:] + dirs[:-1])
        cps = top + np.concatenate([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
        portions.append(VesselPortion(name, cps, [branch_radius], [0.0, 1.0, 0.0],
                                      parent="trunk"))
    return VesselModel(portions)


def _perpendicular(d):
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = a - (a @ d) * d
    return p / np.linalg.norm(p)


def sweep_portion(portion: VesselPortion, n_rings: int, n_angles: int = 16,
                  caps: bool = True) -> TriangleMesh:
    """Closed (capped) tube swept along one portion's centerline."""
    fr = np.linspace(0.0, 1.0, n_rings)
    rings = portion.ring(fr, n_angles)
    verts = rings.reshape(-1, 3)
    faces = []
    j = np.arange(n_angles)
    jn = (j + 1) % n_angles
    for i in range(n_rings - 1):
        a = i * n_angles + j
        b = i * n_angles + jn
        c = (i + 1) * n_angles + j
        d = (i + 1) * n_angles + jn
        faces.append(np.stack([a, b, c], 1))
        faces.append(np.stack([b, d, c], 1))
    if caps:
        centers = portion.centerline([0.0, 1.0])
        c0 = len(verts)
        c1 = c0 + 1
        verts = np.concatenate([verts, centers])
        last = (n_rings - 1) * n_angles
        faces.append(np.stack([np.full(n_angles, c0), jn, j], 1))
        faces.append(np.stack([np.full(n_angles, c1), last + j, last + jn], 1))
    return TriangleMesh(verts, np.concatenate(faces))


def sweep_model(model: VesselModel, rings_per_unit: float = 40.0, n_angles: int = 16,
                min_rings: int = 2) -> TriangleMesh:
    """Union of capped tubes, one per portion.

    Each component is closed and outward oriented; components overlap at
    branch junctions.
    """
    verts, faces, off = [], [], 0
    for p in model.portions:
        n_rings = max(min_rings, int(round(p.length * rings_per_unit)) + 1)
        m = sweep_portion(p, n_rings, n_angles)
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def ellipsoid_mesh(axes=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), resolution=960) -> TriangleMesh:
    """Latitude-longitude triangulation of an ellipsoid with semi-axes ``axes``.

    The longitude count is a multiple of 4 and the latitude count even so the
    six axis extremes are vertices (exact bounding box).
    """
    # faces = 2 * n_lon * (n_lat - 1) with n_lat ~ n_lon / 2
    n_lon = max(4, int(round(np.sqrt(resolution) / 4.0)) * 4)
    n_lat = max(2, 2 * int(round((resolution / (2.0 * n_lon) + 1) / 2)))
    theta = np.pi * np.arange(1, n_lat) / n_lat
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi),
                     np.broadcast_to(ct, (len(theta), n_lon))], axis=-1)
    unit = np.concatenate([[[0.0, 0.0, 1.0]], ring.reshape(-1, 3), [[0.0, 0.0, -1.0]]])
    verts = unit * np.asarray(axes, dtype=float) + np.asarray(center, dtype=float)
    north, south = 0, len(unit) - 1
    j = np.arange(n_lon)
    jn = (j + 1) % n_lon
    faces = [np.stack([np.full(n_lon, north), 1 + j, 1 + jn], 1)]
    for i in range(n_lat - 2):
        a = 1 + i * n_lon + j
        b = 1 + i * n_lon + jn
        c = 1 + (i + 1) * n_lon + j
        d = 1 + (i + 1) * n_lon + jn
        faces += [np.stack([a, c, b], 1), np.stack([b, c, d], 1)]
    last = 1 + (n_lat - 2) * n_lon
    faces.append(np.stack([np.full(n_lon, south), last + jn, last + j], 1))
    mesh = TriangleMesh(verts, np.concatenate(faces))
    if mesh.signed_volume() < 0:
        mesh = TriangleMesh(verts, mesh.faces[:, ::-1])
    return mesh


def synth_shape(kind: str, params: dict | None = None, resolution: int = 960) -> TriangleMesh:
    """Synthetic test shapes: ``ellipsoid``, ``tube`` or ``y_branch``.

    ``resolution`` is a target face count (at least 24).
    """
    params = dict(params or {})
    if resolution < 24:
        raise GeometryError("resolution must be at least 24 faces")
    if kind == "ellipsoid":
        axes = np.asarray(params.get("axes", (1.0, 1.0, 1.0)), dtype=float)
        if np.any(axes <= 0):
            raise GeometryError("ellipsoid axes must be positive")
        return ellipsoid_mesh(axes, params.get("center", (0.0, 0.0, 0.0)), resolution)
    n_angles = int(params.pop("n_angles", 16))
    if kind == "tube":
        radius = params.get("radius", 0.1)
        length = params.get("length", 1.0)
        if np.any(np.asarray(radius) <= 0) or length <= 0:
            raise GeometryError("tube radius and length must be positive")
        model = tube_model(radius, length, params.get("start", (0.0, 0.0, 0.0)),
                           params.get("direction", (0.0, 0.0, 1.0)))
        n_rings = max(2, int(round((resolution - 2 * n_angles) / (2 * n_angles))) + 1)
        return sweep_portion(model.portions[0], n_rings, n_angles)
    if kind == "y_branch":
        model = params.get("model") or y_branch_model(**{k: v for k, v in params.items()
                                                          if k != "model"})
        total = sum(p.length for p in model.portions)
        quads = max(1, (resolution - 2 * n_angles * len(model.portions)) // (2 * n_angles))
        return sweep_model(model, rings_per_unit=quads / total, n_angles=n_angles)
    raise GeometryError(f"unknown shape kind {kind!r}")
