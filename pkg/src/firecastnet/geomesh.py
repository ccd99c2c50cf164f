"""Icosahedral sphere meshes, the flat multi-mesh and local-area adaptive meshes.

All vertex positions live on the unit sphere.  Faces are oriented
counter-clockwise when seen from outside, which the point-in-triangle tests in
:mod:`firecastnet.coupling` rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS_KM = 6371.0
MAX_LEVEL = 8

NODE_FEATURE_NAMES = ("cos_lat", "sin_lon", "cos_lon")
EDGE_FEATURE_NAMES = ("length", "dx", "dy", "dz")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    level: int
    vertices: np.ndarray  # [V, 3] float64
    faces: np.ndarray  # [F, 3] int64, outward CCW
    edges: np.ndarray  # [E, 2] int64, i < j, lexicographically sorted

    @property
    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.faces)


def _edges_of(faces: np.ndarray) -> np.ndarray:
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    sign = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c)
    faces = faces.copy()
    flip = sign < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def icosahedron() -> TriMesh:
    """Level-0 mesh: north pole first, then the upper ring starting at lon 0.

    Vertex order is pole, five upper-ring vertices (lon 0, 72, ...), five
    lower-ring vertices (lon 36, 108, ...), south pole.
    """
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        lon = np.deg2rad(72.0 * k)
        verts.append((r * np.cos(lon), r * np.sin(lon), z))
    for k in range(5):
        lon = np.deg2rad(36.0 + 72.0 * k)
        verts.append((r * np.cos(lon), r * np.sin(lon), -z))
    verts.append((0.0, 0.0, -1.0))
    vertices = np.array(verts, dtype=np.float64)

    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (l0, 11, l1)]
    faces = _orient_outward(vertices, np.array(faces, dtype=np.int64))
    return TriMesh(0, vertices, faces, _edges_of(faces))


def _split_faces(vertices: np.ndarray, faces: np.ndarray, key_to_index: dict):
    """Split each face in four, appending deduplicated midpoints.

    Midpoints are keyed by the unordered parent index pair; new indices are
    handed out in order of first appearance (face order, then edge ab, bc, ca).
    Returns (new vertex array, child faces [4F, 3]).
    """
    new_points = []
    n0 = len(vertices)
    mids = np.empty((len(faces), 3), dtype=np.int64)
    for fi, (a, b, c) in enumerate(faces.tolist()):
        for slot, (p, q) in enumerate(((a, b), (b, c), (c, a))):
            key = (p, q) if p < q else (q, p)
            idx = key_to_index.get(key)
            if idx is None:
                idx = n0 + len(new_points)
                key_to_index[key] = idx
                new_points.append(key)
            mids[fi, slot] = idx
    if new_points:
        keys = np.array(new_points, dtype=np.int64)
        mid = vertices[keys[:, 0]] + vertices[keys[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        vertices = np.concatenate([vertices, mid])
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mids[:, 0], mids[:, 1], mids[:, 2]
    children = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return vertices, children


def refine(mesh: TriMesh) -> TriMesh:
    """Split every face into four; existing vertices keep their indices."""
    faces = mesh.faces
    edges = mesh.edges
    n = len(mesh.vertices)
    # vectorised midpoint assignment: one new vertex per existing edge, in
    # sorted edge order
    keys = edges[:, 0] * n + edges[:, 1]
    mid = mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    vertices = np.concatenate([mesh.vertices, mid])

    def mid_index(p, q):
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        return n + np.searchsorted(keys, lo * n + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid_index(a, b), mid_index(b, c), mid_index(c, a)
    children = np.stack(
        [
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return TriMesh(mesh.level + 1, vertices, children, _edges_of(children))


def mesh_at_level(level: int) -> TriMesh:
    mesh = icosahedron()
    for _ in range(level):
        mesh = refine(mesh)
    return mesh


def xyz_to_latlon(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degrees latitude/longitude, longitude in (-180, 180]."""
    xyz = np.asarray(xyz, dtype=np.float64)
    lat = np.rad2deg(np.arcsin(np.clip(xyz[..., 2], -1.0, 1.0)))
    lon = np.rad2deg(np.arctan2(xyz[..., 1], xyz[..., 0]))
    return lat, lon


def latlon_to_xyz(lat, lon) -> np.ndarray:
    phi = np.deg2rad(np.asarray(lat, dtype=np.float64))
    lam = np.deg2rad(np.asarray(lon, dtype=np.float64))
    return np.stack(
        [np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1
    )


def haversine_km(a, b) -> np.ndarray:
    """Great-circle distance between (lat, lon) degree pairs; broadcasts."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lat1, lon1 = np.deg2rad(a[..., 0]), np.deg2rad(a[..., 1])
    lat2, lon2 = np.deg2rad(b[..., 0]), np.deg2rad(b[..., 1])
    s = (
        np.sin((lat2 - lat1) / 2) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


def node_features(vertices: np.ndarray) -> np.ndarray:
    lat, lon = xyz_to_latlon(vertices)
    phi, lam = np.deg2rad(lat), np.deg2rad(lon)
    return np.stack([np.cos(phi), np.sin(lam), np.cos(lam)], axis=1)


def edge_features(src_xyz: np.ndarray, dst_xyz: np.ndarray, norm: float) -> np.ndarray:
    """(|d| / norm, dx, dy, dz) with d = dst - src in Cartesian coordinates."""
    d = dst_xyz - src_xyz
    length = np.linalg.norm(d, axis=1, keepdims=True) / norm
    return np.concatenate([length, d], axis=1)


def great_circle_rad(a_xyz: np.ndarray, b_xyz: np.ndarray) -> np.ndarray:
    chord = np.linalg.norm(a_xyz - b_xyz, axis=-1)
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


@dataclass(frozen=True)
class MultiMesh:
    """Flat multi-scale graph over the nodes of the finest mesh.

    ``edge_list`` holds undirected pairs (i < j) grouped by level in ascending
    order; ``edge_levels`` tags each pair with the level that created it.
    ``faces``/``face_levels`` are the leaf triangles used for decoding.
    """

    finest_level: int
    nodes: np.ndarray
    edge_list: np.ndarray
    edge_levels: np.ndarray
    faces: np.ndarray
    face_levels: np.ndarray
    node_features: np.ndarray = field(repr=False)
    edge_features: np.ndarray = field(repr=False)
    length_scale: float = 1.0
    level_faces: tuple = ()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def level_counts(self) -> dict[int, int]:
        levels, counts = np.unique(self.edge_levels, return_counts=True)
        return {int(l): int(c) for l, c in zip(levels, counts)}

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both directions of every edge: (senders, receivers, features)."""
        i, j = self.edge_list[:, 0], self.edge_list[:, 1]
        back = self.edge_features.copy()
        back[:, 1:] *= -1.0
        senders = np.concatenate([i, j])
        receivers = np.concatenate([j, i])
        return senders, receivers, np.concatenate([self.edge_features, back])

    def longest_leaf_edge_rad(self) -> float:
        e = _edges_of(self.faces)
        return float(great_circle_rad(self.nodes[e[:, 0]], self.nodes[e[:, 1]]).max())


def _length_scale(vertices, faces) -> float:
    e = _edges_of(faces)
    return float(np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1).max())


def _assemble(
    finest_level, vertices, level_edges, level_faces, faces, face_levels, cls=MultiMesh, **extra
):
    edge_list = np.concatenate([e for e in level_edges]).astype(np.int64)
    edge_levels = np.concatenate(
        [np.full(len(e), lvl, dtype=np.int64) for lvl, e in enumerate(level_edges)]
    )
    scale = _length_scale(vertices, faces)
    feats = edge_features(vertices[edge_list[:, 0]], vertices[edge_list[:, 1]], scale)
    return cls(
        finest_level=finest_level,
        nodes=vertices,
        edge_list=edge_list,
        edge_levels=edge_levels,
        faces=faces,
        face_levels=face_levels,
        node_features=node_features(vertices),
        edge_features=feats,
        length_scale=scale,
        level_faces=tuple(int(n) for n in level_faces),
        **extra,
    )


def build_multimesh(finest_level: int) -> MultiMesh:
    if not 0 <= finest_level <= MAX_LEVEL:
        raise MeshError(f"finest_level must be in [0, {MAX_LEVEL}], got {finest_level}")
    mesh = icosahedron()
    level_edges = [mesh.edges]
    for _ in range(finest_level):
        mesh = refine(mesh)
        level_edges.append(mesh.edges)
    return _assemble(
        finest_level,
        mesh.vertices,
        level_edges,
        [20 * 4**k for k in range(finest_level + 1)],
        mesh.faces,
        np.full(len(mesh.faces), finest_level, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Local area meshes


@dataclass(frozen=True)
class LamMesh(MultiMesh):
    region_name: str = ""
    coarse_level: int = 0
    buffer_km: tuple[float, float] = (400.0, 800.0)


def ring_thresholds(fine_level: int, coarse_level: int, buffer_km) -> dict[int, float]:
    """Max centroid-to-region distance (km) allowed for a face of each level.

    Levels above ``coarse_level`` get one threshold each: ``fine_level`` owns
    [0, min], each intermediate level one equal-width ring of [min, max].
    With no intermediate levels the fine level extends to ``max``.
    """
    lo, hi = buffer_km
    n = fine_level - coarse_level - 1
    out = {}
    if fine_level == coarse_level:
        return out
    if n == 0:
        out[fine_level] = float(hi)
        return out
    width = (hi - lo) / n
    out[fine_level] = float(lo)
    for i in range(1, n + 1):
        out[fine_level - i] = float(lo + i * width)
    return out


def assigned_level(distance_km, fine_level: int, coarse_level: int, buffer_km) -> np.ndarray:
    """Target level as a non-increasing step function of distance."""
    d = np.asarray(distance_km, dtype=np.float64)
    out = np.full(d.shape, coarse_level, dtype=np.int64)
    for lvl, thr in sorted(ring_thresholds(fine_level, coarse_level, buffer_km).items()):
        out = np.where(d <= thr, np.maximum(out, lvl), out)
    return out


class RegionDistance:
    """Distance from sphere points to the nearest cell of a region mask."""

    def __init__(self, region, grid):
        mask = np.asarray(region.mask, dtype=bool)
        if not mask.any():
            raise MeshError(f"region {region.name!r} has no cells")
        self.mask = mask
        self.grid = grid
        rows, cols = np.nonzero(mask)
        lat = grid.lats()[rows]
        lon = grid.lons()[cols]
        self.tree = cKDTree(latlon_to_xyz(lat, lon))

    def __call__(self, xyz: np.ndarray) -> np.ndarray:
        lat, lon = xyz_to_latlon(xyz)
        rows, cols = self.grid.cell_index(lat, lon)
        inside = self.mask[rows, cols]
        chord, _ = self.tree.query(xyz)
        dist = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0)) * EARTH_RADIUS_KM
        return np.where(inside, 0.0, dist)


def _centroids(vertices, faces):
    c = vertices[faces].sum(axis=1)
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def build_lam_mesh(
    region,
    grid=None,
    fine_level: int = 6,
    coarse_level: int = 3,
    buffer_km: Sequence[float] = (400.0, 800.0),
) -> LamMesh:
    """Adaptive mesh: ``fine_level`` inside the region, ``coarse_level`` far away.

    A face of level l is split when its centroid is within the threshold of
    level l+1 (see :func:`ring_thresholds`) and, unless the centroid is inside
    the region, all four children stay within the outer buffer.  Hanging
    nodes are allowed.
    """
    if grid is None:
        grid = region.grid
    if fine_level < coarse_level:
        raise MeshError("fine_level must be >= coarse_level")
    if not 0 <= coarse_level <= MAX_LEVEL or fine_level > MAX_LEVEL:
        raise MeshError(f"levels must be in [0, {MAX_LEVEL}]")
    lo, hi = (float(b) for b in buffer_km)
    if not (0 < lo < hi):
        raise MeshError("buffer distances must be positive and increasing")
    dist = RegionDistance(region, grid)
    thresholds = ring_thresholds(fine_level, coarse_level, (lo, hi))

    mesh = icosahedron()
    level_edges = [mesh.edges]
    for _ in range(coarse_level):
        mesh = refine(mesh)
        level_edges.append(mesh.edges)
    vertices = mesh.vertices
    active = mesh.faces
    leaves, leaf_levels = [], []
    key_to_index: dict = {}
    level_faces = [20 * 4**k for k in range(coarse_level + 1)]
    for lvl in range(coarse_level, fine_level):
        d = dist(_centroids(vertices, active))
        split = d <= thresholds[lvl + 1]
        if split.any():
            # probe the children against the outer buffer before committing
            probe_verts, probe = _split_faces(vertices, active[split], dict(key_to_index))
            child_d = dist(_centroids(probe_verts, probe)).reshape(-1, 4)
            keep = (d[split] == 0.0) | (child_d <= hi).all(axis=1)
            split[np.nonzero(split)[0][~keep]] = False
        leaves.append(active[~split])
        leaf_levels.append(np.full(int((~split).sum()), lvl, dtype=np.int64))
        active = active[split]
        if not len(active):
            break
        vertices, active = _split_faces(vertices, active, key_to_index)
        level_edges.append(_edges_of(active))
        level_faces.append(len(active))
    if len(active):
        leaves.append(active)
        leaf_levels.append(np.full(len(active), fine_level, dtype=np.int64))
    faces = np.concatenate(leaves)
    face_levels = np.concatenate(leaf_levels)
    return _assemble(
        int(face_levels.max()),
        vertices,
        level_edges,
        level_faces,
        faces,
        face_levels,
        cls=LamMesh,
        region_name=region.name,
        coarse_level=coarse_level,
        buffer_km=(lo, hi),
    )


# ---------------------------------------------------------------------------
# SFMESH01 container

MESH_MAGIC = b"SFMESH01"

_DTYPES = {"f64": "<f8", "f32": "<f4", "u32": "<u4", "u8": "u1"}


def _write_sections(fh, header: dict, sections: list[tuple[str, str, np.ndarray]]):
    header = dict(header)
    header["sections"] = [
        {"name": name, "dtype": dt, "shape": list(arr.shape)} for name, dt, arr in sections
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(MESH_MAGIC)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for _, dt, arr in sections:
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes())


def _read_sections(fh) -> tuple[dict, dict[str, np.ndarray]]:
    magic = fh.read(8)
    if magic != MESH_MAGIC:
        raise MeshError(f"not a mesh file (magic {magic!r})")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    arrays = {}
    for sec in header["sections"]:
        dt = np.dtype(_DTYPES[sec["dtype"]])
        count = int(np.prod(sec["shape"], dtype=np.int64))
        raw = fh.read(count * dt.itemsize)
        if len(raw) != count * dt.itemsize:
            raise MeshError(f"truncated section {sec['name']!r}")
        arrays[sec["name"]] = np.frombuffer(raw, dtype=dt).reshape(sec["shape"])
    return header, arrays


def save_mesh(mesh: MultiMesh, path, couplings: Optional[dict] = None, metadata: Optional[dict] = None) -> None:
    """Write a mesh (and optionally coupling graphs) to an SFMESH01 file."""
    header = {
        "kind": "lam" if isinstance(mesh, LamMesh) else "multimesh",
        "finest_level": int(mesh.finest_level),
        "levels": sorted(int(l) for l in np.unique(mesh.edge_levels)),
        "counts": {
            "vertices": int(len(mesh.nodes)),
            "faces": int(len(mesh.faces)),
            "edges": int(len(mesh.edge_list)),
        },
        "node_feature_names": list(NODE_FEATURE_NAMES),
        "edge_feature_names": list(EDGE_FEATURE_NAMES),
        "length_scale": mesh.length_scale,
        "level_faces": list(mesh.level_faces),
    }
    if metadata:
        header["metadata"] = metadata
    if isinstance(mesh, LamMesh):
        header["lam"] = {
            "region": mesh.region_name,
            "coarse_level": mesh.coarse_level,
            "buffer_km": list(mesh.buffer_km),
        }
    sections = [
        ("vertices", "f64", mesh.nodes),
        ("faces", "u32", mesh.faces),
        ("face_levels", "u8", mesh.face_levels),
        ("edges", "u32", mesh.edge_list),
        ("edge_levels", "u8", mesh.edge_levels),
        ("node_features", "f32", mesh.node_features),
        ("edge_features", "f32", mesh.edge_features),
    ]
    if couplings:
        header["couplings"] = {}
        for name, cg in couplings.items():
            header["couplings"][name] = {
                "direction": cg.direction,
                "grid": cg.grid.to_dict(),
            }
            sections.append((f"{name}.edges", "u32", cg.edges))
            sections.append((f"{name}.edge_features", "f32", cg.edge_features))
    with open(path, "wb") as fh:
        _write_sections(fh, header, sections)


def load_mesh(path):
    """Read an SFMESH01 file; returns (mesh, {name: CouplingGraph})."""
    from .coupling import CouplingGraph, GridSpec

    with open(path, "rb") as fh:
        header, arr = _read_sections(fh)
    common = dict(
        finest_level=header["finest_level"],
        nodes=arr["vertices"].astype(np.float64),
        edge_list=arr["edges"].astype(np.int64),
        edge_levels=arr["edge_levels"].astype(np.int64),
        faces=arr["faces"].astype(np.int64),
        face_levels=arr["face_levels"].astype(np.int64),
        # features are recomputed in float64 from the stored geometry
        node_features=node_features(arr["vertices"].astype(np.float64)),
        length_scale=float(header["length_scale"]),
        level_faces=tuple(header["level_faces"]),
    )
    v = common["nodes"]
    e = common["edge_list"]
    common["edge_features"] = edge_features(v[e[:, 0]], v[e[:, 1]], common["length_scale"])
    if header["kind"] == "lam":
        lam = header["lam"]
        mesh = LamMesh(
            **common,
            region_name=lam["region"],
            coarse_level=lam["coarse_level"],
            buffer_km=tuple(lam["buffer_km"]),
        )
    else:
        mesh = MultiMesh(**common)
    couplings = {}
    for name, meta in header.get("couplings", {}).items():
        couplings[name] = CouplingGraph(
            direction=meta["direction"],
            grid=GridSpec.from_dict(meta["grid"]),
            edges=arr[f"{name}.edges"].astype(np.int64),
            edge_features=arr[f"{name}.edge_features"].astype(np.float64),
        )
    return mesh, couplings


def mesh_stats(mesh: MultiMesh) -> dict:
    """Per-level V/E/F and Euler characteristic, plus totals."""
    per_level = {}
    for lvl, count in mesh.level_counts().items():
        sel = mesh.edge_list[mesh.edge_levels == lvl]
        v = int(len(np.unique(sel)))
        f = int(mesh.level_faces[lvl]) if lvl < len(mesh.level_faces) else 0
        per_level[lvl] = {"V": v, "E": count, "F": f, "euler": v - count + f}
    return {
        "nodes": len(mesh.nodes),
        "edges": len(mesh.edge_list),
        "faces": len(mesh.faces),
        "levels": per_level,
    }
