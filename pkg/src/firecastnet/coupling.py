"""Bipartite grid<->mesh graphs used by the encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geomesh import MultiMesh, edge_features, latlon_to_xyz, _edges_of, great_circle_rad

GRID_TO_MESH = "grid2mesh"
MESH_TO_GRID = "mesh2grid"


class CouplingError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular lat-lon grid of cell centres.

    Rows go from ``lat_start`` in steps of ``lat_step`` (negative for the
    north-to-south ordering of the datacube).
    """

    height: int
    width: int
    lat_start: float
    lat_step: float
    lon_start: float
    lon_step: float

    @classmethod
    def global_grid(cls, height: int, width: int) -> "GridSpec":
        """Whole-globe grid with cells centred in their boxes, north row first."""
        dlat = 180.0 / height
        dlon = 360.0 / width
        return cls(height, width, 90.0 - dlat / 2, -dlat, -180.0 + dlon / 2, dlon)

    @classmethod
    def paper_scale(cls) -> "GridSpec":
        return cls.global_grid(720, 1440)

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def lats(self) -> np.ndarray:
        return self.lat_start + self.lat_step * np.arange(self.height)

    def lons(self) -> np.ndarray:
        lon = self.lon_start + self.lon_step * np.arange(self.width)
        return (lon + 180.0) % 360.0 - 180.0

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (lat, lon) arrays of length height*width."""
        lat, lon = np.meshgrid(self.lats(), self.lons(), indexing="ij")
        return lat.ravel(), lon.ravel()

    def cell_xyz(self) -> np.ndarray:
        return latlon_to_xyz(*self.cell_centers())

    def cell_index(self, lat, lon) -> tuple[np.ndarray, np.ndarray]:
        """Row/column of the cell containing each point (longitude wraps)."""
        rows = np.rint((np.asarray(lat) - self.lat_start) / self.lat_step).astype(np.int64)
        rows = np.clip(rows, 0, self.height - 1)
        cols = np.rint((np.asarray(lon) - self.lon_start) / self.lon_step).astype(np.int64)
        return rows, cols % self.width

    def coarsen(self, factor: int) -> "GridSpec":
        if self.height % factor or self.width % factor:
            raise CouplingError(f"grid {self.height}x{self.width} not divisible by {factor}")
        return GridSpec(
            self.height // factor,
            self.width // factor,
            self.lat_start + self.lat_step * (factor - 1) / 2,
            self.lat_step * factor,
            self.lon_start + self.lon_step * (factor - 1) / 2,
            self.lon_step * factor,
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "lat_start": self.lat_start,
            "lat_step": self.lat_step,
            "lon_start": self.lon_start,
            "lon_step": self.lon_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            int(d["height"]),
            int(d["width"]),
            float(d["lat_start"]),
            float(d["lat_step"]),
            float(d["lon_start"]),
            float(d["lon_step"]),
        )


@dataclass(frozen=True)
class CouplingGraph:
    """Directed edges ``(source, target)``.

    For grid-to-mesh the source is a row-major grid cell index and the target
    a mesh node; for mesh-to-grid it is the other way round.
    """

    direction: str
    grid: GridSpec
    edges: np.ndarray
    edge_features: np.ndarray

    @property
    def senders(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def receivers(self) -> np.ndarray:
        return self.edges[:, 1]

    def in_degree(self, size: int) -> np.ndarray:
        return np.bincount(self.receivers, minlength=size)


def _node_radius(mesh: MultiMesh, factor: float) -> np.ndarray:
    """Per-node query radius (radians).

    Each node uses the longest leaf edge at the finest level of any leaf face
    touching it; on uniform meshes this is one global radius.
    """
    leaf_edges = _edges_of(mesh.faces)
    lengths = great_circle_rad(mesh.nodes[leaf_edges[:, 0]], mesh.nodes[leaf_edges[:, 1]])
    # level of a leaf edge: max level of the leaf faces using it; approximate
    # by the finer endpoint's level which is identical on uniform meshes
    node_level = np.full(len(mesh.nodes), -1, dtype=np.int64)
    for k in range(3):
        np.maximum.at(node_level, mesh.faces[:, k], mesh.face_levels)
    edge_level = np.minimum(node_level[leaf_edges[:, 0]], node_level[leaf_edges[:, 1]])
    longest = {}
    for lvl in np.unique(mesh.face_levels):
        sel = edge_level == lvl
        longest[int(lvl)] = float(lengths[sel].max()) if sel.any() else float(lengths.max())
    return factor * np.array([longest[int(l)] for l in node_level])


def grid_to_mesh_edges(grid: GridSpec, mesh: MultiMesh, radius_factor: float = 0.6) -> CouplingGraph:
    """Connect every grid cell to all mesh nodes within a radius.

    The radius is ``radius_factor`` times the longest finest-level mesh edge
    (great-circle).  Edges are ordered grid-major, then by mesh node index.
    """
    if radius_factor <= 0:
        raise CouplingError("radius_factor must be positive")
    if grid.num_cells == 0:
        raise CouplingError("grid has no cells")
    cells = grid.cell_xyz()
    radius = _node_radius(mesh, radius_factor)
    chord = 2.0 * np.sin(np.minimum(radius, np.pi) / 2.0)
    tree = cKDTree(cells)
    # query per distinct radius so the search is exact for LAM meshes
    src, dst = [], []
    for r in np.unique(chord):
        nodes = np.nonzero(chord == r)[0]
        hits = tree.query_ball_point(mesh.nodes[nodes], r)
        for node, cells_hit in zip(nodes, hits):
            if cells_hit:
                src.append(np.asarray(cells_hit, dtype=np.int64))
                dst.append(np.full(len(cells_hit), node, dtype=np.int64))
    if src:
        src = np.concatenate(src)
        dst = np.concatenate(dst)
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    order = np.lexsort((dst, src))
    edges = np.stack([src[order], dst[order]], axis=1)
    feats = edge_features(cells[edges[:, 0]], mesh.nodes[edges[:, 1]], mesh.length_scale)
    return CouplingGraph(GRID_TO_MESH, grid, edges, feats)


def containing_faces(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Index of the lowest-numbered face containing each point.

    Containment: the point lies on the non-negative side of the three great
    circle planes of an outward-oriented triangle.
    """
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    nab, nbc, nca = np.cross(a, b), np.cross(b, c), np.cross(c, a)
    centroids = a + b + c
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    tree = cKDTree(centroids)
    k = min(len(faces), 24)
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    tol = -1e-12

    def inside(p, f):
        return (
            (np.einsum("...j,...j->...", nab[f], p) >= tol)
            & (np.einsum("...j,...j->...", nbc[f], p) >= tol)
            & (np.einsum("...j,...j->...", nca[f], p) >= tol)
        )

    ok = inside(points[:, None, :], cand)
    masked = np.where(ok, cand, np.iinfo(np.int64).max)
    found = masked.min(axis=1)
    missing = np.nonzero(~ok.any(axis=1))[0]
    allf = np.arange(len(faces))
    for i in missing:
        hit = allf[inside(points[i][None, :], allf)]
        if len(hit) == 0:
            raise CouplingError(f"no face contains grid point {i}; mesh geometry is broken")
        found[i] = hit.min()
    return found


def mesh_to_grid_edges(grid: GridSpec, mesh: MultiMesh) -> CouplingGraph:
    """Connect each grid cell to the 3 vertices of its containing leaf face."""
    if len(mesh.faces) == 0:
        raise CouplingError("mesh has no faces")
    cells = grid.cell_xyz()
    face = containing_faces(cells, mesh.nodes, mesh.faces)
    tri = mesh.faces[face]
    src = tri.reshape(-1)
    dst = np.repeat(np.arange(len(cells), dtype=np.int64), 3)
    edges = np.stack([src, dst], axis=1)
    feats = edge_features(mesh.nodes[src], cells[dst], mesh.length_scale)
    return CouplingGraph(MESH_TO_GRID, grid, edges, feats)
