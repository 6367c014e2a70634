"""Icosahedral sphere meshes with level-nested vertex ordering.

Level l+1 keeps every vertex of level l at the same index and appends one
reprojected midpoint per level-l edge, in the order of the sorted edge list.
That ordering is what lets downsampling be a prefix slice.
"""
import logging
import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse

from utils import DataFormatError

logger = logging.getLogger(__name__)

MAX_LEVEL = 9
NORTH_POLE = 0
SOUTH_POLE = 11

CACHE_MAGIC = b'UGSM'
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct('<4sHH')


@dataclass(frozen=True)
class MeshLevelStats:
    level: int
    n_f: int
    n_e: int
    n_v: int


@dataclass(frozen=True, eq=False)
class IcoMesh:
    """Immutable level-l icosphere: unit vertices, CCW faces, sorted (min, max) edges."""

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        for array in (self.vertices, self.faces, self.edges):
            array.setflags(write=False)

    @property
    def n_v(self):
        return self.vertices.shape[0]

    @property
    def n_f(self):
        return self.faces.shape[0]

    @property
    def n_e(self):
        return self.edges.shape[0]

    @cached_property
    def vertex_faces(self):
        """n_v x n_f incidence matrix (CSR, sorted column indices)."""
        rows = self.faces.reshape(-1)
        cols = np.repeat(np.arange(self.n_f), 3)
        incidence = sparse.csr_matrix(
            (np.ones(rows.shape[0]), (rows, cols)), shape=(self.n_v, self.n_f)
        )
        incidence.sort_indices()
        return incidence

    def valences(self):
        return np.bincount(self.edges.reshape(-1), minlength=self.n_v)

    def face_areas(self):
        """Flat (chordal) triangle areas."""
        p0, p1, p2 = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)

    def vertex_lonlat(self):
        """Longitude in [-pi, pi] and latitude in [-pi/2, pi/2] per vertex."""
        x, y, z = self.vertices.T
        return np.arctan2(y, x), np.arctan2(z, np.hypot(x, y))

    def pole_indices(self):
        return NORTH_POLE, SOUTH_POLE

    def stats(self):
        return MeshLevelStats(self.level, self.n_f, self.n_e, self.n_v)


def level_stats(level):
    """Closed-form face/edge/vertex counts of a level-l icosphere."""
    if level < 0:
        raise ValueError(f"Mesh level must be non-negative, got {level}")
    n_f = 20 * 4 ** level
    n_e = 30 * 4 ** level
    return MeshLevelStats(level, n_f, n_e, n_e - n_f + 2)


def edges_from_faces(faces):
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs.sort(axis=1)
    # np.unique with axis=0 returns rows in lexicographic order
    return np.unique(pairs, axis=0)


def _orient_outward(vertices, faces):
    p0, p1, p2 = (vertices[faces[:, k]] for k in range(3))
    normals = np.cross(p1 - p0, p2 - p0)
    inward = np.einsum('ij,ij->i', normals, p0 + p1 + p2) < 0
    faces = faces.copy()
    faces[inward, 1], faces[inward, 2] = faces[inward, 2], faces[inward, 1].copy()
    return faces


def build_icosahedron():
    """Level-0 mesh: poles at (0, 0, +-1), two staggered rings of five."""
    ring_lat = np.arctan(0.5)
    vertices = [(0.0, 0.0, 1.0)]
    for k in range(5):
        lon = 2.0 * np.pi * k / 5.0
        vertices.append((np.cos(ring_lat) * np.cos(lon), np.cos(ring_lat) * np.sin(lon), np.sin(ring_lat)))
    for k in range(5):
        lon = 2.0 * np.pi * k / 5.0 + np.pi / 5.0
        vertices.append((np.cos(ring_lat) * np.cos(lon), np.cos(ring_lat) * np.sin(lon), -np.sin(ring_lat)))
    vertices.append((0.0, 0.0, -1.0))
    vertices = np.array(vertices, dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)

    faces = []
    for k in range(5):
        upper, upper_next = 1 + k, 1 + (k + 1) % 5
        lower, lower_next = 6 + k, 6 + (k + 1) % 5
        faces.append((NORTH_POLE, upper, upper_next))
        faces.append((upper, lower, upper_next))
        faces.append((lower, lower_next, upper_next))
        faces.append((SOUTH_POLE, lower_next, lower))
    faces = _orient_outward(vertices, np.array(faces, dtype=np.int64))
    return IcoMesh(0, vertices, faces, edges_from_faces(faces))


def subdivide(mesh):
    """Split every face into four; new vertex index = n_v + rank of its parent edge."""
    n_v = mesh.n_v
    edges = mesh.edges
    edge_keys = edges[:, 0] * n_v + edges[:, 1]

    midpoints = mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]]
    midpoints /= np.linalg.norm(midpoints, axis=1, keepdims=True)
    vertices = np.vstack([mesh.vertices, midpoints])

    def midpoint_index(a, b):
        keys = np.minimum(a, b) * n_v + np.maximum(a, b)
        return n_v + np.searchsorted(edge_keys, keys)

    a, b, c = mesh.faces.T
    ab, bc, ca = midpoint_index(a, b), midpoint_index(b, c), midpoint_index(c, a)
    faces = np.stack([
        np.stack([a, ab, ca], axis=1),
        np.stack([b, bc, ab], axis=1),
        np.stack([c, ca, bc], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ], axis=1).reshape(-1, 3)
    return IcoMesh(mesh.level + 1, vertices, faces, edges_from_faces(faces))


@lru_cache(maxsize=None)
def _cached_level(level):
    if level == 0:
        return build_icosahedron()
    mesh = subdivide(_cached_level(level - 1))
    logger.debug("Built level-%d mesh: V=%d E=%d F=%d", level, mesh.n_v, mesh.n_e, mesh.n_f)
    return mesh


def mesh_at_level(level):
    """Level-l mesh by repeated subdivision (memoised, shared read-only)."""
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)):
        raise ValueError(f"Mesh level must be an integer, got {level!r}")
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"Mesh level {level} out of range [0, {MAX_LEVEL}]")
    return _cached_level(int(level))


def one_ring(mesh, vertex):
    """Neighbours of ``vertex`` in counter-clockwise order seen from outside."""
    if not 0 <= vertex < mesh.n_v:
        raise IndexError(f"Vertex {vertex} out of range for mesh with {mesh.n_v} vertices")
    incidence = mesh.vertex_faces
    face_ids = incidence.indices[incidence.indptr[vertex]:incidence.indptr[vertex + 1]]
    successor = {}
    for face in mesh.faces[face_ids]:
        pos = int(np.flatnonzero(face == vertex)[0])
        successor[int(face[(pos + 1) % 3])] = int(face[(pos + 2) % 3])
    ring = [min(successor)]
    while len(ring) < len(successor):
        ring.append(successor[ring[-1]])
    return ring


def _level_from_face_count(n_f, source):
    level = 0
    while 20 * 4 ** level < n_f and level <= MAX_LEVEL:
        level += 1
    if 20 * 4 ** level != n_f:
        raise DataFormatError(f"{source}: {n_f} faces is not an icosphere face count")
    return level


def write_obj(mesh, path):
    with open(path, 'w', encoding='ascii', newline='\n') as handle:
        handle.write(f"# icosphere level {mesh.level}\n")
        for x, y, z in mesh.vertices:
            handle.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for i, j, k in mesh.faces + 1:
            handle.write(f"f {i} {j} {k}\n")


def read_obj(path):
    vertices, faces = [], []
    with open(path, 'r', encoding='ascii') as handle:
        for line in handle:
            parts = line.split()
            if not parts or parts[0].startswith('#'):
                continue
            if parts[0] == 'v':
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == 'f':
                faces.append([int(p.split('/')[0]) - 1 for p in parts[1:4]])
    vertices = np.array(vertices, dtype=np.float64)
    faces = np.array(faces, dtype=np.int64)
    level = _level_from_face_count(len(faces), path)
    if len(vertices) != level_stats(level).n_v:
        raise DataFormatError(f"{path}: expected {level_stats(level).n_v} vertices, found {len(vertices)}")
    return IcoMesh(level, vertices, faces, edges_from_faces(faces))


def write_mesh_cache(mesh, path):
    with open(path, 'wb') as handle:
        handle.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, mesh.level))
        handle.write(mesh.vertices.astype('<f8').tobytes())
        handle.write(mesh.faces.astype('<u4').tobytes())


def read_mesh_cache(path):
    with open(path, 'rb') as handle:
        blob = handle.read()
    if len(blob) < _CACHE_HEADER.size:
        raise DataFormatError(f"{path}: truncated mesh cache header")
    magic, version, level = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise DataFormatError(f"{path}: unsupported mesh cache version {version}")
    stats = level_stats(level)
    offset = _CACHE_HEADER.size
    expected = offset + stats.n_v * 3 * 8 + stats.n_f * 3 * 4
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for level {level}, found {len(blob)}")
    vertices = np.frombuffer(blob, dtype='<f8', count=stats.n_v * 3, offset=offset).reshape(-1, 3)
    offset += stats.n_v * 3 * 8
    faces = np.frombuffer(blob, dtype='<u4', count=stats.n_f * 3, offset=offset).reshape(-1, 3)
    vertices = vertices.astype(np.float64)
    faces = faces.astype(np.int64)
    return IcoMesh(level, vertices, faces, edges_from_faces(faces))
