"""Sparse differential operators on icosphere vertices.

All operators are scipy CSR matrices of shape (n_v, n_v). The Laplacian uses
the negative-semidefinite convention (eigenvalues -l(l+1) on the sphere); the
two gradient components are projections of the area-weighted vertex gradient
onto east-west and north-south unit fields, with zero rows at the poles.
"""
import logging
import os
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import io as sio
from scipy import sparse

from mesh import mesh_at_level

logger = logging.getLogger(__name__)

DROP_TOLERANCE = 1e-14
OPERATOR_NAMES = ('identity', 'gradx', 'grady', 'laplacian')


def finalize_csr(matrix):
    """Canonical CSR: summed duplicates, sorted columns, entries below 1e-14 dropped."""
    matrix = sparse.csr_matrix(matrix, dtype=np.float64)
    matrix.sum_duplicates()
    matrix.data[np.abs(matrix.data) < DROP_TOLERANCE] = 0.0
    matrix.eliminate_zeros()
    matrix.sort_indices()
    return matrix


def max_abs_row_sum(matrix):
    return float(np.abs(np.asarray(matrix.sum(axis=1))).max())


@dataclass(frozen=True, eq=False)
class FaceGradientOperator:
    """Per-vertex scalars -> stacked per-face gradients (rows 3f, 3f+1, 3f+2)."""

    matrix: sparse.csr_matrix
    areas: np.ndarray
    basis_gradients: np.ndarray
    vertex_average: sparse.csr_matrix


@dataclass(frozen=True, eq=False)
class DirectionFields:
    x_hat: np.ndarray
    y_hat: np.ndarray


@dataclass(frozen=True, eq=False)
class DualAreas:
    areas: np.ndarray

    def total(self):
        return float(self.areas.sum())


@dataclass(frozen=True, eq=False)
class OperatorSet:
    level: int
    identity: sparse.csr_matrix
    grad_x: sparse.csr_matrix
    grad_y: sparse.csr_matrix
    laplacian: sparse.csr_matrix

    @property
    def n_v(self):
        return self.identity.shape[0]

    def matrices(self, mask=None):
        """Operators in kernel-coefficient order (I, grad_x, grad_y, laplacian), optionally masked."""
        every = (self.identity, self.grad_x, self.grad_y, self.laplacian)
        if mask is None:
            return every
        return tuple(every[k] for k in mask.active_indices())

    @cached_property
    def transposes(self):
        return tuple(finalize_csr(m.T) for m in self.matrices())


def face_gradient_operator(mesh):
    corners = mesh.vertices[mesh.faces]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    double_area = np.linalg.norm(cross, axis=1)
    if np.any(double_area <= 0.0):
        bad = int(np.flatnonzero(double_area <= 0.0)[0])
        raise ValueError(f"Degenerate face {bad} with zero area")
    normals = cross / double_area[:, None]

    # grad(phi_k) = N x (edge opposite k, CCW) / (2 * area)
    basis = np.empty((mesh.n_f, 3, 3))
    for k in range(3):
        opposite = corners[:, (k + 2) % 3] - corners[:, (k + 1) % 3]
        basis[:, k, :] = np.cross(normals, opposite) / double_area[:, None]

    face_ids = np.arange(mesh.n_f)
    rows = (3 * face_ids[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
    cols = np.broadcast_to(mesh.faces[:, :, None], basis.shape)
    matrix = finalize_csr(sparse.coo_matrix(
        (basis.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
        shape=(3 * mesh.n_f, mesh.n_v),
    ))

    areas = 0.5 * double_area
    weighted = mesh.vertex_faces @ sparse.diags(areas)
    totals = np.asarray(weighted.sum(axis=1)).ravel()
    vertex_average = finalize_csr(sparse.diags(1.0 / totals) @ weighted)
    return FaceGradientOperator(matrix, areas, basis, vertex_average)


def vertex_gradients(fg, mesh, f):
    """Area-weighted average of the incident per-face gradients, (n_v, 3)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (mesh.n_v,):
        raise ValueError(f"Expected {mesh.n_v} vertex values, got shape {f.shape}")
    face_grads = (fg.matrix @ f).reshape(mesh.n_f, 3)
    return fg.vertex_average @ face_grads


def _unwrapped_face_longitudes(mesh, lon):
    face_lon = lon[mesh.faces].copy()
    at_pole = np.isin(mesh.faces, mesh.pole_indices())
    face_lon[at_pole] = np.nan
    seam = np.nanmax(face_lon, axis=1) - np.nanmin(face_lon, axis=1) > np.pi
    shift = seam[:, None] & (face_lon < 0.0)
    face_lon[shift] += 2.0 * np.pi
    # a pole has no longitude of its own: take the mean of the two ring corners
    pole_rows = np.flatnonzero(at_pole.any(axis=1))
    face_lon[at_pole] = np.nanmean(face_lon[pole_rows], axis=1)
    return face_lon


def direction_fields(mesh, fg=None):
    fg = fg if fg is not None else face_gradient_operator(mesh)
    lon, lat = mesh.vertex_lonlat()
    positions = mesh.vertices

    grad_lat = vertex_gradients(fg, mesh, lat)
    face_lon = _unwrapped_face_longitudes(mesh, lon)
    grad_lon = fg.vertex_average @ np.einsum('fkd,fk->fd', fg.basis_gradients, face_lon)

    def remove(v, direction):
        return v - np.einsum('ij,ij->i', v, direction)[:, None] * direction

    poles = list(mesh.pole_indices())
    y_hat = remove(grad_lat, positions)
    y_hat[poles] = 0.0
    norms = np.linalg.norm(y_hat, axis=1)
    norms[poles] = 1.0
    y_hat /= norms[:, None]

    x_hat = remove(remove(grad_lon, positions), y_hat)
    x_hat[poles] = 0.0
    norms = np.linalg.norm(x_hat, axis=1)
    norms[poles] = 1.0
    x_hat /= norms[:, None]
    return DirectionFields(x_hat, y_hat)


def cotan_laplacian(mesh):
    """Cotangent Laplace-Beltrami with barycentric dual areas; L z ~ -2 z on the sphere."""
    corners = mesh.vertices[mesh.faces]
    rows, cols, weights = [], [], []
    for k in range(3):
        u = corners[:, (k + 1) % 3] - corners[:, k]
        v = corners[:, (k + 2) % 3] - corners[:, k]
        cot = np.einsum('ij,ij->i', u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        i, j = mesh.faces[:, (k + 1) % 3], mesh.faces[:, (k + 2) % 3]
        rows += [i, j]
        cols += [j, i]
        weights += [cot, cot]
    stiffness = sparse.coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_v, mesh.n_v),
    ).tocsr()
    stiffness.sum_duplicates()
    stiffness = stiffness - sparse.diags(np.asarray(stiffness.sum(axis=1)).ravel())

    areas = np.bincount(mesh.faces.reshape(-1), np.repeat(mesh.face_areas(), 3), minlength=mesh.n_v) / 3.0
    laplacian = finalize_csr(sparse.diags(1.0 / (2.0 * areas)) @ stiffness)
    return laplacian, DualAreas(areas)


def assemble_operator_set(mesh):
    fg = face_gradient_operator(mesh)
    fields = direction_fields(mesh, fg)
    vertex_grad = [fg.vertex_average @ fg.matrix[d::3] for d in range(3)]

    def project(field):
        return finalize_csr(sum(sparse.diags(field[:, d]) @ vertex_grad[d] for d in range(3)))

    laplacian, _ = cotan_laplacian(mesh)
    ops = OperatorSet(
        level=mesh.level,
        identity=sparse.identity(mesh.n_v, dtype=np.float64, format='csr'),
        grad_x=project(fields.x_hat),
        grad_y=project(fields.y_hat),
        laplacian=laplacian,
    )
    logger.debug("Assembled operators for level %d (laplacian nnz=%d)", mesh.level, ops.laplacian.nnz)
    return ops


@lru_cache(maxsize=None)
def operator_set_at_level(level):
    return assemble_operator_set(mesh_at_level(level))


def export_matrix_market(ops, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, matrix in zip(OPERATOR_NAMES, ops.matrices()):
        path = os.path.join(out_dir, f"{name}.mtx")
        sio.mmwrite(path, matrix, comment=f"level {ops.level} {name}", precision=17, symmetry='general')
        paths.append(path)
    return paths


def import_matrix_market(path):
    return finalize_csr(sio.mmread(path))


def operator_summary(ops, mesh):
    """Sanity numbers surfaced by the CLI: row sums, Rayleigh quotient, grad_y error."""
    z = mesh.vertices[:, 2]
    _, lat = mesh.vertex_lonlat()
    _, dual = cotan_laplacian(mesh)
    non_pole = np.ones(mesh.n_v, dtype=bool)
    non_pole[list(mesh.pole_indices())] = False
    rayleigh = float(np.sum(dual.areas * z * (ops.laplacian @ z)) / np.sum(dual.areas * z * z))
    return {
        'level': ops.level,
        'row_sum': {name: max_abs_row_sum(m) for name, m in zip(OPERATOR_NAMES, ops.matrices())},
        'laplacian_rayleigh_z': rayleigh,
        'grady_z_max_error': float(np.abs((ops.grad_y @ z) - np.cos(lat))[non_pole].max()),
        'gradx_z_max_abs': float(np.abs(ops.grad_x @ z)[non_pole].max()),
    }
