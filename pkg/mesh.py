"""
Simplicial meshes of the unit square and unit cube.

Entities (edges, faces) are stored in canonical sorted-tuple form so that
global orientations depend only on vertex ids:

- an edge (a, b), a < b, has the global tangent x_b - x_a;
- a 2D facet (edge) has the global normal obtained by rotating that tangent
  clockwise, a 3D facet (a, b, c) the normal (x_b - x_a) x (x_c - x_a).

Local facet ``i`` of a cell is the facet opposite its local vertex ``i``.
"""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)

INTERIOR = 'interior'
P_BOUNDARY = 'p-boundary'
Q_BOUNDARY = 'q-boundary'

# Local vertex pairs per cell; in 2D edge k is the facet opposite vertex k
LOCAL_EDGES = {
    2: np.array([(1, 2), (0, 2), (0, 1)]),
    3: np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]),
}
LOCAL_FACETS = {
    2: np.array([(1, 2), (0, 2), (0, 1)]),
    3: np.array([(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]),
}


class MeshError(ValueError):
    """Invalid mesh input or construction request."""


@dataclass
class SimplicialMesh:
    """Vertices, cells and derived connectivity/geometry of a simplicial mesh."""
    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    edges: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = None
    cell_edges: Optional[np.ndarray] = None
    cell_edge_signs: Optional[np.ndarray] = None
    cell_facets: Optional[np.ndarray] = None
    cell_facet_signs: Optional[np.ndarray] = None
    face_edges: Optional[np.ndarray] = None
    facet_cells: Optional[np.ndarray] = None
    facet_tags: Optional[np.ndarray] = None
    facet_measures: Optional[np.ndarray] = None
    facet_normals: Optional[np.ndarray] = None
    facet_centers: Optional[np.ndarray] = None
    cell_volumes: Optional[np.ndarray] = None
    cell_gradients: Optional[np.ndarray] = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def facets(self):
        return self.edges if self.dim == 2 else self.faces

    @property
    def n_facets(self):
        return len(self.facets)

    @property
    def cell_centers(self):
        return self.vertices[self.cells].mean(axis=1)

    def boundary_facets(self, tag=None):
        """Indices of boundary facets, optionally restricted to one tag."""
        on_boundary = self.facet_cells[:, 1] < 0
        if tag is not None:
            on_boundary &= self.facet_tags == tag
        return np.flatnonzero(on_boundary)

    def cell_points(self, bary, cells=None):
        """Physical points (nc, nq, dim) for barycentric points (nq, dim+1)."""
        cells = slice(None) if cells is None else cells
        return np.einsum('qi,cid->cqd', bary, self.vertices[self.cells[cells]])


def _signed_volumes(vertices, cells):
    coords = vertices[cells]
    jac = coords[:, 1:, :] - coords[:, :1, :]
    return np.linalg.det(jac) / math.factorial(vertices.shape[1])


def _unique_rows(rows):
    """Canonical entity list and inverse map for sorted vertex tuples."""
    rows = np.sort(rows, axis=1)
    entities, inverse = np.unique(rows, axis=0, return_inverse=True)
    return entities, np.asarray(inverse).ravel()


def _lookup_edges(edges, pairs, n_vertices):
    """Edge ids of sorted vertex pairs (m, 2) in the canonical edge list."""
    keys = edges[:, 0] * n_vertices + edges[:, 1]
    pairs = np.sort(pairs, axis=1)
    wanted = pairs[:, 0] * n_vertices + pairs[:, 1]
    index = np.searchsorted(keys, wanted)
    if np.any(index >= len(keys)) or np.any(keys[np.minimum(index, len(keys) - 1)] != wanted):
        raise MeshError("face references an edge missing from the edge list")
    return index


def derive_entities(mesh):
    """
    Populate edges, faces, incidences, orientation signs, tags and geometry.

    Cells with negative signed volume are reordered; facets shared by more
    than two cells raise MeshError. Existing facet tags are kept, so the
    operation is idempotent on an already derived mesh.
    """
    dim = mesh.dim
    if dim not in (2, 3):
        raise MeshError(f"unsupported mesh dimension {dim}")
    vertices = np.asarray(mesh.vertices, dtype=float)
    cells = np.array(mesh.cells, dtype=np.int64)
    if cells.ndim != 2 or cells.shape[1] != dim + 1:
        raise MeshError(f"cells must have {dim + 1} vertices each")

    volumes = _signed_volumes(vertices, cells)
    if np.any(volumes == 0.0):
        raise MeshError("degenerate cell with zero volume")
    flip = volumes < 0
    cells[flip, 0], cells[flip, 1] = cells[flip, 1].copy(), cells[flip, 0].copy()
    n_cells = len(cells)

    local_edges = LOCAL_EDGES[dim]
    edge_rows = cells[:, local_edges].reshape(-1, 2)
    edges, inverse = _unique_rows(edge_rows)
    cell_edges = inverse.reshape(n_cells, len(local_edges))
    cell_edge_signs = np.where(
        cells[:, local_edges[:, 0]] < cells[:, local_edges[:, 1]], 1, -1)

    facet_rows = cells[:, LOCAL_FACETS[dim]].reshape(-1, dim)
    facets, inverse = _unique_rows(facet_rows)
    cell_facets = inverse.reshape(n_cells, dim + 1)

    counts = np.bincount(cell_facets.ravel(), minlength=len(facets))
    if np.any(counts > 2):
        bad = int(np.flatnonzero(counts > 2)[0])
        raise MeshError(f"non-manifold input: facet {bad} is shared by {counts[bad]} cells")

    facet_cells = np.full((len(facets), 2), -1, dtype=np.int64)
    order = np.argsort(cell_facets.ravel(), kind='stable')
    owners = np.repeat(np.arange(n_cells), dim + 1)[order]
    sorted_facets = cell_facets.ravel()[order]
    first = np.ones(len(sorted_facets), dtype=bool)
    first[1:] = sorted_facets[1:] != sorted_facets[:-1]
    facet_cells[sorted_facets[first], 0] = owners[first]
    facet_cells[sorted_facets[~first], 1] = owners[~first]

    x = vertices[facets]
    if dim == 2:
        tangent = x[:, 1] - x[:, 0]
        normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        measures = np.linalg.norm(normals, axis=1)
        faces = None
        face_edges = None
    else:
        normals = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        measures = np.linalg.norm(normals, axis=1) / 2.0
        faces = facets
        pairs = facets[:, [[0, 1], [0, 2], [1, 2]]].reshape(-1, 2)
        face_edges = _lookup_edges(edges, pairs, len(vertices)).reshape(-1, 3)
    unit_normals = normals / np.linalg.norm(normals, axis=1)[:, None]

    # Outward iff the facet lies on the positive side seen from the opposite vertex
    opposite = vertices[cells]
    on_facet = vertices[facets[cell_facets, 0]]
    outward = np.einsum('cid,cid->ci', on_facet - opposite, unit_normals[cell_facets])
    cell_facet_signs = np.where(outward > 0, 1, -1)

    if mesh.facet_tags is not None and len(mesh.facet_tags) == len(facets):
        tags = np.array(mesh.facet_tags, dtype=object)
    else:
        tags = np.where(facet_cells[:, 1] < 0, P_BOUNDARY, INTERIOR).astype(object)

    coords = vertices[cells]
    jac = np.transpose(coords[:, 1:, :] - coords[:, :1, :], (0, 2, 1))
    inv_jac = np.linalg.inv(jac)
    gradients = np.concatenate([-inv_jac.sum(axis=1, keepdims=True), inv_jac], axis=1)
    cell_volumes = np.abs(np.linalg.det(jac)) / math.factorial(dim)

    return replace(
        mesh,
        vertices=vertices,
        cells=cells,
        edges=edges,
        faces=faces,
        cell_edges=cell_edges,
        cell_edge_signs=cell_edge_signs,
        cell_facets=cell_facets,
        cell_facet_signs=cell_facet_signs,
        face_edges=face_edges,
        facet_cells=facet_cells,
        facet_tags=tags,
        facet_measures=measures,
        facet_normals=unit_normals,
        facet_centers=x.mean(axis=1),
        cell_volumes=cell_volumes,
        cell_gradients=gradients,
    )


def build_structured_mesh(dim, n):
    """
    Structured simplicial mesh of the unit square (n x n squares, 2 triangles
    each) or unit cube (n^3 subcubes, 6 Kuhn tetrahedra each).
    """
    if dim not in (2, 3):
        raise MeshError(f"unsupported mesh dimension {dim}")
    if int(n) != n or n < 1:
        raise MeshError(f"resolution must be a positive integer, got {n}")
    n = int(n)

    ticks = np.linspace(0.0, 1.0, n + 1)
    if dim == 2:
        jj, ii = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing='ij')
        vertices = np.column_stack([ticks[ii.ravel()], ticks[jj.ravel()]])
        j, i = np.meshgrid(np.arange(n), np.arange(n), indexing='ij')
        v00 = (i + j * (n + 1)).ravel()
        v10, v01 = v00 + 1, v00 + n + 1
        v11 = v01 + 1
        cells = np.column_stack([v00, v10, v11, v00, v11, v01]).reshape(-1, 3)
    else:
        kk, jj, ii = np.meshgrid(*(3 * [np.arange(n + 1)]), indexing='ij')
        vertices = np.column_stack([ticks[ii.ravel()], ticks[jj.ravel()], ticks[kk.ravel()]])
        k, j, i = np.meshgrid(*(3 * [np.arange(n)]), indexing='ij')
        corner = (i + j * (n + 1) + k * (n + 1) ** 2).ravel()
        strides = np.array([1, n + 1, (n + 1) ** 2])
        tets = []
        # Kuhn path from the low to the high corner, one tetrahedron per axis order
        for perm in itertools.permutations(range(3)):
            steps = np.cumsum(strides[list(perm)])
            tets.append(np.column_stack([corner, corner + steps[0], corner + steps[1], corner + steps[2]]))
        cells = np.stack(tets, axis=1).reshape(-1, 4)

    mesh = derive_entities(SimplicialMesh(dim=dim, vertices=vertices, cells=cells))
    logger.debug("Structured mesh dim=%d n=%d: %d vertices, %d cells", dim, n, mesh.n_vertices, mesh.n_cells)
    return mesh


def mesh_size(mesh):
    """Maximum cell diameter h."""
    coords = mesh.vertices[mesh.cells]
    diffs = coords[:, :, None, :] - coords[:, None, :, :]
    return float(np.sqrt((diffs ** 2).sum(axis=-1)).max())


def tag_boundary(mesh, predicate: Callable[[np.ndarray], np.ndarray], tag=Q_BOUNDARY):
    """
    Return a copy of ``mesh`` whose boundary facets selected by ``predicate``
    (evaluated on facet centers, shape (m, dim)) carry ``tag``.
    """
    if tag not in (P_BOUNDARY, Q_BOUNDARY):
        raise MeshError(f"unknown boundary tag {tag!r}")
    boundary = mesh.boundary_facets()
    selected = np.asarray(predicate(mesh.facet_centers[boundary]), dtype=bool)
    tags = mesh.facet_tags.copy()
    tags[boundary[selected]] = tag
    return replace(mesh, facet_tags=tags)


def dump_mesh(mesh, path):
    """Write the plain-text debugging dump (DIM / VERTICES / CELLS records)."""
    with open(path, 'w') as f:
        f.write(f"DIM {mesh.dim}\n")
        f.write(f"VERTICES {mesh.n_vertices}\n")
        for coords in mesh.vertices:
            f.write(" ".join(repr(float(c)) for c in coords) + "\n")
        f.write(f"CELLS {mesh.n_cells}\n")
        for cell in mesh.cells:
            f.write(" ".join(str(int(v)) for v in cell) + "\n")
