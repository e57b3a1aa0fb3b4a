"""Conforming triangle meshes, structured quad grids and criss-cross refinement.

Meshes are plain numpy containers: vertex coordinates, cell connectivity with
consistent counterclockwise orientation, and marked boundary edges.  The
per-cell diameter h_T (longest edge) feeds the stabilization parameter, and
criss-cross refined meshes remember their parent quad so piecewise-constant
cell data can be carried onto the triangulation.
"""

import numpy as np

from .util import atomic_write_text

WALL = 1
INLET = 2
OUTLET = 3

_PATTERNS = ("right", "crisscross")


class MeshError(ValueError):
    """Invalid mesh input or broken mesh invariant."""


class TriMesh:
    """Conforming triangle mesh with boundary markers.

    Parameters
    ----------
    vertices : (nv, 2) array
        Vertex coordinates.
    cells : (nc, 3) int array
        Vertex indices per triangle, counterclockwise.
    boundary_edges : (nb, 2) int array
        Vertex pairs lying on the domain boundary.
    boundary_markers : (nb,) int array
        One of WALL, INLET, OUTLET per boundary edge.
    parent_cell : (nc,) int array, optional
        Index of the quad each triangle was refined from.
    parent_diameter : (nc,) array, optional
        Diameter H_K of the parent quad.
    """

    def __init__(self, vertices, cells, boundary_edges, boundary_markers,
                 parent_cell=None, parent_diameter=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_markers = np.ascontiguousarray(boundary_markers, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must have shape (nc, 3)")
        if len(self.boundary_edges) != len(self.boundary_markers):
            raise MeshError("boundary edge/marker length mismatch")
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            raise MeshError("all cells must have strictly positive signed area")
        edge_vec = (self.vertices[np.roll(self.cells, -1, axis=1)]
                    - self.vertices[self.cells])
        self.cell_diameter = np.sqrt((edge_vec ** 2).sum(axis=2)).max(axis=1)
        self.parent_cell = None if parent_cell is None else np.asarray(parent_cell, dtype=np.int64)
        self.parent_diameter = None if parent_diameter is None else np.asarray(parent_diameter, dtype=float)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def h(self):
        """Global mesh size: max over cells of the longest edge."""
        return float(self.cell_diameter.max())

    def __str__(self):
        return "TriMesh with %d vertices, %d cells, %d boundary edges" % (
            self.num_vertices, self.num_cells, len(self.boundary_edges))

    def signed_areas(self):
        p0 = self.vertices[self.cells[:, 0]]
        p1 = self.vertices[self.cells[:, 1]]
        p2 = self.vertices[self.cells[:, 2]]
        return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                      - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))

    def total_area(self):
        return float(self.signed_areas().sum())

    def edge_table(self):
        """Unique undirected edges and the cell-to-edge incidence.

        Returns
        -------
        edges : (ne, 2) int array
            Sorted vertex pairs, lexicographically ordered.
        cell_to_edge : (nc, 3) int array
            Edge index opposite each local vertex.
        """
        raw = np.concatenate([self.cells[:, [1, 2]],
                              self.cells[:, [2, 0]],
                              self.cells[:, [0, 1]]])
        raw = np.sort(raw, axis=1)
        edges, inverse = np.unique(raw, axis=0, return_inverse=True)
        cell_to_edge = inverse.reshape(3, self.num_cells).T
        return edges, cell_to_edge

    def check_conforming(self):
        """Verify edge conformity and the boundary-edge bookkeeping.

        Raises MeshError when an edge is shared by more than two cells, or
        when the set of once-used edges differs from the declared boundary.
        """
        raw = np.concatenate([self.cells[:, [1, 2]],
                              self.cells[:, [2, 0]],
                              self.cells[:, [0, 1]]])
        raw = np.sort(raw, axis=1)
        edges, counts = np.unique(raw, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: an edge belongs to >2 cells")
        boundary = {tuple(e) for e in edges[counts == 1]}
        declared = {tuple(sorted(e)) for e in self.boundary_edges}
        if boundary != declared:
            raise MeshError("declared boundary edges do not match the mesh boundary")
        return True

    def boundary_vertices(self, markers=None):
        """Vertices lying on boundary edges, optionally filtered by marker."""
        if markers is None:
            sel = np.ones(len(self.boundary_edges), dtype=bool)
        else:
            sel = np.isin(self.boundary_markers, np.atleast_1d(markers))
        return np.unique(self.boundary_edges[sel])


class QuadGrid:
    """Structured grid of (possibly curved-boundary) quadrilaterals.

    The grid is stored through its realized corner lattice: corner (i, j)
    is the image of the reference point (i/n_along, j/n_across).  `payload`
    holds one constant 2-vector per cell (the pixel velocity of a measured
    field); `end_markers` optionally tags the two ends of the channel for
    inlet/outlet boundary conditions.
    """

    def __init__(self, corners, payload=None, end_markers=False):
        self.corners = np.ascontiguousarray(corners, dtype=float)
        if self.corners.ndim != 3 or self.corners.shape[2] != 2:
            raise MeshError("corners must have shape (n_along+1, n_across+1, 2)")
        self.n_along = self.corners.shape[0] - 1
        self.n_across = self.corners.shape[1] - 1
        self.end_markers = bool(end_markers)
        if payload is not None:
            payload = np.asarray(payload, dtype=float)
            if payload.shape != (self.num_cells, 2):
                raise MeshError("payload must have shape (num_cells, 2)")
        self.payload = payload

    @property
    def num_cells(self):
        return self.n_along * self.n_across

    def cell_corners(self):
        """Corner coordinates per cell, CCW order, shape (nc, 4, 2)."""
        c = self.corners
        quads = np.stack([c[:-1, :-1], c[:-1, 1:], c[1:, 1:], c[1:, :-1]], axis=2)
        return quads.reshape(self.num_cells, 4, 2)

    def cell_areas(self):
        quads = self.cell_corners()
        x, y = quads[:, :, 0], quads[:, :, 1]
        xn, yn = np.roll(x, -1, axis=1), np.roll(y, -1, axis=1)
        return 0.5 * np.abs((x * yn - xn * y).sum(axis=1))

    def cell_diameters(self):
        quads = self.cell_corners()
        d1 = np.linalg.norm(quads[:, 2] - quads[:, 0], axis=1)
        d2 = np.linalg.norm(quads[:, 3] - quads[:, 1], axis=1)
        return np.maximum(d1, d2)

    def polygon_area(self):
        """Area of the polygonal domain traced by the outer corner ring."""
        c = self.corners
        ring = np.concatenate([c[0, :-1], c[:-1, -1], c[-1, :0:-1], c[:0:-1, 0]])
        x, y = ring[:, 0], ring[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        return 0.5 * abs(np.sum(x * yn - xn * y))


def build_rect_tri_mesh(x0, x1, y0, y1, nx, ny, pattern="right",
                        mark_inlet_outlet=False):
    """Structured triangulation of the rectangle (x0,x1) x (y0,y1).

    Parameters
    ----------
    nx, ny : int
        Cell counts per direction; "right" yields 2*nx*ny triangles,
        "crisscross" yields 4*nx*ny (each quad split at its barycenter).
    mark_inlet_outlet : bool
        Mark x=x0 edges INLET and x=x1 edges OUTLET instead of WALL.
    """
    if nx < 1 or ny < 1:
        raise MeshError("cell counts must be >= 1")
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate rectangle bounds")
    if pattern not in _PATTERNS:
        raise MeshError("pattern must be one of %s" % (_PATTERNS,))

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    v00, v10, v11, v01 = vid(I, J), vid(I + 1, J), vid(I + 1, J + 1), vid(I, J + 1)

    parent = None
    parent_diam = None
    if pattern == "right":
        cells = np.concatenate([np.column_stack([v00, v10, v11]),
                                np.column_stack([v00, v11, v01])])
        parent = np.concatenate([np.arange(nx * ny)] * 2)
    else:
        centers = 0.25 * (vertices[v00] + vertices[v10] + vertices[v11] + vertices[v01])
        cid = vertices.shape[0] + np.arange(nx * ny)
        vertices = np.concatenate([vertices, centers])
        cells = np.concatenate([np.column_stack([v00, v10, cid]),
                                np.column_stack([v10, v11, cid]),
                                np.column_stack([v11, v01, cid]),
                                np.column_stack([v01, v00, cid])])
        parent = np.concatenate([np.arange(nx * ny)] * 4)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    parent_diam = np.full(cells.shape[0], np.hypot(hx, hy))

    bedges = []
    bmarks = []
    for j in range(ny):  # x = x0 and x = x1 sides
        bedges.append((vid(0, j), vid(0, j + 1)))
        bmarks.append(INLET if mark_inlet_outlet else WALL)
        bedges.append((vid(nx, j), vid(nx, j + 1)))
        bmarks.append(OUTLET if mark_inlet_outlet else WALL)
    for i in range(nx):  # y = y0 and y = y1 sides
        bedges.append((vid(i, 0), vid(i + 1, 0)))
        bmarks.append(WALL)
        bedges.append((vid(i, ny), vid(i + 1, ny)))
        bmarks.append(WALL)

    return TriMesh(vertices, cells, np.array(bedges), np.array(bmarks),
                   parent_cell=parent, parent_diameter=parent_diam)


def crisscross_refine(grid):
    """Split every quad of `grid` into four triangles at its barycenter.

    The parent-cell index is recorded per triangle so the grid's per-cell
    payload stays evaluable on the triangulation.  Boundary edges take the
    WALL marker except, when the grid carries end markers, the two channel
    ends which become INLET (start) and OUTLET (end).
    """
    na, nc = grid.n_along, grid.n_across
    corners = grid.corners.reshape((na + 1) * (nc + 1), 2)

    def vid(i, j):
        return i * (nc + 1) + j

    I, J = np.meshgrid(np.arange(na), np.arange(nc), indexing="ij")
    I, J = I.ravel(), J.ravel()
    v00, v01 = vid(I, J), vid(I, J + 1)
    v11, v10 = vid(I + 1, J + 1), vid(I + 1, J)
    centers = 0.25 * (corners[v00] + corners[v01] + corners[v11] + corners[v10])
    cid = corners.shape[0] + np.arange(grid.num_cells)
    vertices = np.concatenate([corners, centers])
    # quad ring v00 -> v01 -> v11 -> v10 is counterclockwise for positively
    # oriented geometry maps
    cells = np.concatenate([np.column_stack([v00, v01, cid]),
                            np.column_stack([v01, v11, cid]),
                            np.column_stack([v11, v10, cid]),
                            np.column_stack([v10, v00, cid])])
    parent = np.concatenate([np.arange(grid.num_cells)] * 4)
    parent_diam = np.concatenate([grid.cell_diameters()] * 4)

    bedges = []
    bmarks = []
    for j in range(nc):  # channel ends
        bedges.append((vid(0, j), vid(0, j + 1)))
        bmarks.append(INLET if grid.end_markers else WALL)
        bedges.append((vid(na, j), vid(na, j + 1)))
        bmarks.append(OUTLET if grid.end_markers else WALL)
    for i in range(na):  # channel sides
        bedges.append((vid(i, 0), vid(i + 1, 0)))
        bmarks.append(WALL)
        bedges.append((vid(i, nc), vid(i + 1, nc)))
        bmarks.append(WALL)

    return TriMesh(vertices, cells, np.array(bedges), np.array(bmarks),
                   parent_cell=parent, parent_diameter=parent_diam)


def build_bent_quad_grid(inner_radius, outer_radius, leg_length,
                         n_across, n_along, end_markers=False):
    """Channel with two straight legs joined by a quarter-annulus bend.

    The first leg runs horizontally into the bend, the quarter annulus is
    centered at the origin, and the second leg leaves vertically; the cross
    section spans radii [inner_radius, outer_radius].  Cells are distributed
    along the channel proportionally to arc length at the mid radius.
    """
    if not (outer_radius > inner_radius > 0.0):
        raise MeshError("need outer_radius > inner_radius > 0")
    if leg_length < 0.0:
        raise MeshError("leg_length must be nonnegative")
    if n_across < 1 or n_along < 1:
        raise MeshError("cell counts must be >= 1")

    r_mid = 0.5 * (inner_radius + outer_radius)
    arc_len = r_mid * 0.5 * np.pi
    total = leg_length + arc_len + leg_length
    s1, s2 = leg_length / total, (leg_length + arc_len) / total

    s = np.linspace(0.0, 1.0, n_along + 1)
    t = np.linspace(0.0, 1.0, n_across + 1)
    S, T = np.meshgrid(s, t, indexing="ij")
    R = inner_radius + T * (outer_radius - inner_radius)

    corners = np.empty((n_along + 1, n_across + 1, 2))
    leg1 = S <= s1 + 1e-15
    bend = (S > s1) & (S < s2)
    leg2 = ~leg1 & ~bend

    # leg 1: horizontal, ends at x=0 where the annulus starts at angle pi/2
    corners[..., 0] = np.where(leg1, -leg_length + (S / max(s1, 1e-300)) * leg_length, 0.0)
    corners[..., 1] = np.where(leg1, R, 0.0)
    # bend: angle sweeps pi/2 -> 0
    ang = 0.5 * np.pi * (1.0 - (S - s1) / (s2 - s1))
    corners[..., 0] = np.where(bend, R * np.cos(ang), corners[..., 0])
    corners[..., 1] = np.where(bend, R * np.sin(ang), corners[..., 1])
    # leg 2: vertical, heading to negative y
    frac = (S - s2) / max(1.0 - s2, 1e-300)
    corners[..., 0] = np.where(leg2, R, corners[..., 0])
    corners[..., 1] = np.where(leg2, -frac * leg_length, corners[..., 1])

    return QuadGrid(corners, end_markers=end_markers)


def cellwise_to_nodal_average(mesh, cell_values):
    """Average per-cell values onto vertices (pixel-to-node map).

    Each vertex receives the arithmetic mean of the values on its adjacent
    triangles; for criss-cross meshes carrying parent payloads this is the
    standard blurring interpolation of a piecewise-constant field.
    """
    cell_values = np.asarray(cell_values, dtype=float)
    vec = cell_values.ndim == 2
    shape = (mesh.num_vertices, cell_values.shape[1]) if vec else (mesh.num_vertices,)
    acc = np.zeros(shape)
    cnt = np.zeros(mesh.num_vertices)
    for loc in range(3):
        idx = mesh.cells[:, loc]
        np.add.at(acc, idx, cell_values)
        np.add.at(cnt, idx, 1.0)
    if vec:
        acc /= cnt[:, None]
    else:
        acc /= cnt
    return acc


def write_vtk(path, mesh, point_data=None, cell_data=None, title="oseen-stab output"):
    """Write the mesh and attached fields in legacy VTK ASCII format.

    point_data / cell_data map names to (n,) scalar or (n, 2) vector arrays;
    vectors are padded with a zero z component.
    """
    out = []
    out.append("# vtk DataFile Version 2.0")
    out.append(title)
    out.append("ASCII")
    out.append("DATASET UNSTRUCTURED_GRID")
    out.append("POINTS %d double" % mesh.num_vertices)
    for x, y in mesh.vertices:
        out.append("%.12g %.12g 0" % (x, y))
    out.append("CELLS %d %d" % (mesh.num_cells, 4 * mesh.num_cells))
    for a, b, c in mesh.cells:
        out.append("3 %d %d %d" % (a, b, c))
    out.append("CELL_TYPES %d" % mesh.num_cells)
    out.extend(["5"] * mesh.num_cells)

    def emit(block, n, data):
        out.append("%s %d" % (block, n))
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out.append("SCALARS %s double 1" % name)
                out.append("LOOKUP_TABLE default")
                out.extend("%.12g" % v for v in arr)
            else:
                out.append("VECTORS %s double" % name)
                out.extend("%.12g %.12g 0" % (v[0], v[1]) for v in arr)

    if point_data:
        emit("POINT_DATA", mesh.num_vertices, point_data)
    if cell_data:
        emit("CELL_DATA", mesh.num_cells, cell_data)
    atomic_write_text(path, "\n".join(out) + "\n")


def write_mesh_text(path, mesh):
    """Write the minimal whitespace-separated mesh exchange format."""
    out = ["%d %d %d" % (mesh.num_vertices, mesh.num_cells, len(mesh.boundary_edges))]
    out.extend("%.17g %.17g" % (x, y) for x, y in mesh.vertices)
    out.extend("%d %d %d" % (a, b, c) for a, b, c in mesh.cells)
    out.extend("%d %d %d" % (a, b, m) for (a, b), m in
               zip(mesh.boundary_edges, mesh.boundary_markers))
    atomic_write_text(path, "\n".join(out) + "\n")


def read_mesh_text(path):
    """Read a mesh in the minimal text format (header line `nv nc nb`).

    Cells with negative orientation are flipped so the orientation
    invariant holds for externally supplied grids.
    """
    with open(path) as handle:
        tokens = handle.read().split()
    if len(tokens) < 3:
        raise MeshError("truncated mesh file")
    nv, nc, nb = (int(t) for t in tokens[:3])
    need = 3 + 2 * nv + 3 * nc + 3 * nb
    if len(tokens) != need:
        raise MeshError("mesh file has %d tokens, expected %d" % (len(tokens), need))
    data = np.array(tokens[3:], dtype=float)
    vertices = data[:2 * nv].reshape(nv, 2)
    cells = data[2 * nv:2 * nv + 3 * nc].reshape(nc, 3).astype(np.int64)
    rest = data[2 * nv + 3 * nc:].reshape(nb, 3).astype(np.int64)
    p0, p1, p2 = vertices[cells[:, 0]], vertices[cells[:, 1]], vertices[cells[:, 2]]
    neg = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
           - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])) < 0
    cells[neg] = cells[neg][:, [0, 2, 1]]
    return TriMesh(vertices, cells, rest[:, :2], rest[:, 2])
