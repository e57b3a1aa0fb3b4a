"""Lagrange P1/P2/P3 reference elements on triangles, quadrature, dof maps.

Each basis function on the reference triangle is stored as a scaled product
of affine factors, so values, gradients and second derivatives come from the
product rule and are exact.  Degree-of-freedom maps share vertex and edge
dofs between cells through the global edge table (C0 continuity); the edge
interior dofs are ordered from the smaller global vertex index so adjacent
cells agree on their placement.
"""

import numpy as np

from .mesh import MeshError

SUPPORTED_DEGREES = (1, 2, 3)

# barycentric coordinates as affine functions of reference (x, y):
# lam = const + gx * x + gy * y
_BARY = ((1.0, -1.0, -1.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
# local edge i is opposite vertex i
_EDGE_VERTS = ((1, 2), (2, 0), (0, 1))


def _affine(coeffs, scale=1.0, shift=0.0):
    """Affine factor scale*lam + shift as a (const, gx, gy) triple."""
    c, gx, gy = coeffs
    return (scale * c + shift, scale * gx, scale * gy)


def _lattice_nodes(k):
    """Reference nodes: vertices, then edge lattice points, then interior."""
    verts = np.array([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
    nodes = [verts[0], verts[1], verts[2]]
    for a, b in _EDGE_VERTS:
        for t in range(1, k):
            nodes.append(verts[a] + (t / k) * (verts[b] - verts[a]))
    if k == 3:
        nodes.append(verts.mean(axis=0))
    return np.array(nodes)


def _basis_factors(k):
    """Factored Lagrange basis: list of (coef, [affine factors])."""
    lam = _BARY
    if k == 1:
        return [(1.0, [_affine(lam[i])]) for i in range(3)]
    if k == 2:
        funcs = [(1.0, [_affine(lam[i]), _affine(lam[i], 2.0, -1.0)]) for i in range(3)]
        for a, b in _EDGE_VERTS:
            funcs.append((4.0, [_affine(lam[a]), _affine(lam[b])]))
        return funcs
    if k == 3:
        funcs = [(0.5, [_affine(lam[i]), _affine(lam[i], 3.0, -1.0),
                        _affine(lam[i], 3.0, -2.0)]) for i in range(3)]
        for a, b in _EDGE_VERTS:
            funcs.append((4.5, [_affine(lam[a]), _affine(lam[b]),
                                _affine(lam[a], 3.0, -1.0)]))
            funcs.append((4.5, [_affine(lam[a]), _affine(lam[b]),
                                _affine(lam[b], 3.0, -1.0)]))
        funcs.append((27.0, [_affine(lam[0]), _affine(lam[1]), _affine(lam[2])]))
        return funcs
    raise MeshError("unsupported degree %r (supported: %s)" % (k, SUPPORTED_DEGREES))


class RefElement:
    """Reference Lagrange element of degree k on the unit triangle."""

    def __init__(self, degree):
        if degree not in SUPPORTED_DEGREES:
            raise MeshError("unsupported degree %r (supported: %s)"
                            % (degree, SUPPORTED_DEGREES))
        self.degree = degree
        self.nodes = _lattice_nodes(degree)
        self._funcs = _basis_factors(degree)
        self.num_nodes = len(self._funcs)

    def tabulate(self, points):
        """Evaluate all basis functions at reference `points`.

        Returns
        -------
        val : (n, np) array
        grad : (n, np, 2) array
        hess : (n, np, 2, 2) array
            Reference-coordinate derivatives; identically zero for k=1.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts = pts.shape[0]
        val = np.empty((self.num_nodes, n_pts))
        grad = np.zeros((self.num_nodes, n_pts, 2))
        hess = np.zeros((self.num_nodes, n_pts, 2, 2))
        for i, (coef, factors) in enumerate(self._funcs):
            vals = [c + gx * pts[:, 0] + gy * pts[:, 1] for c, gx, gy in factors]
            grads = [np.array([gx, gy]) for _, gx, gy in factors]
            m = len(factors)
            prod_all = coef * np.prod(vals, axis=0)
            val[i] = prod_all
            for a in range(m):
                rest = coef * np.prod([vals[b] for b in range(m) if b != a], axis=0) \
                    if m > 1 else np.full(n_pts, coef)
                grad[i] += rest[:, None] * grads[a]
                for b in range(m):
                    if b == a:
                        continue
                    rest2 = coef * np.prod([vals[c] for c in range(m)
                                            if c not in (a, b)], axis=0) \
                        if m > 2 else np.full(n_pts, coef)
                    hess[i] += rest2[:, None, None] * np.outer(grads[a], grads[b])
        return val, grad, hess


def reference_basis(k, points):
    """Value/gradient/Hessian tables of the degree-k basis at `points`."""
    return RefElement(k).tabulate(points)


class QuadratureRule:
    """Quadrature on the reference triangle (weights sum to its area 1/2)."""

    def __init__(self, points, weights, degree):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.degree = int(degree)

    @property
    def num_points(self):
        return len(self.weights)


def _orbit1():
    return np.array([[1.0, 1.0, 1.0]]) / 3.0


def _orbit3(a):
    b = 1.0 - 2.0 * a
    return np.array([[b, a, a], [a, b, a], [a, a, b]])


def _orbit6(a, b):
    c = 1.0 - a - b
    return np.array([[a, b, c], [a, c, b], [b, a, c],
                     [b, c, a], [c, a, b], [c, b, a]])


def _rule(*groups):
    bary = np.vstack([g[0] for g in groups])
    wts = np.concatenate([np.full(len(g[0]), g[1]) for g in groups])
    return bary[:, 1:], 0.5 * wts  # x = lam1, y = lam2; weights on area 1/2


_S15 = np.sqrt(15.0)

# symmetric all-positive-weight rules; weights stated in the area-1
# normalization and halved in _rule
_RULES = {
    1: _rule((_orbit1(), 1.0)),
    2: _rule((_orbit3(1.0 / 6.0), 1.0 / 3.0)),
    4: _rule((_orbit3(0.445948490915965), 0.223381589678011),
             (_orbit3(0.091576213509771), 0.109951743655322)),
    5: _rule((_orbit1(), 9.0 / 40.0),
             (_orbit3((6.0 + _S15) / 21.0), (155.0 + _S15) / 1200.0),
             (_orbit3((6.0 - _S15) / 21.0), (155.0 - _S15) / 1200.0)),
    6: _rule((_orbit3(0.249286745170910), 0.116786275726379),
             (_orbit3(0.063089014491502), 0.050844906370207),
             (_orbit6(0.310352451033785, 0.636502499121399), 0.082851075618374)),
    8: _rule((_orbit1(), 0.14431560767772364),
             (_orbit3(0.4592925882926812), 0.09509163426732502),
             (_orbit3(0.17056930775171103), 0.10321737053473562),
             (_orbit3(0.05054722831703366), 0.0324584976232051),
             (_orbit6(0.2631128296347908, 0.7284923929553253), 0.0272303141744132)),
    9: _rule((_orbit1(), 0.097135796282799),
             (_orbit3(0.489682519198738), 0.031334700227139),
             (_orbit3(0.437089591492937), 0.077827541004774),
             (_orbit3(0.188203535619033), 0.079647738927210),
             (_orbit3(0.044729513394453), 0.025577675658698),
             (_orbit6(0.221962989160766, 0.741198598784498), 0.043283539377289)),
    10: _rule((_orbit1(), 0.090817990382754),
              (_orbit3(0.485577633383657), 0.036725957756467),
              (_orbit3(0.109481575485037), 0.045321059435528),
              (_orbit6(0.141707219414880, 0.307939838764121), 0.072757916845420),
              (_orbit6(0.025003534762686, 0.246672560639903), 0.028327242531057),
              (_orbit6(0.009540815400299, 0.066803251012200), 0.009421666963733)),
}
# degree-3/7 symmetric rules of minimal size carry negative weights, which
# would break the PSD structure of the least-squares terms; use the next
# positive rule instead
_ALIAS = {3: 4, 7: 8}


def quadrature_rule(exactness):
    """Symmetric positive rule on the reference triangle, exact to `exactness`."""
    if not isinstance(exactness, (int, np.integer)) or not 1 <= exactness <= 10:
        raise MeshError("quadrature exactness must be an integer in [1, 10]")
    table = _RULES[_ALIAS.get(int(exactness), int(exactness))]
    return QuadratureRule(table[0], table[1], int(exactness))


class FeSpace:
    """Continuous Lagrange space of degree k (scalar or 2-vector).

    Vector spaces are component-blocked: global dof = comp * ndof_scalar +
    scalar dof.  Scalar dofs are ordered vertices, then (k-1) dofs per edge
    placed from the smaller global vertex index, then cell-interior dofs.
    """

    def __init__(self, mesh, degree, components=1):
        if components not in (1, 2):
            raise MeshError("components must be 1 or 2")
        self.mesh = mesh
        self.degree = int(degree)
        self.components = int(components)
        self.ref = RefElement(self.degree)
        k = self.degree
        edges, cell_to_edge = mesh.edge_table()
        self.edges = edges
        nv, ne, nc = mesh.num_vertices, len(edges), mesh.num_cells
        per_edge = k - 1
        per_cell = (k - 1) * (k - 2) // 2
        self.ndof_scalar = nv + per_edge * ne + per_cell * nc

        n_loc = self.ref.num_nodes
        cell_dofs = np.empty((nc, n_loc), dtype=np.int64)
        cell_dofs[:, :3] = mesh.cells
        loc = 3
        for e_loc, (a, b) in enumerate(_EDGE_VERTS):
            eid = cell_to_edge[:, e_loc]
            flip = mesh.cells[:, a] > mesh.cells[:, b]
            for t in range(per_edge):
                slot = np.where(flip, per_edge - 1 - t, t)
                cell_dofs[:, loc] = nv + eid * per_edge + slot
                loc += 1
        for t in range(per_cell):
            cell_dofs[:, loc] = nv + per_edge * ne + nc * 0 + np.arange(nc) * per_cell + t
            loc += 1
        self.cell_dofs = cell_dofs

        coords = np.empty((self.ndof_scalar, 2))
        ref_nodes = self.ref.nodes
        v0 = mesh.vertices[mesh.cells[:, 0]]
        J = self._jacobians()
        phys = v0[:, None, :] + np.einsum("cde,ne->cnd", J, ref_nodes)
        coords[cell_dofs.ravel()] = phys.reshape(-1, 2)
        self.dof_coords = coords

        # scalar dofs sitting on each boundary edge, grouped by marker
        self._boundary_edge_dofs = []
        edge_lookup = {tuple(e): i for i, e in enumerate(edges)}
        for (a, b) in mesh.boundary_edges:
            key = tuple(sorted((int(a), int(b))))
            dofs = [int(a), int(b)]
            eid = edge_lookup[key]
            dofs.extend(nv + eid * per_edge + t for t in range(per_edge))
            self._boundary_edge_dofs.append(np.array(dofs, dtype=np.int64))

    def _jacobians(self):
        m = self.mesh
        p0 = m.vertices[m.cells[:, 0]]
        p1 = m.vertices[m.cells[:, 1]]
        p2 = m.vertices[m.cells[:, 2]]
        return np.stack([p1 - p0, p2 - p0], axis=2)

    @property
    def num_dofs(self):
        return self.ndof_scalar * self.components

    def boundary_dofs(self, markers=None):
        """Scalar dofs lying on boundary edges with the given markers."""
        if markers is None:
            sel = range(len(self.mesh.boundary_edges))
        else:
            markers = np.atleast_1d(markers)
            sel = [i for i, m in enumerate(self.mesh.boundary_markers)
                   if m in markers]
        if not len(self._boundary_edge_dofs):
            return np.array([], dtype=np.int64)
        parts = [self._boundary_edge_dofs[i] for i in sel]
        if not parts:
            return np.array([], dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def scalar_sibling(self):
        """The scalar space sharing this space's mesh and degree."""
        if self.components == 1:
            return self
        return FeSpace(self.mesh, self.degree, components=1)


class FeFunction:
    """Coefficient vector over an FeSpace."""

    def __init__(self, space, coeffs=None):
        self.space = space
        if coeffs is None:
            coeffs = np.zeros(space.num_dofs)
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.num_dofs,):
            raise MeshError("coefficient length %d does not match space (%d)"
                            % (coeffs.size, space.num_dofs))
        self.coeffs = coeffs

    def component(self, c):
        n = self.space.ndof_scalar
        return self.coeffs[c * n:(c + 1) * n]

    def vertex_values(self):
        """Values at mesh vertices (vertex dofs lead the scalar numbering)."""
        nv = self.space.mesh.num_vertices
        if self.space.components == 1:
            return self.component(0)[:nv].copy()
        return np.column_stack([self.component(c)[:nv] for c in range(2)])


class AnalyticField:
    """Closed-form field with optional hand-coded derivatives.

    The callables are vectorized over point arrays: value(x, y) returns (n,)
    for scalars or (n, 2) for vectors; gradient returns (n, 2) or (n, 2, 2)
    with [i, j] = d f_i / d x_j; laplacian returns (n,) or (n, 2).
    """

    def __init__(self, value, gradient=None, laplacian=None, components=1):
        self.value = value
        self.gradient = gradient
        self.laplacian = laplacian
        self.components = components


def zero_field(components=2):
    def value(x, y):
        shape = (len(np.atleast_1d(x)),) if components == 1 else (len(np.atleast_1d(x)), 2)
        return np.zeros(shape)

    def gradient(x, y):
        n = len(np.atleast_1d(x))
        shape = (n, 2) if components == 1 else (n, 2, 2)
        return np.zeros(shape)

    def laplacian(x, y):
        n = len(np.atleast_1d(x))
        return np.zeros(n) if components == 1 else np.zeros((n, 2))

    return AnalyticField(value, gradient, laplacian, components)


def interpolate(field, space):
    """Nodal Lagrange interpolation of an analytic field into `space`."""
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    value = field.value if isinstance(field, AnalyticField) else field
    vals = np.asarray(value(x, y), dtype=float)
    if space.components == 1:
        if vals.shape != (space.ndof_scalar,):
            raise MeshError("field returned shape %s for a scalar space" % (vals.shape,))
        return FeFunction(space, vals)
    if vals.shape != (space.ndof_scalar, 2):
        raise MeshError("field returned shape %s for a vector space" % (vals.shape,))
    return FeFunction(space, np.concatenate([vals[:, 0], vals[:, 1]]))


class CellContext:
    """Per-mesh tables shared by all assemblers and error integrators.

    Holds the geometry (Jacobians, physical quadrature points, scaled
    weights) and the scalar basis evaluated at the quadrature points in
    physical coordinates: values, gradients and Laplacians.
    """

    def __init__(self, space_scalar, rule):
        if space_scalar.components != 1:
            space_scalar = space_scalar.scalar_sibling()
        self.space = space_scalar
        self.mesh = space_scalar.mesh
        self.rule = rule
        mesh = self.mesh

        J = space_scalar._jacobians()
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1] / detJ
        Jinv[:, 0, 1] = -J[:, 0, 1] / detJ
        Jinv[:, 1, 0] = -J[:, 1, 0] / detJ
        Jinv[:, 1, 1] = J[:, 0, 0] / detJ
        self.J, self.detJ, self.Jinv = J, detJ, Jinv

        val, gref, href = space_scalar.ref.tabulate(rule.points)
        self.phi = val                                   # (n, q)
        # physical gradient: Jinv^T @ ref gradient
        self.gphi = np.einsum("ced,nqe->cnqd", Jinv, gref)
        # physical Laplacian: sum_{mn} href_{mn} (Jinv Jinv^T)_{mn}
        C = np.einsum("cme,cne->cmn", Jinv, Jinv)
        self.lap_phi = np.einsum("cmn,iqmn->ciq", C, href)
        v0 = mesh.vertices[mesh.cells[:, 0]]
        self.qp = v0[:, None, :] + np.einsum("cde,qe->cqd", J, rule.points)
        self.w = rule.weights[None, :] * detJ[:, None]   # (c, q)
        self.x = self.qp[..., 0]
        self.y = self.qp[..., 1]

    @property
    def num_local(self):
        return self.space.ref.num_nodes

    def fe_values(self, fn):
        """FeFunction values at quadrature points: (nc, nq[, 2])."""
        cd = self.space.cell_dofs
        if fn.space.components == 1:
            return np.einsum("cn,nq->cq", fn.component(0)[cd], self.phi)
        comps = [np.einsum("cn,nq->cq", fn.component(c)[cd], self.phi) for c in (0, 1)]
        return np.stack(comps, axis=-1)

    def fe_gradients(self, fn):
        """FeFunction gradients at quadrature points.

        (nc, nq, 2) for scalars, (nc, nq, 2, 2) with [i, j] = d f_i / d x_j
        for vectors.
        """
        cd = self.space.cell_dofs
        if fn.space.components == 1:
            return np.einsum("cn,cnqd->cqd", fn.component(0)[cd], self.gphi)
        comps = [np.einsum("cn,cnqd->cqd", fn.component(c)[cd], self.gphi) for c in (0, 1)]
        return np.stack(comps, axis=-2)

    def fe_laplacians(self, fn):
        cd = self.space.cell_dofs
        if fn.space.components == 1:
            return np.einsum("cn,cnq->cq", fn.component(0)[cd], self.lap_phi)
        comps = [np.einsum("cn,cnq->cq", fn.component(c)[cd], self.lap_phi) for c in (0, 1)]
        return np.stack(comps, axis=-1)

    def _check_space(self, fn):
        if fn.space.mesh is not self.mesh or fn.space.degree != self.space.degree:
            raise MeshError("FeFunction lives on a different mesh/degree than the context")

    def field_values(self, field):
        """Values at quadrature points for FeFunction/AnalyticField/protocol."""
        if isinstance(field, FeFunction):
            self._check_space(field)
            return self.fe_values(field)
        if isinstance(field, AnalyticField):
            flat = field.value(self.x.ravel(), self.y.ravel())
            shape = self.qp.shape[:2] + ((2,) if field.components == 2 else ())
            return np.asarray(flat, dtype=float).reshape(shape)
        return field.values_at(self)

    def field_gradients(self, field):
        if isinstance(field, FeFunction):
            self._check_space(field)
            return self.fe_gradients(field)
        if isinstance(field, AnalyticField):
            if field.gradient is None:
                raise MeshError("field has no gradient callable")
            flat = field.gradient(self.x.ravel(), self.y.ravel())
            shape = self.qp.shape[:2] + ((2, 2) if field.components == 2 else (2,))
            return np.asarray(flat, dtype=float).reshape(shape)
        return field.gradients_at(self)


def evaluate(fn, cell, ref_point):
    """Value, physical gradient and Laplacian of `fn` at one reference point.

    Returns a (value, gradient, laplacian) tuple; shapes follow the field's
    component count (gradient is (2,) or (2, 2), laplacian scalar or (2,)).
    """
    space = fn.space
    mesh = space.mesh
    if not 0 <= cell < mesh.num_cells:
        raise MeshError("cell index out of range")
    val, gref, href = space.ref.tabulate(np.atleast_2d(ref_point))
    p0 = mesh.vertices[mesh.cells[cell, 0]]
    p1 = mesh.vertices[mesh.cells[cell, 1]]
    p2 = mesh.vertices[mesh.cells[cell, 2]]
    J = np.column_stack([p1 - p0, p2 - p0])
    Jinv = np.linalg.inv(J)
    C = Jinv @ Jinv.T
    dofs = space.cell_dofs[cell]
    out_v, out_g, out_l = [], [], []
    for c in range(space.components):
        coeff = fn.component(c)[dofs]
        out_v.append(float(coeff @ val[:, 0]))
        out_g.append(Jinv.T @ (coeff @ gref[:, 0, :]))
        out_l.append(float(np.einsum("n,nmk,mk->", coeff, href[:, 0, :, :], C)))
    if space.components == 1:
        return out_v[0], out_g[0], out_l[0]
    return np.array(out_v), np.stack(out_g), np.array(out_l)


def locate_points(mesh, points, tol=1e-10):
    """Find a containing cell and barycentric reference point per query point.

    Brute-force barycentric search in cell chunks; points within `tol` of an
    edge are accepted by the first matching cell.  Returns (cells, refpts).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    cells_out = np.full(n, -1, dtype=np.int64)
    ref_out = np.zeros((n, 2))
    p0 = mesh.vertices[mesh.cells[:, 0]]
    p1 = mesh.vertices[mesh.cells[:, 1]]
    p2 = mesh.vertices[mesh.cells[:, 2]]
    J = np.stack([p1 - p0, p2 - p0], axis=2)
    Jinv = np.linalg.inv(J)
    chunk = max(1, int(4e6 / max(mesh.num_cells, 1)))
    for lo in range(0, n, chunk):
        pts = points[lo:lo + chunk]
        d = pts[None, :, :] - p0[:, None, :]
        r = np.einsum("cde,cpe->cpd", Jinv, d)
        lam0 = 1.0 - r[..., 0] - r[..., 1]
        inside = (r[..., 0] >= -tol) & (r[..., 1] >= -tol) & (lam0 >= -tol)
        for j in range(pts.shape[0]):
            hits = np.nonzero(inside[:, j])[0]
            if len(hits):
                c = hits[0]
                cells_out[lo + j] = c
                ref_out[lo + j] = r[c, j]
    if np.any(cells_out < 0):
        bad = points[cells_out < 0][0]
        raise MeshError("point (%g, %g) is outside the mesh" % (bad[0], bad[1]))
    return cells_out, ref_out


def evaluate_at_points(fn, points):
    """Evaluate an FeFunction at arbitrary physical points (values only)."""
    space = fn.space
    cells, refs = locate_points(space.mesh, points)
    val, _, _ = space.ref.tabulate(refs)          # (n_loc, npts)
    dofs = space.cell_dofs[cells]                 # (npts, n_loc)
    out = []
    for c in range(space.components):
        coeff = fn.component(c)[dofs]             # (npts, n_loc)
        out.append(np.einsum("pn,np->p", coeff, val))
    return out[0] if space.components == 1 else np.column_stack(out)


def build_space(mesh, k, components=1):
    """Spec-level alias for FeSpace construction."""
    return FeSpace(mesh, k, components)
