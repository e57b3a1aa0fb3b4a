"""Assembly of the stabilized equal-order system and its companions.

The discrete operator combines the Galerkin part (reaction, diffusion,
measured-velocity coupling, grad-div, pressure/divergence pairing), the
skew-completed convection with frozen iterate a_h, and the element-residual
stabilization that pairs the strong momentum residual against a sign-flipped
test residual with the per-cell weight

    tau_T = delta * h_T^2 / (sigma * h_T^2 + mu).

Also here: the triple-norm Gram matrix, the PSPG-stabilized coarse
Navier-Stokes operator used to manufacture measured velocities, a Taylor-Hood
Navier-Stokes operator for fine reference solves, and constraint application
(symmetric Dirichlet elimination plus a single bordered row/column enforcing
the zero-mean pressure).

Global dof layout: [velocity x | velocity y | pressure | multiplier], with
each block sharing the scalar dof numbering of the common degree-k space.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .elements import CellContext, FeFunction, FeSpace, quadrature_rule, zero_field


class FormsError(ValueError):
    """Invalid assembly input."""


@dataclass
class PhysParams:
    """Physical and stabilization parameters of the scheme.

    `sigma` plays the role of a reaction coefficient (rho/timestep in the
    time-discrete reading); `lam` is the grad-div parameter and `delta`
    the stabilization constant entering tau_T.
    """
    mu: float
    rho: float
    sigma: float
    lam: float
    delta: float

    def __post_init__(self):
        for name in ("mu", "rho", "sigma", "lam", "delta"):
            if not getattr(self, name) > 0.0:
                raise FormsError("PhysParams.%s must be strictly positive" % name)

    def tau(self, h):
        """Stabilization parameter tau_T = delta h^2 / (sigma h^2 + mu)."""
        return tau_stab(h, self)

    def delta_bound(self, c_inv):
        """Upper bound for delta certifying coercivity: (1/4) min(1/2, 1/C_inv^2)."""
        if c_inv <= 0.0:
            return 0.125
        return 0.25 * min(0.5, 1.0 / c_inv ** 2)


def tau_stab(h_T, p):
    """Per-cell stabilization parameter; satisfies sigma*tau <= delta and
    mu*tau <= delta*h_T^2."""
    h_T = np.asarray(h_T, dtype=float)
    hsq = h_T * h_T
    if np.any(hsq <= 0.0):
        raise FormsError("cell size must be positive")
    return p.delta * hsq / (p.sigma * hsq + p.mu)


@dataclass
class ProblemData:
    """Coefficient and load fields of the perturbed Oseen problem.

    u_m is the measured velocity (analytic field or FeFunction), a_h the
    frozen convective iterate (FeFunction, or None for zero), f the body
    force and g the divergence datum.
    """
    u_m: object = None
    a_h: object = None
    f: object = None
    g: object = None

    def normalized(self):
        return ProblemData(
            u_m=self.u_m if self.u_m is not None else zero_field(2),
            a_h=self.a_h if self.a_h is not None else zero_field(2),
            f=self.f if self.f is not None else zero_field(2),
            g=self.g if self.g is not None else zero_field(1))


@dataclass
class LinearSystem:
    """Assembled sparse system with constraint metadata.

    Rows/columns are ordered [velocity | pressure | optional multiplier].
    `dirichlet_dofs`/`dirichlet_values` hold the pending (or applied)
    essential constraints; `mean_vector` holds the pressure integrals used
    by the bordered zero-mean row.
    """
    matrix: sp.csr_matrix
    rhs: np.ndarray
    V: FeSpace
    Q: FeSpace
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    mean_vector: np.ndarray = None
    multiplier_index: int = None
    constrained: bool = False

    @property
    def n_velocity(self):
        return self.V.num_dofs

    @property
    def n_pressure(self):
        return self.Q.num_dofs

    def split_solution(self, x):
        """Split a solution vector into (velocity, pressure) FeFunctions."""
        nv, npr = self.n_velocity, self.n_pressure
        w = FeFunction(self.V, x[:nv].copy())
        p = FeFunction(self.Q, x[nv:nv + npr].copy())
        return w, p


def _check_pair(V, Q):
    if V.components != 2 or Q.components != 1:
        raise FormsError("need a vector velocity space and a scalar pressure space")
    if V.mesh is not Q.mesh or V.degree != Q.degree:
        raise FormsError("velocity and pressure spaces must share mesh and degree")


def _mixed_dofs(V, Q):
    """Global mixed dof table (nc, 3n) for the equal-order layout."""
    cd = Q.scalar_sibling().cell_dofs if Q.components != 1 else Q.cell_dofs
    Ns = Q.ndof_scalar
    return np.concatenate([cd, Ns + cd, 2 * Ns + cd], axis=1)


def _field_tables(ctx, data):
    """Evaluate all problem fields at the quadrature points."""
    um = ctx.field_values(data.u_m)
    gum = ctx.field_gradients(data.u_m)
    ah = ctx.field_values(data.a_h)
    gah = ctx.field_gradients(data.a_h)
    beta = um + ah
    diva = gah[..., 0, 0] + gah[..., 1, 1]
    return um, gum, beta, diva


def _residual_tensors(ctx, params, gum, beta):
    """Trial residual R and reaction/diffusion split Z at quadrature points.

    R[c,q,d,l] is component d of sigma*v - mu*Lap(v) + L_h(v, q) for the
    mixed local basis function l; Z collects the sigma*v - mu*Lap(v) part so
    the test residual is R - 2Z and the operator L_h alone is R - Z.
    """
    n = ctx.num_local
    nc, nq = ctx.w.shape
    phiT = ctx.phi.T[None, :, :]                      # (1, q, n)
    lapT = np.transpose(ctx.lap_phi, (0, 2, 1))       # (c, q, n)
    bgT = np.transpose(np.einsum("ciqd,cqd->ciq", ctx.gphi, beta), (0, 2, 1))
    R = np.zeros((nc, nq, 2, 3 * n))
    Z = np.zeros_like(R)
    for b in (0, 1):
        sl = slice(b * n, (b + 1) * n)
        R[:, :, b, sl] = params.sigma * phiT - params.mu * lapT + params.rho * bgT
        Z[:, :, b, sl] = params.sigma * phiT - params.mu * lapT
        for d in (0, 1):
            R[:, :, d, sl] += params.rho * gum[:, :, d, b, None] * phiT
    R[:, :, :, 2 * n:] = np.transpose(ctx.gphi, (0, 2, 3, 1))
    return R, Z


def _galerkin_blocks(ctx, params, gum, beta, diva):
    """Local matrices of the Galerkin part A + S_conv."""
    n = ctx.num_local
    nc = ctx.w.shape[0]
    W, phi, G = ctx.w, ctx.phi, ctx.gphi
    mass = np.einsum("cq,iq,jq->cij", W, phi, phi, optimize=True)
    stiff = np.einsum("cq,ciqd,cjqd->cij", W, G, G, optimize=True)
    bg = np.einsum("ciqd,cqd->ciq", G, beta)
    conv = np.einsum("cq,iq,cjq->cij", W, phi, bg, optimize=True)
    divm = np.einsum("cq,cq,iq,jq->cij", W, diva, phi, phi, optimize=True)

    K = np.zeros((nc, 3 * n, 3 * n))
    slp = slice(2 * n, 3 * n)
    for a in (0, 1):
        sa = slice(a * n, (a + 1) * n)
        K[:, sa, sa] += (params.sigma * mass + params.mu * stiff
                         + params.rho * conv + 0.5 * params.rho * divm)
        pdiv = np.einsum("cq,ciq,jq->cij", W, G[..., a], phi, optimize=True)
        K[:, sa, slp] -= pdiv
        K[:, slp, sa] += np.transpose(pdiv, (0, 2, 1))
        for b in (0, 1):
            sb = slice(b * n, (b + 1) * n)
            K[:, sa, sb] += params.rho * np.einsum(
                "cq,cq,iq,jq->cij", W, gum[..., a, b], phi, phi, optimize=True)
            K[:, sa, sb] += params.lam * np.einsum(
                "cq,ciq,cjq->cij", W, G[..., a], G[..., b], optimize=True)
    return K


def _scatter(K_local, rhs_local, gd, size):
    rows = np.broadcast_to(gd[:, :, None], K_local.shape).ravel()
    cols = np.broadcast_to(gd[:, None, :], K_local.shape).ravel()
    A = sp.coo_matrix((K_local.ravel(), (rows, cols)), shape=(size, size)).tocsr()
    A.sum_duplicates()
    b = np.zeros(size)
    if rhs_local is not None:
        np.add.at(b, gd.ravel(), rhs_local.ravel())
    return A, b


def _default_dirichlet(V):
    bdofs = V.boundary_dofs()
    Ns = V.ndof_scalar
    dofs = np.concatenate([bdofs, Ns + bdofs])
    return dofs, np.zeros(len(dofs))


def assemble_stabilized(mesh, V, Q, params, data, exactness=None,
                        _zero_laplacian=False):
    """Assemble matrix and right-hand side of the stabilized scheme.

    The returned system is unconstrained; its Dirichlet metadata defaults to
    homogeneous values on every boundary velocity dof (the perturbation
    velocity vanishes on the whole boundary) and its mean_vector holds the
    pressure-basis integrals for the zero-mean constraint.  `_zero_laplacian`
    drops the mu*Lap terms from the residuals; it exists for the P1
    degeneracy check of the property suite.
    """
    _check_pair(V, Q)
    if mesh is not V.mesh:
        raise FormsError("mesh does not match the spaces")
    data = data.normalized()
    k = V.degree
    rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
    ctx = CellContext(Q, rule)
    if _zero_laplacian:
        ctx.lap_phi = np.zeros_like(ctx.lap_phi)
    n = ctx.num_local
    Ns = Q.ndof_scalar

    um, gum, beta, diva = _field_tables(ctx, data)
    fval = ctx.field_values(data.f)
    gval = ctx.field_values(data.g)
    tau = tau_stab(mesh.cell_diameter, params)
    Wt = ctx.w * tau[:, None]

    K = _galerkin_blocks(ctx, params, gum, beta, diva)
    R, Z = _residual_tensors(ctx, params, gum, beta)
    T = R - 2.0 * Z
    K += np.einsum("cq,cqdi,cqdj->cij", Wt, T, R, optimize=True)

    rhs = np.zeros((ctx.w.shape[0], 3 * n))
    for a in (0, 1):
        sa = slice(a * n, (a + 1) * n)
        rhs[:, sa] += np.einsum("cq,cq,iq->ci", ctx.w, fval[..., a], ctx.phi, optimize=True)
        rhs[:, sa] += params.lam * np.einsum(
            "cq,cq,ciq->ci", ctx.w, gval, ctx.gphi[..., a], optimize=True)
    rhs[:, 2 * n:] += np.einsum("cq,cq,iq->ci", ctx.w, gval, ctx.phi, optimize=True)
    rhs += np.einsum("cq,cqd,cqdi->ci", Wt, fval, T, optimize=True)

    gd = _mixed_dofs(V, Q)
    A, b = _scatter(K, rhs, gd, 3 * Ns)

    mean_vector = np.zeros(3 * Ns)
    psi_int = np.einsum("cq,iq->ci", ctx.w, ctx.phi)
    np.add.at(mean_vector, 2 * Ns + Q.cell_dofs.ravel(), psi_int.ravel())

    ddofs, dvals = _default_dirichlet(V)
    return LinearSystem(matrix=A, rhs=b, V=V, Q=Q,
                        dirichlet_dofs=ddofs, dirichlet_values=dvals,
                        mean_vector=mean_vector)


def assemble_triple_norm_gram(mesh, V, Q, params, data, exactness=None):
    """Gram matrix of the triple norm on the equal-order product space.

    x^T G x = sigma ||v||^2 + mu |v|^2 + lambda ||div v||^2
              + sum_T tau_T ||L_h(v, q)||_{0,T}^2
    for the coefficient vector x = [v | q] (no multiplier column).
    """
    _check_pair(V, Q)
    data = data.normalized()
    k = V.degree
    rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
    ctx = CellContext(Q, rule)
    n = ctx.num_local
    Ns = Q.ndof_scalar
    um, gum, beta, diva = _field_tables(ctx, data)
    tau = tau_stab(mesh.cell_diameter, params)
    Wt = ctx.w * tau[:, None]

    W, phi, G = ctx.w, ctx.phi, ctx.gphi
    mass = np.einsum("cq,iq,jq->cij", W, phi, phi, optimize=True)
    stiff = np.einsum("cq,ciqd,cjqd->cij", W, G, G, optimize=True)
    Km = np.zeros((ctx.w.shape[0], 3 * n, 3 * n))
    for a in (0, 1):
        sa = slice(a * n, (a + 1) * n)
        Km[:, sa, sa] += params.sigma * mass + params.mu * stiff
        for b in (0, 1):
            sb = slice(b * n, (b + 1) * n)
            Km[:, sa, sb] += params.lam * np.einsum(
                "cq,ciq,cjq->cij", W, G[..., a], G[..., b], optimize=True)
    R, Z = _residual_tensors(ctx, params, gum, beta)
    L = R - Z
    Km += np.einsum("cq,cqdi,cqdj->cij", Wt, L, L, optimize=True)

    gd = _mixed_dofs(V, Q)
    Gmat, _ = _scatter(Km, None, gd, 3 * Ns)
    return Gmat


def apply_constraints(system, dirichlet=None, mean_constraint=True):
    """Apply symmetric Dirichlet elimination and the zero-mean border.

    Parameters
    ----------
    dirichlet : (dofs, values) pair, optional
        Overrides the system's metadata.  Dirichlet rows/columns are
        eliminated symmetrically with the right-hand side lifted.
    mean_constraint : bool
        Append one bordered row/column with the pressure-basis integrals,
        enforcing a zero-mean pressure through a scalar multiplier.
    """
    if system.constrained:
        raise FormsError("system is already constrained")
    A = system.matrix.tocsr(copy=True)
    b = system.rhs.copy()
    nfull = A.shape[0]
    if dirichlet is None:
        ddofs, dvals = system.dirichlet_dofs, system.dirichlet_values
    else:
        ddofs = np.asarray(dirichlet[0], dtype=np.int64)
        dvals = np.asarray(dirichlet[1], dtype=float)
    if len(ddofs) != len(dvals):
        raise FormsError("dirichlet dof/value length mismatch")
    if len(ddofs) and (ddofs.min() < 0 or ddofs.max() >= nfull):
        raise FormsError("dirichlet dof index out of range")

    if len(ddofs):
        mask = np.ones(nfull)
        mask[ddofs] = 0.0
        xd = np.zeros(nfull)
        xd[ddofs] = dvals
        b = mask * (b - A @ xd)
        b[ddofs] = dvals
        D = sp.diags(mask)
        A = D @ A @ D + sp.diags(1.0 - mask)
        A = A.tocsr()

    multiplier_index = None
    if mean_constraint:
        if system.mean_vector is None:
            raise FormsError("system carries no mean-constraint vector")
        c = sp.csr_matrix(system.mean_vector.reshape(1, -1))
        A = sp.bmat([[A, c.T], [c, sp.csr_matrix((1, 1))]], format="csr")
        b = np.concatenate([b, [0.0]])
        multiplier_index = nfull

    return LinearSystem(matrix=A, rhs=b, V=system.V, Q=system.Q,
                        dirichlet_dofs=ddofs, dirichlet_values=dvals,
                        mean_vector=system.mean_vector,
                        multiplier_index=multiplier_index, constrained=True)


class CoarseNsAssembler:
    """Picard-step assembler for the PSPG-stabilized P1/P1 channel flow.

    One step freezes the convective velocity at `u_old` and assembles

      sigma (u,v) + mu (grad u, grad v) + rho ((grad u) u_old, v)
      - (p, div v) + rho (div u, r)
      + sum_K H_K^2/(2 mu) (sigma u + rho (grad u) u_old + grad p, grad r)_K

    with inlet/wall Dirichlet velocity and a natural outlet.  H_K is the
    parent-quad diameter when the mesh records one (the Laplacian of P1
    velocities vanishes cellwise, so it is absent from the residual).
    """

    def __init__(self, mesh, V, Q, mu, rho, sigma, inlet_profile):
        _check_pair(V, Q)
        if V.degree != 1:
            raise FormsError("the coarse solver is defined for k=1 spaces")
        from .mesh import INLET, OUTLET, WALL
        markers = set(int(m) for m in mesh.boundary_markers)
        if INLET not in markers or OUTLET not in markers:
            raise FormsError("coarse solve needs INLET and OUTLET boundary markers")
        self.mesh, self.V, self.Q = mesh, V, Q
        self.mu, self.rho, self.sigma = float(mu), float(rho), float(sigma)
        self.rule = quadrature_rule(5)
        self.ctx = CellContext(Q, self.rule)
        H = mesh.parent_diameter if mesh.parent_diameter is not None else mesh.cell_diameter
        self.stab = H ** 2 / (2.0 * self.mu)
        Ns = Q.ndof_scalar
        inlet = V.boundary_dofs(INLET)
        wall = np.setdiff1d(V.boundary_dofs(WALL), inlet)
        x, y = V.dof_coords[inlet, 0], V.dof_coords[inlet, 1]
        uin = np.asarray(inlet_profile(x, y), dtype=float)
        self.dirichlet_dofs = np.concatenate([inlet, Ns + inlet, wall, Ns + wall])
        self.dirichlet_values = np.concatenate(
            [uin, np.zeros(len(inlet)), np.zeros(2 * len(wall))])
        self.gd = _mixed_dofs(V, Q)

    def system(self, u_old):
        ctx = self.ctx
        n = ctx.num_local
        Ns = self.Q.ndof_scalar
        W, phi, G = ctx.w, ctx.phi, ctx.gphi
        beta = ctx.fe_values(u_old)
        mass = np.einsum("cq,iq,jq->cij", W, phi, phi, optimize=True)
        stiff = np.einsum("cq,ciqd,cjqd->cij", W, G, G, optimize=True)
        bg = np.einsum("ciqd,cqd->ciq", G, beta)
        conv = np.einsum("cq,iq,cjq->cij", W, phi, bg, optimize=True)

        K = np.zeros((ctx.w.shape[0], 3 * n, 3 * n))
        slp = slice(2 * n, 3 * n)
        for a in (0, 1):
            sa = slice(a * n, (a + 1) * n)
            K[:, sa, sa] += self.sigma * mass + self.mu * stiff + self.rho * conv
            pdiv = np.einsum("cq,ciq,jq->cij", W, G[..., a], phi, optimize=True)
            K[:, sa, slp] -= pdiv
            K[:, slp, sa] += self.rho * np.transpose(pdiv, (0, 2, 1))

        # momentum residual of the frozen step, tested against grad r
        nc, nq = W.shape
        res = np.zeros((nc, nq, 2, 3 * n))
        phiT = phi.T[None, :, :]
        bgT = np.transpose(bg, (0, 2, 1))
        for b in (0, 1):
            sb = slice(b * n, (b + 1) * n)
            res[:, :, b, sb] = self.sigma * phiT + self.rho * bgT
        res[:, :, :, 2 * n:] = np.transpose(G, (0, 2, 3, 1))
        Ws = W * self.stab[:, None]
        gr = np.transpose(G, (0, 2, 3, 1))          # (c,q,d,i)
        K[:, slp, :] += np.einsum("cq,cqdi,cqdj->cij", Ws, gr, res, optimize=True)

        A, b = _scatter(K, None, self.gd, 3 * Ns)
        return LinearSystem(matrix=A, rhs=b, V=self.V, Q=self.Q,
                            dirichlet_dofs=self.dirichlet_dofs,
                            dirichlet_values=self.dirichlet_values,
                            mean_vector=None)


def assemble_coarse_ns(mesh, V, Q, mu, rho, sigma, inlet_profile):
    """Spec-level constructor for the coarse Navier-Stokes assembler."""
    return CoarseNsAssembler(mesh, V, Q, mu, rho, sigma, inlet_profile)


class TaylorHoodNsAssembler:
    """Galerkin P2/P1 Navier-Stokes Picard step for the fine reference solve.

      sigma (u,v) + mu (grad u, grad v) + rho ((grad u) u_old, v)
      - (p, div v) + (q, div u) = 0

    with inlet/wall Dirichlet velocity and natural outlet; inf-sup stable,
    so no stabilization and no pressure constraint.
    """

    def __init__(self, mesh, mu, rho, sigma, inlet_profile):
        from .mesh import INLET, WALL
        self.mesh = mesh
        self.V = FeSpace(mesh, 2, components=2)
        self.Q = FeSpace(mesh, 1, components=1)
        self.mu, self.rho, self.sigma = float(mu), float(rho), float(sigma)
        self.rule = quadrature_rule(5)
        self.ctx2 = CellContext(self.V.scalar_sibling(), self.rule)
        self.ctx1 = CellContext(self.Q, self.rule)
        Ns2 = self.V.ndof_scalar
        self.n2 = self.ctx2.num_local
        self.n1 = self.ctx1.num_local
        cd2 = self.V.scalar_sibling().cell_dofs
        cd1 = self.Q.cell_dofs
        self.gd = np.concatenate([cd2, Ns2 + cd2, 2 * Ns2 + cd1], axis=1)
        self.size = 2 * Ns2 + self.Q.ndof_scalar
        inlet = self.V.boundary_dofs(INLET)
        wall = np.setdiff1d(self.V.boundary_dofs(WALL), inlet)
        x, y = self.V.dof_coords[inlet, 0], self.V.dof_coords[inlet, 1]
        uin = np.asarray(inlet_profile(x, y), dtype=float)
        self.dirichlet_dofs = np.concatenate([inlet, Ns2 + inlet, wall, Ns2 + wall])
        self.dirichlet_values = np.concatenate(
            [uin, np.zeros(len(inlet)), np.zeros(2 * len(wall))])

    def system(self, u_old):
        ctx2, ctx1 = self.ctx2, self.ctx1
        n2, n1 = self.n2, self.n1
        W, phi2, G2 = ctx2.w, ctx2.phi, ctx2.gphi
        phi1 = ctx1.phi
        beta = ctx2.fe_values(u_old)
        mass = np.einsum("cq,iq,jq->cij", W, phi2, phi2, optimize=True)
        stiff = np.einsum("cq,ciqd,cjqd->cij", W, G2, G2, optimize=True)
        bg = np.einsum("ciqd,cqd->ciq", G2, beta)
        conv = np.einsum("cq,iq,cjq->cij", W, phi2, bg, optimize=True)

        nmix = 2 * n2 + n1
        K = np.zeros((W.shape[0], nmix, nmix))
        slp = slice(2 * n2, nmix)
        for a in (0, 1):
            sa = slice(a * n2, (a + 1) * n2)
            K[:, sa, sa] += self.sigma * mass + self.mu * stiff + self.rho * conv
            pdiv = np.einsum("cq,ciq,jq->cij", W, G2[..., a], phi1, optimize=True)
            K[:, sa, slp] -= pdiv
            K[:, slp, sa] += np.transpose(pdiv, (0, 2, 1))

        A, b = _scatter(K, None, self.gd, self.size)
        return LinearSystem(matrix=A, rhs=b, V=self.V, Q=self.Q,
                            dirichlet_dofs=self.dirichlet_dofs,
                            dirichlet_values=self.dirichlet_values,
                            mean_vector=None)


def dump_matrix_market(path, system):
    """Debug dump: matrix in MatrixMarket coordinate format, rhs alongside."""
    scipy.io.mmwrite(path, system.matrix.tocoo())
    scipy.io.mmwrite(str(path) + ".rhs", sp.coo_matrix(system.rhs.reshape(-1, 1)))
