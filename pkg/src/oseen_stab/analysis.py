"""Manufactured solutions, error norms, convergence studies, and the
numeric property suite that certifies the method's structure at desk scale.

Derived loads are hand-differentiated closed forms: the body force is always
evaluated through the strong momentum operator

    f = sigma w - mu Lap(w) + rho (grad u_m) w + rho (grad w)(a + u_m) + grad p

so analytic and measured (finite element) u_m share one code path, and a
finite-difference cross-check of every hand derivative is part of the suite.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .elements import AnalyticField, CellContext, FeFunction, FeSpace, \
    interpolate, quadrature_rule, zero_field
from .forms import FormsError, PhysParams, ProblemData, \
    assemble_stabilized, assemble_triple_norm_gram, tau_stab
from .mesh import build_rect_tri_mesh
from .solve import SolverFailure, picard_perturbed_ns, solve_perturbed_oseen
from .util import atomic_write_text

KOVASZNAY_DOMAIN = (-0.5, 1.5, 0.0, 2.0)


class MomentumForcing:
    """Body force of the perturbed problem evaluated from the strong form."""

    components = 2

    def __init__(self, case):
        self.case = case

    def values_at(self, ctx):
        c = self.case
        w = ctx.field_values(c.w)
        gw = ctx.field_gradients(c.w)
        lw = _laplacian_at(ctx, c.w)
        gp = ctx.field_gradients(c.p)
        um = ctx.field_values(c.u_m)
        gum = ctx.field_gradients(c.u_m)
        a = ctx.field_values(c.a)
        prm = c.params
        beta = a + um
        return (prm.sigma * w - prm.mu * lw
                + prm.rho * np.einsum("...ij,...j->...i", gum, w)
                + prm.rho * np.einsum("...ij,...j->...i", gw, beta)
                + gp)


def _laplacian_at(ctx, fld):
    if isinstance(fld, FeFunction):
        return ctx.fe_laplacians(fld)
    flat = fld.laplacian(ctx.x.ravel(), ctx.y.ravel())
    shape = ctx.x.shape + ((2,) if fld.components == 2 else ())
    return np.asarray(flat, dtype=float).reshape(shape)


class DivergenceField:
    """Scalar field scale * div(vec) for an analytic or FE vector field."""

    components = 1

    def __init__(self, vec, scale=1.0):
        self.vec = vec
        self.scale = float(scale)

    def values_at(self, ctx):
        g = ctx.field_gradients(self.vec)
        return self.scale * (g[..., 0, 0] + g[..., 1, 1])


class ReactionConvectionForcing:
    """f = -sigma u_m - rho (grad u_m) u_m, the load of the recovery problem."""

    components = 2

    def __init__(self, u_m, sigma, rho):
        self.u_m = u_m
        self.sigma = float(sigma)
        self.rho = float(rho)

    def values_at(self, ctx):
        v = ctx.field_values(self.u_m)
        g = ctx.field_gradients(self.u_m)
        return -self.sigma * v - self.rho * np.einsum("...ij,...j->...i", g, v)


@dataclass
class ManufacturedCase:
    """Analytic field bundle (w, p, u_m, a) with hand-coded derivatives.

    `f` is derived through MomentumForcing and `g` equals div(w) (zero for
    all built-in cases, whose velocities are divergence free).
    """
    name: str
    params: PhysParams
    domain: tuple
    w: AnalyticField
    p: AnalyticField
    u_m: object
    a: AnalyticField
    a_scale: float
    g: object = None
    f: object = None

    def __post_init__(self):
        if self.f is None:
            self.f = MomentumForcing(self)
        if self.g is None:
            self.g = zero_field(1)

    def data(self, a_h):
        return ProblemData(u_m=self.u_m, a_h=a_h, f=self.f, g=self.g)


def kovasznay_zeta(mu, variant="paper"):
    """Growth rate of the Kovasznay fields for viscosity mu.

    "paper" is the verbatim product form (1/2mu)*sqrt(1/(4mu^2) + 4 pi^2);
    "standard" is the customary 1/(2mu) - sqrt(1/(4mu^2) + 4 pi^2).
    """
    root = math.sqrt(1.0 / (4.0 * mu * mu) + 4.0 * math.pi ** 2)
    if variant == "paper":
        return root / (2.0 * mu)
    if variant == "standard":
        return 1.0 / (2.0 * mu) - root
    raise FormsError("zeta_variant must be 'paper' or 'standard'")


def make_kovasznay_case(mu, rho=1.0, sigma=1.0, zeta_variant="paper",
                        a_scale=0.9, lam=0.5, delta=0.001):
    """Kovasznay-flow case on (-1/2,3/2) x (0,2) with u = (x, -y), u_m = u - w."""
    zeta = kovasznay_zeta(mu, zeta_variant)
    x0, x1, _, _ = KOVASZNAY_DOMAIN
    if max(abs(3.0 * zeta), abs(2.0 * zeta * x1)) > 700.0:
        warnings.warn("zeta=%g overflows exp() on the Kovasznay domain; "
                      "consider zeta_variant='standard'" % zeta, stacklevel=2)
    tp = 2.0 * math.pi
    z = zeta

    def E(x):
        return np.exp(z * np.asarray(x, dtype=float))

    def w_val(x, y):
        return np.column_stack([1.0 - E(x) * np.cos(tp * y),
                                (z / tp) * E(x) * np.sin(tp * y)])

    def w_grad(x, y):
        e, c, s = E(x), np.cos(tp * np.asarray(y)), np.sin(tp * np.asarray(y))
        g = np.empty((len(e), 2, 2))
        g[:, 0, 0] = -z * e * c
        g[:, 0, 1] = tp * e * s
        g[:, 1, 0] = (z * z / tp) * e * s
        g[:, 1, 1] = z * e * c
        return g

    def w_lap(x, y):
        e, c, s = E(x), np.cos(tp * np.asarray(y)), np.sin(tp * np.asarray(y))
        return np.column_stack([(tp * tp - z * z) * e * c,
                                (z ** 3 / tp - z * tp) * e * s])

    # additive constant makes the pressure mean free on the domain
    p_shift = (math.exp(3.0 * z) - math.exp(-z)) / (8.0 * z)

    def p_val(x, y):
        return 0.5 * np.exp(2.0 * z * np.asarray(x, dtype=float)) - p_shift

    def p_grad(x, y):
        xa = np.asarray(x, dtype=float)
        return np.column_stack([z * np.exp(2.0 * z * xa), np.zeros_like(xa)])

    def um_val(x, y):
        u = np.column_stack([np.asarray(x, dtype=float), -np.asarray(y, dtype=float)])
        return u - w_val(x, y)

    def um_grad(x, y):
        g = -w_grad(x, y)
        g[:, 0, 0] += 1.0
        g[:, 1, 1] -= 1.0
        return g

    def a_val(x, y):
        return a_scale * w_val(x, y)

    def a_grad(x, y):
        return a_scale * w_grad(x, y)

    params = PhysParams(mu=mu, rho=rho, sigma=sigma, lam=lam, delta=delta)
    case = ManufacturedCase(
        name="kovasznay-%s-mu%g" % (zeta_variant, mu), params=params,
        domain=KOVASZNAY_DOMAIN,
        w=AnalyticField(w_val, w_grad, w_lap, components=2),
        p=AnalyticField(p_val, p_grad, components=1),
        u_m=AnalyticField(um_val, um_grad, components=2),
        a=AnalyticField(a_val, a_grad, components=2),
        a_scale=a_scale)
    case.zeta = zeta
    return case


def make_trig_case(params, u_m=None, a_scale=0.9, domain=(0.0, 1.0, 0.0, 1.0)):
    """Trigonometric case w = (pi cos(pi y) sin(pi x), -pi cos(pi x) sin(pi y)),
    p = cos(pi x) cos(pi y); evaluable on arbitrary (e.g. bent) domains.

    `u_m` may be a measured FeFunction; it defaults to the zero field.
    """
    pi = math.pi

    def w_val(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.column_stack([pi * np.cos(pi * y) * np.sin(pi * x),
                                -pi * np.cos(pi * x) * np.sin(pi * y)])

    def w_grad(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        g = np.empty((len(x), 2, 2))
        g[:, 0, 0] = pi * pi * np.cos(pi * y) * np.cos(pi * x)
        g[:, 0, 1] = -pi * pi * np.sin(pi * y) * np.sin(pi * x)
        g[:, 1, 0] = pi * pi * np.sin(pi * x) * np.sin(pi * y)
        g[:, 1, 1] = -pi * pi * np.cos(pi * x) * np.cos(pi * y)
        return g

    def w_lap(x, y):
        return -2.0 * pi * pi * w_val(x, y)

    def p_val(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.cos(pi * x) * np.cos(pi * y)

    def p_grad(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.column_stack([-pi * np.sin(pi * x) * np.cos(pi * y),
                                -pi * np.cos(pi * x) * np.sin(pi * y)])

    def a_val(x, y):
        return a_scale * w_val(x, y)

    def a_grad(x, y):
        return a_scale * w_grad(x, y)

    return ManufacturedCase(
        name="trig", params=params, domain=domain,
        w=AnalyticField(w_val, w_grad, w_lap, components=2),
        p=AnalyticField(p_val, p_grad, components=1),
        u_m=u_m if u_m is not None else zero_field(2),
        a=AnalyticField(a_val, a_grad, components=2),
        a_scale=a_scale)


def make_polynomial_patch_case(k, params=None):
    """Divergence-free polynomial case contained in the degree-k space.

    k=1 uses w = (y, -x); k>=2 uses w = (y^2, -x^2); p = x + y - 1 has zero
    mean on the unit square.  a equals w exactly, u_m = (x, -y).
    """
    if params is None:
        params = PhysParams(mu=1.0, rho=1.0, sigma=5.0, lam=0.5, delta=0.001)
    deg = min(k, 2)

    def w_val(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if deg == 1:
            return np.column_stack([y, -x])
        return np.column_stack([y ** 2, -x ** 2])

    def w_grad(x, y):
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        g = np.zeros((len(x), 2, 2))
        if deg == 1:
            g[:, 0, 1] = 1.0
            g[:, 1, 0] = -1.0
        else:
            g[:, 0, 1] = 2.0 * y
            g[:, 1, 0] = -2.0 * x
        return g

    def w_lap(x, y):
        n = len(np.asarray(x))
        if deg == 1:
            return np.zeros((n, 2))
        return np.column_stack([np.full(n, 2.0), np.full(n, -2.0)])

    def p_val(x, y):
        return np.asarray(x, dtype=float) + np.asarray(y, dtype=float) - 1.0

    def p_grad(x, y):
        n = len(np.asarray(x))
        return np.ones((n, 2))

    def um_val(x, y):
        return np.column_stack([np.asarray(x, dtype=float),
                                -np.asarray(y, dtype=float)])

    def um_grad(x, y):
        n = len(np.asarray(x))
        g = np.zeros((n, 2, 2))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = -1.0
        return g

    return ManufacturedCase(
        name="patch-k%d" % k, params=params, domain=(0.0, 1.0, 0.0, 1.0),
        w=AnalyticField(w_val, w_grad, w_lap, components=2),
        p=AnalyticField(p_val, p_grad, components=1),
        u_m=AnalyticField(um_val, um_grad, components=2),
        a=AnalyticField(w_val, w_grad, w_lap, components=2),
        a_scale=1.0)


@dataclass
class ErrorNorms:
    e0_w: float
    e1_w: float
    e0_p: float
    e_triple: float


def error_norms(w_h, p_h, case, a_h=None, exactness=None):
    """Quadrature errors against the case's exact fields.

    The pressure error is computed after matching means; the triple-norm
    error uses the same operator coefficients (u_m, a_h) as the solve.
    """
    V = w_h.space
    k = V.degree
    rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
    ctx = CellContext(V.scalar_sibling(), rule)
    prm = case.params
    if a_h is None:
        a_h = interpolate(case.a, V)

    ew = ctx.field_values(case.w) - ctx.fe_values(w_h)
    egw = ctx.field_gradients(case.w) - ctx.fe_gradients(w_h)
    ep = ctx.field_values(case.p) - ctx.fe_values(p_h)
    egp = ctx.field_gradients(case.p) - ctx.fe_gradients(p_h)

    W = ctx.w
    area = W.sum()
    shift = (W * ep).sum() / area
    ep = ep - shift

    e0w2 = float(np.einsum("cq,cqd,cqd->", W, ew, ew))
    e1w2 = float(np.einsum("cq,cqde,cqde->", W, egw, egw))
    e0p2 = float(np.einsum("cq,cq,cq->", W, ep, ep))
    ediv = egw[..., 0, 0] + egw[..., 1, 1]
    ediv2 = float(np.einsum("cq,cq,cq->", W, ediv, ediv))

    um = ctx.field_values(case.u_m)
    gum = ctx.field_gradients(case.u_m)
    beta = um + ctx.field_values(a_h)
    L = (prm.rho * np.einsum("cqij,cqj->cqi", gum, ew)
         + prm.rho * np.einsum("cqij,cqj->cqi", egw, beta)
         + egp)
    tau = tau_stab(V.mesh.cell_diameter, prm)
    stab2 = float(np.einsum("c,cq,cqd,cqd->", tau, W, L, L))

    e_triple = math.sqrt(max(prm.sigma * e0w2 + prm.mu * e1w2
                             + prm.lam * ediv2 + stab2, 0.0))
    return ErrorNorms(math.sqrt(e0w2), math.sqrt(e1w2), math.sqrt(e0p2), e_triple)


@dataclass
class ConvergenceRow:
    level: int
    h: float
    ndof_w: int
    ndof_p: int
    e0_w: float
    e1_w: float
    e0_p: float
    e_triple: float
    picard_iters: int


CSV_HEADER = ("level,h,ndof_w,ndof_p,e0_w,e1_w,e0_p,e_triple,"
              "rate_e0_w,rate_e1_w,rate_e0_p,picard_iters")


@dataclass
class ConvergenceRecord:
    """Per-level errors of a refinement study plus pairwise observed rates."""
    case_name: str
    k: int
    rows: list = field(default_factory=list)
    aborted: bool = False

    def rates(self, key):
        out = [float("nan")]
        for prev, cur in zip(self.rows, self.rows[1:]):
            e0, e1 = getattr(prev, key), getattr(cur, key)
            if e0 > 0.0 and e1 > 0.0:
                out.append(math.log(e0 / e1) / math.log(prev.h / cur.h))
            else:
                out.append(float("nan"))
        return out

    def to_csv(self):
        r0, r1, rp = (self.rates(k) for k in ("e0_w", "e1_w", "e0_p"))
        lines = [CSV_HEADER]
        for i, row in enumerate(self.rows):
            lines.append(",".join([
                str(row.level), "%.16e" % row.h, str(row.ndof_w), str(row.ndof_p),
                "%.16e" % row.e0_w, "%.16e" % row.e1_w, "%.16e" % row.e0_p,
                "%.16e" % row.e_triple,
                "%.6f" % r0[i], "%.6f" % r1[i], "%.6f" % rp[i],
                str(row.picard_iters)]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        atomic_write_text(path, self.to_csv())


def run_convergence_study(case, k, levels, nonlinear=False, base_resolution=4,
                          pattern="right", tol=1e-6, max_iter=25,
                          method="direct", rtol=1e-10, exactness=None):
    """Uniform refinement study h0/2^i against a manufactured case.

    Linear mode freezes a_h = I_h(a); nonlinear mode runs the Picard scheme
    with a_h = w_h (the case should then carry a = w, i.e. a_scale = 1).
    Solver failure at a level aborts with the partial record.
    """
    if levels < 1:
        raise FormsError("levels must be >= 1")
    if nonlinear and case.a_scale != 1.0:
        warnings.warn("nonlinear study on a case with a != w (a_scale=%g)"
                      % case.a_scale, stacklevel=2)
    x0, x1, y0, y1 = case.domain
    record = ConvergenceRecord(case_name=case.name, k=k)
    for lvl in range(levels):
        n = base_resolution * 2 ** lvl
        ny = max(1, round(n * (y1 - y0) / (x1 - x0)))
        mesh = build_rect_tri_mesh(x0, x1, y0, y1, n, ny, pattern=pattern)
        try:
            if nonlinear:
                w_h, p_h, rep = picard_perturbed_ns(
                    mesh, k, case.params, case.u_m, case.f, case.g,
                    tol=tol, max_iter=max_iter, dirichlet_field=case.w,
                    method=method, rtol=rtol, exactness=exactness)
                a_used = w_h
            else:
                V = FeSpace(mesh, k, components=2)
                a_used = interpolate(case.a, V)
                w_h, p_h, rep = solve_perturbed_oseen(
                    mesh, k, case.params, case.data(a_used),
                    dirichlet_field=case.w, method=method, rtol=rtol,
                    exactness=exactness)
        except SolverFailure:
            record.aborted = True
            break
        err = error_norms(w_h, p_h, case, a_h=a_used, exactness=exactness)
        record.rows.append(ConvergenceRow(
            level=lvl, h=mesh.h, ndof_w=2 * w_h.space.ndof_scalar,
            ndof_p=p_h.space.ndof_scalar, e0_w=err.e0_w, e1_w=err.e1_w,
            e0_p=err.e0_p, e_triple=err.e_triple, picard_iters=rep.iterations))
    return record


def validate_case_derivatives(case, n_points=1000, seed=0, h=1e-6, tol=1e-5):
    """Central-difference check of every hand-coded derivative of a case.

    Returns the worst relative mismatch over `n_points` random points in the
    interior of the case domain.
    """
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = case.domain
    pad = 4 * h
    x = rng.uniform(x0 + pad, x1 - pad, n_points)
    y = rng.uniform(y0 + pad, y1 - pad, n_points)
    worst = 0.0

    def fd_grad(fn, comps):
        gx = (np.asarray(fn(x + h, y)) - np.asarray(fn(x - h, y))) / (2 * h)
        gy = (np.asarray(fn(x, y + h)) - np.asarray(fn(x, y - h))) / (2 * h)
        if comps == 1:
            return np.column_stack([gx, gy])
        return np.stack([gx, gy], axis=-1)

    checks = [(case.w, 2), (case.p, 1), (case.a, 2)]
    if isinstance(case.u_m, AnalyticField):
        checks.append((case.u_m, 2))
    for fld, comps in checks:
        if fld.gradient is None:
            continue
        approx = fd_grad(fld.value, comps)
        exact = np.asarray(fld.gradient(x, y))
        scale = max(np.abs(exact).max(), 1.0)
        worst = max(worst, float(np.abs(approx - exact).max() / scale))
    if case.w.laplacian is not None and case.w.gradient is not None:
        gx = (np.asarray(case.w.gradient(x + h, y))
              - np.asarray(case.w.gradient(x - h, y)))[:, :, 0] / (2 * h)
        gy = (np.asarray(case.w.gradient(x, y + h))
              - np.asarray(case.w.gradient(x, y - h)))[:, :, 1] / (2 * h)
        approx = gx + gy
        exact = np.asarray(case.w.laplacian(x, y))
        scale = max(np.abs(exact).max(), 1.0)
        worst = max(worst, float(np.abs(approx - exact).max() / scale))
    if worst > tol:
        raise FormsError("case %s fails the finite-difference derivative check "
                         "(worst %.3e)" % (case.name, worst))
    return worst


def inverse_constant(mesh, k, exactness=None):
    """Mesh inverse-inequality constant max_T h_T ||Lap v||_{0,T} / |v|_{1,T}.

    Solved per cell as a dense generalized eigenproblem on the complement of
    constants; identically zero for k=1 (affine elements).
    """
    if k == 1:
        return 0.0
    space = FeSpace(mesh, k, 1)
    rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
    ctx = CellContext(space, rule)
    L = np.einsum("cq,ciq,cjq->cij", ctx.w, ctx.lap_phi, ctx.lap_phi)
    K = np.einsum("cq,ciqd,cjqd->cij", ctx.w, ctx.gphi, ctx.gphi, optimize=True)
    worst = 0.0
    for c in range(mesh.num_cells):
        lam = _rayleigh_max(L[c], K[c])
        worst = max(worst, mesh.cell_diameter[c] ** 2 * lam)
    return math.sqrt(worst)


def inverse_constant_reference(k):
    """Inverse-inequality constant of the reference element (h = sqrt(2))."""
    if k == 1:
        return 0.0
    from .elements import RefElement
    rule = quadrature_rule(min(2 * k + 3, 10))
    val, grad, hess = RefElement(k).tabulate(rule.points)
    lap = hess[:, :, 0, 0] + hess[:, :, 1, 1]
    L = np.einsum("q,iq,jq->ij", rule.weights, lap, lap)
    K = np.einsum("q,iqd,jqd->ij", rule.weights, grad, grad)
    return math.sqrt(2.0 * _rayleigh_max(L, K))


def _rayleigh_max(A, B, cut=1e-10):
    """max x^T A x / x^T B x over the range of the PSD matrix B."""
    s, U = scipy.linalg.eigh(B)
    keep = s > cut * s.max()
    Z = U[:, keep] / np.sqrt(s[keep])
    M = Z.T @ A @ Z
    return float(scipy.linalg.eigvalsh(M).max()) if M.size else 0.0


def trilinear_identity_check(mesh, k, n_triples=50, seed=0, exactness=None):
    """Max residual of ((grad w) a, v) + ((grad v) a, w) + ((div a) w, v) = 0
    over random discrete triples with w, v zero on the boundary."""
    rng = np.random.default_rng(seed)
    V = FeSpace(mesh, k, components=2)
    rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
    ctx = CellContext(V.scalar_sibling(), rule)
    bdofs = V.boundary_dofs()
    Ns = V.ndof_scalar
    bc = np.concatenate([bdofs, Ns + bdofs])
    worst = 0.0
    for _ in range(n_triples):
        coeffs = [rng.uniform(-1.0, 1.0, V.num_dofs) for _ in range(3)]
        coeffs[0][bc] = 0.0
        coeffs[1][bc] = 0.0
        w, v, a = (FeFunction(V, c) for c in coeffs)
        wv, vv, av = (ctx.fe_values(f) for f in (w, v, a))
        gw, gv, ga = (ctx.fe_gradients(f) for f in (w, v, a))
        diva = ga[..., 0, 0] + ga[..., 1, 1]
        t1 = np.einsum("cq,cqij,cqj,cqi->", ctx.w, gw, av, vv)
        t2 = np.einsum("cq,cqij,cqj,cqi->", ctx.w, gv, av, wv)
        t3 = np.einsum("cq,cq,cqi,cqi->", ctx.w, diva, wv, vv)
        worst = max(worst, abs(float(t1 + t2 + t3)))
    return worst


@dataclass
class CoercivityResult:
    min_ratio: float
    certified: bool
    c_inv: float
    delta_bound: float
    sigma_margin: float
    dense: bool


def coercivity_certificate(mesh, k, params, u_m, a_h=None, dense=None,
                           n_random=200, seed=0, exactness=None):
    """Minimum Rayleigh quotient of sym(B) against the triple-norm Gram.

    Restricted to the constrained subspace (homogeneous velocity boundary
    dofs removed, zero-mean pressure).  `dense` solves the generalized
    eigenproblem exactly; otherwise `n_random` projected random vectors
    bound the minimum from above.  `certified` records whether the
    hypotheses (sigma condition and the delta bound with the computed
    inverse constant) hold.
    """
    from .solve import check_sigma_condition
    V = FeSpace(mesh, k, components=2)
    Q = FeSpace(mesh, k, components=1)
    data = ProblemData(u_m=u_m, a_h=a_h)
    B = assemble_stabilized(mesh, V, Q, params, data, exactness=exactness)
    G = assemble_triple_norm_gram(mesh, V, Q, params, data, exactness=exactness)
    Bs = 0.5 * (B.matrix + B.matrix.T)

    Ns = Q.ndof_scalar
    bdofs = V.boundary_dofs()
    fixed = np.concatenate([bdofs, Ns + bdofs])
    free = np.setdiff1d(np.arange(3 * Ns), fixed)
    m = B.mean_vector[free]
    use_dense = dense if dense is not None else len(free) <= 800

    if use_dense:
        Bf = Bs.tocsr()[free][:, free].toarray()
        Gf = G.tocsr()[free][:, free].toarray()
        Z = scipy.linalg.null_space(m.reshape(1, -1))
        ratio = float(scipy.linalg.eigh(Z.T @ Bf @ Z, Z.T @ Gf @ Z,
                                        eigvals_only=True)[0])
    else:
        Bf = Bs.tocsr()[free][:, free]
        Gf = G.tocsr()[free][:, free]
        rng = np.random.default_rng(seed)
        mhat = m / np.linalg.norm(m)
        ratio = np.inf
        for _ in range(n_random):
            x = rng.standard_normal(len(free))
            x -= (mhat @ x) * mhat
            den = float(x @ (Gf @ x))
            if den <= 0.0:
                continue
            ratio = min(ratio, float(x @ (Bf @ x)) / den)
        ratio = float(ratio)

    c_inv = inverse_constant(mesh, k, exactness=exactness)
    bound = params.delta_bound(c_inv)
    sig = check_sigma_condition(params, u_m, mesh=mesh, k=k)
    return CoercivityResult(min_ratio=ratio,
                            certified=(params.delta < bound and sig.satisfied),
                            c_inv=c_inv, delta_bound=bound,
                            sigma_margin=sig.margin, dense=use_dense)


@dataclass
class LedgerEntry:
    name: str
    passed: bool
    detail: str

    def line(self):
        return "%-44s %s  %s" % (self.name, "PASS" if self.passed else "FAIL",
                                 self.detail)


@dataclass
class PropertyLedger:
    entries: list = field(default_factory=list)

    def add(self, name, passed, detail=""):
        self.entries.append(LedgerEntry(name, bool(passed), detail))

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def to_text(self):
        return "\n".join(e.line() for e in self.entries) + "\n"


def property_suite(mesh, k, params, data=None, seed=0):
    """Numeric checks of the scheme's structural properties on one mesh.

    Covers the tau bounds, basis partition of unity, interpolation
    convergence, the trilinear identity, the skew pressure coupling, the
    P1 stabilization degeneracy, and the coercivity certificate; failures
    are reported, not raised.
    """
    from math import factorial
    ledger = PropertyLedger()
    V = FeSpace(mesh, k, components=2)
    Q = FeSpace(mesh, k, components=1)
    data = (data or ProblemData()).normalized()

    # quadrature exactness and weight sums
    worst = 0.0
    for deg in range(1, 11):
        rule = quadrature_rule(deg)
        for m in range(deg + 1):
            for n in range(deg + 1 - m):
                val = float(np.sum(rule.weights * rule.points[:, 0] ** m
                                   * rule.points[:, 1] ** n))
                ref = factorial(m) * factorial(n) / factorial(m + n + 2)
                worst = max(worst, abs(val - ref) / ref)
        worst = max(worst, abs(rule.weights.sum() - 0.5))
    ledger.add("quadrature.monomial_exactness", worst < 1e-13, "worst %.2e" % worst)

    # partition of unity / zero gradient sum at quadrature points
    rule = quadrature_rule(min(2 * k + 3, 10))
    val, grad, hess = V.ref.tabulate(rule.points)
    pu = np.abs(val.sum(axis=0) - 1.0).max()
    gz = np.abs(grad.sum(axis=0)).max()
    ledger.add("elements.partition_of_unity", pu < 1e-13 and gz < 1e-13,
               "sum-1 %.2e, grad-sum %.2e" % (pu, gz))
    kron = np.abs(V.ref.tabulate(V.ref.nodes)[0] - np.eye(V.ref.num_nodes)).max()
    ledger.add("elements.kronecker", kron < 1e-12, "max dev %.2e" % kron)
    if k == 1:
        ledger.add("elements.p1_zero_hessian", np.abs(hess).max() == 0.0,
                   "max %.2e" % np.abs(hess).max())

    # tau bounds, exact inequalities
    tau = tau_stab(mesh.cell_diameter, params)
    ok = (np.all(params.sigma * tau <= params.delta)
          and np.all(params.mu * tau <= params.delta * mesh.cell_diameter ** 2))
    margin = float((params.delta - params.sigma * tau).min())
    ledger.add("forms.tau_bounds", ok, "min margin %.2e" % margin)

    # trilinear identity
    tri = trilinear_identity_check(mesh, k, n_triples=20, seed=seed)
    ledger.add("forms.trilinear_identity", tri < 1e-10, "max residual %.2e" % tri)

    # skew pressure/velocity coupling of the Galerkin part (delta -> 0)
    eps = PhysParams(mu=params.mu, rho=params.rho, sigma=params.sigma,
                     lam=params.lam, delta=1e-30)
    sysA = assemble_stabilized(mesh, V, Q, eps, data)
    Ns = Q.ndof_scalar
    Avp = sysA.matrix[:2 * Ns, 2 * Ns:]
    Apv = sysA.matrix[2 * Ns:, :2 * Ns]
    skew = abs(Avp + Apv.T).max() if Avp.nnz else 0.0
    ledger.add("forms.skew_pressure_coupling", skew < 1e-20, "max %.2e" % skew)

    # P1 degeneracy: mu*Lap terms vanish identically in S_press
    if k == 1:
        full = assemble_stabilized(mesh, V, Q, params, data)
        nolap = assemble_stabilized(mesh, V, Q, params, data, _zero_laplacian=True)
        dev = abs(full.matrix - nolap.matrix).max() if full.matrix.nnz else 0.0
        ledger.add("forms.p1_spress_degeneracy", dev == 0.0, "max %.2e" % dev)

    # coercivity certificate with compliant parameters
    def um_val(x, y):
        return np.column_stack([np.asarray(x, float), -np.asarray(y, float)])

    def um_grad(x, y):
        g = np.zeros((len(np.asarray(x)), 2, 2))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = -1.0
        return g

    u_m = AnalyticField(um_val, um_grad, components=2)
    c_inv = inverse_constant(mesh, k)
    safe_delta = 0.9 * PhysParams(1, 1, 1, 1, 1).delta_bound(c_inv)
    cparams = PhysParams(mu=params.mu, rho=params.rho, sigma=max(params.sigma, 4.5 * params.rho),
                         lam=params.lam, delta=safe_delta)
    cert = coercivity_certificate(mesh, k, cparams, u_m,
                                  dense=3 * Ns <= 800, n_random=200, seed=seed)
    ledger.add("forms.coercivity_certificate",
               cert.min_ratio >= 0.25 and cert.certified,
               "min ratio %.4f (certified=%s, C_inv=%.3f, delta<%.3e)"
               % (cert.min_ratio, cert.certified, cert.c_inv, cert.delta_bound))

    # interpolation convergence toward the nominal orders
    rates_ok, detail = _interpolation_rates(k)
    ledger.add("elements.interpolation_rates", rates_ok, detail)
    return ledger


def _interpolation_rates(k, base=4, levels=3):
    def f_val(x, y):
        return np.column_stack([np.sin(np.pi * x) * np.sin(np.pi * y),
                                np.cos(np.pi * x) * np.cos(np.pi * y)])

    def f_grad(x, y):
        g = np.empty((len(np.asarray(x)), 2, 2))
        g[:, 0, 0] = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
        g[:, 0, 1] = np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
        g[:, 1, 0] = -np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
        g[:, 1, 1] = -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
        return g

    fld = AnalyticField(f_val, f_grad, components=2)
    errs0, errs1, hs = [], [], []
    for lvl in range(levels):
        n = base * 2 ** lvl
        mesh = build_rect_tri_mesh(0.0, 1.0, 0.0, 1.0, n, n)
        V = FeSpace(mesh, k, components=2)
        Ih = interpolate(fld, V)
        ctx = CellContext(V.scalar_sibling(), quadrature_rule(min(2 * k + 3, 10)))
        ev = ctx.field_values(fld) - ctx.fe_values(Ih)
        eg = ctx.field_gradients(fld) - ctx.fe_gradients(Ih)
        errs0.append(math.sqrt(float(np.einsum("cq,cqd,cqd->", ctx.w, ev, ev))))
        errs1.append(math.sqrt(float(np.einsum("cq,cqde,cqde->", ctx.w, eg, eg))))
        hs.append(mesh.h)
    r0 = math.log(errs0[-2] / errs0[-1]) / math.log(hs[-2] / hs[-1])
    r1 = math.log(errs1[-2] / errs1[-1]) / math.log(hs[-2] / hs[-1])
    ok = abs(r0 - (k + 1)) <= 0.2 and abs(r1 - k) <= 0.2
    return ok, "L2 rate %.3f (nominal %d), H1 rate %.3f (nominal %d)" % (r0, k + 1, r1, k)
