"""Linear solvers and the Picard drivers for the nonlinear schemes.

The direct path is sparse LU with partial pivoting; the Krylov path is
restarted GMRES with an incomplete-LU preconditioner.  Every solve is
verified post hoc against the requested relative residual.  Picard freezes
the convective iterate: the perturbed Navier-Stokes scheme re-assembles the
linear stabilized system with a_h set to the previous velocity iterate and
stops when the triple norm of the increment drops below the tolerance.
"""

import time
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import AnalyticField, CellContext, FeFunction, FeSpace, \
    interpolate, quadrature_rule
from .forms import CoarseNsAssembler, FormsError, ProblemData, \
    TaylorHoodNsAssembler, apply_constraints, assemble_stabilized, \
    assemble_triple_norm_gram

DIRECT = "direct"
KRYLOV = "krylov"


class SolverFailure(RuntimeError):
    """Linear solve failed (singular factorization or stagnation)."""


@dataclass
class SolveReport:
    """Summary of one (possibly nonlinear) solve."""
    iterations: int = 0
    final_update_norm: float = 0.0
    final_residual: float = 0.0
    converged: bool = True
    wall_time: float = 0.0

    def log_items(self):
        return [("iterations", self.iterations),
                ("final_update_norm", "%.6e" % self.final_update_norm),
                ("final_residual", "%.6e" % self.final_residual),
                ("converged", int(self.converged)),
                ("wall_time", "%.3f" % self.wall_time)]


@dataclass
class SigmaConditionReport:
    """Outcome of the reaction-dominance check sigma > 4 rho ||grad u_m||_inf."""
    satisfied: bool
    margin: float
    grad_norm: float
    sup_norm: float

    def log_items(self):
        return [("satisfied", int(self.satisfied)),
                ("margin", "%.6e" % self.margin),
                ("grad_um_inf", "%.6e" % self.grad_norm),
                ("um_inf", "%.6e" % self.sup_norm)]


def solve_linear(system, method=DIRECT, rtol=1e-10):
    """Solve a constrained square system to relative residual `rtol`.

    DIRECT runs sparse LU (with one step of iterative refinement if the
    first pass misses the tolerance); KRYLOV runs ILU-preconditioned
    restarted GMRES.  Raises SolverFailure with diagnostics otherwise.
    """
    A = system.matrix.tocsc()
    b = system.rhs
    if A.shape[0] != A.shape[1]:
        raise SolverFailure("system is not square")
    bnorm = np.linalg.norm(b)
    if method == DIRECT:
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverFailure("sparse LU factorization failed: %s" % exc) from exc
        x = lu.solve(b)
        if bnorm > 0.0:
            res = np.linalg.norm(A @ x - b) / bnorm
            if res > rtol:
                x = x + lu.solve(b - A @ x)
                res = np.linalg.norm(A @ x - b) / bnorm
                if res > rtol:
                    raise SolverFailure(
                        "direct solve residual %.3e exceeds rtol %.3e (n=%d)"
                        % (res, rtol, A.shape[0]))
        return x
    if method == KRYLOV:
        try:
            ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20.0)
        except RuntimeError as exc:
            raise SolverFailure("ILU factorization failed: %s" % exc) from exc
        M = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, rtol=rtol * 0.1, atol=0.0, restart=200,
                             maxiter=40, M=M)
        res = np.linalg.norm(A @ x - b) / bnorm if bnorm > 0.0 else 0.0
        if info != 0 or res > rtol:
            raise SolverFailure(
                "GMRES stagnated: info=%d residual %.3e rtol %.3e" % (info, res, rtol))
        return x
    raise FormsError("unknown solver method %r" % (method,))


def grad_sup_norm(u_m, mesh=None, k=1, exactness=None):
    """Max over quadrature points of the max-row-sum norm of grad(u_m).

    Exact for piecewise-linear u_m; a quadrature-sampled approximation for
    higher degrees and analytic fields.
    """
    if isinstance(u_m, FeFunction):
        space = u_m.space.scalar_sibling()
        rule = quadrature_rule(min(2 * space.degree + 3, 10) if exactness is None else exactness)
        ctx = CellContext(space, rule)
    else:
        if mesh is None:
            raise FormsError("an analytic u_m needs a mesh to be sampled on")
        rule = quadrature_rule(min(2 * k + 3, 10) if exactness is None else exactness)
        ctx = CellContext(FeSpace(mesh, k, 1), rule)
    g = ctx.field_gradients(u_m)
    v = ctx.field_values(u_m)
    rowsum = np.abs(g).sum(axis=-1).max(axis=-1)
    sup = np.sqrt((v ** 2).sum(axis=-1))
    return float(rowsum.max()), float(sup.max())


def check_sigma_condition(params, u_m, mesh=None, k=1):
    """Report on the uniqueness condition sigma > 4 rho ||grad u_m||_inf."""
    gnorm, snorm = grad_sup_norm(u_m, mesh=mesh, k=k)
    margin = params.sigma - 4.0 * params.rho * gnorm
    return SigmaConditionReport(satisfied=margin > 0.0, margin=margin,
                                grad_norm=gnorm, sup_norm=snorm)


def _dirichlet_from_field(V, field):
    """Dirichlet dof/value arrays on the whole boundary from a vector field."""
    bdofs = V.boundary_dofs()
    Ns = V.ndof_scalar
    dofs = np.concatenate([bdofs, Ns + bdofs])
    if field is None:
        return dofs, np.zeros(len(dofs))
    x, y = V.dof_coords[bdofs, 0], V.dof_coords[bdofs, 1]
    value = field.value if isinstance(field, AnalyticField) else field
    vals = np.asarray(value(x, y), dtype=float)
    return dofs, np.concatenate([vals[:, 0], vals[:, 1]])


def solve_perturbed_oseen(mesh, k, params, data, dirichlet_field=None,
                          method=DIRECT, rtol=1e-10, exactness=None,
                          warn_on_condition=False):
    """One linear solve of the stabilized scheme.

    `dirichlet_field` optionally supplies inhomogeneous boundary values for
    the velocity (manufactured-solution studies); the default is the
    homogeneous condition of the perturbed problem.  The pressure mean is
    constrained to zero through the bordered multiplier.
    """
    t0 = time.perf_counter()
    V = FeSpace(mesh, k, components=2)
    Q = FeSpace(mesh, k, components=1)
    if warn_on_condition and data.u_m is not None:
        rep = check_sigma_condition(params, data.u_m, mesh=mesh, k=k)
        if not rep.satisfied:
            warnings.warn("sigma condition violated (margin %.3e); proceeding"
                          % rep.margin, stacklevel=2)
    system = assemble_stabilized(mesh, V, Q, params, data, exactness=exactness)
    dirichlet = None
    if dirichlet_field is not None:
        dirichlet = _dirichlet_from_field(V, dirichlet_field)
    constrained = apply_constraints(system, dirichlet=dirichlet, mean_constraint=True)
    x = solve_linear(constrained, method=method, rtol=rtol)
    w, p = constrained.split_solution(x)
    bnorm = np.linalg.norm(constrained.rhs)
    res = np.linalg.norm(constrained.matrix @ x - constrained.rhs)
    report = SolveReport(iterations=1,
                         final_update_norm=0.0,
                         final_residual=res / bnorm if bnorm > 0 else res,
                         converged=True,
                         wall_time=time.perf_counter() - t0)
    return w, p, report


def picard_perturbed_ns(mesh, k, params, u_m, f, g, tol=1e-6, max_iter=25,
                        dirichlet_field=None, method=DIRECT, rtol=1e-10,
                        exactness=None):
    """Picard iteration for the perturbed Navier-Stokes scheme.

    Iterate n solves the linear stabilized system with the frozen convective
    iterate a_h := w^{n-1} (initial guess w^0 = 0) and stops when the triple
    norm of the increment (pressure included) is <= tol.  When max_iter is
    reached a non-converged report is returned with the last iterate.
    """
    if tol <= 0.0 or max_iter < 1:
        raise FormsError("need tol > 0 and max_iter >= 1")
    t0 = time.perf_counter()
    V = FeSpace(mesh, k, components=2)
    Q = FeSpace(mesh, k, components=1)
    w = FeFunction(V)
    p = FeFunction(Q)
    dirichlet = None
    if dirichlet_field is not None:
        dirichlet = _dirichlet_from_field(V, dirichlet_field)
    update = np.inf
    res = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        data = ProblemData(u_m=u_m, a_h=w, f=f, g=g)
        system = assemble_stabilized(mesh, V, Q, params, data, exactness=exactness)
        constrained = apply_constraints(system, dirichlet=dirichlet,
                                        mean_constraint=True)
        x = solve_linear(constrained, method=method, rtol=rtol)
        w_new, p_new = constrained.split_solution(x)
        delta = np.concatenate([w_new.coeffs - w.coeffs, p_new.coeffs - p.coeffs])
        gram = assemble_triple_norm_gram(mesh, V, Q, params, data,
                                         exactness=exactness)
        update = float(np.sqrt(max(delta @ (gram @ delta), 0.0)))
        bnorm = np.linalg.norm(constrained.rhs)
        res = np.linalg.norm(constrained.matrix @ x - constrained.rhs)
        res = res / bnorm if bnorm > 0 else res
        w, p = w_new, p_new
        if update <= tol:
            converged = True
            break
    report = SolveReport(iterations=iterations, final_update_norm=update,
                         final_residual=res, converged=converged,
                         wall_time=time.perf_counter() - t0)
    return w, p, report


def default_inlet_profile(x, y):
    """Parabolic inlet datum 1 - ((y-0.5)/0.5)^2 of the channel experiment."""
    return 1.0 - ((np.asarray(y) - 0.5) / 0.5) ** 2


def _picard_ns(assembler, tol, max_iter, method, rtol):
    """Shared Picard loop for the coarse and reference NS assemblers."""
    t0 = time.perf_counter()
    V = assembler.V
    u = FeFunction(V)
    p = FeFunction(assembler.Q)
    update = np.inf
    res = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        system = apply_constraints(assembler.system(u), mean_constraint=False)
        x = solve_linear(system, method=method, rtol=rtol)
        u_new, p_new = system.split_solution(x)
        denom = max(np.linalg.norm(u_new.coeffs), 1e-300)
        update = float(np.linalg.norm(u_new.coeffs - u.coeffs) / denom)
        bnorm = np.linalg.norm(system.rhs)
        res = float(np.linalg.norm(system.matrix @ x - system.rhs))
        res = res / bnorm if bnorm > 0 else res
        u, p = u_new, p_new
        if update <= tol:
            converged = True
            break
    report = SolveReport(iterations=iterations, final_update_norm=update,
                         final_residual=res, converged=converged,
                         wall_time=time.perf_counter() - t0)
    return u, p, report


def solve_coarse_ns(mesh, mu, rho, sigma, inlet_profile=default_inlet_profile,
                    tol=1e-8, max_iter=50, method=DIRECT, rtol=1e-10):
    """Stabilized P1/P1 Navier-Stokes solve producing the measured velocity.

    Picard-linearized; stops on the relative l2 norm of the velocity
    coefficient increment.
    """
    V = FeSpace(mesh, 1, components=2)
    Q = FeSpace(mesh, 1, components=1)
    assembler = CoarseNsAssembler(mesh, V, Q, mu, rho, sigma, inlet_profile)
    return _picard_ns(assembler, tol, max_iter, method, rtol)


def solve_reference_ns(mesh, mu, rho, sigma, inlet_profile=default_inlet_profile,
                       tol=1e-10, max_iter=50, method=DIRECT, rtol=1e-10):
    """Taylor-Hood P2/P1 Navier-Stokes solve used as the fine reference."""
    assembler = TaylorHoodNsAssembler(mesh, mu, rho, sigma, inlet_profile)
    return _picard_ns(assembler, tol, max_iter, method, rtol)
