"""Stabilized equal-order finite elements for pressure recovery from
measured velocity fields: perturbed Oseen/Navier-Stokes solvers, manufactured
convergence studies, and the associated property certificates."""

__version__ = "0.1.0"

from .mesh import (INLET, OUTLET, WALL, MeshError, QuadGrid, TriMesh,
                   build_bent_quad_grid, build_rect_tri_mesh,
                   cellwise_to_nodal_average, crisscross_refine,
                   read_mesh_text, write_mesh_text, write_vtk)
from .elements import (AnalyticField, FeFunction, FeSpace, QuadratureRule,
                       RefElement, build_space, evaluate, evaluate_at_points,
                       interpolate, quadrature_rule, reference_basis,
                       zero_field)
from .forms import (FormsError, LinearSystem, PhysParams, ProblemData,
                    apply_constraints, assemble_coarse_ns, assemble_stabilized,
                    assemble_triple_norm_gram, dump_matrix_market, tau_stab)
from .solve import (SolveReport, SolverFailure, check_sigma_condition,
                    picard_perturbed_ns, solve_coarse_ns, solve_linear,
                    solve_perturbed_oseen, solve_reference_ns)
from .analysis import (ConvergenceRecord, ErrorNorms, ManufacturedCase,
                       coercivity_certificate, error_norms, inverse_constant,
                       inverse_constant_reference, kovasznay_zeta,
                       make_kovasznay_case, make_polynomial_patch_case,
                       make_trig_case, property_suite, run_convergence_study,
                       trilinear_identity_check, validate_case_derivatives)

__all__ = [name for name in dir() if not name.startswith("_")]
