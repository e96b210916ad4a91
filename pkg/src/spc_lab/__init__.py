"""Scenario-tree stochastic predictive control with verifiable bounds."""

__version__ = "0.1.0"

from .controller import (
    AnticipativeSolution,
    ClosedLoopTrace,
    HereAndNowSolution,
    RecursionMatrices,
    SpcStep,
    check_time_consistency,
    dynamic_regret,
    hypothetical_state,
    recursion_matrices,
    run_spc,
    solve_anticipative,
    solve_here_and_now,
    solve_optimal,
    spc_step,
)
from .experiments import (
    BoundPoint,
    BoundReport,
    CertifiedInstance,
    InstanceSpec,
    closed_loop_bound_check,
    eisse_check,
    generate_certified_instance,
    lemma_suite,
    open_loop_bound_check,
    regret_sweep,
    stage_perturbation_moments,
)
from .kkt import (
    DecayRow,
    PolicySolution,
    RegularityReport,
    ScaledKKT,
    SingularKKTError,
    SolutionMap,
    SolverError,
    assemble_scaled_kkt,
    check_uniform_regularity,
    measure_decay,
    solution_map,
    solution_map_rows,
    solve_extensive,
)
from .norms import (
    BlockMatrix,
    BlockVector,
    expectation_identity_check,
    pi_norm_mat,
    pi_norm_vec,
    sigma_pi,
)
from .problem_io import (
    constants_dict,
    load_certificate,
    load_problem,
    save_certificate,
    save_problem,
    write_decay_csv,
    write_manifest,
    write_moments_csv,
    write_regret_csv,
    write_trace_csv,
)
from .stability import (
    CertificateCheck,
    ConstantsBundle,
    GainCertificate,
    PerturbationCheck,
    StabilityResult,
    check_detectability,
    check_stabilizability,
    check_stability_tree,
    compute_constants,
    perturbation_margin,
    psd_sqrt,
    verify_perturbed_stability,
)
from .tree import (
    InitialCondition,
    NodeData,
    ScenarioTree,
    TreeError,
    build_tree_explicit,
    build_tree_stagewise,
    conditional_prob,
    subtree_nodes,
    validate_tree,
)

__all__ = [
    "__version__",
    "AnticipativeSolution",
    "BlockMatrix",
    "BlockVector",
    "BoundPoint",
    "BoundReport",
    "CertificateCheck",
    "CertifiedInstance",
    "ClosedLoopTrace",
    "ConstantsBundle",
    "DecayRow",
    "GainCertificate",
    "HereAndNowSolution",
    "InitialCondition",
    "InstanceSpec",
    "NodeData",
    "PerturbationCheck",
    "PolicySolution",
    "RecursionMatrices",
    "RegularityReport",
    "ScaledKKT",
    "ScenarioTree",
    "SingularKKTError",
    "SolutionMap",
    "SolverError",
    "SpcStep",
    "StabilityResult",
    "TreeError",
    "assemble_scaled_kkt",
    "build_tree_explicit",
    "build_tree_stagewise",
    "check_detectability",
    "check_stability_tree",
    "check_stabilizability",
    "check_time_consistency",
    "check_uniform_regularity",
    "closed_loop_bound_check",
    "compute_constants",
    "conditional_prob",
    "constants_dict",
    "dynamic_regret",
    "eisse_check",
    "expectation_identity_check",
    "generate_certified_instance",
    "hypothetical_state",
    "lemma_suite",
    "load_certificate",
    "load_problem",
    "measure_decay",
    "open_loop_bound_check",
    "perturbation_margin",
    "pi_norm_mat",
    "pi_norm_vec",
    "psd_sqrt",
    "recursion_matrices",
    "regret_sweep",
    "run_spc",
    "save_certificate",
    "save_problem",
    "sigma_pi",
    "solution_map",
    "solution_map_rows",
    "solve_anticipative",
    "solve_extensive",
    "solve_here_and_now",
    "solve_optimal",
    "spc_step",
    "stage_perturbation_moments",
    "validate_tree",
    "write_decay_csv",
    "write_manifest",
    "write_moments_csv",
    "write_regret_csv",
    "write_trace_csv",
]
