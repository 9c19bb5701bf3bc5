"""On-off transmission control over fading channels: MDP models, structure checks and SA threshold search."""
from .channel_queue import (
    ArrivalModel,
    CostParams,
    FsmcModel,
    build_fsmc,
    cost_queue,
    cost_tx,
    erfc_inv,
    lindley_update,
    queue_transition_matrix,
    queue_transition_prob,
)
from .convexity import (
    ConvexityReport,
    LatticeFunction,
    induction_suite,
    brute_force_min,
    check_midpoint_lnatural,
    check_monotone_convex_value,
    check_separable_convex,
    check_submodular_q,
    pli_evaluate,
)
from .estimator import (
    EstimatorConfig,
    ExactEstimator,
    GaussianSurrogateEstimator,
    Scenario,
    SimulationEstimator,
    estimate_j,
    simulate_episode,
)
from .mdp import (
    MdpModel,
    PairLayout,
    SingleUserLayout,
    StructureError,
    assemble_pair_nc_twrc,
    assemble_single_user,
    extract_policy,
    extract_thresholds,
    objective_exact,
    policy_evaluation_exact,
    q_function,
    value_iteration,
)
from .sa import METHODS, SaTrace, StepSchedule, calibrate_a, run_sa, step_size

__version__ = "0.1.0"
