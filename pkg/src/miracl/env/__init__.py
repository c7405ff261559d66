from .io import load_task, save_task, task_from_dict, task_to_dict, write_traces
from .sim import (
    EMISSION,
    INEQUALITY,
    OBJECTIVE_NAMES,
    PROFIT,
    ActionBoundsError,
    ScState,
    StepInfo,
    TransitionContext,
    compute_objectives,
    demand_paths,
    inequality,
    observe,
    random_rollout_totals,
    reset,
    run_episode,
    sample_demand,
    service_level,
    step,
)
from .tasks import (
    COMPLEXITIES,
    L_MAX,
    MarketDemand,
    NetworkTopology,
    ScTask,
    build_task,
    micro_chain,
    perturb_task,
)
