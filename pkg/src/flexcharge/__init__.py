"""Flexibility-differentiated EV charging coordination.

Prices charging requests by their slack time, schedules fleets with a
per-minute valley-filling model-predictive loop, and compares unmanaged,
time-of-use and optimized charging in simulation.
"""

from .core import (
    ChargingRequest,
    LoadProfile,
    SessionState,
    SessionStatus,
    SocPair,
    TimeGrid,
    ValidationError,
    add_profiles,
    energy_from_soc,
)
from .pricing import (
    DiscountSchedule,
    compute_slack,
    discount_rate,
    price_menu,
    session_discount,
)
from .qp import (
    EvSpec,
    InfeasibleInstanceError,
    QpInstance,
    QpSolution,
    SolverTolerances,
    solve_relaxed,
    verify_kkt,
)
from .scheduler import (
    RateLimits,
    SchedulePlan,
    TickResult,
    build_instance,
    check_feasibility,
    ingest_measurement,
    mpc_tick,
    repair_request,
    round_plan,
)
from .simulator import (
    EvPlantModel,
    FleetScenario,
    OptInModel,
    SimSession,
    generate_scenario,
    load_baseline,
    run_policy,
    tou_profile,
    unmanaged_profile,
)
from .metrics import band_summary, duration_curve, opt_in_curve, peak_increase

__version__ = "0.1.0"
