"""Vehicle-home-grid energy management.

Receding-horizon optimization of EV/household/grid energy flows against a
nonlinear battery aging model, with a recurrent household-load forecaster
and a year-scale online simulation engine.
"""

from .battery import (
    BatteryEconomics,
    DegradationParams,
    DegradationState,
    PhysicalConstants,
    VehicleBatterySpec,
    battery_cost,
    load_degradation_params,
    net_value,
)
from .data_io import (
    HourlySeries,
    LoadDataset,
    RawPriceSeries,
    apply_tax_transform,
    generate_synthetic_load,
    generate_synthetic_prices,
    load_config,
    load_household_csv,
    load_price_csv,
)
from .engine import (
    SimulationConfig,
    TripSchedule,
    YearlyMetrics,
    generate_trips,
    prepare_simulation,
    run_sweep,
    run_year,
)
from .forecaster import (
    FeatureVector,
    ForecastModel,
    TrainingConfig,
    extract_features,
    load_model,
    predict_horizon,
    predict_one,
    save_model,
    train,
)
from .optimizer import (
    DegradationContext,
    FlowSchedule,
    OptimizationWindow,
    SolveReport,
    SolverConfig,
    TariffSeries,
    brute_force_oracle,
    energy_cost,
    evaluate_objective,
    solve_window,
    solve_window_unidirectional,
)

__version__ = "0.1.0"
