"""Carbon- and reliability-aware workload dispatch planning for data centers."""

__version__ = "0.1.0"

from .scenario import (Scenario, DataCenterSpec, ServerParams, BatterySpec,
                       ServerRecord, FleetGenSpec, LifetimeCurve,
                       ScenarioError, load_scenario, save_scenario,
                       generate_fleet, bundled_scenario_path)
from .clustering import (GroupKind, ServerCluster, split_by_repair_strategy,
                         kmeans_clusters, cluster_datacenter, cluster_scenario)
from .reliability import (ReliabilityParams, BackupTable, hardware_survival,
                          conditional_day_survival, equivalent_day_lifetime,
                          software_reliability, server_reliability,
                          min_backups, build_backup_table, sample_failures)
from .carbon import (CostBreakdown, EmbodiedModelInputs, operating_cost,
                     embodied_emission, equivalent_operating_days,
                     migration_cost, total_cost)
from .milp import (Mode, MilpModel, DispatchSolution, SolveLimits,
                   build_model, solve, export_model, check_solution,
                   InfeasibleError, BuildError)
from .simulate import (MonteCarloReport, TrialResult, monte_carlo, run_trial,
                       strip_backups, clusters_from_solution)

__all__ = [name for name in dir() if not name.startswith("_")]
