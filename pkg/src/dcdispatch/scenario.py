"""Problem-instance data model: data centers, traces, fleets, and file I/O.

A scenario is stored as a single JSON document.  The four 24-hour traces of
each data center (carbon intensity, PV, interactive and batch workload) may
be given inline as 24-element lists or as paths to CSV side files with a
``hour,value`` header and rows for hours 0..23, resolved relative to the
scenario file.  See README for the full schema.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

HORIZON_HOURS = 24
DT_HOURS = 1.0

# Resampling budget before clamping an operating-age draw to the calendar age.
_RESAMPLE_LIMIT = 100


class ScenarioError(ValueError):
    """Raised when a scenario file is malformed or violates an invariant."""


def _require(cond, msg):
    if not cond:
        raise ScenarioError(msg)


@dataclass(frozen=True)
class LifetimeCurve:
    """Expected operating lifetime (days) as a function of utilization.

    Piecewise-linear and non-increasing in u; evaluation clamps to the knot
    range so the curve is defined on all of [0, 1].
    """

    knots_u: tuple
    knots_days: tuple

    def __post_init__(self):
        _require(len(self.knots_u) == len(self.knots_days) >= 2,
                 "lifetime_curve needs at least two knots")
        _require(all(b > a for a, b in zip(self.knots_u, self.knots_u[1:])),
                 "lifetime_curve knot utilizations must be strictly increasing")
        _require(all(b <= a for a, b in zip(self.knots_days, self.knots_days[1:])),
                 "lifetime_curve must be non-increasing in u")
        _require(min(self.knots_days) > 0, "lifetime_curve values must be positive")

    def __call__(self, u):
        return float(np.interp(u, self.knots_u, self.knots_days))


DEFAULT_LIFETIME_CURVE = LifetimeCurve((0.3, 0.9), (2190.0, 1095.0))


@dataclass(frozen=True)
class ServerParams:
    """Per-server electrical, throughput and failure-model parameters."""

    p_idle: float            # kW
    p_peak: float            # kW
    s_rate: float            # requests/s one server can process at u = 1
    u_ub: float              # utilization upper bound from the SLA
    t_delay_ub: float        # seconds
    p_s_base: float = 0.99   # software reliability at the baseline utilization
    lambda_s: float = -0.5   # software risk exponent; <= 0 so risk grows with u
    u_base: float = 0.3
    lifetime_curve: LifetimeCurve = DEFAULT_LIFETIME_CURVE

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(0 < self.p_idle < self.p_peak, pre + "need 0 < p_idle < p_peak")
        _require(self.s_rate > 0, pre + "s_rate must be positive")
        _require(0 < self.u_ub < 1, pre + "u_ub must lie in (0, 1)")
        _require(self.t_delay_ub > 0, pre + "t_delay_ub must be positive")
        planned = 1.0 / ((1.0 - self.u_ub) * self.s_rate)
        _require(planned <= self.t_delay_ub + 1e-12,
                 pre + f"delay at u_ub ({planned:.4f} s) exceeds t_delay_ub "
                       f"({self.t_delay_ub} s)")
        _require(0 < self.p_s_base <= 1, pre + "p_s_base must lie in (0, 1]")
        _require(0 <= self.u_base < 1, pre + "u_base must lie in [0, 1)")
        _require(self.lifetime_curve(self.u_base) > 0,
                 pre + "lifetime_curve(u_base) must be positive")


@dataclass(frozen=True)
class BatterySpec:
    energy_kwh: float
    power_kw: float
    efficiency: float = 0.95   # one-way conversion efficiency
    soc_min: float = 0.2
    soc_max: float = 0.9
    soc_initial: float = 0.5

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(self.energy_kwh > 0, pre + "energy_kwh must be positive")
        _require(self.power_kw > 0, pre + "power_kw must be positive")
        _require(0 < self.efficiency <= 1, pre + "efficiency must lie in (0, 1]")
        _require(0 <= self.soc_min <= self.soc_initial <= self.soc_max <= 1,
                 pre + "need soc_min <= soc_initial <= soc_max within [0, 1]")


@dataclass(frozen=True)
class ServerRecord:
    """One physical server's history."""

    past_operating_days: float   # T^PO
    past_calendar_days: float    # T^PC
    cumulative_maintenance_cost: float = 0.0
    degraded_flag: bool = False

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(0 <= self.past_operating_days <= self.past_calendar_days,
                 pre + "need 0 <= past_operating_days <= past_calendar_days")


@dataclass(frozen=True)
class AgeDistribution:
    """Log-normal parameters (in log-years) for one repair-strategy group."""

    mu_op: float
    sigma_op: float
    mu_can: float
    sigma_can: float

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(self.sigma_op > 0 and self.sigma_can > 0,
                 pre + "sigmas must be positive")


@dataclass(frozen=True)
class FleetGenSpec:
    """Synthetic fleet: ages drawn log-normally per repair-strategy group."""

    n_servers: int
    repair_fraction: float
    repair_ages: AgeDistribution
    replace_ages: AgeDistribution
    rng_seed: int = 0

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(self.n_servers >= 0, pre + "n_servers must be >= 0")
        _require(0 <= self.repair_fraction <= 1,
                 pre + "repair_fraction must lie in [0, 1]")
        self.repair_ages.validate(where + ".repair_ages")
        self.replace_ages.validate(where + ".replace_ages")


@dataclass(frozen=True)
class GroupSpec:
    """Carbon and Weibull-shape parameters of one repair-strategy group."""

    c_manufacture: float   # kgCO2 charged at the group's next maintenance event
    beta: float            # Weibull shape

    def validate(self, where=""):
        pre = f"{where}: " if where else ""
        _require(self.c_manufacture > 0, pre + "c_manufacture must be positive")
        _require(self.beta > 0, pre + "beta must be positive")


@dataclass(frozen=True)
class ClusteringConfig:
    k_repair: int = 3
    k_replace: int = 2
    theta: float = 0.5
    max_iters: int = 100
    rng_seed: int = 0
    tolerance: float = 1e-3   # days of centroid movement

    def validate(self, where="clustering"):
        pre = f"{where}: "
        _require(self.k_repair >= 1 and self.k_replace >= 1,
                 pre + "cluster counts must be >= 1")
        _require(0 < self.theta <= 1, pre + "theta must lie in (0, 1]")
        _require(self.max_iters >= 1, pre + "max_iters must be >= 1")
        _require(self.tolerance >= 0, pre + "tolerance must be >= 0")


@dataclass
class DataCenterSpec:
    id: str
    carbon_intensity: np.ndarray     # kgCO2/kWh, 24 entries
    pv_profile: np.ndarray           # kW, 24 entries
    workload_interactive: np.ndarray  # requests/s, 24 entries
    workload_batch: np.ndarray       # requests/s, 24 entries
    pue: float
    battery: BatterySpec
    server_params: ServerParams
    fleet: list = None               # list[ServerRecord], explicit fleets
    fleet_gen: FleetGenSpec = None   # or a generator spec

    def validate(self):
        where = f"dc '{self.id}'"
        for name in ("carbon_intensity", "pv_profile",
                     "workload_interactive", "workload_batch"):
            vec = getattr(self, name)
            _require(len(vec) == HORIZON_HOURS,
                     f"{where}: trace '{name}' must have {HORIZON_HOURS} "
                     f"entries, got {len(vec)}")
            _require(np.all(np.asarray(vec) >= 0),
                     f"{where}: trace '{name}' must be nonnegative")
        _require(self.pue >= 1, f"{where}: pue ≥ 1 is required, got {self.pue}")
        self.battery.validate(where + ".battery")
        self.server_params.validate(where + ".servers")
        _require((self.fleet is None) != (self.fleet_gen is None),
                 f"{where}: exactly one of 'fleet' and 'fleet_gen' is required")
        if self.fleet is not None:
            _require(len(self.fleet) > 0, f"{where}: fleet must be nonempty")
            for idx, rec in enumerate(self.fleet):
                rec.validate(f"{where}.fleet[{idx}]")
        else:
            self.fleet_gen.validate(where + ".fleet_gen")
            _require(self.fleet_gen.n_servers > 0,
                     f"{where}: fleet_gen.n_servers must be positive")

    def resolve_fleet(self):
        """Return the explicit server list, generating it when needed."""
        if self.fleet is not None:
            return list(self.fleet)
        return generate_fleet(self.fleet_gen)


@dataclass
class Scenario:
    name: str
    dcs: list                         # list[DataCenterSpec]
    weight_oc: float = 1.0
    weight_ec: float = 1.0
    weight_mig: float = 1.0
    alpha_carbon: float = 0.1         # $/kgCO2
    alpha_mig: float = 1e-8           # $/(request/s); 1e-6 cent per request/s
    p_thr: float = 0.99
    utilization_default: float = 0.7
    migration_link_caps: dict = field(default_factory=dict)  # (i, j) -> req/s
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    repair_group: GroupSpec = field(default_factory=lambda: GroupSpec(432.0, 0.7))
    replace_group: GroupSpec = field(default_factory=lambda: GroupSpec(4320.0, 1.3))
    replace_cost: float = 2000.0      # currency, threshold base for group split
    cyclic_soc: bool = True
    battery_exclusive_binary: bool = False
    horizon_hours: int = HORIZON_HOURS
    dt_hours: float = DT_HOURS

    def validate(self):
        _require(self.horizon_hours == HORIZON_HOURS,
                 f"horizon_hours == {HORIZON_HOURS} is required")
        _require(self.dt_hours == DT_HOURS, f"dt_hours == {DT_HOURS} is required")
        _require(self.weight_oc >= 0 and self.weight_ec >= 0 and self.weight_mig >= 0,
                 "weights must be >= 0")
        _require(self.alpha_carbon > 0, "alpha_carbon must be positive")
        _require(self.alpha_mig >= 0, "alpha_mig must be >= 0")
        _require(0 < self.p_thr < 1, "p_thr must lie in (0, 1)")
        _require(len(self.dcs) >= 1, "at least one data center is required")
        ids = [dc.id for dc in self.dcs]
        _require(len(set(ids)) == len(ids), "data center ids must be unique")
        for dc in self.dcs:
            dc.validate()
            _require(0 < self.utilization_default <= dc.server_params.u_ub,
                     f"utilization_default must lie in (0, u_ub] for dc '{dc.id}'")
        for (i, j), cap in self.migration_link_caps.items():
            _require(i in ids and j in ids,
                     f"link ({i}, {j}) references unknown data center")
            _require(i != j, f"link ({i}, {j}) must join distinct data centers")
            _require(cap >= 0, f"link ({i}, {j}) cap must be >= 0")
            _require((j, i) in self.migration_link_caps,
                     f"link ({i}, {j}) has no reverse entry ({j}, {i})")
        self.clustering.validate()
        self.repair_group.validate("repair_group")
        self.replace_group.validate("replace_group")
        _require(self.replace_cost > 0, "replace_cost must be positive")

    def dc_index(self, dc_id):
        for idx, dc in enumerate(self.dcs):
            if dc.id == dc_id:
                return idx
        raise KeyError(dc_id)

    def link_cap(self, i_id, j_id):
        return self.migration_link_caps.get((i_id, j_id), 0.0)


def generate_fleet(spec: FleetGenSpec) -> list:
    """Draw a synthetic fleet of ServerRecords.

    Ages are exp(Normal(mu, sigma)) in years, converted to days.  Draws with
    operating age exceeding calendar age are resampled a bounded number of
    times and finally clamped, preserving the invariant
    past_operating_days <= past_calendar_days.  Records destined for the
    replace group carry degraded_flag=True.  Deterministic given rng_seed.
    """
    spec.validate("fleet_gen")
    rng = np.random.default_rng(spec.rng_seed)
    records = []
    for _ in range(spec.n_servers):
        is_repair = rng.random() < spec.repair_fraction
        ages = spec.repair_ages if is_repair else spec.replace_ages
        op_years = math.exp(rng.normal(ages.mu_op, ages.sigma_op))
        can_years = math.exp(rng.normal(ages.mu_can, ages.sigma_can))
        for _ in range(_RESAMPLE_LIMIT):
            if op_years <= can_years:
                break
            op_years = math.exp(rng.normal(ages.mu_op, ages.sigma_op))
        op_years = min(op_years, can_years)
        records.append(ServerRecord(
            past_operating_days=op_years * 365.0,
            past_calendar_days=can_years * 365.0,
            cumulative_maintenance_cost=0.0,
            degraded_flag=not is_repair,
        ))
    return records


# ---------------------------------------------------------------------------
# File I/O


def _load_trace(value, base_dir, what):
    if isinstance(value, str):
        path = Path(base_dir) / value
        if not path.exists():
            raise ScenarioError(f"{what}: trace file '{value}' not found")
        hours = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or \
                    [f.strip() for f in reader.fieldnames] != ["hour", "value"]:
                raise ScenarioError(
                    f"{what}: trace file '{value}' must have header 'hour,value'")
            for row in reader:
                try:
                    hours[int(row["hour"])] = float(row["value"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ScenarioError(
                        f"{what}: bad row in trace file '{value}': {row}") from exc
        missing = [h for h in range(HORIZON_HOURS) if h not in hours]
        if missing or len(hours) != HORIZON_HOURS:
            raise ScenarioError(
                f"{what}: trace file '{value}' must cover hours 0..23 exactly")
        return np.array([hours[h] for h in range(HORIZON_HOURS)], dtype=float)
    arr = np.asarray(value, dtype=float)
    if arr.shape != (HORIZON_HOURS,):
        raise ScenarioError(
            f"{what}: expected {HORIZON_HOURS} entries, got {arr.size}")
    return arr


def _parse_server_params(obj, where):
    curve = DEFAULT_LIFETIME_CURVE
    if "lifetime_curve" in obj:
        c = obj["lifetime_curve"]
        try:
            curve = LifetimeCurve(tuple(c["u"]), tuple(c["days"]))
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"{where}: malformed lifetime_curve") from exc
    try:
        return ServerParams(
            p_idle=float(obj["p_idle_kw"]),
            p_peak=float(obj["p_peak_kw"]),
            s_rate=float(obj["s_rate_rps"]),
            u_ub=float(obj["u_ub"]),
            t_delay_ub=float(obj["t_delay_ub_s"]),
            p_s_base=float(obj.get("p_s_base", 0.99)),
            lambda_s=float(obj.get("lambda_s", -0.5)),
            u_base=float(obj.get("u_base", 0.3)),
            lifetime_curve=curve,
        )
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing server parameter {exc}") from exc


def _parse_dc(obj, base_dir):
    try:
        dc_id = str(obj["id"])
    except KeyError as exc:
        raise ScenarioError("data center entry without 'id'") from exc
    where = f"dc '{dc_id}'"

    if "workload_total" in obj:
        total = _load_trace(obj["workload_total"], base_dir,
                            f"{where}: workload_total")
        frac = float(obj.get("batch_fraction", 0.3))
        if not 0 <= frac <= 1:
            raise ScenarioError(f"{where}: batch_fraction must lie in [0, 1]")
        interactive = total * (1.0 - frac)
        batch = total * frac
    else:
        try:
            interactive = _load_trace(obj["workload_interactive"], base_dir,
                                      f"{where}: workload_interactive")
            batch = _load_trace(obj["workload_batch"], base_dir,
                                f"{where}: workload_batch")
        except KeyError as exc:
            raise ScenarioError(
                f"{where}: needs workload_total or workload_interactive"
                f"/workload_batch ({exc})") from exc

    try:
        battery = BatterySpec(**{k: float(v) for k, v in obj["battery"].items()})
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"{where}: malformed battery spec") from exc

    fleet = None
    fleet_gen = None
    if "fleet" in obj:
        fleet = [ServerRecord(
            past_operating_days=float(r["po_days"]),
            past_calendar_days=float(r["pc_days"]),
            cumulative_maintenance_cost=float(r.get("maintenance_cost", 0.0)),
            degraded_flag=bool(r.get("degraded", False)),
        ) for r in obj["fleet"]]
    elif "fleet_gen" in obj:
        g = obj["fleet_gen"]
        try:
            fleet_gen = FleetGenSpec(
                n_servers=int(g["n_servers"]),
                repair_fraction=float(g["repair_fraction"]),
                repair_ages=AgeDistribution(**{k: float(v)
                                               for k, v in g["repair"].items()}),
                replace_ages=AgeDistribution(**{k: float(v)
                                                for k, v in g["replace"].items()}),
                rng_seed=int(g.get("rng_seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"{where}: malformed fleet_gen spec") from exc
    else:
        raise ScenarioError(f"{where}: needs 'fleet' or 'fleet_gen'")

    return DataCenterSpec(
        id=dc_id,
        carbon_intensity=_load_trace(obj["carbon_intensity"], base_dir,
                                     f"{where}: carbon_intensity"),
        pv_profile=_load_trace(obj["pv_profile"], base_dir,
                               f"{where}: pv_profile"),
        workload_interactive=interactive,
        workload_batch=batch,
        pue=float(obj["pue"]),
        battery=battery,
        server_params=_parse_server_params(obj.get("servers", {}), where),
        fleet=fleet,
        fleet_gen=fleet_gen,
    )


def load_scenario(path) -> Scenario:
    """Load and validate a scenario file; raises ScenarioError on any problem."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file '{path}' not found")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file '{path}' is not valid JSON: {exc}") from exc

    base_dir = path.parent
    try:
        dcs = [_parse_dc(d, base_dir) for d in obj["datacenters"]]
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing section {exc}") from exc

    weights = obj.get("weights", {})
    caps = {}
    for link in obj.get("links", []):
        try:
            caps[(str(link["from"]), str(link["to"]))] = float(link["cap_rps"])
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed link entry: {link}") from exc
    # a one-directional entry implies the same cap on the reverse direction
    for (i, j), cap in list(caps.items()):
        caps.setdefault((j, i), cap)

    cl = obj.get("clustering", {})
    clustering = ClusteringConfig(
        k_repair=int(cl.get("k_repair", 3)),
        k_replace=int(cl.get("k_replace", 2)),
        theta=float(cl.get("theta", 0.5)),
        max_iters=int(cl.get("max_iters", 100)),
        rng_seed=int(cl.get("rng_seed", 0)),
        tolerance=float(cl.get("tolerance_days", 1e-3)),
    )

    groups = obj.get("groups", {})

    def _group(key, default):
        g = groups.get(key, {})
        return GroupSpec(c_manufacture=float(g.get("c_manufacture_kg", default[0])),
                         beta=float(g.get("beta", default[1])))

    scenario = Scenario(
        name=str(obj.get("name", path.stem)),
        dcs=dcs,
        weight_oc=float(weights.get("operating", 1.0)),
        weight_ec=float(weights.get("embodied", 1.0)),
        weight_mig=float(weights.get("migration", 1.0)),
        alpha_carbon=float(obj.get("alpha_carbon_per_kg", 0.1)),
        alpha_mig=float(obj.get("alpha_migration_per_rps", 1e-8)),
        p_thr=float(obj.get("p_threshold", 0.99)),
        utilization_default=float(obj.get("utilization_default", 0.7)),
        migration_link_caps=caps,
        clustering=clustering,
        repair_group=_group("repair", (432.0, 0.7)),
        replace_group=_group("replace", (4320.0, 1.3)),
        replace_cost=float(obj.get("replace_cost", 2000.0)),
        cyclic_soc=bool(obj.get("cyclic_soc", True)),
        battery_exclusive_binary=bool(obj.get("battery_exclusive_binary", False)),
    )
    scenario.validate()
    return scenario


def save_scenario(scenario: Scenario, path):
    """Write a scenario back to JSON with inline traces (round-trips)."""
    dcs = []
    for dc in scenario.dcs:
        entry = {
            "id": dc.id,
            "pue": dc.pue,
            "carbon_intensity": list(map(float, dc.carbon_intensity)),
            "pv_profile": list(map(float, dc.pv_profile)),
            "workload_interactive": list(map(float, dc.workload_interactive)),
            "workload_batch": list(map(float, dc.workload_batch)),
            "battery": asdict(dc.battery),
            "servers": {
                "p_idle_kw": dc.server_params.p_idle,
                "p_peak_kw": dc.server_params.p_peak,
                "s_rate_rps": dc.server_params.s_rate,
                "u_ub": dc.server_params.u_ub,
                "t_delay_ub_s": dc.server_params.t_delay_ub,
                "p_s_base": dc.server_params.p_s_base,
                "lambda_s": dc.server_params.lambda_s,
                "u_base": dc.server_params.u_base,
                "lifetime_curve": {
                    "u": list(dc.server_params.lifetime_curve.knots_u),
                    "days": list(dc.server_params.lifetime_curve.knots_days),
                },
            },
        }
        if dc.fleet is not None:
            entry["fleet"] = [{
                "po_days": r.past_operating_days,
                "pc_days": r.past_calendar_days,
                "maintenance_cost": r.cumulative_maintenance_cost,
                "degraded": r.degraded_flag,
            } for r in dc.fleet]
        else:
            g = dc.fleet_gen
            entry["fleet_gen"] = {
                "n_servers": g.n_servers,
                "repair_fraction": g.repair_fraction,
                "rng_seed": g.rng_seed,
                "repair": asdict(g.repair_ages),
                "replace": asdict(g.replace_ages),
            }
        dcs.append(entry)

    seen = set()
    links = []
    for (i, j), cap in sorted(scenario.migration_link_caps.items()):
        if (j, i) in seen and scenario.migration_link_caps.get((j, i)) == cap:
            continue
        seen.add((i, j))
        links.append({"from": i, "to": j, "cap_rps": cap})

    obj = {
        "name": scenario.name,
        "weights": {"operating": scenario.weight_oc,
                    "embodied": scenario.weight_ec,
                    "migration": scenario.weight_mig},
        "alpha_carbon_per_kg": scenario.alpha_carbon,
        "alpha_migration_per_rps": scenario.alpha_mig,
        "p_threshold": scenario.p_thr,
        "utilization_default": scenario.utilization_default,
        "replace_cost": scenario.replace_cost,
        "cyclic_soc": scenario.cyclic_soc,
        "battery_exclusive_binary": scenario.battery_exclusive_binary,
        "links": links,
        "clustering": {
            "k_repair": scenario.clustering.k_repair,
            "k_replace": scenario.clustering.k_replace,
            "theta": scenario.clustering.theta,
            "max_iters": scenario.clustering.max_iters,
            "rng_seed": scenario.clustering.rng_seed,
            "tolerance_days": scenario.clustering.tolerance,
        },
        "groups": {
            "repair": {"c_manufacture_kg": scenario.repair_group.c_manufacture,
                       "beta": scenario.repair_group.beta},
            "replace": {"c_manufacture_kg": scenario.replace_group.c_manufacture,
                        "beta": scenario.replace_group.beta},
        },
        "datacenters": dcs,
    }
    Path(path).write_text(json.dumps(obj, indent=2))


def bundled_scenario_path(name="two_dc_default") -> Path:
    """Path of a scenario shipped with the package."""
    path = Path(__file__).parent / "data" / name / "scenario.json"
    if not path.exists():
        raise ScenarioError(f"no bundled scenario named '{name}'")
    return path
