"""Two-level server grouping: repair/replace split, then K-means on ages.

Servers are first partitioned by their expected next maintenance action
(disk repair vs. full replacement), then each group is clustered with
K-means on (past operating days, past calendar days).  Cluster centroids
feed the embodied-carbon and reliability models.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .scenario import (ClusteringConfig, DataCenterSpec, GroupSpec,
                       LifetimeCurve, Scenario)


class GroupKind(enum.Enum):
    REPAIR_A = "A"
    REPLACE_B = "B"


@dataclass(frozen=True)
class ServerCluster:
    """A homogeneous slice of a data center's fleet."""

    id: str
    group_kind: GroupKind
    n_servers: int
    centroid_past_calendar_days: float
    centroid_past_operating_days: float
    c_manufacture: float          # kgCO2 per server for the next maintenance
    beta: float                   # Weibull shape of the group
    lifetime_curve: LifetimeCurve

    def __post_init__(self):
        if self.n_servers < 1:
            raise ValueError(f"cluster {self.id}: n_servers must be >= 1")
        if not (0 <= self.centroid_past_operating_days
                <= self.centroid_past_calendar_days + 1e-9):
            raise ValueError(
                f"cluster {self.id}: centroid operating age exceeds calendar age")


def split_by_repair_strategy(fleet, theta, c_replace):
    """Partition records into (repair group A, replace group B).

    A record lands in group B iff it is flagged degraded or its cumulative
    maintenance cost has reached theta * c_replace.
    """
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if c_replace <= 0:
        raise ValueError("c_replace must be positive")
    group_a, group_b = [], []
    threshold = theta * c_replace
    for rec in fleet:
        if rec.degraded_flag or rec.cumulative_maintenance_cost >= threshold:
            group_b.append(rec)
        else:
            group_a.append(rec)
    return group_a, group_b


def _ages_matrix(records):
    return np.array([[r.past_operating_days, r.past_calendar_days]
                     for r in records], dtype=float)


def _kmeans_pp_init(points, k, rng):
    n = len(points)
    centroids = np.empty((k, 2))
    centroids[0] = points[rng.integers(n)]
    for i in range(1, k):
        d2 = np.min(((points[:, None, :] - centroids[None, :i, :]) ** 2)
                    .sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=d2 / total)]
    return centroids


def _assign(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    # argmin breaks ties toward the lowest centroid index
    return np.argmin(d2, axis=1), d2


def wcss(points, labels, centroids):
    """Within-cluster sum of squared distances."""
    return float(((points - centroids[labels]) ** 2).sum())


def kmeans_fit(points, k, config: ClusteringConfig):
    """Lloyd's iterations with k-means++ seeding; returns (labels, centroids).

    Empty clusters are reseeded at the point farthest from the empty
    cluster's previous centroid, which keeps exactly k clusters and never
    increases the K-means objective.  Deterministic given config.rng_seed.
    """
    n = len(points)
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} records")
    rng = np.random.default_rng(config.rng_seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.zeros(n, dtype=int)
    for _ in range(config.max_iters):
        labels, d2 = _assign(points, centroids)
        taken = set()
        for j in range(k):
            if np.any(labels == j):
                continue
            dist_to_j = d2[:, j].copy()
            dist_to_j[list(taken)] = -np.inf
            far = int(np.argmax(dist_to_j))
            labels[far] = j
            taken.add(far)
        new_centroids = np.array([points[labels == j].mean(axis=0)
                                  for j in range(k)])
        movement = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if movement < config.tolerance:
            break
    labels, _ = _assign(points, centroids)
    # final repair pass so every returned cluster is nonempty
    taken = set()
    for j in range(k):
        if np.any(labels == j):
            continue
        d2j = ((points - centroids[j]) ** 2).sum(axis=1)
        d2j[list(taken)] = -np.inf
        far = int(np.argmax(d2j))
        labels[far] = j
        taken.add(far)
    centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
    return labels, centroids


def kmeans_clusters(records, k, config: ClusteringConfig, *,
                    group_kind: GroupKind, group_spec: GroupSpec,
                    lifetime_curve: LifetimeCurve, id_prefix=""):
    """Cluster one repair-strategy group into k ServerClusters."""
    if not records:
        raise ValueError("records must be nonempty")
    points = _ages_matrix(records)
    labels, centroids = kmeans_fit(points, k, config)
    clusters = []
    for j in range(k):
        members = int((labels == j).sum())
        clusters.append(ServerCluster(
            id=f"{id_prefix}{group_kind.value}{j}",
            group_kind=group_kind,
            n_servers=members,
            centroid_past_operating_days=float(centroids[j, 0]),
            centroid_past_calendar_days=float(centroids[j, 1]),
            c_manufacture=group_spec.c_manufacture,
            beta=group_spec.beta,
            lifetime_curve=lifetime_curve,
        ))
    return clusters


def cluster_datacenter(dc: DataCenterSpec, scenario: Scenario, fleet=None):
    """Full pipeline for one DC: resolve fleet, split, K-means per group."""
    if fleet is None:
        fleet = dc.resolve_fleet()
    cfg = scenario.clustering
    group_a, group_b = split_by_repair_strategy(
        fleet, cfg.theta, scenario.replace_cost)
    clusters = []
    if group_a:
        k = min(cfg.k_repair, len(group_a))
        clusters += kmeans_clusters(
            group_a, k, cfg, group_kind=GroupKind.REPAIR_A,
            group_spec=scenario.repair_group,
            lifetime_curve=dc.server_params.lifetime_curve,
            id_prefix=f"{dc.id}-")
    if group_b:
        k = min(cfg.k_replace, len(group_b))
        clusters += kmeans_clusters(
            group_b, k, cfg, group_kind=GroupKind.REPLACE_B,
            group_spec=scenario.replace_group,
            lifetime_curve=dc.server_params.lifetime_curve,
            id_prefix=f"{dc.id}-")
    return clusters


def cluster_scenario(scenario: Scenario):
    """Clusters for every DC, as {dc_id: [ServerCluster, ...]}."""
    return {dc.id: cluster_datacenter(dc, scenario) for dc in scenario.dcs}
