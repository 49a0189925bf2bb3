"""Construction of the three expert families and per-target intercept fitting.

Every expert is a linear TD trajectory.  Slopes come from training data:

* patient-wise LR: one expert per training patient, per-point OLS slope;
* TSLR: one expert per retained spatial cluster, shared slope fitted with
  per-patient intercepts absorbed (a pooled fixed-effects regression);
* slope clustering (SC): one expert per training patient in a retained
  cluster, with each per-point slope replaced by its cluster's nearest
  representative rate.

Intercepts are always target-specific and set by ``fit_pool_to_target``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .clustering import SpatialClustering, cluster_slopes, patient_feature
from .core import Expert, ExpertSource, PatientSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpertPool:
    """All experts generated by one method, with stacked parameter views."""

    method: ExpertSource
    experts: tuple[Expert, ...]

    def __post_init__(self):
        if not self.experts:
            raise ValueError(f"empty expert pool for method {self.method.value}")
        d = self.experts[0].slope.shape[0]
        for e in self.experts:
            if e.source is not self.method:
                raise ValueError(
                    f"expert from {e.source.value} placed in {self.method.value} pool"
                )
            if e.slope.shape[0] != d:
                raise ValueError("experts in one pool must share dimension")
        object.__setattr__(self, "experts", tuple(self.experts))

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def slopes(self) -> np.ndarray:
        return np.stack([e.slope for e in self.experts])

    @property
    def intercepts(self) -> np.ndarray:
        if any(e.intercept is None for e in self.experts):
            raise ValueError("pool intercepts have not been fit")
        return np.stack([e.intercept for e in self.experts])


def build_lr_experts(training: list[PatientSeries]) -> ExpertPool:
    """One patient-wise OLS expert per training patient."""
    experts = [
        Expert(patient_feature(s), ExpertSource.LR, s.patient_id) for s in training
    ]
    return ExpertPool(ExpertSource.LR, tuple(experts))


def pooled_slope(members: list[PatientSeries]) -> tuple[np.ndarray, float]:
    """Shared within-cluster slope with per-patient intercepts absorbed.

    Centering each patient's dates and fields about their own means makes
    per-patient time shifts (equivalently per-patient intercepts) drop out,
    so the pooled ratio below is the exact fixed-effects minimizer.
    Returns (slope, pooled date variance).
    """
    num = None
    den = 0.0
    for s in members:
        dc = s.dates - s.dates.mean()
        yc = s.fields - s.fields.mean(axis=0)
        contrib = dc @ yc
        num = contrib if num is None else num + contrib
        den += float(dc @ dc)
    if den <= 0.0:
        return np.zeros_like(num), 0.0
    return num / den, den


def build_tslr_experts(
    training: list[PatientSeries], spatial: SpatialClustering
) -> ExpertPool:
    """One shared-slope expert per retained spatial cluster."""
    by_id = {s.patient_id: s for s in training}
    experts = []
    for k in sorted(spatial.retained):
        members = [by_id[pid] for pid in spatial.members(k) if pid in by_id]
        if not members:
            continue
        slope, den = pooled_slope(members)
        if den <= 0.0:
            log.warning("cluster %d has zero pooled date variance; skipped", k)
            continue
        experts.append(Expert(slope, ExpertSource.TSLR, f"cluster:{k}"))
    if not experts:
        raise ValueError("no retained cluster produced a TSLR expert")
    return ExpertPool(ExpertSource.TSLR, tuple(experts))


def build_sc_experts(
    training: list[PatientSeries],
    spatial: SpatialClustering,
    c: int,
    seed: int,
) -> ExpertPool:
    """Slope-quantized experts: one per training patient in a retained cluster."""
    by_id = {s.patient_id: s for s in training}
    experts = []
    for k in sorted(spatial.retained):
        members = [by_id[pid] for pid in spatial.members(k) if pid in by_id]
        if not members:
            continue
        slope_set = cluster_slopes(members, c, seed=(seed ^ 0x5C) + k)
        for s in members:
            quantized = slope_set.rates[slope_set.point_assignment[s.patient_id]]
            experts.append(Expert(quantized, ExpertSource.SC, s.patient_id))
    if not experts:
        raise ValueError("no retained cluster produced SC experts")
    return ExpertPool(ExpertSource.SC, tuple(experts))


def fit_pool_to_target(pool: ExpertPool, dates, fields) -> ExpertPool:
    """Refit every expert's intercept against a target patient's prefix.

    Slopes are untouched; a new pool is returned.
    """
    dts = np.asarray(dates, dtype=np.float64)
    ys = np.asarray(fields, dtype=np.float64)
    if dts.size == 0:
        raise ValueError("fit_pool_to_target: empty prefix")
    ybar = ys.mean(axis=0)
    dbar = dts.mean()
    fitted = tuple(e.with_intercept(ybar - e.slope * dbar) for e in pool.experts)
    return ExpertPool(pool.method, fitted)


def pools_to_json(pools: list[ExpertPool], d: int) -> dict:
    """Serializable form of expert pools (slopes only; intercepts are
    target-specific and never persisted)."""
    return {
        "d": d,
        "pools": [
            {
                "method": pool.method.value,
                "experts": [
                    {"origin_id": e.origin_id, "slope": e.slope.tolist()}
                    for e in pool.experts
                ],
            }
            for pool in pools
        ],
    }


def pools_from_json(payload: dict) -> list[ExpertPool]:
    d = int(payload["d"])
    pools = []
    for entry in payload["pools"]:
        method = ExpertSource(entry["method"])
        experts = tuple(
            Expert(np.asarray(e["slope"], dtype=np.float64), method, e["origin_id"])
            for e in entry["experts"]
        )
        for e in experts:
            if e.slope.shape[0] != d:
                raise ValueError("expert dimension disagrees with header")
        pools.append(ExpertPool(method, experts))
    return pools


def dump_pools(path, pools: list[ExpertPool], d: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pools_to_json(pools, d), fh)
        fh.write("\n")


def load_pools(path) -> list[ExpertPool]:
    with open(path, encoding="utf-8") as fh:
        return pools_from_json(json.load(fh))
