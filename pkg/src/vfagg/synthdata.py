"""Seeded generator of synthetic glaucoma-like cohorts.

Each patient follows a linear TD trajectory: a planted spatial pattern
(one of ``k_true`` unit vectors with disjoint support, so the patterns are
orthogonal and recoverable), a progression rate from ``c_true`` discrete
negative values, a per-point baseline, irregular visit dates, and i.i.d.
Gaussian noise, clamped to the TD range after the fact.

With ``skew=True`` the rate is a deterministic function of the pattern, so
every patient in a spatial cluster shares one progression rate.  That makes
the shared-slope (TSLR) experts nearly exact while their pool stays small,
the regime in which hierarchical aggregation pays off.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .core import DEFAULT_D, TD_MAX, TD_MIN, PatientSeries


@dataclass(frozen=True)
class CohortConfig:
    patients: int = 1000
    d: int = DEFAULT_D
    k_true: int = 8
    c_true: int = 3
    noise_sd: float = 2.0
    series_length_range: tuple[int, int] = (5, 15)
    date_gap_range: tuple[float, float] = (0.2, 0.8)
    intercept_range: tuple[float, float] = (-15.0, -2.0)
    rate_range: tuple[float, float] = (-2.5, -0.5)
    skew: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.patients < 1:
            raise ValueError("need at least one patient")
        if self.k_true < 1 or self.c_true < 1:
            raise ValueError("k_true and c_true must be positive")
        if self.k_true > self.d:
            raise ValueError("cannot plant more disjoint patterns than field points")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        lmin, lmax = self.series_length_range
        if lmin < 2 or lmax < lmin:
            raise ValueError(f"invalid series_length_range {self.series_length_range}")
        gmin, gmax = self.date_gap_range
        if gmin <= 0 or gmax < gmin:
            raise ValueError(f"invalid date_gap_range {self.date_gap_range}")
        imin, imax = self.intercept_range
        if imax < imin or imin < TD_MIN or imax > TD_MAX:
            raise ValueError(f"invalid intercept_range {self.intercept_range}")
        rmin, rmax = self.rate_range
        if rmax < rmin or rmax > 0:
            raise ValueError("rate_range must be nonpositive (progression loses dB)")
        object.__setattr__(self, "series_length_range", (int(lmin), int(lmax)))
        object.__setattr__(self, "date_gap_range", (float(gmin), float(gmax)))
        object.__setattr__(self, "intercept_range", (float(imin), float(imax)))
        object.__setattr__(self, "rate_range", (float(rmin), float(rmax)))


def cohort_config_from_dict(data: dict) -> CohortConfig:
    known = {f.name for f in fields(CohortConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown cohort config fields: {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("series_length_range", "date_gap_range", "intercept_range", "rate_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return CohortConfig(**kwargs)


def _planted_patterns(config: CohortConfig, rng: np.random.Generator) -> np.ndarray:
    """k_true unit patterns on disjoint index blocks (mutually orthogonal)."""
    patterns = np.zeros((config.k_true, config.d))
    blocks = np.array_split(np.arange(config.d), config.k_true)
    for k, block in enumerate(blocks):
        weights = rng.uniform(0.5, 1.0, size=block.shape[0])
        patterns[k, block] = weights / np.linalg.norm(weights)
    return patterns


def _planted_rates(config: CohortConfig) -> np.ndarray:
    rmin, rmax = config.rate_range
    if config.c_true == 1:
        return np.array([(rmin + rmax) / 2.0])
    return np.linspace(rmin, rmax, config.c_true)


def generate_cohort(config: CohortConfig) -> tuple[list[PatientSeries], dict]:
    """Generate a cohort plus ground-truth labels, deterministically.

    Every patient gets an independent generator derived from (seed, index),
    so the output does not depend on generation order.
    """
    root = np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0x5EED])
    rng = np.random.default_rng(root)
    patterns = _planted_patterns(config, rng)
    rates = _planted_rates(config)

    lmin, lmax = config.series_length_range
    gmin, gmax = config.date_gap_range
    imin, imax = config.intercept_range

    cohort: list[PatientSeries] = []
    truth_patients: dict[str, dict] = {}
    for i in range(config.patients):
        prng = np.random.default_rng(
            np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0x9A71E47, i])
        )
        k = int(prng.integers(config.k_true))
        if config.skew:
            c = k % config.c_true
        else:
            c = int(prng.integers(config.c_true))
        slope = rates[c] * patterns[k]
        length = int(prng.integers(lmin, lmax + 1))
        gaps = prng.uniform(gmin, gmax, size=length - 1)
        dates = np.concatenate([[0.0], np.cumsum(gaps)])
        baseline = prng.uniform(imin, imax, size=config.d)
        noise = prng.normal(0.0, config.noise_sd, size=(length, config.d))
        values = baseline[None, :] + slope[None, :] * dates[:, None] + noise
        np.clip(values, TD_MIN, TD_MAX, out=values)
        pid = f"p{i:05d}"
        cohort.append(PatientSeries(pid, dates, values))
        truth_patients[pid] = {"pattern": k, "rate_index": c, "rate": float(rates[c])}

    ground_truth = {
        "patterns": patterns.tolist(),
        "rates": rates.tolist(),
        "patients": truth_patients,
    }
    return cohort, ground_truth


def default_config(**overrides) -> CohortConfig:
    return replace(CohortConfig(), **overrides)
