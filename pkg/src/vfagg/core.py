"""Domain types and shared linear-predictor mechanics.

A visual field is a length-D vector of total-deviation (TD) values in
decibels, each constrained to [TD_MIN, TD_MAX] = [-30, 0].  Fields are
plain float64 numpy arrays validated at the boundaries; a patient series
is an ordered sequence of (date, field) observations with dates measured
in years from the patient's first visit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

TD_MIN = -30.0
TD_MAX = 0.0
DEFAULT_D = 74

#: Normalizer that maps the worst-case field distance onto loss 1.0.
LOSS_SCALE = -TD_MIN  # 30 dB


class ExpertSource(enum.Enum):
    """Method that generated an expert's slope."""

    LR = "lr"
    TSLR = "tslr"
    SC = "sc"


def validate_field(values, d: int | None = None) -> np.ndarray:
    """Check a TD vector and return it as a float64 array.

    Rejects wrong dimension (when ``d`` is given), non-finite entries and
    values outside [TD_MIN, TD_MAX].
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"visual field must be 1-D, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ValueError(f"visual field has {arr.shape[0]} points, expected {d}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("visual field contains non-finite values")
    if np.any(arr < TD_MIN) or np.any(arr > TD_MAX):
        raise ValueError(
            f"visual field values outside [{TD_MIN}, {TD_MAX}]: "
            f"range [{arr.min()}, {arr.max()}]"
        )
    return arr


@dataclass(frozen=True)
class PatientSeries:
    """Ordered visual-field observations for one patient.

    ``dates`` are years from the first observation (strictly increasing),
    ``fields`` is the (L, D) stack of TD vectors.
    """

    patient_id: str
    dates: np.ndarray
    fields: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype=np.float64)
        fields = np.asarray(self.fields, dtype=np.float64)
        if dates.ndim != 1 or fields.ndim != 2 or dates.shape[0] != fields.shape[0]:
            raise ValueError(
                f"series {self.patient_id!r}: dates {dates.shape} and "
                f"fields {fields.shape} do not align"
            )
        if dates.shape[0] < 2:
            raise ValueError(f"series {self.patient_id!r}: need at least 2 observations")
        if not np.all(np.diff(dates) > 0):
            raise ValueError(f"series {self.patient_id!r}: dates must be strictly increasing")
        if not np.all(np.isfinite(fields)):
            raise ValueError(f"series {self.patient_id!r}: non-finite field values")
        if np.any(fields < TD_MIN) or np.any(fields > TD_MAX):
            raise ValueError(
                f"series {self.patient_id!r}: field values outside [{TD_MIN}, {TD_MAX}]"
            )
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "fields", fields)

    @property
    def length(self) -> int:
        return self.dates.shape[0]

    @property
    def d(self) -> int:
        return self.fields.shape[1]

    def prefix(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """First ``n`` observations as (dates, fields) arrays, n >= 1."""
        if not 1 <= n <= self.length:
            raise ValueError(f"prefix length {n} outside [1, {self.length}]")
        return self.dates[:n], self.fields[:n]


@dataclass(frozen=True)
class Expert:
    """Linear TD-trajectory predictor: field(t) = slope * t + intercept.

    The slope is fixed when the expert is built from training data; the
    intercept is target-specific and stays ``None`` until fit against a
    target patient's observed prefix.
    """

    slope: np.ndarray
    source: ExpertSource
    origin_id: str
    intercept: np.ndarray | None = None

    def __post_init__(self):
        slope = np.asarray(self.slope, dtype=np.float64)
        if slope.ndim != 1:
            raise ValueError("expert slope must be a 1-D vector")
        object.__setattr__(self, "slope", slope)
        if self.intercept is not None:
            intercept = np.asarray(self.intercept, dtype=np.float64)
            if intercept.shape != slope.shape:
                raise ValueError("expert intercept and slope dimensions differ")
            object.__setattr__(self, "intercept", intercept)

    def with_intercept(self, intercept: np.ndarray) -> "Expert":
        return replace(self, intercept=np.asarray(intercept, dtype=np.float64))


def loss(x, y) -> float:
    """Normalized Euclidean loss between two fields: ||x - y|| / (30 sqrt(D)).

    Lies in [0, 1] for any pair of valid fields.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ValueError(f"loss: dimension mismatch {xa.shape} vs {ya.shape}")
    d = xa.shape[0]
    return float(np.linalg.norm(xa - ya) / (LOSS_SCALE * np.sqrt(d)))


def rmse(pred, obs) -> float:
    """Root mean squared error over field points, in dB."""
    pa = np.asarray(pred, dtype=np.float64)
    oa = np.asarray(obs, dtype=np.float64)
    if pa.shape != oa.shape:
        raise ValueError(f"rmse: dimension mismatch {pa.shape} vs {oa.shape}")
    return float(np.sqrt(np.mean((pa - oa) ** 2)))


def clamp_field(values: np.ndarray) -> np.ndarray:
    """Clip predicted TD values into the representable range."""
    return np.clip(values, TD_MIN, TD_MAX)


def predict_linear(expert: Expert, date: float) -> np.ndarray:
    """Evaluate an expert at ``date`` and clamp into [TD_MIN, TD_MAX]."""
    if expert.intercept is None:
        raise ValueError("expert intercept has not been fit")
    return clamp_field(expert.slope * date + expert.intercept)


def fit_intercept(slope, dates, fields) -> np.ndarray:
    """Least-squares intercept for a fixed slope against observed data.

    Returns the componentwise mean of (y_t - slope * d_t) over the given
    observations, which minimizes sum_t ||y_t - slope*d_t - w2||^2.
    """
    dts = np.asarray(dates, dtype=np.float64)
    ys = np.asarray(fields, dtype=np.float64)
    if dts.size == 0:
        raise ValueError("fit_intercept: empty observation prefix")
    slope = np.asarray(slope, dtype=np.float64)
    return ys.mean(axis=0) - slope * dts.mean()
