"""Evaluation harness: RMSE scoring, improvement rate, learning-rate tuning,
the cross-validated experiment, and the one-sided binomial test.

The prediction task is always the same: given the first n observations of a
test patient, fit every expert's intercept to that prefix, weight experts by
their batch exponential weights on the prefix, and predict the patient's
final observation.  Performance is summarized by the improvement rate

    IR(n) = mean_i a_i(n),   a_i(n) = 1 - RMSE_method(i) / RMSE_LR(i)

over the test patients, where a_i(n) = 0 for patients whose series are too
short (n >= L_i) and RMSE_LR is the patient-wise least-squares baseline fit
on the same prefix.

A grid engine evaluates every strategy at a whole vector of learning rates
in one pass.  Experts whose linear predictions provably stay inside the TD
range over the prefix contribute through closed forms in the slope matrix;
the remaining experts get exact clamped corrections, so the engine matches
the direct per-expert computation to rounding error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .aggregation import batch_weights, rg_optimal_eta
from .clustering import cluster_spatial
from .config import RunConfig
from .core import LOSS_SCALE, TD_MAX, TD_MIN, PatientSeries
from .experts import (
    ExpertPool,
    build_lr_experts,
    build_sc_experts,
    build_tslr_experts,
)

log = logging.getLogger(__name__)

RMSE_TIE_TOL = 1e-12  # equal-RMSE ties are excluded from win counts

POOL_ORDER = ("lr", "tslr", "sc")


# ---------------------------------------------------------------------------
# Records and the improvement rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationRecord:
    """Outcome of one (patient, n, method) prediction.

    ``rmse_method`` is NaN exactly when n >= series_length (no prediction is
    possible; the record then contributes a_i = 0 to the improvement rate).
    """

    patient_id: str
    n: int
    method: str
    rmse_method: float
    rmse_lr_baseline: float
    series_length: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"invalid observation count {self.n}")
        if self.n < self.series_length:
            if not (self.rmse_method >= 0 and self.rmse_lr_baseline >= 0):
                raise ValueError("rmse values must be nonnegative")


@dataclass(frozen=True)
class IrPoint:
    ir: float
    count: int
    stdev: float
    excluded: int = 0


def improvement_rate(records: list[EvaluationRecord], n: int) -> IrPoint:
    """Mean of a_i(n) over the given records.

    Records with n >= series_length contribute 0.  A record whose baseline
    RMSE is zero has an undefined ratio; it is excluded from numerator and
    denominator and counted in ``excluded``.
    """
    values = []
    excluded = 0
    for rec in records:
        if rec.n != n:
            raise ValueError(f"record for n={rec.n} passed to improvement_rate(n={n})")
        if rec.n >= rec.series_length:
            values.append(0.0)
        elif rec.rmse_lr_baseline > 0.0:
            values.append(1.0 - rec.rmse_method / rec.rmse_lr_baseline)
        else:
            excluded += 1
    if not values:
        return IrPoint(0.0, 0, 0.0, excluded)
    arr = np.asarray(values)
    return IrPoint(float(arr.mean()), arr.size, float(arr.std()), excluded)


def binomial_test(wins: int, losses: int) -> float:
    """Exact one-sided sign test: P(X >= wins) for X ~ Binomial(w+l, 1/2)."""
    if wins < 0 or losses < 0:
        raise ValueError("win and loss counts must be nonnegative")
    n = wins + losses
    if n == 0:
        raise ValueError("binomial test needs at least one decided comparison")
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n


# ---------------------------------------------------------------------------
# Baseline and best-expert references
# ---------------------------------------------------------------------------


def _ols_slope(dates: np.ndarray, fields: np.ndarray) -> np.ndarray:
    dc = dates - dates.mean()
    ss = float(dc @ dc)
    if ss <= 0.0:
        return np.zeros(fields.shape[1])
    return (dc @ (fields - fields.mean(axis=0))) / ss


def lr_baseline_rmse(dates, fields, target_date: float, target_field) -> float:
    """Patient-wise least squares on the prefix, clamped, scored at the target."""
    dts = np.asarray(dates, dtype=np.float64)
    ys = np.asarray(fields, dtype=np.float64)
    slope = _ols_slope(dts, ys)
    intercept = ys.mean(axis=0) - slope * dts.mean()
    pred = np.clip(slope * target_date + intercept, TD_MIN, TD_MAX)
    diff = pred - np.asarray(target_field, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def best_expert_rmse(
    pools: list[ExpertPool], dates, fields, eta: float, target_date: float, target_field
) -> float:
    """RMSE of the expert holding the largest batch weight on the prefix.

    Weight ties resolve to the lowest expert index in pool order.
    """
    from .aggregation import expert_loss_matrix

    slopes = np.concatenate([p.slopes for p in pools])
    intercepts = np.concatenate([p.intercepts for p in pools])
    losses = expert_loss_matrix(slopes, intercepts, dates, fields)
    state = batch_weights(losses, eta)
    idx = int(np.argmax(state.weights))
    pred = np.clip(slopes[idx] * target_date + intercepts[idx], TD_MIN, TD_MAX)
    diff = pred - np.asarray(target_field, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


# ---------------------------------------------------------------------------
# Fold models
# ---------------------------------------------------------------------------


class FoldSkipped(RuntimeError):
    """A training split cannot support the configured clustering."""


@dataclass
class FoldModel:
    """Expert pools of one training split, stacked for the grid engine."""

    pool_names: tuple[str, ...]
    pools: tuple[ExpertPool, ...]
    slopes: np.ndarray  # (N, D) concatenated in pool order
    slices: tuple[slice, ...]
    slope_sq: np.ndarray  # (N,) squared slope norms

    @property
    def n_experts(self) -> int:
        return self.slopes.shape[0]

    def pool_sizes(self) -> dict[str, int]:
        return {name: len(pool) for name, pool in zip(self.pool_names, self.pools)}


def pools_required(strategies: tuple[str, ...]) -> tuple[str, ...]:
    needed = set()
    for s in strategies:
        if s in ("flat", "hier"):
            needed.update(POOL_ORDER)
        else:
            needed.add(s)
    return tuple(name for name in POOL_ORDER if name in needed)


def fold_model_from_pools(
    pools: list[ExpertPool], names: tuple[str, ...]
) -> FoldModel:
    """Stack arbitrary pools into the grid-engine layout."""
    slopes = np.concatenate([p.slopes for p in pools])
    sizes = [len(p) for p in pools]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    slices = tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))
    return FoldModel(
        pool_names=tuple(names),
        pools=tuple(pools),
        slopes=slopes,
        slices=slices,
        slope_sq=np.einsum("ij,ij->i", slopes, slopes),
    )


def build_fold_model(
    training: list[PatientSeries], config: RunConfig, seed: int
) -> FoldModel:
    """Build the expert pools the configured strategies require."""
    needed = pools_required(config.strategies)
    spatial = None
    if "tslr" in needed or "sc" in needed:
        if len(training) < config.k:
            raise FoldSkipped(
                f"training split of {len(training)} patients cannot fill "
                f"{config.k} spatial clusters"
            )
        spatial = cluster_spatial(training, config.k, config.min_cluster_size, seed)
        if not spatial.retained:
            raise FoldSkipped("no spatial cluster reached the minimum size")
    pools = []
    for name in needed:
        if name == "lr":
            pools.append(build_lr_experts(training))
        elif name == "tslr":
            pools.append(build_tslr_experts(training, spatial))
        else:
            pools.append(build_sc_experts(training, spatial, config.c, seed))
    return fold_model_from_pools(pools, needed)


# ---------------------------------------------------------------------------
# Grid engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatientTask:
    """One (patient, n) prediction problem."""

    patient_id: str
    dates: np.ndarray  # (n,) observed prefix
    fields: np.ndarray  # (n, D)
    target_date: float
    target_field: np.ndarray  # (D,)
    series_length: int

    @staticmethod
    def from_series(series: PatientSeries, n: int) -> "PatientTask":
        dates, fields = series.prefix(n)
        return PatientTask(
            patient_id=series.patient_id,
            dates=dates,
            fields=fields,
            target_date=float(series.dates[-1]),
            target_field=series.fields[-1],
            series_length=series.length,
        )


@dataclass
class TaskResult:
    """Per-eta RMSEs of every strategy for one task.

    ``pool_rmse`` has shape (G, P) in the model's pool order; ``flat_rmse``
    and ``hier_rmse`` have shape (G,).  Best-expert RMSEs do not depend on
    eta.  ``hier_special`` holds RMSEs of explicit per-level eta requests.
    """

    baseline: float
    pool_rmse: np.ndarray
    flat_rmse: np.ndarray
    hier_rmse: np.ndarray | None
    best_pool_rmse: np.ndarray  # (P,)
    best_all_rmse: float
    hier_special: list[float] = field(default_factory=list)


def _clamp_free_intervals(
    slopes: np.ndarray, ybar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert centered-date interval [lo_i, hi_i] on which the raw line
    stays inside [TD_MIN, TD_MAX] at every field point."""
    upper = TD_MAX - ybar  # >= 0
    lower = TD_MIN - ybar  # <= 0
    pos = slopes > 0.0
    neg = slopes < 0.0
    hi_ratio = np.full_like(slopes, np.inf)
    np.divide(upper[None, :], slopes, out=hi_ratio, where=pos)
    np.divide(lower[None, :], slopes, out=hi_ratio, where=neg)
    lo_ratio = np.full_like(slopes, -np.inf)
    np.divide(lower[None, :], slopes, out=lo_ratio, where=pos)
    np.divide(upper[None, :], slopes, out=lo_ratio, where=neg)
    return lo_ratio.max(axis=1), hi_ratio.min(axis=1)


def _date_corrections(
    slopes: np.ndarray,
    ybar: np.ndarray,
    c: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    fields: np.ndarray,
    loss_mat: np.ndarray,
    scale: float,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fix the loss matrix in place for experts that clamp at each date.

    Returns per date the (expert indices, clamp corrections) needed to make
    weighted sums of raw predictions exact.
    """
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for t, ct in enumerate(c):
        idx = np.flatnonzero((ct < lo) | (ct > hi))
        if idx.size:
            raw = slopes[idx] * ct + ybar[None, :]
            pred = np.clip(raw, TD_MIN, TD_MAX)
            delta = pred - raw
            pred -= fields[t][None, :]
            loss_mat[t, idx] = np.sqrt(
                np.einsum("rj,rj->r", pred, pred)
            ) / scale
        else:
            delta = np.empty((0, ybar.shape[0]))
        out.append((idx, delta))
    return out


def _pool_date_rows(
    idx: np.ndarray, sl: slice
) -> tuple[np.ndarray, np.ndarray]:
    """Rows into a per-date delta stack / local expert indices for one pool."""
    mask = (idx >= sl.start) & (idx < sl.stop)
    return np.flatnonzero(mask), idx[mask] - sl.start


def _rmse_rows(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise RMSE of (..., D) predictions against a (D,) target."""
    diff = pred - target
    return np.sqrt(np.einsum("...j,...j->...", diff, diff) / target.shape[0])


def _prequential_cum(loss_mat: np.ndarray) -> np.ndarray:
    """Row t: losses accumulated strictly before round t, shape like input."""
    out = np.zeros_like(loss_mat)
    if loss_mat.shape[0] > 1:
        np.cumsum(loss_mat[:-1], axis=0, out=out[1:])
    return out


def _intermediates(
    weights: np.ndarray,  # (G, N_p) weights in force for every prefix date
    z: np.ndarray,  # (G,)
    m_pool: np.ndarray,  # (G, D) weighted slope sums of this pool
    ybar: np.ndarray,
    c: np.ndarray,
    sl: slice,
    corrections: list[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Level-1 aggregates at the prefix dates, shape (G, n, D).

    The weighted sum of raw linear predictions is linear in the centered
    date, so the weighted-slope product covers every date; experts that
    clamp at a date add their exact corrections there.
    """
    sums = c[None, :, None] * m_pool[:, None, :]
    for t, (idx, delta) in enumerate(corrections):
        rows, local = _pool_date_rows(idx, sl)
        if rows.size:
            sums[:, t, :] += weights[:, local] @ delta[rows]
    sums /= z[:, None, None]
    sums += ybar[None, None, :]
    return sums


def _intermediates_online(
    loss_pool: np.ndarray,  # (n, N_p)
    etas: np.ndarray,
    pool_slopes: np.ndarray,
    ybar: np.ndarray,
    c: np.ndarray,
    sl: slice,
    corrections: list[tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Level-1 aggregates when the weight at date t sees only losses before t."""
    n_obs = c.shape[0]
    out = np.empty((etas.shape[0], n_obs, ybar.shape[0]))
    before = _prequential_cum(loss_pool)
    for t in range(n_obs):
        cum_t = before[t]
        w_t = np.exp(-etas[:, None] * (cum_t - cum_t.min())[None, :])
        z_t = w_t.sum(axis=1)
        sums = c[t] * (w_t @ pool_slopes)
        idx, delta = corrections[t]
        rows, local = _pool_date_rows(idx, sl)
        if rows.size:
            sums += w_t[:, local] @ delta[rows]
        out[:, t, :] = sums / z_t[:, None] + ybar[None, :]
    return out


def _level2_combine(
    inter: list[np.ndarray],  # per pool (G, n, D)
    pool_aggs: list[np.ndarray],  # per pool (G, D): intermediates at the target
    prefix_fields: np.ndarray,
    etas: np.ndarray,
    scale: float,
) -> np.ndarray:
    """Second-level batch weighting of the intermediate predictors."""
    cum2 = np.stack(
        [
            np.einsum(
                "gtd,gtd->gt", p - prefix_fields[None], p - prefix_fields[None]
            )
            for p in inter
        ],
        axis=2,
    )  # (G, n, P) squared distances
    cum2 = np.sqrt(cum2).sum(axis=1) / scale  # (G, P)
    w2 = np.exp(-etas[:, None] * (cum2 - cum2.min(axis=1, keepdims=True)))
    z2 = w2.sum(axis=1)
    stacked = np.stack(pool_aggs, axis=1)  # (G, P, D)
    return np.einsum("gp,gpd->gd", w2, stacked) / z2[:, None]


def evaluate_tasks(
    model: FoldModel,
    tasks: list[PatientTask],
    etas,
    *,
    update: str = "batch",
    want_hier: bool = True,
    hier_special: list[tuple[list[float], float]] | None = None,
) -> list[TaskResult]:
    """Evaluate all strategies for each task at each learning rate.

    ``etas`` is the shared learning-rate vector (applied at both hierarchy
    levels); ``hier_special`` requests extra hierarchical evaluations with
    explicit (per-pool level-1 etas, level-2 eta).  All tasks must share
    one prefix length.
    """
    if update not in ("batch", "online"):
        raise ValueError(f"unknown update mode {update!r}")
    if not tasks:
        return []
    etas = np.asarray(etas, dtype=np.float64)
    slopes = model.slopes
    n_experts, d = slopes.shape
    scale = LOSS_SCALE * math.sqrt(d)
    n_obs = tasks[0].dates.shape[0]
    for t in tasks:
        if t.dates.shape[0] != n_obs:
            raise ValueError("tasks in one batch must share the prefix length")

    dbars = np.array([t.dates.mean() for t in tasks])
    ybars = np.stack([t.fields.mean(axis=0) for t in tasks])
    cs = np.stack([t.dates for t in tasks]) - dbars[:, None]  # (T, n)
    resid = ybars[:, None, :] - np.stack([t.fields for t in tasks])  # (T, n, D)
    resid_sq = np.einsum("ptj,ptj->pt", resid, resid)
    gram = (slopes @ resid.reshape(-1, d).T).reshape(n_experts, len(tasks), n_obs)

    results = []
    for p, task in enumerate(tasks):
        c = cs[p]
        cstar = task.target_date - dbars[p]
        ybar = ybars[p]

        # Squared prefix losses via the quadratic form, exact absent clamping.
        q = (
            c[:, None] ** 2 * model.slope_sq[None, :]
            + 2.0 * c[:, None] * gram[:, p, :].T
            + resid_sq[p][:, None]
        )
        loss_mat = np.sqrt(np.maximum(q, 0.0)) / scale  # (n, N)

        # Experts whose raw line leaves the TD range at a prefix date get
        # exact clamped losses and sum corrections, date by date.
        lo, hi = _clamp_free_intervals(slopes, ybar)
        corrections = _date_corrections(
            slopes, ybar, c, lo, hi, task.fields, loss_mat, scale
        )

        cum = loss_mat.sum(axis=0)  # (N,)
        v_flat = np.exp(-etas[:, None] * (cum - cum.min())[None, :])  # (G, N)

        # Raw (unclamped) target predictions; only experts whose raw target
        # prediction leaves the TD range need explicit clamp corrections.
        raw_star = slopes * cstar
        raw_star += ybar[None, :]
        star_risky = np.flatnonzero(
            np.any(raw_star > TD_MAX, axis=1) | np.any(raw_star < TD_MIN, axis=1)
        )
        delta_star = (
            np.clip(raw_star[star_risky], TD_MIN, TD_MAX) - raw_star[star_risky]
            if star_risky.size
            else None
        )

        pool_sums = []  # weighted target sums on the global weight scale (G, D)
        pool_aggs = []  # normalized per-pool aggregates at the target (G, D)
        inter = [] if want_hier else None
        for sl in model.slices:
            v_pool = v_flat[:, sl]
            z = v_pool.sum(axis=1)
            dead = z <= 0.0  # whole pool underflowed under the global shift
            if np.any(dead):
                v_pool = v_pool.copy()
                cum_pool = cum[sl]
                v_pool[dead] = np.exp(
                    -etas[dead, None] * (cum_pool - cum_pool.min())[None, :]
                )
                z = v_pool.sum(axis=1)
            m_pool = v_pool @ slopes[sl]  # (G, D) weighted slope sums
            s = cstar * m_pool
            s += ybar[None, :] * z[:, None]
            rows_star, local_star = _pool_date_rows(star_risky, sl)
            if rows_star.size:
                s += v_pool[:, local_star] @ delta_star[rows_star]
            pool_aggs.append(s / z[:, None])
            if np.any(dead):
                # A dead pool's true global-scale weights all underflow, so
                # its contribution to the flat sum is zero at this eta.
                s = s.copy()
                s[dead] = 0.0
            pool_sums.append(s)
            if want_hier:
                if update == "batch":
                    inter.append(
                        _intermediates(v_pool, z, m_pool, ybar, c, sl, corrections)
                    )
                else:
                    inter.append(
                        _intermediates_online(
                            loss_mat[:, sl], etas, slopes[sl], ybar, c, sl,
                            corrections,
                        )
                    )

        flat_z = v_flat.sum(axis=1)
        flat_agg = sum(pool_sums) / flat_z[:, None]

        target = task.target_field
        pool_rmse = np.stack([_rmse_rows(a, target) for a in pool_aggs], axis=1)
        flat_rmse = _rmse_rows(flat_agg, target)

        hier_rmse = None
        if want_hier:
            hier_agg = _level2_combine(inter, pool_aggs, task.fields, etas, scale)
            hier_rmse = _rmse_rows(hier_agg, target)

        def expert_target_rmse(idx: int) -> float:
            pred = np.clip(raw_star[idx], TD_MIN, TD_MAX)
            return float(math.sqrt(np.mean((pred - target) ** 2)))

        best_pool = np.array(
            [expert_target_rmse(sl.start + int(np.argmin(cum[sl]))) for sl in model.slices]
        )
        best_all = expert_target_rmse(int(np.argmin(cum)))

        specials = []
        if hier_special:
            star_pred = np.clip(raw_star, TD_MIN, TD_MAX)
            specials = [
                _hier_special_rmse(
                    model, level1, level2, cum, loss_mat, ybar, c,
                    corrections, star_pred, task, scale, update,
                )
                for level1, level2 in hier_special
            ]

        results.append(
            TaskResult(
                baseline=lr_baseline_rmse(
                    task.dates, task.fields, task.target_date, target
                ),
                pool_rmse=pool_rmse,
                flat_rmse=flat_rmse,
                hier_rmse=hier_rmse,
                best_pool_rmse=best_pool,
                best_all_rmse=best_all,
                hier_special=specials,
            )
        )
    return results


def _hier_special_rmse(
    model: FoldModel,
    level1_etas: list[float],
    level2_eta: float,
    cum: np.ndarray,
    loss_mat: np.ndarray,
    ybar: np.ndarray,
    c: np.ndarray,
    corrections: list[tuple[np.ndarray, np.ndarray]],
    star_pred: np.ndarray,  # (N, D) clamped target predictions
    task: PatientTask,
    scale: float,
    update: str,
) -> float:
    """Hierarchical RMSE with one explicit eta per pool plus a level-2 eta."""
    if len(level1_etas) != len(model.slices):
        raise ValueError("need one level-1 eta per pool")
    inter = []
    aggs = []
    for eta1, sl in zip(level1_etas, model.slices):
        eta_vec = np.array([eta1])
        cum_pool = cum[sl]
        w = np.exp(-eta_vec[:, None] * (cum_pool - cum_pool.min())[None, :])
        z = w.sum(axis=1)
        if update == "batch":
            m_pool = w @ model.slopes[sl]
            inter.append(_intermediates(w, z, m_pool, ybar, c, sl, corrections))
        else:
            inter.append(
                _intermediates_online(
                    loss_mat[:, sl], eta_vec, model.slopes[sl], ybar, c, sl,
                    corrections,
                )
            )
        aggs.append((w @ star_pred[sl]) / z[:, None])
    agg = _level2_combine(inter, aggs, task.fields, np.array([level2_eta]), scale)
    return float(_rmse_rows(agg, task.target_field)[0])


# ---------------------------------------------------------------------------
# Learning-rate tuning by inner cross-validation
# ---------------------------------------------------------------------------


@dataclass
class TuneResult:
    etas: dict[str, dict[int, float]]  # strategy -> n -> IR-optimal eta
    curves: dict[str, dict[int, np.ndarray]]  # strategy -> n -> IR per grid point
    counts: dict[int, int]
    warnings: list[str]


def _strategy_value(
    res: TaskResult, strategy: str, pool_cols: dict[str, int]
) -> np.ndarray:
    if strategy == "flat":
        return res.flat_rmse
    if strategy == "hier":
        return res.hier_rmse
    return res.pool_rmse[:, pool_cols[strategy]]


def tune_etas(
    learning: list[PatientSeries], config: RunConfig, seed: int
) -> TuneResult:
    """IR-optimal eta per strategy and per n by inner cross-validation.

    For every n the grid multipliers g are applied as eta = g / sqrt(n); the
    IR of each grid point is pooled over all held-out patients of all inner
    folds and the argmax (ties to the smaller eta) is selected.
    """
    grid = config.grid
    n_lo, n_hi = config.n_range
    strategies = config.strategies
    rng = np.random.default_rng(
        np.random.SeedSequence([seed & 0xFFFFFFFF, 0x7E57])
    )
    if len(learning) < config.folds:
        raise ValueError(
            f"{len(learning)} patients cannot form {config.folds} tuning folds"
        )
    fold_indices = np.array_split(rng.permutation(len(learning)), config.folds)

    sums = {s: {n: np.zeros(grid.shape[0]) for n in range(n_lo, n_hi + 1)} for s in strategies}
    counts = {n: 0 for n in range(n_lo, n_hi + 1)}
    excluded = {n: 0 for n in range(n_lo, n_hi + 1)}
    warnings: list[str] = []

    usable_folds = 0
    for fi, heldout_idx in enumerate(fold_indices):
        mask = np.ones(len(learning), dtype=bool)
        mask[heldout_idx] = False
        train = [learning[i] for i in np.flatnonzero(mask)]
        heldout = [learning[i] for i in heldout_idx]
        try:
            model = build_fold_model(train, config, seed=_child_seed(seed, 1, fi))
        except FoldSkipped as exc:
            msg = f"tuning fold {fi} skipped: {exc}"
            warnings.append(msg)
            log.warning(msg)
            continue
        usable_folds += 1
        pool_cols = {name: i for i, name in enumerate(model.pool_names)}
        want_hier = "hier" in strategies
        for n in range(n_lo, n_hi + 1):
            short = sum(1 for s in heldout if n >= s.length)
            counts[n] += short  # a_i = 0 contributions
            tasks = [
                PatientTask.from_series(s, n) for s in heldout if n < s.length
            ]
            if not tasks:
                continue
            results = evaluate_tasks(
                model,
                tasks,
                grid / math.sqrt(n),
                update=config.update,
                want_hier=want_hier,
            )
            for res in results:
                if res.baseline <= 0.0:
                    excluded[n] += 1
                    continue
                counts[n] += 1
                for s in strategies:
                    sums[s][n] += 1.0 - _strategy_value(res, s, pool_cols) / res.baseline

    if usable_folds == 0:
        raise RuntimeError("every tuning fold was skipped; cannot tune eta")

    curves = {
        s: {
            n: (sums[s][n] / counts[n] if counts[n] > 0 else np.zeros(grid.shape[0]))
            for n in range(n_lo, n_hi + 1)
        }
        for s in strategies
    }
    etas = {
        s: {
            n: float(grid[int(np.argmax(curves[s][n]))] / math.sqrt(n))
            for n in range(n_lo, n_hi + 1)
        }
        for s in strategies
    }
    for n, cnt in excluded.items():
        if cnt:
            msg = f"tuning: {cnt} held-out patients at n={n} had zero baseline RMSE"
            warnings.append(msg)
            log.warning(msg)
    return TuneResult(etas=etas, curves=curves, counts=counts, warnings=warnings)


def tune_eta_ir(
    learning: list[PatientSeries],
    strategy: str,
    grid,
    folds: int,
    seed: int,
    config: RunConfig | None = None,
) -> dict[int, float]:
    """IR-optimal eta for a single strategy (public convenience wrapper)."""
    base = config or RunConfig()
    cfg = base.with_overrides(
        strategies=(strategy,), eta_grid=list(np.asarray(grid, dtype=np.float64)),
        folds=folds, seed=seed,
    )
    return tune_etas(learning, cfg, seed).etas[strategy]


# ---------------------------------------------------------------------------
# The full cross-validated experiment
# ---------------------------------------------------------------------------


def _child_seed(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, *path])
    return int(ss.generate_state(1)[0])


def outer_fold_indices(n_items: int, folds: int, seed: int) -> list[np.ndarray]:
    """Partition item indices into folds of near-equal size, seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x0173]))
    return np.array_split(rng.permutation(n_items), folds)


def method_label(strategy: str, choice: str) -> str:
    return f"{strategy}[{choice}]"


@dataclass
class FoldOutcome:
    fold: int
    records: list[EvaluationRecord]
    tested: dict[str, int]  # patient id -> series length
    tuned: TuneResult | None
    pool_sizes: dict[str, int]
    warnings: list[str]


@dataclass
class ExperimentReport:
    config: RunConfig
    records: list[EvaluationRecord]
    tested: dict[str, int]
    ir_curves: dict[str, dict[int, IrPoint]]
    tuned_etas: list[dict[str, dict[int, float]]]  # per usable outer fold
    tuning_curves: dict[str, dict[int, np.ndarray]]  # mean IR vs grid point
    pvalues: dict
    pool_sizes: list[dict[str, int]]
    grid: np.ndarray
    warnings: list[str]

    def method_labels(self) -> list[str]:
        seen = []
        for rec in self.records:
            if rec.method not in seen:
                seen.append(rec.method)
        return seen


def _eta_entries(
    model: FoldModel, tuned: TuneResult | None, config: RunConfig, n: int
) -> tuple[list[tuple[str, float]], list[tuple[str, tuple[list[float], float]]]]:
    """(label, eta) pairs for shared-eta evaluations plus hierarchical
    specials [(label, (level1 etas, level2 eta))] for this n."""
    sizes = model.pool_sizes()
    total = model.n_experts
    shared: list[tuple[str, float]] = []
    specials: list[tuple[str, tuple[list[float], float]]] = []
    for s in config.strategies:
        for choice in config.eta_choices:
            if choice == "ir":
                shared.append((method_label(s, "ir"), tuned.etas[s][n]))
            elif s == "hier":
                level1 = [rg_optimal_eta(sizes[name], n) for name in model.pool_names]
                level2 = rg_optimal_eta(len(model.pools), n)
                specials.append((method_label(s, "rg"), (level1, level2)))
            else:
                n_experts = total if s == "flat" else sizes[s]
                shared.append((method_label(s, "rg"), rg_optimal_eta(n_experts, n)))
        if config.fixed_eta is not None:
            shared.append((method_label(s, "fix"), config.fixed_eta))
    return shared, specials


def _run_fold(
    cohort: list[PatientSeries],
    test_idx: np.ndarray,
    config: RunConfig,
    fold: int,
) -> FoldOutcome:
    mask = np.ones(len(cohort), dtype=bool)
    mask[test_idx] = False
    learning = [cohort[i] for i in np.flatnonzero(mask)]
    test = [cohort[i] for i in test_idx]
    warnings: list[str] = []
    try:
        model = build_fold_model(learning, config, seed=_child_seed(config.seed, 2, fold))
    except FoldSkipped as exc:
        msg = f"outer fold {fold} skipped: {exc}"
        log.warning(msg)
        return FoldOutcome(fold, [], {}, None, {}, [msg])

    tuned = None
    if "ir" in config.eta_choices:
        tuned = tune_etas(learning, config, seed=_child_seed(config.seed, 3, fold))
        warnings.extend(tuned.warnings)

    n_lo, n_hi = config.n_range
    pool_cols = {name: i for i, name in enumerate(model.pool_names)}
    want_hier = "hier" in config.strategies
    records: list[EvaluationRecord] = []
    tested = {s.patient_id: s.length for s in test}

    for n in range(n_lo, n_hi + 1):
        tasks = [PatientTask.from_series(s, n) for s in test if n < s.length]
        if not tasks:
            continue
        shared, specials = _eta_entries(model, tuned, config, n)
        eta_vec = np.array([eta for _, eta in shared])
        results = evaluate_tasks(
            model,
            tasks,
            eta_vec,
            update=config.update,
            want_hier=want_hier,
            hier_special=[req for _, req in specials],
        )
        for task, res in zip(tasks, results):
            base = res.baseline

            def add(label: str, value: float):
                records.append(
                    EvaluationRecord(
                        patient_id=task.patient_id,
                        n=n,
                        method=label,
                        rmse_method=float(value),
                        rmse_lr_baseline=base,
                        series_length=task.series_length,
                    )
                )

            for gi, (label, _) in enumerate(shared):
                strategy = label.split("[", 1)[0]
                add(label, _strategy_value(res, strategy, pool_cols)[gi])
            for si, (label, _) in enumerate(specials):
                add(label, res.hier_special[si])
            for name in model.pool_names:
                if name in config.strategies:
                    add(
                        method_label(name, "best"),
                        res.best_pool_rmse[pool_cols[name]],
                    )
            if "flat" in config.strategies or "hier" in config.strategies:
                add("best[all]", res.best_all_rmse)
    return FoldOutcome(fold, records, tested, tuned, model.pool_sizes(), warnings)


def run_experiment(cohort: list[PatientSeries], config: RunConfig) -> ExperimentReport:
    """Cross-validated evaluation of every configured strategy.

    The cohort is split into ``config.folds`` outer folds; each fold serves
    once as the test set while the rest builds clusterings and expert pools
    and tunes the IR-optimal learning rates.  Deterministic for a fixed
    (cohort, config) pair.
    """
    ids = [s.patient_id for s in cohort]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids in cohort")
    dims = {s.d for s in cohort}
    if len(dims) > 1:
        raise ValueError(f"mixed field dimensions in cohort: {sorted(dims)}")
    if dims and dims != {config.d}:
        raise ValueError(
            f"cohort dimension {dims.pop()} does not match configured d={config.d}"
        )
    short = [s.patient_id for s in cohort if s.length < 3]
    if short:
        raise ValueError(f"patients with fewer than 3 observations: {short[:5]}")
    if len(cohort) < config.folds:
        raise ValueError(f"{len(cohort)} patients cannot form {config.folds} folds")

    fold_indices = outer_fold_indices(len(cohort), config.folds, config.seed)

    outcomes = Parallel(n_jobs=config.n_jobs, prefer="processes")(
        delayed(_run_fold)(cohort, idx, config, fold)
        for fold, idx in enumerate(fold_indices)
    )

    records: list[EvaluationRecord] = []
    tested: dict[str, int] = {}
    warnings: list[str] = []
    tuned_etas = []
    pool_sizes = []
    curve_sums: dict[str, dict[int, np.ndarray]] = {}
    curve_folds = 0
    grid = config.grid
    for outcome in outcomes:
        records.extend(outcome.records)
        tested.update(outcome.tested)
        warnings.extend(outcome.warnings)
        if outcome.pool_sizes:
            pool_sizes.append(outcome.pool_sizes)
        if outcome.tuned is not None:
            tuned_etas.append(outcome.tuned.etas)
            curve_folds += 1
            for s, per_n in outcome.tuned.curves.items():
                dest = curve_sums.setdefault(s, {})
                for n, arr in per_n.items():
                    dest[n] = dest.get(n, 0.0) + arr
    if not any(o.records for o in outcomes):
        raise RuntimeError("every outer fold was skipped; no results")

    tuning_curves = {
        s: {n: arr / curve_folds for n, arr in per_n.items()}
        for s, per_n in curve_sums.items()
    } if curve_folds else {}

    ir_curves = assemble_ir_curves(records, tested, config.n_range)
    pvalues = compute_pvalues(records, config.n_range)
    return ExperimentReport(
        config=config,
        records=records,
        tested=tested,
        ir_curves=ir_curves,
        tuned_etas=tuned_etas,
        tuning_curves=tuning_curves,
        pvalues=pvalues,
        pool_sizes=pool_sizes,
        grid=grid,
        warnings=warnings,
    )


def assemble_ir_curves(
    records: list[EvaluationRecord],
    tested: dict[str, int],
    n_range: tuple[int, int],
) -> dict[str, dict[int, IrPoint]]:
    """IR per method label and n, counting too-short patients as a_i = 0."""
    by_method: dict[str, dict[int, list[EvaluationRecord]]] = {}
    for rec in records:
        by_method.setdefault(rec.method, {}).setdefault(rec.n, []).append(rec)
    n_lo, n_hi = n_range
    curves: dict[str, dict[int, IrPoint]] = {}
    for label, by_n in by_method.items():
        curve = {}
        for n in range(n_lo, n_hi + 1):
            recs = list(by_n.get(n, []))
            for pid, length in tested.items():
                if n >= length:
                    recs.append(
                        EvaluationRecord(pid, n, label, math.nan, math.nan, length)
                    )
            curve[n] = improvement_rate(recs, n)
        curves[label] = curve
    return curves


def compute_pvalues(
    records: list[EvaluationRecord], n_range: tuple[int, int]
) -> dict:
    """One-sided binomial tests: each method against the patient-wise LR
    baseline, plus hierarchical against flat at matching eta choices."""
    n_lo, n_hi = n_range
    by_key: dict[tuple[str, int], dict[str, EvaluationRecord]] = {}
    labels: list[str] = []
    for rec in records:
        if rec.method not in labels:
            labels.append(rec.method)
        by_key.setdefault((rec.method, rec.n), {})[rec.patient_id] = rec

    def tally(pairs) -> dict:
        wins = losses = ties = 0
        for ours, theirs in pairs:
            if abs(ours - theirs) <= RMSE_TIE_TOL:
                ties += 1
            elif ours < theirs:
                wins += 1
            else:
                losses += 1
        p = binomial_test(wins, losses) if wins + losses > 0 else None
        return {"wins": wins, "losses": losses, "ties": ties, "p": p}

    vs_baseline = {}
    for label in labels:
        per_n = {}
        for n in range(n_lo, n_hi + 1):
            recs = by_key.get((label, n))
            if not recs:
                continue
            per_n[n] = tally(
                (r.rmse_method, r.rmse_lr_baseline) for r in recs.values()
            )
        vs_baseline[label] = per_n

    pairs = {}
    for choice in ("ir", "rg", "fix"):
        ours_label = method_label("hier", choice)
        theirs_label = method_label("flat", choice)
        per_n = {}
        for n in range(n_lo, n_hi + 1):
            ours = by_key.get((ours_label, n))
            theirs = by_key.get((theirs_label, n))
            if not ours or not theirs:
                continue
            joint = [
                (ours[pid].rmse_method, theirs[pid].rmse_method)
                for pid in ours
                if pid in theirs
            ]
            if joint:
                per_n[n] = tally(joint)
        if per_n:
            pairs[f"{ours_label}_vs_{theirs_label}"] = per_n

    return {"vs_baseline": vs_baseline, "pairs": pairs}
