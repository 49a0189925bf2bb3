"""Exponentially weighted aggregation of expert predictions.

Weights decay exponentially in cumulative normalized loss.  The batch rule
assigns each expert ``exp(-eta * cumulative_loss)`` from unit initial
weights, which equals the telescoped product of the online multiplicative
update; the two differ only in which weights are in force while the
forecaster replays the observed prefix (the ``update`` switch of the
hierarchical strategy).

Two aggregation strategies operate over per-method expert pools:

* flat: one weighting over the union of all experts;
* hierarchical: each pool is aggregated into an intermediate predictor,
  and a second weighting over the intermediates gives the prediction, so
  a small pool keeps the same initial voice as a large one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LOSS_SCALE, clamp_field
from .experts import ExpertPool


@dataclass(frozen=True)
class WeightState:
    """Weights and cumulative losses of N experts at a fixed learning rate."""

    weights: np.ndarray
    cumulative_losses: np.ndarray
    eta: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        c = np.asarray(self.cumulative_losses, dtype=np.float64)
        if w.ndim != 1 or w.shape != c.shape or w.shape[0] < 1:
            raise ValueError("weight state needs matching 1-D weights and losses")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if not (0.0 < total < np.inf):
            raise ValueError("weight sum must be positive and finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "cumulative_losses", c)

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()


@dataclass(frozen=True)
class RegretLedger:
    """Cumulative forecaster loss against per-expert cumulative losses."""

    forecaster_loss_sum: float
    per_expert_loss_sums: np.ndarray
    rounds: int


def uniform_state(n_experts: int, eta: float) -> WeightState:
    if n_experts < 1:
        raise ValueError("need at least one expert")
    return WeightState(np.ones(n_experts), np.zeros(n_experts), eta)


def aggregate_prediction(state: WeightState, predictions) -> np.ndarray:
    """Weight-normalized average of expert predictions.

    ``predictions`` stacks N rows of D components; the result is a convex
    combination, so every component stays inside the experts' hull.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 1:
        preds = preds[:, None]
    if preds.shape[0] != state.n_experts:
        raise ValueError(
            f"{preds.shape[0]} predictions for {state.n_experts} experts"
        )
    total = state.weights.sum()
    if total <= 0.0:
        raise ValueError("all expert weights are zero (numerical underflow)")
    return (state.weights @ preds) / total


def online_update(state: WeightState, losses) -> WeightState:
    """One multiplicative update: w_i <- w_i * exp(-eta * loss_i)."""
    ls = np.asarray(losses, dtype=np.float64)
    if ls.shape != state.weights.shape:
        raise ValueError("loss vector does not match expert count")
    new_weights = state.weights * np.exp(-state.eta * ls)
    return WeightState(new_weights, state.cumulative_losses + ls, state.eta)


def batch_weights(loss_matrix, eta: float) -> WeightState:
    """Weights exp(-eta * cumulative loss) from a full (rounds, N) loss matrix.

    Cumulative losses are shifted by their minimum before exponentiation;
    the shift cancels on normalization and prevents underflow at large
    eta * loss.
    """
    ls = np.asarray(loss_matrix, dtype=np.float64)
    if ls.ndim != 2:
        raise ValueError("loss matrix must be 2-D (rounds x experts)")
    cum = ls.sum(axis=0)
    weights = np.exp(-eta * (cum - cum.min()))
    return WeightState(weights, cum, eta)


def rg_optimal_eta(n_experts: int, rounds: int) -> float:
    """Learning rate sqrt(8 ln N / n) minimizing the worst-case regret bound."""
    if n_experts < 1:
        raise ValueError("need at least one expert")
    if rounds < 1:
        raise ValueError("need at least one round")
    return math.sqrt(8.0 * math.log(n_experts) / rounds)


def regret(ledger: RegretLedger) -> float:
    """Forecaster cumulative loss minus the best expert's cumulative loss."""
    if ledger.rounds < 1:
        raise ValueError("regret over an empty ledger")
    return float(ledger.forecaster_loss_sum - ledger.per_expert_loss_sums.min())


def regret_bound(n_experts: int, rounds: int, eta: float) -> float:
    """Worst-case guarantee ln(N)/eta + eta*n/8 for losses in [0, 1]."""
    return math.log(n_experts) / eta + eta * rounds / 8.0


def run_online_rounds(expert_predictions, outcomes, eta: float) -> RegretLedger:
    """Replay the online forecaster over a sequence of rounds.

    ``expert_predictions`` has shape (rounds, N, D) and ``outcomes``
    (rounds, D).  Each round predicts with the current weights, scores the
    normalized loss against the outcome, then applies the multiplicative
    update.
    """
    preds = np.asarray(expert_predictions, dtype=np.float64)
    outs = np.asarray(outcomes, dtype=np.float64)
    rounds, n_experts, d = preds.shape
    state = uniform_state(n_experts, eta)
    scale = LOSS_SCALE * math.sqrt(d)
    forecaster_sum = 0.0
    for t in range(rounds):
        forecast = aggregate_prediction(state, preds[t])
        forecaster_sum += float(np.linalg.norm(forecast - outs[t]) / scale)
        losses = np.linalg.norm(preds[t] - outs[t][None, :], axis=1) / scale
        state = online_update(state, losses)
    return RegretLedger(forecaster_sum, state.cumulative_losses, rounds)


# ---------------------------------------------------------------------------
# Pool-level prediction strategies
# ---------------------------------------------------------------------------


def expert_loss_matrix(slopes, intercepts, dates, fields) -> np.ndarray:
    """(rounds, N) normalized losses of clamped linear experts on a prefix."""
    slopes = np.asarray(slopes, dtype=np.float64)
    intercepts = np.asarray(intercepts, dtype=np.float64)
    dts = np.asarray(dates, dtype=np.float64)
    ys = np.asarray(fields, dtype=np.float64)
    d = slopes.shape[1]
    scale = LOSS_SCALE * math.sqrt(d)
    out = np.empty((dts.shape[0], slopes.shape[0]))
    for t, dt in enumerate(dts):
        preds = clamp_field(slopes * dt + intercepts)
        out[t] = np.linalg.norm(preds - ys[t][None, :], axis=1) / scale
    return out


def _stacked(pools: list[ExpertPool]) -> tuple[np.ndarray, np.ndarray]:
    slopes = np.concatenate([p.slopes for p in pools])
    intercepts = np.concatenate([p.intercepts for p in pools])
    return slopes, intercepts


def flat_predict(
    pools: list[ExpertPool], dates, fields, eta: float, target_date: float
) -> np.ndarray:
    """One exponentially weighted average over every expert of every pool.

    Weights come from the batch rule over the full prefix loss matrix; the
    prediction is the weighted average of clamped expert predictions at
    ``target_date``.  (The online telescoped product would give the same
    final weights.)
    """
    if not pools:
        raise ValueError("flat_predict: no expert pools")
    dts = np.asarray(dates, dtype=np.float64)
    if dts.size < 1:
        raise ValueError("flat_predict: empty prefix")
    slopes, intercepts = _stacked(pools)
    losses = expert_loss_matrix(slopes, intercepts, dts, fields)
    state = batch_weights(losses, eta)
    target_preds = clamp_field(slopes * target_date + intercepts)
    return aggregate_prediction(state, target_preds)


def prequential_cum_losses(loss_matrix: np.ndarray) -> np.ndarray:
    """Row t holds the losses accumulated strictly before round t."""
    ls = np.asarray(loss_matrix, dtype=np.float64)
    out = np.zeros_like(ls)
    if ls.shape[0] > 1:
        out[1:] = np.cumsum(ls[:-1], axis=0)
    return out


def _pool_intermediate(
    pool: ExpertPool, dates, fields, eta: float, target_date: float, update: str
) -> tuple[np.ndarray, np.ndarray]:
    """Level-1 aggregate of one pool.

    Returns (predictions at the prefix dates, prediction at the target).
    Under the batch rule the final weights are in force at every prefix
    date; under the online rule the prediction at date t uses only losses
    seen strictly before t.
    """
    slopes = pool.slopes
    intercepts = pool.intercepts
    dts = np.asarray(dates, dtype=np.float64)
    losses = expert_loss_matrix(slopes, intercepts, dts, fields)
    final = batch_weights(losses, eta)
    prefix_agg = np.empty((dts.shape[0], slopes.shape[1]))
    for t, dt in enumerate(dts):
        preds = clamp_field(slopes * dt + intercepts)
        if update == "batch":
            state = final
        else:
            cum = prequential_cum_losses(losses)[t]
            state = WeightState(np.exp(-eta * (cum - cum.min())), cum, eta)
        prefix_agg[t] = aggregate_prediction(state, preds)
    target_preds = clamp_field(slopes * target_date + intercepts)
    target_agg = aggregate_prediction(final, target_preds)
    return prefix_agg, target_agg


def hierarchical_predict(
    pools: list[ExpertPool],
    dates,
    fields,
    eta: float,
    target_date: float,
    *,
    level1_etas: list[float] | None = None,
    update: str = "batch",
) -> np.ndarray:
    """Two-level aggregation: within each pool, then across pools.

    Each pool is reduced to an intermediate predictor whose losses on the
    prefix feed a second batch weighting; both levels share ``eta`` unless
    per-pool ``level1_etas`` are given (used for the theoretical learning
    rate, which depends on the expert count of each level).
    """
    if not pools:
        raise ValueError("hierarchical_predict: no expert pools")
    if update not in ("batch", "online"):
        raise ValueError(f"unknown update mode {update!r}")
    if level1_etas is not None and len(level1_etas) != len(pools):
        raise ValueError("need one level-1 eta per pool")
    dts = np.asarray(dates, dtype=np.float64)
    if dts.size < 1:
        raise ValueError("hierarchical_predict: empty prefix")
    ys = np.asarray(fields, dtype=np.float64)
    d = ys.shape[1]
    scale = LOSS_SCALE * math.sqrt(d)

    prefix_stack = []
    target_stack = []
    for i, pool in enumerate(pools):
        eta1 = eta if level1_etas is None else level1_etas[i]
        prefix_agg, target_agg = _pool_intermediate(
            pool, dts, ys, eta1, target_date, update
        )
        prefix_stack.append(prefix_agg)
        target_stack.append(target_agg)

    # Level 2: the intermediates are themselves experts.
    inter_losses = np.stack(
        [np.linalg.norm(p - ys, axis=1) / scale for p in prefix_stack], axis=1
    )
    state = batch_weights(inter_losses, eta)
    return aggregate_prediction(state, np.stack(target_stack))
