"""Effect-estimation error and convergence diagnostics on training traces.

The bound checks take their constants (gradient bounds, loss drop,
smoothness, PL constant) from the very trace they evaluate, so they are
self-consistency diagnostics, not independent predictions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .federation import TrainingTrace


@dataclass
class EffectEstimates:
    tau_hat: np.ndarray
    tau_true: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tau_hat = np.asarray(self.tau_hat, dtype=np.float64)
        if self.tau_true is not None:
            self.tau_true = np.asarray(self.tau_true, dtype=np.float64)
            if self.tau_true.shape != self.tau_hat.shape:
                raise ValueError(
                    f"tau_hat has shape {self.tau_hat.shape}, tau_true {self.tau_true.shape}"
                )


def _require_truth(est: EffectEstimates) -> None:
    if est.tau_true is None:
        raise ValueError("ground-truth effects are required")
    if est.tau_hat.size == 0:
        raise ValueError("no estimates")


def pehe(est: EffectEstimates) -> float:
    """Root mean squared error of per-sample effects."""
    _require_truth(est)
    return float(np.sqrt(np.mean((est.tau_hat - est.tau_true) ** 2)))


def ate_error(est: EffectEstimates) -> float:
    _require_truth(est)
    return float(abs(np.mean(est.tau_hat) - np.mean(est.tau_true)))


def grad_norm_trace(trace: TrainingTrace, client_id: int) -> list[tuple[float, float]]:
    """Per-round squared norms ``(shared, private)`` of the client's gradient."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    return [
        (float(r.grad_shared @ r.grad_shared), float(r.grad_private @ r.grad_private))
        for r in trace.client_records(client_id)
    ]


def running_min_shared_sq_norm(trace: TrainingTrace, client_id: int) -> np.ndarray:
    return np.minimum.accumulate(np.array([s for s, _ in grad_norm_trace(trace, client_id)]))


@dataclass
class ConvergenceConstants:
    A: float
    B: float
    M: float
    beta_smooth: float
    mu_pl: float | None
    eta: float
    best_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_constants(
    trace: TrainingTrace, client_id: int, optimum_proxy: float | None = None
) -> ConvergenceConstants:
    """Run-estimated constants for one client.

    ``optimum_proxy`` (e.g. the best loss from a longer shadow run) lowers the
    best-loss estimate used as a stand-in for the optimum.
    """
    records = trace.client_records(client_id)
    if not records:
        raise ValueError("empty trace")
    losses = np.array([r.loss.total for r in records])
    g_shared = [r.grad_shared for r in records]
    g_private = [r.grad_private for r in records]
    grads = [np.concatenate([s, p]) for s, p in zip(g_shared, g_private)]
    params = [r.params for r in records]

    A = max(float(np.linalg.norm(g)) for g in g_shared)
    B = max(float(np.linalg.norm(g)) for g in g_private)
    M = float(losses[0] - losses.min())

    beta = 0.0
    for t in range(len(records) - 1):
        step = float(np.linalg.norm(params[t + 1] - params[t]))
        if step > 0:
            beta = max(beta, float(np.linalg.norm(grads[t + 1] - grads[t])) / step)

    best = float(losses.min())
    if optimum_proxy is not None:
        best = min(best, float(optimum_proxy))
    ratios = [
        float(g @ g) / (2.0 * (loss - best)) for g, loss in zip(grads, losses) if loss > best
    ]
    mu = min(ratios) if ratios else None
    return ConvergenceConstants(A, B, M, beta, mu, trace.eta, best)


def gradient_bound_rhs(c: ConvergenceConstants, rounds: int) -> float:
    """``2 (A + B) sqrt(M beta / (2 T))``."""
    if rounds < 1:
        raise ValueError("T must be >= 1")
    return 2.0 * (c.A + c.B) * math.sqrt(c.M * c.beta_smooth / (2.0 * rounds))


def bound_step_size(c: ConvergenceConstants, rounds: int) -> float | None:
    """Step size ``sqrt(2M / (beta T (A + B)^2))`` at which the gradient bound is attained."""
    denom = c.beta_smooth * rounds * (c.A + c.B) ** 2
    return math.sqrt(2.0 * c.M / denom) if denom > 0 else None


@dataclass
class BoundReport:
    lhs: float | None
    rhs: float | None
    satisfied: bool | None
    status: str
    constants: dict = field(default_factory=dict)
    notes: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def theorem1_check(
    trace: TrainingTrace, client_id: int, constants: ConvergenceConstants | None = None
) -> BoundReport:
    """``min_t ||grad_shared_t||^2 <= 2 (A + B) sqrt(M beta / 2T)``."""
    T = len(trace)
    if T == 0:
        raise ValueError("T must be >= 1")
    c = constants if constants is not None else estimate_constants(trace, client_id)
    lhs = min(s for s, _ in grad_norm_trace(trace, client_id))
    rhs = gradient_bound_rhs(c, T)
    d = c.to_dict()
    d["bound_step_size"] = bound_step_size(c, T)
    return BoundReport(lhs, rhs, bool(lhs <= rhs), "ok", d)


def theorem2_check(
    trace: TrainingTrace,
    client_id: int,
    constants: ConvergenceConstants | None = None,
    optimum_proxy: float | None = None,
) -> BoundReport:
    """``L_final - L_best <= (2 (A + B) / mu) sqrt(M beta / 2T)``, with ``L_best`` proxying the optimum."""
    T = len(trace)
    if T == 0:
        raise ValueError("T must be >= 1")
    c = constants if constants is not None else estimate_constants(trace, client_id, optimum_proxy)
    notes = "optimum proxied by best observed loss"
    if c.mu_pl is None or c.mu_pl <= 0:
        return BoundReport(None, None, None, "not_estimable", c.to_dict(), notes + "; PL constant undefined")
    final = trace.client_records(client_id)[-1].loss.total
    lhs = float(final - c.best_loss)
    rhs = gradient_bound_rhs(c, T) / c.mu_pl
    return BoundReport(lhs, rhs, bool(lhs <= rhs), "ok", c.to_dict(), notes)
