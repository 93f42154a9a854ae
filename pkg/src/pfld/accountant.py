"""Renyi-DP accounting for the sampled Gaussian mechanism.

Noise multipliers are sensitivity-normalised: a mechanism adding
N(0, (sigma * Delta)^2) to a function of sensitivity Delta is accounted with
``sigma``.
"""

from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammaln, logsumexp

PRIMAL = "primal"
DUAL = "dual"

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75, *map(float, range(2, 65)), 128.0, 256.0)

SIGMA_BOUNDS = (0.3, 1e4)


class AccountingError(ValueError):
    pass


def _log_l(x: np.ndarray, q: float, sigma: float) -> np.ndarray:
    """log of the likelihood ratio (1-q) + q exp((2x-1)/(2 sigma^2))."""
    return np.logaddexp(math.log1p(-q), math.log(q) + (2 * x - 1) / (2 * sigma**2))


def _log_gauss_moment(q: float, sigma: float, power: float) -> float:
    """log E_{x~N(0,sigma^2)}[L(x)^power] by adaptive quadrature around the mode."""

    def log_f(x):
        return -(x**2) / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi)) + power * _log_l(x, q, sigma)

    reach = 40.0 * sigma + 2.0
    grid = np.linspace(-reach, max(power, 1.0) + reach, 40001)
    lg = log_f(grid)
    shift = float(lg.max())
    peak = float(grid[np.argmax(lg)])
    alive = grid[lg - shift > -80.0]
    lo, hi = float(alive.min()), float(alive.max())
    val, _ = integrate.quad(
        lambda x: math.exp(float(log_f(np.float64(x))) - shift),
        lo,
        hi,
        points=[peak],
        limit=500,
        epsabs=0.0,
        epsrel=1e-12,
    )
    return math.log(val) + shift


def _rdp_integer(q: float, sigma: float, order: int) -> float:
    k = np.arange(order + 1, dtype=np.float64)
    log_terms = (
        gammaln(order + 1)
        - gammaln(k + 1)
        - gammaln(order - k + 1)
        + k * math.log(q)
        + (order - k) * math.log1p(-q)
        + k * (k - 1) / (2 * sigma**2)
    )
    return float(logsumexp(log_terms)) / (order - 1)


def _rdp_fractional(q: float, sigma: float, order: float) -> float:
    forward = _log_gauss_moment(q, sigma, order) / (order - 1)
    backward = _log_gauss_moment(q, sigma, 1.0 - order) / (order - 1)
    return max(forward, backward, 0.0)


@functools.lru_cache(maxsize=65536)
def rdp_sampled_gaussian(q: float, sigma: float, order: float) -> float:
    """RDP epsilon at ``order`` of one sampled Gaussian step.

    q = 1 is the plain Gaussian mechanism, order / (2 sigma^2). For q < 1 an
    integer order uses the binomial expansion of the mixture moment in log
    space; a fractional order takes the larger of the two divergence
    directions, each computed by quadrature.
    """
    if order <= 1:
        raise AccountingError(f"Renyi order must exceed 1, got {order}")
    if not 0 < q <= 1:
        raise AccountingError(f"sampling ratio must lie in (0, 1], got {q}")
    if sigma < 0:
        raise AccountingError("noise multiplier must be nonnegative")
    if sigma == 0:
        return math.inf
    if q == 1.0:
        return order / (2 * sigma**2)
    if float(order).is_integer():
        return max(_rdp_integer(q, sigma, int(order)), 0.0)
    return _rdp_fractional(q, sigma, float(order))


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    epsilons: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.epsilons):
            raise AccountingError("orders and epsilons differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise AccountingError("orders must be strictly increasing")

    @classmethod
    def of_mechanism(cls, q: float, sigma: float, orders=DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), tuple(rdp_sampled_gaussian(q, sigma, a) for a in orders))


def to_dp(curve: RdpCurve, delta: float) -> float:
    return to_dp_with_order(curve, delta)[0]


def to_dp_with_order(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """min over orders of eps(a) + log(1/delta)/(a-1), and the minimising order."""
    if not 0 < delta < 1:
        raise AccountingError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise AccountingError("empty RDP curve")
    orders = np.asarray(curve.orders)
    eps = np.asarray(curve.epsilons) + math.log(1 / delta) / (orders - 1)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders[best])


@dataclass
class PrivacyLedger:
    """Accumulated RDP of every accounted step.

    Steps are logged as counts per (kind, q, sigma); the curve is the
    count-weighted sum of per-step curves, so it never drifts from the log.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    steps: dict[tuple[str, float, float], int] = field(default_factory=dict)
    sensitivities: list[dict] = field(default_factory=list)

    def compose(self, kind: str, q: float, sigma: float, steps: int = 1) -> "PrivacyLedger":
        if steps < 0:
            raise AccountingError("steps must be nonnegative")
        if kind not in (PRIMAL, DUAL):
            raise AccountingError(f"unknown mechanism kind {kind!r}")
        key = (kind, float(q), float(sigma))
        self.steps[key] = self.steps.get(key, 0) + steps
        return self

    def record_sensitivity(self, kind: str, delta: float, min_group_size: int, reported_fraction: float) -> None:
        self.sensitivities.append(
            {
                "kind": kind,
                "delta": delta,
                "min_group_size": int(min_group_size),
                "reported_fraction": reported_fraction,
            }
        )

    def step_count(self, kind: str | None = None) -> int:
        return sum(c for (k, _, _), c in self.steps.items() if kind is None or k == kind)

    def curve(self) -> RdpCurve:
        total = np.zeros(len(self.orders))
        for (_, q, sigma), count in self.steps.items():
            if count:
                total += count * np.asarray(RdpCurve.of_mechanism(q, sigma, self.orders).epsilons)
        return RdpCurve(tuple(self.orders), tuple(total.tolist()))

    def epsilon(self, delta: float) -> float:
        return to_dp(self.curve(), delta)

    def to_dict(self, delta: float | None = None) -> dict:
        curve = self.curve()
        out = {
            "orders": list(curve.orders),
            "rdp": list(curve.epsilons),
            "steps": [
                {"kind": k, "q": q, "sigma": s, "count": c} for (k, q, s), c in sorted(self.steps.items())
            ],
        }
        if delta is not None:
            eps, order = to_dp_with_order(curve, delta)
            out.update({"delta": delta, "epsilon": eps, "best_order": order})
        return out

    def to_json(self, delta: float | None = None) -> str:
        return json.dumps(self.to_dict(delta), indent=2)


def compose(ledger: PrivacyLedger, kind: str, q: float, sigma: float, steps: int = 1) -> PrivacyLedger:
    return ledger.compose(kind, q, sigma, steps)


def _epsilon_for(sigma, delta, q_primal, primal_steps, dual_steps, dual_ratio, orders):
    ledger = PrivacyLedger(orders=orders)
    if primal_steps:
        ledger.compose(PRIMAL, q_primal, sigma, primal_steps)
    if dual_steps:
        ledger.compose(DUAL, 1.0, dual_ratio * sigma, dual_steps)
    return ledger.epsilon(delta)


@functools.lru_cache(maxsize=1024)
def calibrate_sigma(
    target_epsilon: float,
    delta: float,
    q_primal: float,
    primal_steps: int,
    dual_steps: int,
    dual_ratio: float = 1.0,
    orders: tuple[float, ...] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Noise multipliers (sigma_p, sigma_d) spending just under ``target_epsilon``.

    The split policy is ``sigma_d = dual_ratio * sigma_p``; the shared scale
    is found by bisection in log space so that the composed ledger converts
    to an epsilon in [0.99 target, target].
    """
    if not (0 < target_epsilon < math.inf):
        raise AccountingError("target epsilon must be positive and finite")
    if primal_steps < 0 or dual_steps < 0:
        raise AccountingError("step counts must be nonnegative")
    if dual_ratio <= 0:
        raise AccountingError("dual_ratio must be positive")
    lo, hi = SIGMA_BOUNDS
    eps = functools.partial(
        _epsilon_for,
        delta=delta,
        q_primal=q_primal,
        primal_steps=primal_steps,
        dual_steps=dual_steps,
        dual_ratio=dual_ratio,
        orders=orders,
    )
    if eps(hi) > target_epsilon:
        raise AccountingError(
            f"epsilon={target_epsilon} unattainable with noise multiplier <= {hi}"
        )
    if eps(lo) <= target_epsilon:
        warnings.warn(f"budget not binding: the minimum multiplier {lo} already meets epsilon={target_epsilon}")
        return lo, dual_ratio * lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        e = eps(mid)
        if e > target_epsilon:
            lo = mid
        else:
            hi = mid
            if e >= 0.99 * target_epsilon:
                break
    return hi, dual_ratio * hi
