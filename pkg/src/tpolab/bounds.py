"""Numerical evaluators for coverage, value-gap and win-rate inequalities.

Each public check returns a :class:`BoundReport`.  The ``*_terms`` helpers
evaluate both sides for a whole batch of policies at once and are what the
large random sweeps use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from .core import (
    BanditInstance,
    InvalidInputError,
    PolicyClass,
    coverage_coefficient,
    closed_form_policy,
    kl_divergence,
    linf_coverability,
    log_ratio_bound,
    pairwise_prob_matrix,
    policy_value,
    probs_of,
    values_of,
)

SATISFY_TOL = 1e-9
GAMMA_GRID = np.logspace(-3, 4, 71)


@dataclass
class BoundReport:
    bound_name: str
    lhs: float
    rhs: float
    kind: str = "upper"  # "upper": lhs <= rhs; "lower": lhs >= rhs
    params: dict = field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        if self.kind == "upper":
            return self.lhs <= self.rhs + SATISFY_TOL
        return self.lhs >= self.rhs - SATISFY_TOL

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs if self.kind == "upper" else self.lhs - self.rhs

    def row(self) -> list:
        return [self.bound_name, repr(float(self.lhs)), repr(float(self.rhs)), repr(float(self.slack)),
                str(self.satisfied).lower()]


REPORT_FIELDS = ["bound_name", "lhs", "rhs", "slack", "satisfied"]


# ---------------------------------------------------------------------------
# kappa


def kappa(x: float) -> float:
    """``(x-1)^2 / (x-1-log x)``; tends to 2 as ``x -> 1+``."""
    x = float(x)
    if not np.isfinite(x):
        raise InvalidInputError("kappa needs a finite argument")
    if x < 1.0:
        raise InvalidInputError(f"kappa is defined for x >= 1, got {x}")
    u = x - 1.0
    if u < 1e-6:
        # x - 1 - log x = u^2/2 - u^3/3 + u^4/4 - ...
        return 1.0 / (0.5 - u / 3.0 + u * u / 4.0 - u**3 / 5.0)
    return u * u / (u - math.log1p(u))


def kappa_array(x) -> np.ndarray:
    return np.vectorize(kappa, otypes=[float])(x)


# ---------------------------------------------------------------------------
# coverage vs value gap


def cov_gap_terms(pis, inst: BanditInstance) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of ``Cov(pi*|pi) <= 1 + kappa(e^{2R/beta}) (J* - J(pi)) / beta`` for a batch."""
    p = probs_of(pis)
    star = inst.optimal_policy().probs
    lhs = coverage_coefficient(star, p, inst.rho)
    gap = inst.optimal_value() - policy_value(p, inst.r_star, inst)
    rhs = 1.0 + kappa(math.exp(2 * inst.r_max / inst.beta)) * gap / inst.beta
    return np.asarray(lhs), np.asarray(rhs)


def cov_gap_upper_bound(pi, inst: BanditInstance) -> BoundReport:
    limit = inst.r_max / inst.beta
    if log_ratio_bound(pi, inst) > limit + 1e-12:
        raise InvalidInputError(f"policy violates the ratio bound |log pi/ref| <= {limit:g}")
    lhs, rhs = cov_gap_terms(pi, inst)
    return BoundReport("cov_gap", float(lhs), float(rhs), "upper",
                       {"beta": inst.beta, "r_max": inst.r_max})


# ---------------------------------------------------------------------------
# coverage vs reward error


def _exp_objective(b: float, diff: np.ndarray, star: np.ndarray, inst: BanditInstance) -> float:
    inner = np.sum(star * np.exp(np.abs(diff - b) / inst.beta), axis=1)
    return float(inner**2 @ inst.rho)


def cov_exp_upper_bound(r, inst: BanditInstance, grid_points: int = 401) -> BoundReport:
    """``Cov(pi*|pi*_r) <= min_b E_rho[(E_{pi*} exp(|r* - r - b| / beta))^2]``."""
    v = values_of(r)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("reward must be finite")
    star = inst.optimal_policy().probs
    lhs = float(coverage_coefficient(star, closed_form_policy(v, inst), inst.rho))
    diff = inst.r_star.values - v
    R = inst.r_max
    grid = np.linspace(-R, R, grid_points)
    vals = np.array([_exp_objective(b, diff, star, inst) for b in grid])
    i = int(np.argmin(vals))
    b_best, best = grid[i], vals[i]
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    if hi > lo:
        res = minimize_scalar(_exp_objective, bounds=(lo, hi), args=(diff, star, inst), method="bounded",
                              options={"xatol": 1e-12})
        if res.fun < best:
            b_best, best = float(res.x), float(res.fun)
    return BoundReport("cov_exp", lhs, best, "upper", {"beta": inst.beta, "r_max": R, "b": b_best})


# ---------------------------------------------------------------------------
# coverage vs win rate


def _best_over_gamma(fn, grid: np.ndarray, maximize: bool) -> tuple[float, float]:
    """Optimize ``fn(gamma)`` on ``grid`` then refine between the grid neighbours in log-space."""
    vals = fn(grid)
    sign = -1.0 if maximize else 1.0
    i = int(np.argmin(sign * vals))
    g_best, best = float(grid[i]), float(vals[i])
    if grid.size > 1:
        lo, hi = math.log(grid[max(i - 1, 0)]), math.log(grid[min(i + 1, grid.size - 1)])
        res = minimize_scalar(lambda t: sign * float(fn(np.array([math.exp(t)]))[0]), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-10})
        cand = sign * float(res.fun)
        if sign * cand < sign * best:
            g_best, best = math.exp(float(res.x)), cand
    return best, g_best


def _bt_overlap(gamma: np.ndarray, p_win: float) -> np.ndarray:
    return np.sqrt((gamma + 2.0 * p_win) * np.log1p(1.0 / gamma))


def win_rate_cov_terms(pi, inst: BanditInstance, comparators: Sequence, gammas=GAMMA_GRID):
    """Per comparator and variant: ``(tag, rhs, gamma)``; the lhs is ``Cov(pi*|pi)``.

    Variant ``"bar_wins"`` uses ``P(bar_pi > pi)``, ``"pi_wins"`` uses ``P(pi > bar_pi)``.
    """
    p = probs_of(pi)
    pref = pairwise_prob_matrix(inst.r_star)
    j_star = inst.optimal_value()
    gammas = np.asarray(gammas, dtype=float)
    out = []
    for c, bar in enumerate(comparators):
        q = probs_of(bar)
        gap = max(j_star - float(policy_value(q, inst.r_star, inst)), 0.0)
        second = math.sqrt(gap / (2.0 * inst.beta))
        for variant, p_win in (("bar_wins", _pair_win(q, p, pref, inst)), ("pi_wins", _pair_win(p, q, pref, inst))):
            rhs, g = _best_over_gamma(lambda gm: 1.0 / (_bt_overlap(gm, p_win) + second), gammas, maximize=True)
            out.append((f"{c}:{variant}", rhs, g))
    return out


def _pair_win(p: np.ndarray, q: np.ndarray, pref: np.ndarray, inst: BanditInstance) -> float:
    return float(np.einsum("s,sa,sb,sab->", inst.rho, p, q, pref))


def default_comparators(inst: BanditInstance, sources: Sequence = (), mixture=None) -> list:
    comps = [inst.optimal_policy()] + [closed_form_policy(r, inst) for r in sources]
    if mixture is not None:
        comps.append(mixture)
    return comps


def win_rate_cov_lower_bound(pi, inst: BanditInstance, comparators: Sequence | None = None, *,
                             gammas=GAMMA_GRID, sources: Sequence = (), mixture=None) -> BoundReport:
    """``Cov(pi*|pi) >= max_{gamma, bar_pi} [sqrt((gamma + 2P) log((1+gamma)/gamma)) + sqrt(gap(bar_pi)/(2 beta))]^-1``."""
    if comparators is None:
        comparators = default_comparators(inst, sources, mixture)
    if len(comparators) == 0:
        raise InvalidInputError("at least one comparator is required")
    lhs = float(coverage_coefficient(inst.optimal_policy(), pi, inst.rho))
    terms = win_rate_cov_terms(pi, inst, comparators, gammas)
    tag, rhs, g = max(terms, key=lambda t: t[1])
    return BoundReport("win_rate_cov", lhs, rhs, "lower",
                       {"beta": inst.beta, "r_max": inst.r_max, "gamma": g, "comparator": tag,
                        "gamma_grid": (float(np.min(gammas)), float(np.max(gammas)), int(np.size(gammas)))})


def tv_overlap_check(p, q, r, gammas=GAMMA_GRID) -> BoundReport:
    """Single-state step of the chain: ``1 - TV(p, q) <= min_gamma sqrt((gamma + 2 P(p > q)) log((1+gamma)/gamma))``."""
    p, q, v = (np.asarray(x, dtype=float).ravel() for x in (p, q, r))
    pref = expit(v[:, None] - v[None, :])
    p_win = float(p @ pref @ q)
    lhs = 1.0 - 0.5 * float(np.abs(p - q).sum())
    rhs, g = _best_over_gamma(lambda gm: _bt_overlap(gm, p_win), np.asarray(gammas, dtype=float), maximize=False)
    return BoundReport("tv_overlap", lhs, rhs, "upper", {"gamma": g})


# ---------------------------------------------------------------------------
# identities and scalar inequalities


def kl_value_identity_residual(pi, inst: BanditInstance) -> float:
    """``|[J(pi*) - J(pi)] - beta E_rho KL(pi || pi*)|``; zero up to rounding for every ``pi``."""
    gap = inst.optimal_value() - policy_value(pi, inst.r_star, inst)
    kl = kl_divergence(pi, inst.optimal_policy(), inst.rho)
    return np.abs(gap - inst.beta * kl)


def sigmoid_gap_terms(x, y, C: float) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if np.any(np.abs(x) > C) or np.any(np.abs(y) > C):
        raise InvalidInputError(f"inputs must lie in [-{C}, {C}]")
    return np.abs(x - y), 4.0 * math.exp(C) * np.abs(expit(x) - expit(y))


def sigmoid_gap_check(x: float, y: float, C: float) -> BoundReport:
    """``|x - y| <= 4 e^C |sigma(x) - sigma(y)|`` on ``[-C, C]``."""
    lhs, rhs = sigmoid_gap_terms(x, y, C)
    return BoundReport("sigmoid_gap", float(lhs), float(rhs), "upper", {"C": C})


# ---------------------------------------------------------------------------
# transfer diagnostic


def iota_diagnostic(trace, cls: PolicyClass, inst: BanditInstance, alpha: float,
                    steps: str = "transfer") -> list[tuple[int, float]]:
    """``R e^{2R} min(Cov(pi*|mix_tau), sqrt(Cov_inf)/alpha) / sqrt(tau)`` per step.

    ``mix_tau`` is the uniform mixture of the policies executed at steps
    ``1..tau``.  Log factors are set to 1, so only trends are meaningful.
    """
    if not 0.0 < alpha <= 1.0:
        raise InvalidInputError("alpha must lie in (0, 1]")
    star = inst.optimal_policy().probs
    cap = math.sqrt(linf_coverability(cls)) / alpha
    scale = inst.r_max * math.exp(2 * inst.r_max)
    mix_sum = np.zeros_like(star)
    out = []
    for tau, (row, tag) in enumerate(zip(trace.regret_trace, trace.step_tags), start=1):
        if tag not in trace.tables:
            raise InvalidInputError(f"unresolvable policy tag {tag!r} at step {tau}")
        mix_sum += trace.tables[tag]
        if steps == "transfer" and row.policy_kind == "online":
            continue
        cov = float(coverage_coefficient(star, mix_sum / tau, inst.rho))
        out.append((tau, scale * min(cov, cap) / math.sqrt(tau)))
    return out


def instance_bound_reports(inst: BanditInstance, sources: Sequence = (), cls: PolicyClass | None = None) -> list[BoundReport]:
    """Every bound evaluated at the natural policies of an instance (reference, sources, class members)."""
    reports = []
    candidates = [("ref", inst.ref)] + [(f"source:{w}", closed_form_policy(r, inst).probs) for w, r in enumerate(sources)]
    if cls is not None:
        candidates += [(f"class:{i}", m.probs) for i, m in zip(cls.ids, cls)]
    limit = inst.r_max / inst.beta
    for name, p in candidates:
        if log_ratio_bound(p, inst) <= limit + 1e-12:
            rep = cov_gap_upper_bound(p, inst)
            rep.bound_name = f"cov_gap[{name}]"
            reports.append(rep)
        rep = win_rate_cov_lower_bound(p, inst, sources=sources)
        rep.bound_name = f"win_rate_cov[{name}]"
        reports.append(rep)
        residual = float(kl_value_identity_residual(p, inst))
        reports.append(BoundReport(f"kl_value_identity[{name}]", residual, 1e-10, "upper"))
    for w, r in enumerate(sources):
        rep = cov_exp_upper_bound(r, inst)
        rep.bound_name = f"cov_exp[source:{w}]"
        reports.append(rep)
    return reports
