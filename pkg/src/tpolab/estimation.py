"""Preference likelihoods, MLE reward fitting and the RPO minimax learner."""

from __future__ import annotations

import math
import warnings
from functools import lru_cache
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize, minimize_scalar
from scipy.special import expit

from .core import (
    BanditInstance,
    InvalidInputError,
    PolicyClass,
    PolicyTable,
    PreferenceDataset,
    RewardTable,
    expected_reward,
    induced_rewards,
    kl_divergence,
    probs_of,
    values_of,
)


def _softplus(x):
    return np.logaddexp(0.0, x)


def nll_loss(r, data: PreferenceDataset) -> float | np.ndarray:
    """Average Bradley-Terry negative log-likelihood of ``data`` under ``r``.

    ``r`` may be a batch ``(M, S, A)``, in which case one loss per reward is
    returned.  Only the count tensors of ``data`` are touched, so the cost does
    not grow with ``len(data)``.
    """
    if len(data) == 0:
        raise InvalidInputError("nll_loss needs a non-empty dataset")
    v = values_of(r)
    diff = v[..., :, :, None] - v[..., :, None, :]
    # -log sigma(d) = softplus(-d)
    total = np.sum(data.wins * _softplus(-diff) + data.losses * _softplus(diff), axis=(-3, -2, -1))
    out = total / len(data)
    return float(out) if np.ndim(out) == 0 else out


def class_rewards(cls: PolicyClass, inst: BanditInstance) -> np.ndarray:
    """The induced reward class as an ``(M, S, A)`` array, aligned with ``cls``."""
    return _class_tables(cls, inst)[0]


@lru_cache(maxsize=64)
def _class_tables(cls: PolicyClass, inst: BanditInstance):
    # both types hash by identity and are immutable, so caching per pair is safe
    if len(cls) == 0:
        raise InvalidInputError("empty policy class")
    rewards = induced_rewards(cls.stack, inst)
    rewards.setflags(write=False)
    diff = rewards[:, :, :, None] - rewards[:, :, None, :]
    M = rewards.shape[0]
    return rewards, _softplus(-diff).reshape(M, -1), _softplus(diff).reshape(M, -1)


def class_losses(cls: PolicyClass, data: PreferenceDataset, inst: BanditInstance) -> np.ndarray:
    """``nll_loss`` of every induced reward in the class, one per member."""
    if len(data) == 0:
        raise InvalidInputError("nll_loss needs a non-empty dataset")
    _, lose_if_win, lose_if_loss = _class_tables(cls, inst)
    return (lose_if_win @ data.wins.ravel() + lose_if_loss @ data.losses.ravel()) / len(data)


def mle_index(cls: PolicyClass, data: PreferenceDataset, inst: BanditInstance) -> tuple[int, np.ndarray]:
    losses = class_losses(cls, data, inst)
    return _argmin_by_id(losses, cls), losses


def _argmin_by_id(values: np.ndarray, cls: PolicyClass) -> int:
    best = np.flatnonzero(values == values.min())
    return int(min(best, key=lambda i: cls.ids[i]))


def mle_reward(cls: PolicyClass, data: PreferenceDataset, inst: BanditInstance) -> RewardTable:
    i, _ = mle_index(cls, data, inst)
    return RewardTable(class_rewards(cls, inst)[i])


def hellinger_sq_bt(r1, r2, s: int, a: int, a_tilde: int) -> float:
    v1, v2 = values_of(r1), values_of(r2)
    p1 = expit(v1[s, a] - v1[s, a_tilde])
    p2 = expit(v2[s, a] - v2[s, a_tilde])
    return float(max(0.0, 1.0 - math.sqrt(p1 * p2) - math.sqrt((1 - p1) * (1 - p2))))


def expected_hellinger_sq(r1, r2, pi, inst: BanditInstance) -> float:
    """``E_{s~rho, a~pi, a'~pi_ref}`` of the squared Hellinger distance between BT labels."""
    v1, v2 = values_of(r1), values_of(r2)
    p1 = expit(v1[:, :, None] - v1[:, None, :])
    p2 = expit(v2[:, :, None] - v2[:, None, :])
    h = 1.0 - np.sqrt(p1 * p2) - np.sqrt((1 - p1) * (1 - p2))
    return float(np.einsum("s,sa,sb,sab->", inst.rho, probs_of(pi), inst.ref, np.maximum(h, 0.0)))


def value_vs_ref(pi, r, inst: BanditInstance) -> float | np.ndarray:
    """``E_pi[r] - E_ref[r] - beta KL(pi || ref)``; equals ``J(pi) - J(ref)`` when ``r = r*``."""
    p = probs_of(pi)
    return (expected_reward(p, r, inst.rho) - expected_reward(inst.ref, r, inst.rho)
            - inst.beta * kl_divergence(p, inst.ref, inst.rho))


def default_eta(n_data: int, class_size: int, delta: float, r_max: float, *,
                form: str = "fixed", c: float = 1.0, horizon: int | None = None) -> float:
    """RPO trade-off weight.

    ``"fixed"``: ``(1+e^R)^-2 sqrt(24 log(|Pi|/delta) / |D|)``.
    ``"horizon"``: ``c (1+e^R)^-2 sqrt(log(|Pi| T/delta) / |D|)``.
    """
    if n_data <= 0:
        raise InvalidInputError("eta needs a non-empty dataset")
    scale = (1.0 + math.exp(r_max)) ** -2
    if form == "fixed":
        return scale * math.sqrt(24.0 * math.log(class_size / delta) / n_data)
    if form == "horizon":
        if horizon is None:
            raise InvalidInputError("horizon eta needs the horizon T")
        return c * scale * math.sqrt(math.log(class_size * horizon / delta) / n_data)
    raise InvalidInputError(f"unknown eta form {form!r}")


@dataclass
class RpoSolution:
    pi_dstl: PolicyTable
    r_dstl: RewardTable
    inner_min_value: float
    mode: str
    mixture_weights: np.ndarray
    converged: bool = True
    member_index: int | None = None
    reward_index: int = 0
    fw_gap: float = 0.0
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "pi_dstl": self.pi_dstl.tolist(),
            "mixture_weights": np.asarray(self.mixture_weights).tolist(),
            "r_dstl": self.r_dstl.tolist(),
            "mode": self.mode,
            "converged": bool(self.converged),
        }


RPO_FORMS = ("value", "literal")


def _advantages(stack: np.ndarray, rewards: np.ndarray, inst: BanditInstance) -> np.ndarray:
    """``adv[i, j] = E_{rho, pi_i}[r_j] - E_{rho, ref}[r_j]``."""
    return (np.einsum("s,isa,jsa->ij", inst.rho, stack, rewards)
            - np.einsum("s,sa,jsa->j", inst.rho, inst.ref, rewards)[None, :])


@lru_cache(maxsize=64)
def _class_geometry(cls: PolicyClass, inst: BanditInstance):
    # data-independent parts of the RPO table
    adv = _advantages(cls.stack, class_rewards(cls, inst), inst)
    kl = np.atleast_1d(kl_divergence(cls.stack, inst.ref, inst.rho))
    adv.setflags(write=False)
    kl.setflags(write=False)
    return adv, kl


def _kl_weight(inst: BanditInstance, eta: float, form: str) -> float:
    if form == "value":
        return eta * inst.beta
    if form == "literal":
        return inst.beta
    raise InvalidInputError(f"unknown RPO objective form {form!r}; choose from {RPO_FORMS}")


def rpo_objective_table(cls: PolicyClass, data: PreferenceDataset, inst: BanditInstance, eta: float,
                        rewards: np.ndarray | None = None, form: str = "value") -> np.ndarray:
    """``F[i, j]`` = RPO objective of policy ``i`` against reward ``j``.

    ``form="value"`` (default) is ``L(r) + eta * (E_pi[r] - E_ref[r] - beta KL)``,
    i.e. ``eta`` times the regularized value estimate plus ``L / eta``; this is
    the objective whose optimality drives the distilled-policy guarantee.
    ``form="literal"`` weights only the advantage by ``eta`` and keeps
    ``- beta KL`` unscaled, which collapses to ``pi_ref`` as ``eta -> 0``.
    """
    if rewards is None:
        losses = class_losses(cls, data, inst)
        adv, kl = _class_geometry(cls, inst)
    else:
        losses = np.atleast_1d(nll_loss(rewards, data))
        adv, kl = _advantages(cls.stack, rewards, inst), np.atleast_1d(kl_divergence(cls.stack, inst.ref, inst.rho))
    return losses[None, :] + eta * adv - _kl_weight(inst, eta, form) * kl[:, None]


def rpo_solve(cls: PolicyClass, data: PreferenceDataset, inst: BanditInstance, eta: float,
              mode: str = "enumerate", max_iter: int = 500, tol: float = 1e-8, form: str = "value") -> RpoSolution:
    """Pessimistic offline learner: ``argmax_pi min_r`` of the objective in :func:`rpo_objective_table`."""
    if eta <= 0:
        raise InvalidInputError("eta must be positive")
    if len(cls) == 0:
        raise InvalidInputError("empty policy class")
    rewards = class_rewards(cls, inst)
    table = rpo_objective_table(cls, data, inst, eta, None, form)
    inner = table.min(axis=1)
    i = _argmin_by_id(-inner, cls)
    j = int(np.flatnonzero(table[i] == inner[i])[0])
    weights = np.zeros(len(cls))
    weights[i] = 1.0
    if mode == "enumerate":
        return RpoSolution(cls[i], RewardTable(rewards[j]), float(inner[i]), mode, weights,
                           member_index=i, reward_index=j)
    if mode != "mixture":
        raise InvalidInputError(f"unknown RPO mode {mode!r}")
    return _rpo_frank_wolfe(cls, data, inst, eta, rewards, weights, max_iter, tol, _kl_weight(inst, eta, form))


def _rpo_frank_wolfe(cls, data, inst, eta, rewards, weights, max_iter, tol, beta) -> RpoSolution:
    """Frank-Wolfe for ``max_lam min_j f_j(lam)`` with every piece linearized.

    The direction vertex maximizes the pointwise min of the linearized pieces
    (a small LP), so the method does not stall on kinks of ``g``.  By
    concavity that LP value upper-bounds ``max g``, which makes the reported
    gap a certified optimality gap.
    """
    stack = cls.stack
    M = len(cls)
    losses = class_losses(cls, data, inst)
    rho, ref = inst.rho, inst.ref
    adv = _class_geometry(cls, inst)[0]

    def pieces(lam):
        mix = np.tensordot(lam, stack, axes=1)
        kl = kl_divergence(mix, ref, rho)
        return losses + eta * (lam @ adv) - beta * kl, mix

    def g(lam):
        return pieces(lam)[0].min()

    # LP in (v, t): max t  s.t.  t - grad_j . v <= vals_j - grad_j . lam,  v in the simplex
    c = np.r_[np.zeros(M), -1.0]
    a_eq = np.r_[np.ones(M), 0.0][None, :]
    bounds = [(0.0, None)] * M + [(None, None)]

    def grads_at(lam, mix):
        log_ratio = np.log(mix) - np.log(ref)
        kl_grad = np.einsum("s,isa,sa->i", rho, stack, log_ratio + 1.0)
        return eta * adv.T - beta * kl_grad[None, :]  # [j, i] = d f_j / d lam_i

    def certified_gap(lam, vals, mix, best):
        grads = grads_at(lam, mix)
        lp = linprog(c, A_ub=np.c_[-grads, np.ones(M)], b_ub=vals - grads @ lam, A_eq=a_eq, b_eq=[1.0],
                     bounds=bounds, method="highs")
        return (max(float(-lp.fun - best), 0.0), lp.x[:M]) if lp.success else (np.inf, None)

    lam = weights.copy()
    vals, mix = pieces(lam)
    best = vals.min()
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        gap, vertex = certified_gap(lam, vals, mix, best)
        if vertex is None or gap < tol:
            break
        direction = np.clip(vertex, 0.0, None)
        direction = direction / direction.sum() - lam
        res = minimize_scalar(lambda t: -g(lam + t * direction), bounds=(0.0, 1.0), method="bounded",
                              options={"xatol": 1e-12})
        cand = np.clip(lam + float(res.x) * direction, 0.0, None)
        cand /= cand.sum()
        cand_val = g(cand)
        if cand_val <= best:
            break
        lam, best = cand, cand_val
        vals, mix = pieces(lam)
    if not gap < tol:
        # polish the slow Frank-Wolfe tail on the epigraph form: max t s.t. f_j(lam) >= t
        def neg_t(z):
            return -z[-1]

        cons = [{"type": "ineq", "fun": lambda z: pieces(np.clip(z[:M], 1e-300, None))[0] - z[-1],
                 "jac": lambda z: np.c_[grads_at(z[:M], pieces(np.clip(z[:M], 1e-300, None))[1]), -np.ones(M)]},
                {"type": "eq", "fun": lambda z: z[:M].sum() - 1.0, "jac": lambda z: a_eq[0]}]
        res = minimize(neg_t, np.r_[lam, best], jac=lambda z: c, constraints=cons, bounds=bounds, method="SLSQP",
                       options={"maxiter": 200, "ftol": 1e-14})
        cand = np.clip(res.x[:M], 0.0, None)
        cand /= cand.sum()
        cand_val = g(cand)
        if cand_val > best:
            lam, best = cand, cand_val
            vals, mix = pieces(lam)
            gap = certified_gap(lam, vals, mix, best)[0]
    converged = gap < tol
    if not converged:
        warnings.warn(f"RPO Frank-Wolfe stopped with gap {gap:.2e} after {it} iterations", RuntimeWarning)
    vals, mix = pieces(lam)
    j = int(np.argmin(vals))
    return RpoSolution(PolicyTable(mix / mix.sum(axis=1, keepdims=True)), RewardTable(rewards[j]),
                       float(vals.min()), "mixture", lam, converged=converged, reward_index=j,
                       fw_gap=float(gap), iterations=it)
