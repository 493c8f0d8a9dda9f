"""Block-structured transfer policy optimization with value-based source selection.

Each block of ``N`` steps spends its first ``floor(alpha * N)`` steps on a
no-regret online oracle and the rest on the transfer policy chosen by
:func:`tps_select`: optimistic value estimates for source-optimal policies,
a pessimistic one for the policy distilled from all data, pick the largest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    BanditInstance,
    InvalidInputError,
    PolicyClass,
    PolicyTable,
    PreferenceDataset,
    PreferenceSample,
    RewardTable,
    closed_form_policy,
    policy_value,
    coverage_coefficient,
    probs_of,
    values_of,
)
from .env import PreferenceEnv, RegretTracker, RunResult
from .estimation import (
    RpoSolution,
    class_losses,
    class_rewards,
    default_eta,
    mle_index,
    nll_loss,
    rpo_solve,
    value_vs_ref,
)

ORACLES = ("optimistic-mle", "xpo-like")
# TPS constants: "literal" keeps the theoretical ones, "desk" shrinks them for short horizons
TPS_PRESETS = {
    "literal": {},
    "desk": {"bonus_scale": 0.003, "c_bonus": 0.01, "eta_form": "horizon"},
}


def default_alpha(r_max: float, beta: float, block_size: int) -> float:
    """``exp(-R/beta)`` clamped to ``[1/N, 1 - 1/N]``."""
    lo, hi = 1.0 / block_size, 1.0 - 1.0 / block_size
    return float(min(max(math.exp(-r_max / beta), lo), hi))


@dataclass(frozen=True)
class OracleParams:
    kind: str = "optimistic-mle"
    c_ol: float = 0.02
    alpha_xpo: float = 0.05
    delta: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in ORACLES:
            raise InvalidInputError(f"unknown oracle {self.kind!r}; choose from {ORACLES}")


@dataclass(frozen=True)
class TpoConfig:
    T: int
    N: int
    alpha: float
    delta: float = 0.1
    c_bonus: float = 1.0
    sources: tuple = ()
    oracle: OracleParams = field(default_factory=OracleParams)
    bonus_scale: float = 1.0
    eta_form: str = "fixed"
    rpo_mode: str = "enumerate"
    rpo_form: str = "value"
    cache_tps: bool = False

    def __post_init__(self) -> None:
        if self.T <= 0 or self.N <= 0 or self.T % self.N:
            raise InvalidInputError("T must be a positive multiple of N")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in (0, 1)")
        if math.floor(self.alpha * self.N) < 1:
            raise InvalidInputError("alpha * N must be at least 1")
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError("delta must lie in (0, 1)")
        object.__setattr__(self, "sources",
                           tuple(r if isinstance(r, RewardTable) else RewardTable(r) for r in self.sources))

    @property
    def K(self) -> int:
        return self.T // self.N

    @property
    def W(self) -> int:
        return len(self.sources)

    @property
    def online_steps(self) -> int:
        return math.floor(self.alpha * self.N)

    def check_sources(self, inst: BanditInstance) -> None:
        for r in self.sources:
            if r.shape != inst.pi_ref.shape or not r.in_range(inst.r_max):
                raise InvalidInputError("source rewards must match the instance and lie in [0, r_max]")


def block_indices(tau: int, N: int) -> tuple[int, int]:
    """1-based ``(k, n)`` of step ``tau``: ``k = ceil(tau/N)``, ``n = ((tau-1) mod N) + 1``."""
    return -(-tau // N), (tau - 1) % N + 1


def source_tag(w: int) -> str:
    return f"source:{w}"


# ---------------------------------------------------------------------------
# Online oracle


def online_oracle_index(history: PreferenceDataset, cls: PolicyClass, inst: BanditInstance,
                        params: OracleParams = OracleParams()) -> int:
    """Position in ``cls`` of the next exploration policy, or -1 for ``pi_ref`` on cold start."""
    if len(history) == 0:
        return -1
    rewards = class_rewards(cls, inst)
    losses = class_losses(cls, history, inst)
    stack = cls.stack
    if params.kind == "xpo-like":
        # optimism: prefer policies unlikely to produce the reference comparators
        counts = history.comparator_counts()
        ref_loglik = np.einsum("sa,isa->i", counts, np.log(stack)) / len(history)
        # the optimism weight decays like 1/sqrt(n), the anytime form of a horizon-tuned alpha
        score = -(losses + params.alpha_xpo / math.sqrt(len(history)) * ref_loglik)
    else:
        i_mle = int(min(np.flatnonzero(losses == losses.min()), key=lambda i: cls.ids[i]))
        mix = history.mixture()
        if mix is None:
            mix = inst.ref
        cov = np.atleast_1d(coverage_coefficient(stack, mix, inst.rho))
        bonus = params.c_ol * math.exp(2 * inst.r_max) * np.sqrt(
            cov / len(history) * math.log(len(cls) / params.delta))
        score = np.atleast_1d(value_vs_ref(stack, rewards[i_mle], inst)) + bonus
    best = np.flatnonzero(score == score.max())
    return int(min(best, key=lambda i: cls.ids[i]))


def online_oracle_step(history: PreferenceDataset, cls: PolicyClass, inst: BanditInstance,
                       params: OracleParams = OracleParams()) -> PolicyTable:
    i = online_oracle_index(history, cls, inst, params)
    return inst.pi_ref if i < 0 else cls[i]


# ---------------------------------------------------------------------------
# Transfer policy selection


@dataclass
class TransferChoice:
    kind: str
    source_id: int | None
    chosen_policy: PolicyTable
    estimated_values: list[tuple[str, float]]
    member_index: int | None = None
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "kind": self.kind,
            "source_id": self.source_id,
            "member_index": self.member_index,
            "estimated_values": [[tag, float(v)] for tag, v in self.estimated_values],
        }


def source_bonus(n_w: int, cfg: TpoConfig, class_size: int, r_max: float) -> float:
    if n_w == 0:
        return math.inf
    log_term = math.log(class_size * max(cfg.W, 1) * cfg.T / cfg.delta)
    return cfg.bonus_scale * 16.0 * math.exp(2 * r_max) * math.sqrt(log_term / n_w)


def distilled_penalty(n_data: int, cfg: TpoConfig, class_size: int, r_max: float) -> float:
    return 2.0 * cfg.c_bonus * math.exp(2 * r_max) * math.sqrt(math.log(class_size * cfg.T / cfg.delta) / n_data)


def rpo_eta(n_data: int, cfg: TpoConfig, class_size: int, r_max: float) -> float:
    return default_eta(n_data, class_size, cfg.delta, r_max, form=cfg.eta_form, c=cfg.c_bonus, horizon=cfg.T)


def tps_select(data: PreferenceDataset, cfg: TpoConfig, cls: PolicyClass, inst: BanditInstance, *,
               exact: bool = False, source_policies: Sequence | None = None) -> TransferChoice:
    """Select the transfer policy by estimated value gain over ``pi_ref``.

    With ``exact=True`` every estimate is replaced by the true ``J(pi) - J(pi_ref)``
    and no bonus or penalty is applied (a noise-free reference mode).
    """
    if len(data) == 0:
        raise InvalidInputError("transfer selection needs data")
    M, R = len(cls), inst.r_max
    if source_policies is None:
        source_policies = [closed_form_policy(r, inst) for r in cfg.sources]
    i_mle, losses = mle_index(cls, data, inst)
    rewards = class_rewards(cls, inst)
    r_mle = rewards[i_mle]

    sol: RpoSolution = rpo_solve(cls, data, inst, rpo_eta(len(data), cfg, M, R), mode=cfg.rpo_mode, form=cfg.rpo_form)
    if exact:
        v_dstl = float(value_vs_ref(sol.pi_dstl, inst.r_star, inst))
    else:
        eta = rpo_eta(len(data), cfg, M, R)
        v_dstl = (float(value_vs_ref(sol.pi_dstl, sol.r_dstl, inst))
                  + (nll_loss(sol.r_dstl, data) - losses[i_mle]) / eta
                  - distilled_penalty(len(data), cfg, M, R))
    estimates = [("distilled", v_dstl)]
    for w, pw in enumerate(source_policies):
        if exact:
            v = float(value_vs_ref(pw, inst.r_star, inst))
        else:
            v = float(value_vs_ref(pw, r_mle, inst)) + source_bonus(data.count(source_tag(w)), cfg, M, R)
        estimates.append((source_tag(w), v))

    values = [v for _, v in estimates]
    best = int(np.argmax(values))  # first maximum: distilled, then lowest source id
    if best == 0:
        return TransferChoice("distilled", None, sol.pi_dstl, estimates, member_index=sol.member_index)
    w = best - 1
    return TransferChoice("source", w, source_policies[w], estimates)


# ---------------------------------------------------------------------------
# Runs


def _check_class(cls: PolicyClass, inst: BanditInstance) -> None:
    if len(cls) == 0:
        raise InvalidInputError("empty policy class")
    if cls.stack.shape[1:] != inst.pi_ref.shape:
        raise InvalidInputError("policy class does not match the instance")


def _collect(env: PreferenceEnv, pi, producer: str, comparator_table, comparator: str):
    s = env.prompt()
    a = env.act(pi, s)
    a_tilde = env.act(comparator_table, s)
    y = env.label(s, a, a_tilde)
    return PreferenceSample(s, a, a_tilde, y, producer, comparator)


def tpo_run(cfg: TpoConfig, cls: PolicyClass, inst: BanditInstance, seed: int, *,
            prompt_seed: int | None = None) -> RunResult:
    _check_class(cls, inst)
    cfg.check_sources(inst)
    env = PreferenceEnv(inst, seed, prompt_seed)
    tracker = RegretTracker(inst)
    S, A = inst.num_states, inst.num_actions
    data = PreferenceDataset(S, A)
    data_ol = PreferenceDataset(S, A)
    source_policies = [closed_form_policy(r, inst) for r in cfg.sources]
    for w, pw in enumerate(source_policies):
        tracker.register(f"src:{w}", pw)
    tracker.register("ref", inst.pi_ref)
    for i, m in enumerate(cls):
        tracker.register(f"cls:{cls.ids[i]}", m)
    log: list[TransferChoice] = []
    cached: TransferChoice | None = None
    mixture_ids = 0

    for tau in range(1, cfg.T + 1):
        k, n = block_indices(tau, cfg.N)
        if n <= cfg.online_steps:
            i = online_oracle_index(data_ol, cls, inst, cfg.oracle)
            pi = inst.pi_ref if i < 0 else cls[i]
            kind, pid = "online", (-1 if i < 0 else cls.ids[i])
            tag = "ref" if i < 0 else f"cls:{pid}"
            producer = "online"
        else:
            if cached is not None and cfg.cache_tps and cached.step > (k - 1) * cfg.N:
                choice = cached
            elif len(data) == 0:
                choice = TransferChoice("source", 0, source_policies[0], []) if source_policies else None
            else:
                choice = tps_select(data, cfg, cls, inst, source_policies=source_policies)
            if choice is None:  # no data and no sources: nothing to distill yet
                pi, kind, pid, tag, producer = inst.pi_ref, "distilled", -1, "ref", "distilled"
            else:
                if choice is not cached:
                    choice.step = tau
                    log.append(choice)
                cached = choice
                pi = choice.chosen_policy
                if choice.kind == "source":
                    kind, pid, tag, producer = "source", choice.source_id, f"src:{choice.source_id}", source_tag(choice.source_id)
                elif choice.member_index is not None:
                    pid = cls.ids[choice.member_index]
                    kind, tag, producer = "distilled", f"cls:{pid}", "distilled"
                else:
                    mixture_ids += 1
                    kind, pid, tag, producer = "distilled", -1, f"dstl:{mixture_ids}", "distilled"
                    tracker.register(tag, pi)
        sample = _collect(env, pi, producer, inst.ref, "ref")
        data.append(sample, pi)
        if producer == "online":
            data_ol.append(sample, pi)
        tracker.record(tau, k, n, kind, pid, tag)

    final = rpo_solve(cls, data, inst, rpo_eta(len(data), cfg, len(cls), inst.r_max), mode=cfg.rpo_mode, form=cfg.rpo_form)
    return RunResult(tracker.rows, log, final.pi_dstl, tracker.tables, tracker.step_tags,
                     meta={"algorithm": "tpo", "seed": seed, "T": cfg.T, "N": cfg.N, "alpha": cfg.alpha,
                           "final_gap": tracker.j_star - _value(final.pi_dstl, inst)})


def _value(pi, inst: BanditInstance) -> float:
    return float(policy_value(pi, inst.r_star, inst))


def online_run(T: int, cls: PolicyClass, inst: BanditInstance, seed: int, *, N: int | None = None,
               oracle: OracleParams = OracleParams(), prompt_seed: int | None = None) -> RunResult:
    """Pure online learning: the oracle alone for ``T`` steps (the no-transfer baseline)."""
    _check_class(cls, inst)
    N = N or T
    env = PreferenceEnv(inst, seed, prompt_seed)
    tracker = RegretTracker(inst)
    tracker.register("ref", inst.pi_ref)
    for i, m in enumerate(cls):
        tracker.register(f"cls:{cls.ids[i]}", m)
    data = PreferenceDataset(inst.num_states, inst.num_actions)
    for tau in range(1, T + 1):
        k, n = block_indices(tau, N)
        i = online_oracle_index(data, cls, inst, oracle)
        pi = inst.pi_ref if i < 0 else cls[i]
        pid = -1 if i < 0 else cls.ids[i]
        data.append(_collect(env, pi, "online", inst.ref, "ref"), pi)
        tracker.record(tau, k, n, "online", pid, "ref" if i < 0 else f"cls:{pid}")
    final = online_oracle_step(data, cls, inst, oracle)
    return RunResult(tracker.rows, [], final, tracker.tables, tracker.step_tags,
                     meta={"algorithm": "online-only", "seed": seed, "T": T,
                           "final_gap": tracker.j_star - _value(final, inst)})


def fixed_transfer_run(T: int, source: RewardTable, w: int, inst: BanditInstance, seed: int, *,
                       N: int | None = None, prompt_seed: int | None = None) -> RunResult:
    """Plays the source-optimal policy of ``source`` at every step (the pure-exploit baseline)."""
    N = N or T
    env = PreferenceEnv(inst, seed, prompt_seed)
    tracker = RegretTracker(inst)
    pw = closed_form_policy(source, inst)
    tracker.register(f"src:{w}", pw)
    for tau in range(1, T + 1):
        k, n = block_indices(tau, N)
        _collect(env, pw, source_tag(w), inst.ref, "ref")
        tracker.record(tau, k, n, "source", w, f"src:{w}")
    return RunResult(tracker.rows, [], pw, tracker.tables, tracker.step_tags,
                     meta={"algorithm": f"transfer-fixed:{w}", "seed": seed, "T": T,
                           "final_gap": tracker.j_star - _value(pw, inst)})
