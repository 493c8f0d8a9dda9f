"""Practical TPO: win-rate UCB over source policies plus preference-based policy optimization.

Each block starts from the current learning policy ``pi_ol``.  Every step picks
an arm (a source policy or ``pi_ol`` itself) by UCB on its empirical win rate
against ``pi_ol``, collects one comparison against ``pi_ol`` and, at the end
of the block, fits ``pi_ol`` to the block's comparisons with DPO, IPO or XPO.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .core import (
    BanditInstance,
    BestOfN,
    InvalidInputError,
    PolicyTable,
    PreferenceDataset,
    PreferenceSample,
    RewardTable,
    bon_distribution,
    closed_form_policy,
    policy_value,
    probs_of,
)
from .env import PreferenceEnv, RegretTracker, RunResult

ONLINE = -1
PO_KINDS = ("dpo", "ipo", "xpo")


def arm_tag(arm: int) -> str:
    return "online" if arm == ONLINE else f"source:{arm}"


@dataclass
class UcbState:
    """Per-block arm statistics.  Arm ``-1`` is the learning policy itself.

    The default ``c_ucb`` makes ``c_ucb * sqrt(log(1/delta))`` equal to 1.
    """

    num_sources: int
    c_ucb: float | None = None
    delta: float = 0.1
    wr_self: float = 0.5
    counts: np.ndarray = field(default=None, repr=False)
    wins: np.ndarray = field(default=None, repr=False)
    online_count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError("delta must lie in (0, 1)")
        if self.c_ucb is None:
            self.c_ucb = 1.0 / math.sqrt(math.log(1.0 / self.delta))
        if self.c_ucb < 0:
            raise InvalidInputError("c_ucb must be nonnegative")
        self.reset()

    def reset(self) -> None:
        self.counts = np.zeros(self.num_sources, dtype=int)
        self.wins = np.zeros(self.num_sources)
        self.online_count = 0

    def win_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.wins / np.maximum(self.counts, 1), np.nan)

    def scores(self) -> np.ndarray:
        """UCB score per source (``inf`` when unsampled)."""
        bonus = self.c_ucb * np.sqrt(math.log(1.0 / self.delta) / np.maximum(self.counts, 1))
        return np.where(self.counts > 0, self.win_rates() + bonus, np.inf)

    def update(self, arm: int, y: int) -> None:
        if arm == ONLINE:
            self.online_count += 1
        else:
            self.counts[arm] += 1
            self.wins[arm] += y

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.online_count


def ucb_select(state: UcbState) -> tuple[int, float]:
    """Arm with the largest score; ties go to the online arm, then the lowest source id."""
    best_arm, best = ONLINE, state.wr_self
    for w, score in enumerate(state.scores()):
        if score > best:
            best_arm, best = w, float(score)
    return best_arm, float(best)


# ---------------------------------------------------------------------------
# Policy optimization


@dataclass(frozen=True)
class PairBatch:
    """Index arrays of a block's comparisons: state, winner, loser, comparator response."""

    s: np.ndarray
    winner: np.ndarray
    loser: np.ndarray
    a_tilde: np.ndarray

    @classmethod
    def from_dataset(cls, data: PreferenceDataset) -> "PairBatch":
        if len(data) == 0:
            raise InvalidInputError("policy optimization needs a non-empty block")
        rows = np.array([(x.s, x.winner, x.loser, x.a_tilde) for x in data], dtype=int)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])

    def __len__(self) -> int:
        return self.s.size


def po_loss_and_grad(kind: str, logits: np.ndarray, ref: np.ndarray, batch: PairBatch,
                     beta_po: float, alpha_xpo: float = 0.0, ipo_tau: float | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its exact gradient with respect to ``logits``.

    The winner/loser log-ratio margin is
    ``h = log pi(w)/ref(w) - log pi(l)/ref(l)``; its gradient is ``e_w - e_l``
    because the softmax normalizer cancels.
    """
    logp = log_softmax(logits, axis=1)
    lr = logp - np.log(ref)
    s, w, l = batch.s, batch.winner, batch.loser
    margin = lr[s, w] - lr[s, l]
    n = len(batch)
    if kind in ("dpo", "xpo"):
        z = beta_po * margin
        loss = float(np.mean(np.logaddexp(0.0, -z)))
        coef = -beta_po * expit(-z) / n
    elif kind == "ipo":
        tau = beta_po if ipo_tau is None else ipo_tau
        resid = margin - 1.0 / (2.0 * tau)
        loss = float(np.mean(resid**2))
        coef = 2.0 * resid / n
    else:
        raise InvalidInputError(f"unknown optimizer {kind!r}; choose from {PO_KINDS}")
    grad = np.zeros_like(logits)
    np.add.at(grad, (s, w), coef)
    np.add.at(grad, (s, l), -coef)
    if kind == "xpo" and alpha_xpo:
        # optimism: penalize likelihood of the comparator's responses
        at = batch.a_tilde
        loss += alpha_xpo * float(np.mean(logp[s, at]))
        probs = np.exp(logp)
        np.add.at(grad, (s, at), alpha_xpo / n)
        np.add.at(grad, s, -alpha_xpo / n * probs[s])
    return loss, grad


@dataclass(frozen=True)
class PolicyOptimizer:
    kind: str
    logits: np.ndarray
    learning_rate: float = 1.0
    steps: int = 100
    beta_po: float = 0.1
    alpha_xpo: float = 0.05
    ipo_tau: float | None = None  # None: use beta_po

    def __post_init__(self) -> None:
        if self.kind not in PO_KINDS:
            raise InvalidInputError(f"unknown optimizer {self.kind!r}; choose from {PO_KINDS}")
        if self.beta_po <= 0:
            raise InvalidInputError("beta_po must be positive")
        if self.steps < 0 or self.learning_rate < 0:
            raise InvalidInputError("steps and learning_rate must be nonnegative")
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2 or not np.all(np.isfinite(logits)):
            raise InvalidInputError("logits must be a finite 2-D array")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @classmethod
    def from_policy(cls, kind: str, pi, **kw) -> "PolicyOptimizer":
        return cls(kind, np.log(probs_of(pi)), **kw)

    def policy(self) -> PolicyTable:
        return PolicyTable(softmax(self.logits, axis=1))

    def loss_and_grad(self, ref, batch: PairBatch, logits: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        return po_loss_and_grad(self.kind, self.logits if logits is None else logits, probs_of(ref), batch,
                                self.beta_po, self.alpha_xpo, self.ipo_tau)


def po_update(opt: PolicyOptimizer, pi_ref, block_data: PreferenceDataset) -> PolicyOptimizer:
    """``opt.steps`` full-batch gradient steps on the block's comparisons."""
    batch = PairBatch.from_dataset(block_data)
    logits = np.array(opt.logits)
    for _ in range(opt.steps):
        _, grad = opt.loss_and_grad(pi_ref, batch, logits)
        logits -= opt.learning_rate * grad
    logits -= logits.max(axis=1, keepdims=True)
    return replace(opt, logits=logits)


# ---------------------------------------------------------------------------
# Runs


@dataclass(frozen=True)
class EmpiricalConfig:
    K: int
    N: int
    c_ucb: float | None = None
    delta: float = 0.1
    wr_self: float = 0.5
    use_bon: bool = False
    n_bon: int = 32

    def __post_init__(self) -> None:
        if self.K < 1 or self.N < 1:
            raise InvalidInputError("K and N must be at least 1")
        if self.n_bon < 1:
            raise InvalidInputError("n_bon must be at least 1")

    @property
    def T(self) -> int:
        return self.K * self.N


WR_SELF_PRESETS = {"default": 0.5, "experiment": 0.55}


@dataclass
class SelectionRow:
    block: int
    inner: int
    arm_tag: str
    ucb_score: float
    y: int

    def to_dict(self) -> dict:
        return {"block": self.block, "inner": self.inner, "arm_tag": self.arm_tag,
                "ucb_score": self.ucb_score, "y": self.y}


SELECTION_FIELDS = ["block", "inner", "arm_tag", "ucb_score", "y"]


def selection_csv(rows: Sequence[SelectionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SELECTION_FIELDS)
    for r in rows:
        w.writerow([r.block, r.inner, r.arm_tag, repr(float(r.ucb_score)), r.y])
    return buf.getvalue()


def selection_shares(rows: Sequence[SelectionRow], num_sources: int, K: int) -> np.ndarray:
    """``(K, W + 1)`` per-block selection frequencies; column 0 is the online arm."""
    counts = np.zeros((K, num_sources + 1))
    for r in rows:
        col = 0 if r.arm_tag == "online" else int(r.arm_tag.split(":")[1]) + 1
        counts[r.block - 1, col] += 1
    return counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)


def empirical_tpo_run(cfg: EmpiricalConfig, sources: Sequence, inst: BanditInstance, opt: PolicyOptimizer,
                      seed: int, *, prompt_seed: int | None = None) -> RunResult:
    sources = [r if isinstance(r, RewardTable) else RewardTable(r) for r in sources]
    for r in sources:
        if r.shape != inst.pi_ref.shape:
            raise InvalidInputError("source reward shape mismatch")
    if opt.logits.shape != inst.pi_ref.shape:
        raise InvalidInputError("optimizer logits do not match the instance")
    env = PreferenceEnv(inst, seed, prompt_seed)
    tracker = RegretTracker(inst)
    W = len(sources)
    exact_sources = [closed_form_policy(r, inst) for r in sources]
    for w, p in enumerate(exact_sources):
        tracker.register(f"src:{w}", p)
    opt = replace(opt, logits=np.log(inst.ref))  # the learning policy starts at pi_ref
    pi_ol = inst.pi_ref
    ucb = UcbState(W, cfg.c_ucb, cfg.delta, cfg.wr_self)
    log: list[SelectionRow] = []
    tau = 0
    for k in range(1, cfg.K + 1):
        ol_tag = f"ol:{k}"
        tracker.register(ol_tag, pi_ol)
        if cfg.use_bon:
            samplers = [BestOfN(pi_ol, r, cfg.n_bon) for r in sources]
            for w, r in enumerate(sources):
                tracker.register(f"bon:{w}:{k}", bon_distribution(pi_ol, r, cfg.n_bon))
        ucb.reset()
        block = PreferenceDataset(inst.num_states, inst.num_actions)
        for n in range(1, cfg.N + 1):
            tau += 1
            arm, score = ucb_select(ucb)
            s = env.prompt()
            if arm == ONLINE:
                a, tag = env.act(pi_ol, s), ol_tag
            elif cfg.use_bon:
                a, tag = samplers[arm].sample(s, env.rng), f"bon:{arm}:{k}"
            else:
                a, tag = env.act(exact_sources[arm], s), f"src:{arm}"
            a_tilde = env.act(pi_ol, s)
            y = env.label(s, a, a_tilde)
            block.append(PreferenceSample(s, a, a_tilde, y, arm_tag(arm), ol_tag))
            ucb.update(arm, y)
            log.append(SelectionRow(k, n, arm_tag(arm), score, y))
            tracker.record(tau, k, n, "online" if arm == ONLINE else "source", arm, tag)
        opt = po_update(opt, inst.pi_ref, block)
        pi_ol = opt.policy()
    return RunResult(tracker.rows, log, pi_ol, tracker.tables, tracker.step_tags,
                     meta={"algorithm": "empirical-tpo", "seed": seed, "K": cfg.K, "N": cfg.N,
                           "optimizer": opt.kind, "use_bon": cfg.use_bon,
                           "final_gap": tracker.j_star - _value(pi_ol, inst)})


def _value(pi, inst: BanditInstance) -> float:
    return float(policy_value(pi, inst.r_star, inst))
