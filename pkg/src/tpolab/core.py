"""Tabular KL-regularized contextual bandit: policies, rewards, preferences.

Every operation accepts either the wrapper types (``PolicyTable``,
``RewardTable``) or plain numpy arrays.  Array inputs may carry leading batch
dimensions, i.e. shape ``(..., S, A)``, which is how the random sweeps in the
test-suite evaluate thousands of policies at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.special import expit, xlogy

PROB_TOL = 1e-12


class InvalidInputError(ValueError):
    """Raised when an input violates a documented precondition."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Row-stochastic ``|S| x |A|`` matrix with strictly positive entries."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise InvalidInputError(f"policy must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidInputError("policy has non-finite entries")
        if not np.all(p > 0):
            raise InvalidInputError("policy entries must be strictly positive")
        sums = p.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > PROB_TOL:
            raise InvalidInputError(f"policy rows must sum to 1 (max error {np.max(np.abs(sums - 1)):.3e})")
        object.__setattr__(self, "probs", _frozen(p / sums[:, None]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def tolist(self) -> list[list[float]]:
        return self.probs.tolist()


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Finite ``|S| x |A|`` reward matrix."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InvalidInputError(f"reward must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("reward has non-finite entries")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def in_range(self, r_max: float, tol: float = 0.0) -> bool:
        return bool(np.all(self.values >= -tol) and np.all(self.values <= r_max + tol))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def tolist(self) -> list[list[float]]:
        return self.values.tolist()


def probs_of(pi) -> np.ndarray:
    if isinstance(pi, PolicyTable):
        return pi.probs
    return np.asarray(pi, dtype=float)


def values_of(r) -> np.ndarray:
    if isinstance(r, RewardTable):
        return r.values
    return np.asarray(r, dtype=float)


def validate_distribution(p, name: str = "distribution") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError(f"{name} must be finite and nonnegative")
    if abs(p.sum() - 1.0) > PROB_TOL:
        raise InvalidInputError(f"{name} must sum to 1 (got {p.sum():.15f})")
    return p / p.sum()


@dataclass(frozen=True, eq=False)
class BanditInstance:
    rho: np.ndarray
    pi_ref: PolicyTable
    beta: float
    r_max: float
    r_star: RewardTable

    def __post_init__(self) -> None:
        rho = validate_distribution(self.rho, "rho")
        object.__setattr__(self, "rho", _frozen(rho))
        if not isinstance(self.pi_ref, PolicyTable):
            object.__setattr__(self, "pi_ref", PolicyTable(self.pi_ref))
        if not isinstance(self.r_star, RewardTable):
            object.__setattr__(self, "r_star", RewardTable(self.r_star))
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise InvalidInputError("beta must be positive")
        if not (self.r_max > 0 and np.isfinite(self.r_max)):
            raise InvalidInputError("r_max must be positive")
        if self.pi_ref.shape[0] != rho.size or self.r_star.shape != self.pi_ref.shape:
            raise InvalidInputError("rho, pi_ref and r_star dimensions disagree")
        if not self.r_star.in_range(self.r_max):
            raise InvalidInputError("r_star must lie in [0, r_max]")
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def num_states(self) -> int:
        return self.pi_ref.shape[0]

    @property
    def num_actions(self) -> int:
        return self.pi_ref.shape[1]

    @property
    def ref(self) -> np.ndarray:
        return self.pi_ref.probs

    def optimal_policy(self) -> PolicyTable:
        return closed_form_policy(self.r_star, self)

    def optimal_value(self) -> float:
        return policy_value(self.optimal_policy(), self.r_star, self)


@dataclass(frozen=True, eq=False)
class PolicyClass:
    """Finite policy class; ``ids[i]`` is the stable id of ``members[i]``."""

    members: tuple[PolicyTable, ...]
    ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        members = tuple(m if isinstance(m, PolicyTable) else PolicyTable(m) for m in self.members)
        object.__setattr__(self, "members", members)
        ids = tuple(self.ids) if self.ids else tuple(range(len(members)))
        if len(ids) != len(members) or len(set(ids)) != len(ids):
            raise InvalidInputError("policy ids must be unique, one per member")
        object.__setattr__(self, "ids", ids)
        if members and len({m.shape for m in members}) != 1:
            raise InvalidInputError("class members must share dimensions")
        stack = np.stack([m.probs for m in members]) if members else np.zeros((0, 0, 0))
        object.__setattr__(self, "_stack", _frozen(stack))

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i: int) -> PolicyTable:
        return self.members[i]

    @property
    def stack(self) -> np.ndarray:
        """All members as one ``(M, S, A)`` array."""
        return self._stack

    def index_of(self, member_id: int) -> int:
        return self.ids.index(member_id)

    def subset(self, positions: Iterable[int]) -> "PolicyClass":
        positions = list(positions)
        return PolicyClass(tuple(self.members[i] for i in positions), tuple(self.ids[i] for i in positions))


# ---------------------------------------------------------------------------
# Exact primitives


def tilt(ref: np.ndarray, r: np.ndarray, beta: float) -> np.ndarray:
    """Row-normalized ``ref * exp(r / beta)``, max-shifted for overflow safety."""
    logits = np.log(ref) + r / beta
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def closed_form_policy(r, inst: BanditInstance) -> PolicyTable:
    r = values_of(r)
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("reward has non-finite entries")
    if r.shape != inst.pi_ref.shape:
        raise InvalidInputError("reward shape does not match instance")
    return PolicyTable(tilt(inst.ref, r, inst.beta))


def _check_dims(p: np.ndarray, inst: BanditInstance) -> None:
    if p.shape[-2:] != inst.pi_ref.shape:
        raise InvalidInputError(f"shape {p.shape} does not match instance {inst.pi_ref.shape}")


def kl_divergence(pi, pi2, rho) -> float | np.ndarray:
    """State-averaged ``KL(pi || pi2)``; batches over leading axes of ``pi``."""
    p, q = probs_of(pi), probs_of(pi2)
    rho = np.asarray(rho, dtype=float)
    if np.any(q <= 0):
        raise InvalidInputError("second policy must be strictly positive")
    per_state = np.sum(xlogy(p, p) - xlogy(p, q), axis=-1)
    out = per_state @ rho
    return float(out) if np.ndim(out) == 0 else out


def expected_reward(pi, r, rho) -> float | np.ndarray:
    out = np.sum(probs_of(pi) * values_of(r), axis=-1) @ np.asarray(rho)
    return float(out) if np.ndim(out) == 0 else out


def policy_value(pi, r, inst: BanditInstance) -> float | np.ndarray:
    """KL-regularized value ``E[r] - beta * KL(pi || pi_ref)``."""
    p = probs_of(pi)
    _check_dims(p, inst)
    return expected_reward(p, r, inst.rho) - inst.beta * kl_divergence(p, inst.ref, inst.rho)


def value_gap(pi, inst: BanditInstance) -> float | np.ndarray:
    return inst.optimal_value() - policy_value(pi, inst.r_star, inst)


def coverage_coefficient(target, base, rho) -> float | np.ndarray:
    t, b = probs_of(target), probs_of(base)
    if np.any(b <= 0):
        raise InvalidInputError("base policy must be strictly positive")
    out = np.sum(t * t / b, axis=-1) @ np.asarray(rho)
    return float(out) if np.ndim(out) == 0 else out


def linf_coverability(cls: PolicyClass | Sequence, inst: BanditInstance | None = None) -> float:
    stack = cls.stack if isinstance(cls, PolicyClass) else np.stack([probs_of(p) for p in cls])
    if stack.shape[0] == 0:
        raise InvalidInputError("empty policy class")
    return float(stack.max(axis=0).sum(axis=-1).max())


def reward_from_policy(pi, inst: BanditInstance) -> RewardTable:
    return RewardTable(induced_rewards(probs_of(pi), inst))


def induced_rewards(probs: np.ndarray, inst: BanditInstance) -> np.ndarray:
    """Shifted, clipped ``beta * log(pi / pi_ref)``; batches over leading axes."""
    logr = inst.beta * (np.log(probs) - np.log(inst.ref))
    shifted = logr - logr.min(axis=-1, keepdims=True)
    return np.clip(shifted, 0.0, inst.r_max)


def log_ratio_bound(pi, inst: BanditInstance) -> float | np.ndarray:
    p = probs_of(pi)
    out = np.abs(np.log(p) - np.log(inst.ref)).max(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def bounded_ratio_filter(cls: PolicyClass, inst: BanditInstance, tol: float = 1e-12) -> PolicyClass:
    if len(cls) == 0:
        return cls
    ratios = log_ratio_bound(cls.stack, inst)
    keep = np.flatnonzero(np.atleast_1d(ratios) <= inst.r_max / inst.beta + tol)
    return cls.subset(keep.tolist())


def mixture_policy(policies: Sequence, weights) -> PolicyTable:
    stack = np.stack([probs_of(p) for p in policies])
    w = validate_distribution(weights, "weights")
    if w.size != stack.shape[0]:
        raise InvalidInputError("one weight per policy required")
    return PolicyTable(np.tensordot(w, stack, axes=1))


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def bt_prob(r, s: int, a: int, a_tilde: int) -> float:
    v = values_of(r)
    return float(expit(v[s, a] - v[s, a_tilde]))


def pairwise_prob_matrix(r) -> np.ndarray:
    """``P[..., s, a, a'] = sigma(r(s,a) - r(s,a'))``."""
    v = values_of(r)
    return expit(v[..., :, :, None] - v[..., :, None, :])


class PreferenceModel(Protocol):
    def prob(self, r, s: int, a: int, a_tilde: int) -> float: ...

    def sample(self, r, s: int, a: int, a_tilde: int, rng: np.random.Generator) -> int: ...


class BradleyTerry:
    """Bradley-Terry labels: ``y = 1`` means ``a`` beat ``a_tilde``."""

    def prob(self, r, s: int, a: int, a_tilde: int) -> float:
        return bt_prob(r, s, a, a_tilde)

    def sample(self, r, s: int, a: int, a_tilde: int, rng: np.random.Generator) -> int:
        return int(rng.random() < self.prob(r, s, a, a_tilde))


BT = BradleyTerry()


def sample_label(r, s: int, a: int, a_tilde: int, rng: np.random.Generator) -> int:
    return BT.sample(r, s, a, a_tilde, rng)


def win_rate(pi, pi2, r, inst: BanditInstance) -> float:
    """Exact ``P_r(pi > pi2)`` for a response of ``pi`` against one of ``pi2``."""
    p, q = probs_of(pi), probs_of(pi2)
    _check_dims(p, inst)
    _check_dims(q, inst)
    return float(np.einsum("s,sa,sb,sab->", inst.rho, p, q, pairwise_prob_matrix(r)))


def win_rate_mc(pi, pi2, r, inst: BanditInstance, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo win rate from ``n`` Bernoulli comparisons; returns (mean, std error)."""
    p, q = probs_of(pi), probs_of(pi2)
    s = rng.choice(inst.num_states, size=n, p=inst.rho)
    a = _sample_rows(p, s, rng)
    b = _sample_rows(q, s, rng)
    v = values_of(r)
    y = rng.random(n) < expit(v[s, a] - v[s, b])
    mean = float(y.mean())
    return mean, float(np.sqrt(max(mean * (1 - mean), 1e-300) / n))


def _sample_rows(p: np.ndarray, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(p[s], axis=1)
    u = rng.random(len(s))[:, None]
    return np.minimum((u > cdf).sum(axis=1), p.shape[1] - 1)


def sample_action(p: np.ndarray, s: int, rng: np.random.Generator) -> int:
    row = p[s]
    idx = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    return min(idx, row.size - 1)


def bon_distribution(base, source_r, n_bon: int) -> np.ndarray:
    """Exact action distribution of best-of-``n_bon`` selection.

    Actions are ranked by ``source_r`` with ties going to the lower index; the
    chance of selecting ``a`` is ``C(a)**n - C(prev)**n`` where ``C`` is the
    base mass of actions ranked at or below ``a``.  May contain exact zeros
    when ``n_bon`` is large, so it is returned as an array.
    """
    if n_bon < 1:
        raise InvalidInputError("n_bon must be >= 1")
    p, v = probs_of(base), values_of(source_r)
    out = np.empty_like(p)
    for s in range(p.shape[0]):
        # worst first: ascending reward, and among equal rewards the higher index is worse
        order = np.lexsort((-np.arange(p.shape[1]), v[s]))
        c = np.cumsum(p[s, order])
        c[-1] = 1.0
        prev = np.concatenate(([0.0], c[:-1]))
        out[s, order] = c**n_bon - prev**n_bon
    return out


@dataclass
class BestOfN:
    """Action sampler approximating the source-optimal policy by rejection sampling."""

    base: PolicyTable
    source_r: RewardTable
    n_bon: int = 32

    def __post_init__(self) -> None:
        if self.n_bon < 1:
            raise InvalidInputError("n_bon must be >= 1")

    def sample(self, s: int, rng: np.random.Generator) -> int:
        draws = rng.choice(self.base.shape[1], size=self.n_bon, p=self.base.probs[s])
        rewards = values_of(self.source_r)[s, draws]
        best = rewards.max()
        return int(draws[rewards == best].min())

    def distribution(self) -> np.ndarray:
        return bon_distribution(self.base, self.source_r, self.n_bon)


def bon_policy(base, source_r, n_bon: int = 32, rng: np.random.Generator | None = None) -> BestOfN:
    del rng  # the sampler takes the run's generator per call
    return BestOfN(base if isinstance(base, PolicyTable) else PolicyTable(base),
                   source_r if isinstance(source_r, RewardTable) else RewardTable(source_r), n_bon)


# ---------------------------------------------------------------------------
# Preference data


@dataclass(frozen=True)
class PreferenceSample:
    s: int
    a: int
    a_tilde: int
    y: int
    producer: str
    comparator: str = "ref"

    def __post_init__(self) -> None:
        if self.y not in (0, 1):
            raise InvalidInputError("label must be 0 or 1")

    @property
    def winner(self) -> int:
        return self.a if self.y == 1 else self.a_tilde

    @property
    def loser(self) -> int:
        return self.a_tilde if self.y == 1 else self.a


class PreferenceDataset:
    """Append-only, time-ordered preference log with sufficient statistics.

    Besides the raw samples it keeps ``wins[s, a, a']`` and ``losses[s, a, a']``
    counts (enough to evaluate any likelihood), per-producer counts, and, when
    producer tables are supplied on append, the running sum of the policies
    that generated the first responses.
    """

    def __init__(self, num_states: int, num_actions: int, samples: Iterable[PreferenceSample] = ()):
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.samples: list[PreferenceSample] = []
        self.wins = np.zeros((num_states, num_actions, num_actions))
        self.losses = np.zeros((num_states, num_actions, num_actions))
        self.producer_counts: dict[str, int] = {}
        self._mix_sum = np.zeros((num_states, num_actions))
        self._mix_n = 0
        for sample in samples:
            self.append(sample)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def append(self, sample: PreferenceSample, producer_table=None) -> None:
        S, A = self.num_states, self.num_actions
        if not (0 <= sample.s < S and 0 <= sample.a < A and 0 <= sample.a_tilde < A):
            raise InvalidInputError(f"sample index out of range: {sample}")
        self.samples.append(sample)
        if sample.y == 1:
            self.wins[sample.s, sample.a, sample.a_tilde] += 1
        else:
            self.losses[sample.s, sample.a, sample.a_tilde] += 1
        self.producer_counts[sample.producer] = self.producer_counts.get(sample.producer, 0) + 1
        if producer_table is not None:
            self._mix_sum += probs_of(producer_table)
            self._mix_n += 1

    def count(self, producer: str) -> int:
        return self.producer_counts.get(producer, 0)

    def comparator_counts(self) -> np.ndarray:
        """``(S, A)`` counts of the second response ``a_tilde``."""
        return (self.wins + self.losses).sum(axis=1)

    def mixture(self) -> np.ndarray | None:
        """Uniform mixture of the recorded producer policies, if tracked for every sample."""
        if self._mix_n == 0 or self._mix_n != len(self.samples):
            return None
        return self._mix_sum / self._mix_n

    def filter(self, predicate) -> "PreferenceDataset":
        return PreferenceDataset(self.num_states, self.num_actions, (x for x in self.samples if predicate(x)))

    def shuffled(self, rng: np.random.Generator) -> "PreferenceDataset":
        order = rng.permutation(len(self.samples))
        return PreferenceDataset(self.num_states, self.num_actions, (self.samples[i] for i in order))


# ---------------------------------------------------------------------------
# JSON


def instance_to_dict(inst: BanditInstance, sources: Sequence = (), cls: PolicyClass | None = None) -> dict:
    return {
        "num_states": inst.num_states,
        "num_actions": inst.num_actions,
        "rho": inst.rho.tolist(),
        "beta": inst.beta,
        "r_max": inst.r_max,
        "pi_ref": inst.pi_ref.tolist(),
        "r_star": inst.r_star.tolist(),
        "sources": [values_of(r).tolist() for r in sources],
        "policy_class": [] if cls is None else [m.tolist() for m in cls],
    }


def instance_from_dict(d: dict) -> tuple[BanditInstance, list[RewardTable], PolicyClass]:
    try:
        inst = BanditInstance(
            rho=np.asarray(d["rho"], dtype=float),
            pi_ref=PolicyTable(np.asarray(d["pi_ref"], dtype=float)),
            beta=float(d["beta"]),
            r_max=float(d["r_max"]),
            r_star=RewardTable(np.asarray(d["r_star"], dtype=float)),
        )
    except KeyError as exc:
        raise InvalidInputError(f"instance JSON missing field {exc}") from None
    if (d.get("num_states", inst.num_states), d.get("num_actions", inst.num_actions)) != inst.pi_ref.shape:
        raise InvalidInputError("declared num_states/num_actions disagree with matrices")
    sources = [RewardTable(np.asarray(r, dtype=float)) for r in d.get("sources", [])]
    for r in sources:
        if r.shape != inst.pi_ref.shape:
            raise InvalidInputError("source reward shape mismatch")
    cls = PolicyClass(tuple(PolicyTable(np.asarray(p, dtype=float)) for p in d.get("policy_class", [])))
    return inst, sources, cls


def dump_instance(path, inst: BanditInstance, sources: Sequence = (), cls: PolicyClass | None = None) -> None:
    with open(path, "w") as f:
        json.dump(instance_to_dict(inst, sources, cls), f, indent=1)


def load_instance(path) -> tuple[BanditInstance, list[RewardTable], PolicyClass]:
    with open(path) as f:
        return instance_from_dict(json.load(f))
