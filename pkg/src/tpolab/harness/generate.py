"""Random bandit instances with sources of controlled quality."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import (
    BanditInstance,
    InvalidInputError,
    PolicyClass,
    PolicyTable,
    RewardTable,
    bounded_ratio_filter,
    closed_form_policy,
    policy_value,
)


class GenerationError(RuntimeError):
    """The generator could not realize a requested source gap."""


@dataclass(frozen=True)
class InstanceSpec:
    num_states: int = 5
    num_actions: int = 4
    beta: float = 0.1
    r_max: float = 1.0
    class_size: int = 20
    ref_concentration: float = 5.0
    deltas: tuple = ()  # target source gaps as fractions of r_max
    tol: float = 0.05

    def __post_init__(self) -> None:
        if self.num_states < 1 or self.num_actions < 2:
            raise InvalidInputError("need at least one state and two actions")
        if self.beta <= 0 or self.r_max <= 0:
            raise InvalidInputError("beta and r_max must be positive")
        if self.class_size < 2:
            raise InvalidInputError("class_size must be at least 2 (pi* and pi_ref)")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if any(not 0.0 <= d <= 1.0 for d in self.deltas):
            raise InvalidInputError("source gap targets must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidInputError(f"unknown instance fields {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["deltas"] = list(self.deltas)
        return out


@dataclass
class GeneratedInstance:
    inst: BanditInstance
    sources: list[RewardTable]
    cls: PolicyClass
    realized_deltas: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.inst, self.sources, self.cls))


def source_gap(r, inst: BanditInstance) -> float:
    """``J(pi*) - J(pi*_r)`` under the true reward."""
    return inst.optimal_value() - float(policy_value(closed_form_policy(r, inst), inst.r_star, inst))


def _blend_to_gap(inst: BanditInstance, target: float, others: list[np.ndarray], tol: float,
                  max_iter: int = 100) -> tuple[np.ndarray, float]:
    r_star = inst.r_star.values
    if target == 0.0:
        return r_star.copy(), 0.0
    for other in others:
        if source_gap(other, inst) < target:
            continue
        lo, hi = 0.0, 1.0
        for _ in range(max_iter):
            lam = 0.5 * (lo + hi)
            r = (1 - lam) * r_star + lam * other
            gap = source_gap(r, inst)
            if abs(gap - target) <= tol * max(target, 1e-12):
                return r, gap
            lo, hi = (lam, hi) if gap < target else (lo, lam)
        raise GenerationError(f"bisection did not reach gap {target:.4g} within {max_iter} iterations")
    raise GenerationError(f"gap {target:.4g} exceeds what any blend reaches on this instance")


def generate_instance(spec: InstanceSpec, seed: int, max_attempts: int = 20) -> GeneratedInstance:
    """Draw ``r*``, sources with gaps ``deltas * r_max`` and a ratio-filtered class.

    Sources blend ``r*`` with an independent uniform reward; when that cannot
    reach the target gap the blend partner becomes the reversed reward
    ``r_max - r*`` and finally a spike on each state's worst action.  The
    class holds ``pi*``, ``pi_ref`` and closed-form policies of random
    rewards, some of them partially blended towards ``r*``.  Draws whose
    largest reachable gap is below a target are redrawn from the same stream,
    at most ``max_attempts`` times.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        try:
            return _draw(spec, rng)
        except GenerationError as err:
            last = err
    raise GenerationError(f"{last} (after {max_attempts} draws)")


def _draw(spec: InstanceSpec, rng: np.random.Generator) -> GeneratedInstance:
    S, A, R = spec.num_states, spec.num_actions, spec.r_max
    rho = rng.dirichlet(np.full(S, 5.0))
    pi_ref = PolicyTable(rng.dirichlet(np.full(A, spec.ref_concentration), size=S))
    r_star = rng.uniform(0.0, R, size=(S, A))
    inst = BanditInstance(rho, pi_ref, spec.beta, R, RewardTable(r_star))

    sources, realized = [], []
    for d in spec.deltas:
        partner = rng.uniform(0.0, R, size=(S, A))
        worst = np.argmin(r_star + spec.beta * np.log(inst.ref), axis=1)
        spike = np.where(np.arange(A)[None, :] == worst[:, None], R, 0.0)
        r, gap = _blend_to_gap(inst, d * R, [partner, R - r_star, spike], spec.tol)
        sources.append(RewardTable(np.clip(r, 0.0, R)))
        realized.append(gap)

    members = [inst.optimal_policy().probs, inst.ref]
    while len(members) < spec.class_size:
        u = rng.uniform(0.0, R, size=(S, A))
        lam = rng.uniform(0.0, 1.0) if rng.random() < 0.5 else 1.0
        members.append(closed_form_policy((1 - lam) * r_star + lam * u, inst).probs)
    order = rng.permutation(len(members))
    cls = bounded_ratio_filter(PolicyClass(tuple(members[i] for i in order)), inst)
    kept = {int(order[i]) for i in cls.ids}
    if not {0, 1} <= kept:
        raise GenerationError("optimal or reference policy filtered out of the class")
    return GeneratedInstance(inst, sources, cls, realized)
