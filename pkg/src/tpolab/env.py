"""Seeded preference environment and run-trace containers shared by the run loops."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import BT, BanditInstance, PreferenceModel, policy_value, probs_of, sample_action


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts, e.g. (master, tag, trial)."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class PreferenceEnv:
    """Draws prompts, responses and labels for one run.

    Prompts come from their own stream so that different algorithms given the
    same ``prompt_seed`` see the same prompt sequence.
    """

    def __init__(self, inst: BanditInstance, seed: int, prompt_seed: int | None = None,
                 model: PreferenceModel = BT):
        self.inst = inst
        self.model = model
        self.rng = np.random.default_rng(derive_seed(seed, "actions"))
        self.prompt_rng = np.random.default_rng(derive_seed(seed if prompt_seed is None else prompt_seed, "prompts"))
        self._rho_cdf = np.cumsum(inst.rho)

    def prompt(self) -> int:
        s = int(np.searchsorted(self._rho_cdf, self.prompt_rng.random(), side="right"))
        return min(s, self.inst.num_states - 1)

    def act(self, pi, s: int) -> int:
        return sample_action(probs_of(pi), s, self.rng)

    def label(self, s: int, a: int, a_tilde: int) -> int:
        return self.model.sample(self.inst.r_star, s, a, a_tilde, self.rng)


@dataclass
class TraceRow:
    step: int
    block: int
    inner: int
    policy_kind: str
    policy_id: int
    inst_regret: float
    cum_regret: float

    @property
    def category(self) -> str:
        return f"source:{self.policy_id}" if self.policy_kind == "source" else self.policy_kind


TRACE_FIELDS = ["step", "block", "inner", "policy_kind", "policy_id", "inst_regret", "cum_regret"]


@dataclass
class RunResult:
    """Per-step regret trace, selection log and final policy of one seeded run."""

    regret_trace: list[TraceRow]
    selection_log: list
    final_policy: object
    tables: dict[str, np.ndarray] = field(default_factory=dict)
    step_tags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def inst_regret(self) -> np.ndarray:
        return np.array([row.inst_regret for row in self.regret_trace])

    @property
    def cum_regret(self) -> np.ndarray:
        return np.array([row.cum_regret for row in self.regret_trace])

    def executed_table(self, step: int) -> np.ndarray:
        return self.tables[self.step_tags[step - 1]]

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in self.regret_trace:
            w.writerow([row.step, row.block, row.inner, row.policy_kind, row.policy_id,
                        repr(float(row.inst_regret)), repr(float(row.cum_regret))])
        return buf.getvalue()

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.trace_csv())

    def to_json(self) -> dict:
        return {
            "final_policy": probs_of(self.final_policy).tolist(),
            "selection_log": [entry.to_dict() for entry in self.selection_log],
            "meta": self.meta,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as f:
        return [TraceRow(int(r["step"]), int(r["block"]), int(r["inner"]), r["policy_kind"], int(r["policy_id"]),
                         float(r["inst_regret"]), float(r["cum_regret"])) for r in csv.DictReader(f)]


class RegretTracker:
    """Accumulates exact regrets, caching ``J`` per policy tag."""

    def __init__(self, inst: BanditInstance):
        self.inst = inst
        self.j_star = inst.optimal_value()
        self.rows: list[TraceRow] = []
        self.tables: dict[str, np.ndarray] = {}
        self.step_tags: list[str] = []
        self._values: dict[str, float] = {}
        self._cum = 0.0

    def register(self, tag: str, table) -> None:
        if tag not in self.tables:
            p = np.array(probs_of(table), dtype=float)
            self.tables[tag] = p
            self._values[tag] = float(policy_value(p, self.inst.r_star, self.inst))

    def record(self, step: int, block: int, inner: int, kind: str, pid: int, tag: str) -> float:
        regret = self.j_star - self._values[tag]
        # exact optimum: tiny negative values are rounding
        regret = max(regret, 0.0) if regret > -1e-10 else regret
        self._cum += regret
        self.rows.append(TraceRow(step, block, inner, kind, pid, regret, self._cum))
        self.step_tags.append(tag)
        return regret
