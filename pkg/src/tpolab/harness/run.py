"""Roster runs over seeded trials, aggregation into a report, and on-disk layout.

A run directory holds ``manifest.json`` plus one folder per trial with a
regret trace per algorithm and the exact win-rate matrix of final policies.
Everything in :class:`Report` is recomputed from those files, so ``report``
can re-render any run directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import InvalidInputError, win_rate
from ..empirical import PO_KINDS, EmpiricalConfig, PolicyOptimizer, empirical_tpo_run
from ..env import RunResult, TraceRow, derive_seed, read_trace
from ..tpo import TPS_PRESETS, OracleParams, TpoConfig, default_alpha, fixed_transfer_run, online_run, tpo_run
from .generate import InstanceSpec, generate_instance

BASE_ALGORITHMS = ("tpo", "empirical-tpo", "online-only")
FIXED_PREFIX = "transfer-fixed:"

TPO_KEYS = ("alpha", "delta", "c_bonus", "bonus_scale", "eta_form", "rpo_mode", "rpo_form")
EMPIRICAL_DEFAULTS = {"optimizer": "dpo", "learning_rate": 0.7, "steps": 100, "beta_po": None,
                      "wr_self": 0.55, "c_ucb": None, "delta": 0.1, "use_bon": False, "n_bon": 32}
Z95 = 1.96
MIN_TRIALS = 3


def parse_algorithm(tag: str) -> tuple[str, int | None]:
    if tag in BASE_ALGORITHMS:
        return tag, None
    if tag.startswith(FIXED_PREFIX):
        try:
            return "transfer-fixed", int(tag[len(FIXED_PREFIX):])
        except ValueError:
            pass
    raise InvalidInputError(f"unknown algorithm {tag!r}; use {BASE_ALGORITHMS} or transfer-fixed:<w>")


def file_stem(tag: str) -> str:
    return tag.replace(":", "_")


@dataclass(frozen=True)
class ExperimentConfig:
    instance: InstanceSpec
    roster: tuple
    T: int
    N: int
    trials: int = 3
    master_seed: int = 0
    instance_seed: int = 0  # trial t generates its instance from instance_seed + t
    out_dir: str = "runs"
    tpo_preset: str = "desk"
    tpo: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    empirical: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self) -> None:
        roster = tuple(self.roster)
        if not roster:
            raise InvalidInputError("roster must not be empty")
        if len(set(roster)) != len(roster):
            raise InvalidInputError("roster entries must be unique")
        for tag in roster:
            _, w = parse_algorithm(tag)
            if w is not None and not 0 <= w < len(self.instance.deltas):
                raise InvalidInputError(f"{tag}: no source {w} (W={len(self.instance.deltas)})")
        object.__setattr__(self, "roster", roster)
        if self.T <= 0 or self.N <= 0 or self.T % self.N:
            raise InvalidInputError("T must be a positive multiple of N")
        if self.trials < MIN_TRIALS:
            raise InvalidInputError(f"confidence intervals need at least {MIN_TRIALS} trials")
        if self.tpo_preset not in TPS_PRESETS:
            raise InvalidInputError(f"unknown tpo preset {self.tpo_preset!r}; choose from {sorted(TPS_PRESETS)}")
        bad = set(self.tpo) - set(TPO_KEYS)
        if bad:
            raise InvalidInputError(f"unknown tpo options {sorted(bad)}")
        bad = set(self.empirical) - set(EMPIRICAL_DEFAULTS)
        if bad:
            raise InvalidInputError(f"unknown empirical options {sorted(bad)}")
        if self.empirical.get("optimizer", "dpo") not in PO_KINDS:
            raise InvalidInputError(f"optimizer must be one of {PO_KINDS}")
        OracleParams(**self.oracle)  # validates
        if self.jobs < 1:
            raise InvalidInputError("jobs must be at least 1")

    @property
    def K(self) -> int:
        return self.T // self.N

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "instance" not in d or "roster" not in d or "T" not in d or "N" not in d:
            raise InvalidInputError("config needs instance, roster, T and N")
        if "K" in d:
            K = d.pop("K")
            if K * d["N"] != d["T"]:
                raise InvalidInputError("K * N must equal T")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown config fields {sorted(unknown)}")
        inst = d.pop("instance")
        d["instance"] = inst if isinstance(inst, InstanceSpec) else InstanceSpec.from_dict(inst)
        d["roster"] = tuple(d["roster"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"instance": self.instance.to_dict(), "roster": list(self.roster), "T": self.T, "N": self.N,
                "K": self.K, "trials": self.trials, "master_seed": self.master_seed,
                "instance_seed": self.instance_seed, "out_dir": self.out_dir, "tpo_preset": self.tpo_preset,
                "tpo": dict(self.tpo), "oracle": dict(self.oracle), "empirical": dict(self.empirical),
                "jobs": self.jobs}


# ---------------------------------------------------------------------------
# one trial


@dataclass(frozen=True)
class TrialResult:
    trial: int
    instance_seed: int
    traces: dict  # tag -> list[TraceRow]
    win_rates: np.ndarray  # [i, j] = P(final_i beats final_j) under r*


def run_algorithm(tag: str, cfg: ExperimentConfig, gen, seed: int, prompt_seed: int) -> RunResult:
    inst, sources, cls = gen
    name, w = parse_algorithm(tag)
    oracle = OracleParams(**cfg.oracle)
    if name == "tpo":
        opts = {**TPS_PRESETS[cfg.tpo_preset], **cfg.tpo}
        opts.setdefault("alpha", default_alpha(inst.r_max, inst.beta, cfg.N))
        tcfg = TpoConfig(cfg.T, cfg.N, sources=tuple(sources), oracle=oracle, **opts)
        return tpo_run(tcfg, cls, inst, seed, prompt_seed=prompt_seed)
    if name == "online-only":
        return online_run(cfg.T, cls, inst, seed, N=cfg.N, oracle=oracle, prompt_seed=prompt_seed)
    if name == "transfer-fixed":
        return fixed_transfer_run(cfg.T, sources[w], w, inst, seed, N=cfg.N, prompt_seed=prompt_seed)
    e = {**EMPIRICAL_DEFAULTS, **cfg.empirical}
    ecfg = EmpiricalConfig(cfg.K, cfg.N, c_ucb=e["c_ucb"], delta=e["delta"], wr_self=e["wr_self"],
                           use_bon=e["use_bon"], n_bon=e["n_bon"])
    opt = PolicyOptimizer.from_policy(e["optimizer"], inst.pi_ref, learning_rate=e["learning_rate"], steps=e["steps"],
                                      beta_po=e["beta_po"] or inst.beta)
    return empirical_tpo_run(ecfg, sources, inst, opt, seed, prompt_seed=prompt_seed)


def run_trial(cfg: ExperimentConfig, trial: int) -> TrialResult:
    """Every roster entry on the same instance and the same prompt stream."""
    gseed = cfg.instance_seed + trial
    gen = generate_instance(cfg.instance, gseed)
    prompt_seed = derive_seed(cfg.master_seed, "prompts", trial)
    traces, finals = {}, []
    for tag in cfg.roster:
        res = run_algorithm(tag, cfg, gen, derive_seed(cfg.master_seed, tag, trial), prompt_seed)
        traces[tag] = res.regret_trace
        finals.append(res.final_policy)
    n = len(finals)
    wr = np.full((n, n), 0.5)
    for i in range(n):
        for j in range(n):
            if i != j:
                wr[i, j] = win_rate(finals[i], finals[j], gen.inst.r_star, gen.inst)
    return TrialResult(trial, gseed, traces, wr)


# ---------------------------------------------------------------------------
# report


def mean_ci(x: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and normal-approximation 95% half-width ``1.96 sd / sqrt(n)``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < MIN_TRIALS:
        raise InvalidInputError(f"confidence intervals need at least {MIN_TRIALS} trials, got {n}")
    return x.mean(axis=axis), Z95 * x.std(axis=axis, ddof=1) / math.sqrt(n)


def block_frequencies(rows: list[TraceRow], K: int) -> dict[str, np.ndarray]:
    """Per-block share of steps spent on each category (online, distilled, source:w)."""
    cats = sorted({r.category for r in rows}, key=_category_key)
    counts = {c: np.zeros(K) for c in cats}
    totals = np.zeros(K)
    for r in rows:
        counts[r.category][r.block - 1] += 1
        totals[r.block - 1] += 1
    return {c: v / np.maximum(totals, 1) for c, v in counts.items()}


def _category_key(c: str):
    order = {"online": 0, "distilled": 1}
    return (order.get(c, 2), int(c.split(":")[1]) if ":" in c else -1)


@dataclass
class Report:
    algorithms: list[str]
    T: int
    K: int
    cum_regret: dict  # tag -> (trials, T)
    win_rates: np.ndarray  # (trials, n, n)
    selection: dict  # tag -> category -> (trials, K)

    def __post_init__(self) -> None:
        if not self.algorithms:
            raise InvalidInputError("report needs at least one algorithm")
        if self.win_rates.shape[0] < MIN_TRIALS:
            raise InvalidInputError(f"a report needs at least {MIN_TRIALS} trials")

    @property
    def trials(self) -> int:
        return int(self.win_rates.shape[0])

    @classmethod
    def from_trials(cls, cfg: ExperimentConfig, results: list[TrialResult]) -> "Report":
        results = sorted(results, key=lambda r: r.trial)
        if len(results) < MIN_TRIALS:
            raise InvalidInputError(f"a report needs at least {MIN_TRIALS} trials")
        cum = {t: np.array([[row.cum_regret for row in r.traces[t]] for r in results]) for t in cfg.roster}
        sel = {}
        for t in cfg.roster:
            per = [block_frequencies(r.traces[t], cfg.K) for r in results]
            cats = sorted({c for p in per for c in p}, key=_category_key)
            sel[t] = {c: np.array([p.get(c, np.zeros(cfg.K)) for p in per]) for c in cats}
        return cls(list(cfg.roster), cfg.T, cfg.K, cum, np.stack([r.win_rates for r in results]), sel)

    def curve(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        return mean_ci(self.cum_regret[tag])

    def win_rate_summary(self) -> tuple[np.ndarray, np.ndarray]:
        return mean_ci(self.win_rates)

    def selection_means(self, tag: str) -> dict[str, np.ndarray]:
        return {c: v.mean(axis=0) for c, v in self.selection[tag].items()}

    # -- tables

    def regret_csv(self) -> str:
        rows = [["algorithm", "step", "mean_cum_regret", "ci95_low", "ci95_high"]]
        for t in self.algorithms:
            m, h = self.curve(t)
            rows += [[t, i + 1, _f(m[i]), _f(m[i] - h[i]), _f(m[i] + h[i])] for i in range(self.T)]
        return _csv(rows)

    def summary_csv(self) -> str:
        rows = [["algorithm", "final_cum_regret_mean", "ci95_half_width", "trials"]]
        for t in self.algorithms:
            m, h = self.curve(t)
            rows.append([t, _f(m[-1]), _f(h[-1]), self.trials])
        return _csv(rows)

    def win_rate_csv(self) -> str:
        m, h = self.win_rate_summary()
        rows = [["policy", "opponent", "win_rate_mean", "ci95_half_width"]]
        for i, a in enumerate(self.algorithms):
            for j, b in enumerate(self.algorithms):
                rows.append([a, b, _f(m[i, j]), _f(h[i, j])])
        return _csv(rows)

    def selection_csv(self) -> str:
        rows = [["algorithm", "block", "category", "frequency"]]
        for t in self.algorithms:
            for c, v in self.selection_means(t).items():
                rows += [[t, k + 1, c, _f(v[k])] for k in range(self.K)]
        return _csv(rows)

    def write(self, out_dir) -> list[Path]:
        from .svg import render_svg

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for name, text in (("regret_curves.csv", self.regret_csv()), ("summary.csv", self.summary_csv()),
                           ("win_rates.csv", self.win_rate_csv()), ("selection_frequencies.csv", self.selection_csv())):
            (out / name).write_text(text)
            files.append(out / name)
        return files + render_svg(self, out)


def _f(x) -> str:
    return repr(float(x))


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# run directory


def write_trial(result: TrialResult, roster, out_dir: Path) -> None:
    d = out_dir / "trials" / f"trial_{result.trial:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for tag in roster:
        RunResult(result.traces[tag], [], None).write_trace(d / f"{file_stem(tag)}.csv")
    rows = [["policy", "opponent", "win_rate"]]
    for i, a in enumerate(roster):
        for j, b in enumerate(roster):
            rows.append([a, b, _f(result.win_rates[i, j])])
    (d / "win_rates.csv").write_text(_csv(rows))


def run_roster(cfg: ExperimentConfig, out_dir=None) -> Report:
    """Run all trials, write the run directory (traces, tables, SVG) and return the report."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = list(ex.map(run_trial, [cfg] * cfg.trials, range(cfg.trials)))
    else:
        results = [run_trial(cfg, t) for t in range(cfg.trials)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    for r in results:
        write_trial(r, cfg.roster, out)
    report = Report.from_trials(cfg, results)
    report.write(out)
    return report


def load_run(run_dir) -> tuple[ExperimentConfig, Report]:
    d = Path(run_dir)
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise InvalidInputError(f"{d} is not a run directory (no manifest.json)")
    cfg = ExperimentConfig.from_dict(json.loads(manifest.read_text()))
    results = []
    for t in range(cfg.trials):
        td = d / "trials" / f"trial_{t:03d}"
        traces = {tag: read_trace(td / f"{file_stem(tag)}.csv") for tag in cfg.roster}
        idx = {tag: i for i, tag in enumerate(cfg.roster)}
        wr = np.full((len(idx), len(idx)), 0.5)
        with open(td / "win_rates.csv", newline="") as f:
            for row in csv.DictReader(f):
                wr[idx[row["policy"]], idx[row["opponent"]]] = float(row["win_rate"])
        results.append(TrialResult(t, cfg.instance_seed + t, traces, wr))
    return cfg, Report.from_trials(cfg, results)
