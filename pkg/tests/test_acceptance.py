"""Acceptance criteria 1-11, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in the terminal summary.  Run with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

from tpolab.bounds import (
    cov_exp_upper_bound,
    cov_gap_terms,
    cov_gap_upper_bound,
    kl_value_identity_residual,
    sigmoid_gap_terms,
    win_rate_cov_lower_bound,
)
from tpolab.core import (
    BanditInstance,
    PolicyClass,
    PolicyTable,
    PreferenceDataset,
    PreferenceSample,
    RewardTable,
    closed_form_policy,
    induced_rewards,
    kl_divergence,
    log_ratio_bound,
    policy_value,
    sample_action,
    sample_label,
    value_gap,
)
from tpolab.empirical import (
    PO_KINDS,
    EmpiricalConfig,
    PairBatch,
    PolicyOptimizer,
    empirical_tpo_run,
    po_loss_and_grad,
    selection_shares,
)
from tpolab.env import PreferenceEnv
from tpolab.estimation import nll_loss, rpo_objective_table, rpo_solve, value_vs_ref
from tpolab.harness import ExperimentConfig, InstanceSpec, generate_instance, run_roster
from tpolab.tpo import TPS_PRESETS, TpoConfig, default_alpha, online_run, rpo_eta, tpo_run, tps_select

RESULTS: list[str] = []


def report(n: int | str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)


def info(n: int | str, detail: str) -> None:
    line = f"criterion {n}: INFO | {detail}"
    RESULTS.append(line)
    print(line)


def random_instance(rng, S: int, A: int, beta: float | None = None) -> BanditInstance:
    beta = float(rng.choice([0.1, 0.5, 1.0])) if beta is None else beta
    return BanditInstance(rng.dirichlet(np.ones(S)), PolicyTable(rng.dirichlet(np.full(A, 2.0), size=S)), beta, 1.0,
                          RewardTable(rng.uniform(0, 1, size=(S, A))))


def random_dims(rng) -> tuple[int, int]:
    return int(rng.integers(1, 11)), int(rng.integers(2, 9))


# --- 1


def test_criterion_1_closed_form_optimality():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = math.inf
    for _ in range(100):
        S, A = random_dims(rng)
        inst = random_instance(rng, S, A)
        r = RewardTable(rng.uniform(0, 1, size=(S, A)))
        best = float(policy_value(closed_form_policy(r, inst), r, inst))
        sweep = rng.dirichlet(np.ones(A) * rng.choice([0.2, 1.0, 5.0]), size=(10_000, S))
        worst = min(worst, float(np.min(best - policy_value(sweep, r, inst))))
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-12 and elapsed < 60
    report(1, ok, f"min slack {worst:.3e} over 100 instances x 1e4 policies (>= -1e-12), {elapsed:.1f}s (< 60s)")
    assert ok


# --- 2


def test_criterion_2_kl_value_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        S, A = random_dims(rng)
        inst = random_instance(rng, S, A)
        p = rng.dirichlet(np.ones(A), size=(100, S))
        worst = max(worst, float(np.max(kl_value_identity_residual(p, inst))))
    ok = worst < 1e-10
    report(2, ok, f"max residual {worst:.3e} over 1e4 (policy, instance) pairs (< 1e-10)")
    assert ok


# --- 3


def filtered_policies(rng, inst: BanditInstance, n: int) -> np.ndarray:
    """Random policies in ``|log pi/ref| <= R/beta``: tilts of ``ref`` by rewards in ``[0, R]``, then filtered."""
    S, A = inst.pi_ref.shape
    r = rng.uniform(0, inst.r_max, size=(n, S, A))
    r = np.where(rng.random((n, 1, 1)) < 0.5, r * rng.uniform(0, 1, size=(n, 1, 1)), r)
    logits = np.log(inst.pi_ref)[None] + r / inst.beta
    p = np.exp(logits - logits.max(axis=2, keepdims=True))
    p /= p.sum(axis=2, keepdims=True)
    return p[log_ratio_bound(p, inst) <= inst.r_max / inst.beta + 1e-12]


def test_criterion_3_coverage_gap_bound():
    rng = np.random.default_rng(3)
    violations = total = 0
    for _ in range(100):
        S, A = random_dims(rng)
        inst = random_instance(rng, S, A)
        p = filtered_policies(rng, inst, 10_000)
        lhs, rhs = cov_gap_terms(p, inst)
        violations += int(np.sum(lhs > rhs + 1e-9))
        total += len(p)
    w = BanditInstance(np.array([1.0]), PolicyTable([[0.5, 0.5]]), 1.0, 1.0, RewardTable([[1.0, 0.0]]))
    rep = cov_gap_upper_bound(w.pi_ref, w)
    worked = f"{rep.lhs:.4g}" == "1.214" and round(rep.lhs, 4) == 1.2136 and f"{rep.rhs:.4g}" == "2.117"
    ok = violations == 0 and total >= 10**6 and worked
    report(3, ok, f"{violations} violations over {total} filtered policies; worked lhs={rep.lhs:.4f} rhs={rep.rhs:.4f}")
    assert ok


# --- 4


def test_criterion_4_win_rate_lower_bound():
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(1000):
        S, A = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        inst = random_instance(rng, S, A)
        pi = PolicyTable(rng.dirichlet(np.ones(A), size=S))
        comps = [inst.optimal_policy(), PolicyTable(rng.dirichlet(np.ones(A), size=S))]
        violations += not win_rate_cov_lower_bound(pi, inst, comps).satisfied
    inst = random_instance(rng, 4, 5)
    star = inst.optimal_policy()
    tight = win_rate_cov_lower_bound(star, inst, [star]).rhs
    ok = violations == 0 and tight >= 0.99
    report(4, ok, f"{violations} violations over 1e3 draws; bound at pi=pi* with bar=pi*: {tight:.4f} (>= 0.99)")
    assert ok


# --- 5


def test_criterion_5_exponential_and_sigmoid_bounds():
    rng = np.random.default_rng(5)
    exp_viol = 0
    for _ in range(1000):
        S, A = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        inst = random_instance(rng, S, A)
        noise = rng.normal(scale=rng.uniform(0.01, 0.5), size=(S, A))
        exp_viol += not cov_exp_upper_bound(np.clip(inst.r_star.values + noise, 0, 1), inst).satisfied
    sig_viol = 0
    for C in (0.5, 1.0, 2.0, 5.0):
        x, y = rng.uniform(-C, C, size=(2, 100_000))
        lhs, rhs = sigmoid_gap_terms(x, y, C)
        sig_viol += int(np.sum(lhs > rhs + 1e-9))
    ok = exp_viol == 0 and sig_viol == 0
    report(5, ok, f"exponential bound: {exp_viol} violations / 1e3; sigmoid bound: {sig_viol} violations / 4e5")
    assert ok


# --- 6


def test_criterion_6_rpo_oracle_equivalence():
    rng = np.random.default_rng(6)
    exact = mix_ok = 0
    for _ in range(50):
        S, A = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        inst = random_instance(rng, S, A)
        M = int(rng.integers(1, 6))
        cls = PolicyClass(tuple([inst.optimal_policy()] + [closed_form_policy(rng.uniform(0, 1, (S, A)), inst)
                                                           for _ in range(M - 1)]))
        d = PreferenceDataset(S, A)
        for _ in range(int(rng.integers(1, 21))):
            s = int(rng.choice(S, p=inst.rho))
            a, at = sample_action(inst.ref, s, rng), sample_action(inst.ref, s, rng)
            d.append(PreferenceSample(s, a, at, sample_label(inst.r_star, s, a, at, rng), "online"), inst.ref)
        eta = float(rng.uniform(0.05, 2.0))
        table = np.empty((M, M))
        for i, p in enumerate(cls):
            for j, q in enumerate(cls):
                r = induced_rewards(q.probs, inst)
                adv = float(inst.rho @ np.sum((p.probs - inst.ref) * r, axis=1))
                table[i, j] = nll_loss(r, d) + eta * adv - eta * inst.beta * kl_divergence(p, inst.pi_ref, inst.rho)
        enum = rpo_solve(cls, d, inst, eta)
        best = table.min(axis=1)
        exact += (np.allclose(rpo_objective_table(cls, d, inst, eta), table, rtol=0, atol=1e-12)
                  and best[enum.member_index] == best.max()
                  and abs(enum.inner_min_value - best.max()) <= 1e-12)
        mix = rpo_solve(cls, d, inst, eta, mode="mixture")
        mix_ok += mix.inner_min_value >= enum.inner_min_value - 1e-6
    ok = exact == 50 and mix_ok == 50
    report(6, ok, f"enumerate matches brute force on {exact}/50; mixture >= enumerate - 1e-6 on {mix_ok}/50")
    assert ok


# --- 7


def test_criterion_7_self_transfer_convergence():
    t0 = time.perf_counter()
    medians = []
    for T in (500, 2000, 8000):
        gaps = []
        for seed in range(20):
            gen = generate_instance(InstanceSpec(10, 8, class_size=50), 7000 + seed)
            cfg = TpoConfig(T, 500, default_alpha(1.0, 0.1, 500))
            gaps.append(float(value_gap(tpo_run(cfg, gen.cls, gen.inst, seed).final_policy, gen.inst)))
        medians.append(float(np.median(gaps)))
    elapsed = time.perf_counter() - t0
    ok = medians[0] > medians[1] > medians[2] and medians[2] < 0.5 * medians[0] and elapsed < 600
    report(7, ok, "median gap at T=500/2000/8000: " + " / ".join(f"{m:.4f}" for m in medians)
           + f" (decreasing, last < 0.5x first), {elapsed:.0f}s (< 600s)")
    assert ok


# --- 8


def sandwich_trial(t: int, preset: dict) -> tuple[bool, bool]:
    gen = generate_instance(InstanceSpec(5, 4, class_size=20, deltas=(0.05, 0.2)), 5000 + t)
    inst, sources, cls = gen
    cfg = TpoConfig(2000, 100, 0.01, delta=0.1, sources=tuple(sources), **preset)
    env = PreferenceEnv(inst, t)
    pols = [("online", inst.pi_ref)] + [(f"source:{w}", closed_form_policy(r, inst)) for w, r in enumerate(sources)]
    data = PreferenceDataset(inst.num_states, inst.num_actions)
    for i in range(2000):
        tag, p = pols[i % len(pols)]
        s = env.prompt()
        a, at = env.act(p, s), env.act(inst.ref, s)
        data.append(PreferenceSample(s, a, at, env.label(s, a, at), tag), p)
    est = dict(tps_select(data, cfg, cls, inst).estimated_values)
    optimistic = all(est[tag] >= value_vs_ref(p, inst.r_star, inst) for tag, p in pols[1:])
    sol = rpo_solve(cls, data, inst, rpo_eta(len(data), cfg, len(cls), inst.r_max))
    pessimistic = est["distilled"] <= value_vs_ref(sol.pi_dstl, inst.r_star, inst)
    return optimistic, pessimistic


@pytest.mark.parametrize("preset", ["literal", "desk"])
def test_criterion_8_tps_sandwich(preset):
    res = np.array([sandwich_trial(t, TPS_PRESETS[preset]) for t in range(200)])
    opt, pes, both = res[:, 0].mean(), res[:, 1].mean(), res.all(axis=1).mean()
    ok = both >= 0.9
    report(f"8 [{preset}]", ok, f"optimism {opt:.3f}, pessimism {pes:.3f}, both {both:.3f} over 200 trials (>= 0.90)")
    assert ok


# --- 9


def transfer_regrets(deltas, seeds: int = 20) -> tuple[float, float]:
    tpo, online = [], []
    for seed in range(seeds):
        gen = generate_instance(InstanceSpec(10, 8, class_size=50, deltas=deltas), 1000 + seed)
        cfg = TpoConfig(5000, 1000, default_alpha(1.0, 0.1, 1000), sources=tuple(gen.sources), **TPS_PRESETS["desk"])
        tpo.append(tpo_run(cfg, gen.cls, gen.inst, seed, prompt_seed=seed).cum_regret[-1])
        online.append(online_run(5000, gen.cls, gen.inst, seed, N=1000, prompt_seed=seed).cum_regret[-1])
    return float(np.mean(tpo)), float(np.mean(online))


def test_criterion_9a_good_source_beats_online():
    t0 = time.perf_counter()
    a, b = transfer_regrets((0.01, 0.3, 0.5))
    ok = a < b
    report("9a", ok, f"Delta_min = 0.01 R: TPO {a:.2f} vs online {b:.2f} (ratio {a / b:.3f}, need < 1), "
                     f"{time.perf_counter() - t0:.0f}s")
    a0, b0 = transfer_regrets((0.0, 0.3, 0.5))
    info("9a", f"Delta_min = 0: TPO {a0:.2f} vs online {b0:.2f} (ratio {a0 / b0:.3f})")
    assert ok


def test_criterion_9b_bad_sources_bounded_cost():
    t0 = time.perf_counter()
    a, b = transfer_regrets((0.3, 0.4, 0.5))
    ok = a <= 1.5 * b
    report("9b", ok, f"all Delta >= 0.3 R: TPO {a:.2f} vs online {b:.2f} (ratio {a / b:.3f}, need <= 1.5), "
                     f"{time.perf_counter() - t0:.0f}s")
    assert ok


# --- 10


def test_criterion_10_empirical_tpo_behaviour():
    rng = np.random.default_rng(10)
    worst = 0.0
    for kind in PO_KINDS:
        for _ in range(50):
            S, A = int(rng.integers(1, 4)), int(rng.integers(2, 5))
            logits = rng.normal(size=(S, A))
            ref = rng.dirichlet(np.ones(A), size=S)
            n = int(rng.integers(1, 20))
            w = rng.integers(A, size=n)
            batch = PairBatch(rng.integers(S, size=n), w, (w + rng.integers(1, A, size=n)) % A, rng.integers(A, size=n))
            beta = float(rng.uniform(0.05, 2.0))
            _, grad = po_loss_and_grad(kind, logits, ref, batch, beta, 0.1)
            num = np.zeros_like(logits)
            for idx in np.ndindex(logits.shape):
                up, dn = logits.copy(), logits.copy()
                up[idx] += 1e-5
                dn[idx] -= 1e-5
                num[idx] = (po_loss_and_grad(kind, up, ref, batch, beta, 0.1)[0]
                            - po_loss_and_grad(kind, dn, ref, batch, beta, 0.1)[0]) / 2e-5
            worst = max(worst, float(np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-8)))

    shares = []
    for seed in range(20):
        gen = generate_instance(InstanceSpec(5, 4, class_size=2, r_max=4.0, beta=1.0, deltas=(0.0, 0.2, 0.25, 0.3)),
                                9000 + seed)
        opt = PolicyOptimizer.from_policy("dpo", gen.inst.pi_ref, learning_rate=0.7, steps=100, beta_po=gen.inst.beta)
        res = empirical_tpo_run(EmpiricalConfig(3, 1000, wr_self=0.55), gen.sources, gen.inst, opt, seed)
        shares.append(selection_shares(res.selection_log, len(gen.sources), 3))
    shares = np.array(shares)  # (seeds, K, 1 + W): column 0 is the online arm
    block1 = np.median(shares[:, 0, 1:], axis=0)
    per_seed = int(np.sum(shares[:, 0, 1] >= shares[:, 0, 2:].max(axis=1)))
    online = np.median(shares[:, :, 0], axis=0)
    dominant = block1[0] == block1.max() and per_seed == 20
    monotone = bool(np.all(np.diff(online) >= 0))
    ok = worst < 1e-6 and dominant and monotone
    report(10, ok, f"worst gradient rel. error {worst:.2e} (< 1e-6); median block-1 source shares "
                   f"{np.round(block1, 3).tolist()} (dominant source max in median and in {per_seed}/20 seeds); "
                   f"median online share by block {np.round(online, 3).tolist()} (nondecreasing)")
    assert ok


# --- 11


def test_criterion_11_determinism(tmp_path):
    cfg = ExperimentConfig(InstanceSpec(4, 3, class_size=8, deltas=(0.0, 0.3)),
                           ("tpo", "empirical-tpo", "online-only", "transfer-fixed:1"), 300, 100, trials=3,
                           master_seed=11)
    run_roster(cfg, tmp_path / "a")
    run_roster(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in Path(tmp_path / "a").rglob("*") if p.is_file())
    csvs = [f for f in files if f.suffix == ".csv"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok = same and len(csvs) >= 10
    report(11, ok, f"{len(files)} output files ({len(csvs)} CSV) byte-identical across two runs: {same}")
    assert ok
