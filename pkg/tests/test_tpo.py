from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import random_instance
from tpolab.core import (
    InvalidInputError,
    PolicyClass,
    PreferenceDataset,
    PreferenceSample,
    RewardTable,
    closed_form_policy,
    sample_action,
    sample_label,
)
from tpolab.env import TRACE_FIELDS, PreferenceEnv, derive_seed
from tpolab.estimation import class_rewards, mle_index, value_vs_ref
from tpolab.harness.generate import InstanceSpec, generate_instance, source_gap
from tpolab.tpo import (
    TPS_PRESETS,
    OracleParams,
    TpoConfig,
    block_indices,
    default_alpha,
    fixed_transfer_run,
    online_oracle_index,
    online_oracle_step,
    online_run,
    source_tag,
    tpo_run,
    tps_select,
)


def small_gen(seed: int, deltas=(0.0, 0.3), S: int = 5, A: int = 4, M: int = 20):
    return generate_instance(InstanceSpec(S, A, class_size=M, deltas=deltas), seed)


# --- config and indexing


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TpoConfig(100, 10, 1.0)
    with pytest.raises(InvalidInputError):
        TpoConfig(100, 10, 0.0)
    with pytest.raises(InvalidInputError):
        TpoConfig(105, 10, 0.5)
    with pytest.raises(InvalidInputError):
        TpoConfig(100, 10, 0.05)  # floor(alpha N) = 0
    cfg = TpoConfig(100, 10, 0.3)
    assert (cfg.K, cfg.online_steps, cfg.W) == (10, 3, 0)
    with pytest.raises(InvalidInputError):
        OracleParams("bogus")


def test_default_alpha_clamped():
    assert default_alpha(1.0, 0.1, 100) == pytest.approx(0.01)
    assert default_alpha(1.0, 0.1, 1000) == pytest.approx(1e-3)  # e^-10 clamps to 1/N
    assert default_alpha(1.0, 10.0, 4) == pytest.approx(0.75)  # e^-0.1 clamps to 1 - 1/N


def test_block_indices():
    N = 7
    for tau in range(1, 50):
        k, n = block_indices(tau, N)
        assert k == math.ceil(tau / N) and n == (tau - 1) % N + 1 and 1 <= n <= N
        assert (k - 1) * N + n == tau


# --- online oracle


def test_oracle_cold_start_is_reference(rng):
    inst = random_instance(rng)
    cls = PolicyClass((inst.optimal_policy(),))
    empty = PreferenceDataset(inst.num_states, inst.num_actions)
    for kind in ("optimistic-mle", "xpo-like"):
        assert online_oracle_index(empty, cls, inst, OracleParams(kind)) == -1
        assert online_oracle_step(empty, cls, inst, OracleParams(kind)) is inst.pi_ref


def test_oracle_without_bonus_exploits_mle(rng):
    gen = small_gen(5, deltas=())
    inst, _, cls = gen
    data = PreferenceDataset(inst.num_states, inst.num_actions)
    r = inst.r_star.values
    for _ in range(3000):
        s = int(rng.choice(inst.num_states, p=inst.rho))
        a, at = (int(x) for x in rng.choice(inst.num_actions, 2))
        data.append(PreferenceSample(s, a, at, int(r[s, a] >= r[s, at]), "online"), inst.ref)
    i_mle, _ = mle_index(cls, data, inst)
    values = value_vs_ref(cls.stack, class_rewards(cls, inst)[i_mle], inst)
    assert online_oracle_index(data, cls, inst, OracleParams(c_ol=0.0)) == int(np.argmax(values))


@pytest.mark.parametrize("kind", ["optimistic-mle", "xpo-like"])
def test_oracle_regret_is_sublinear(kind):
    cums = []
    for seed in range(20):
        inst, _, cls = small_gen(4000 + seed, deltas=())
        cums.append(online_run(2000, cls, inst, seed, oracle=OracleParams(kind)).cum_regret)
    c = np.mean(cums, axis=0)
    per_step = np.diff(np.r_[0.0, c])
    assert per_step[-200:].mean() < per_step[:200].mean()
    assert c[1999] / 2000 < 0.5 * c[199] / 200


# --- transfer selection


def data_from(inst, policy, producer: str, n: int, rng) -> PreferenceDataset:
    d = PreferenceDataset(inst.num_states, inst.num_actions)
    for _ in range(n):
        s = int(rng.choice(inst.num_states, p=inst.rho))
        a, at = sample_action(policy.probs, s, rng), sample_action(inst.ref, s, rng)
        d.append(PreferenceSample(s, a, at, sample_label(inst.r_star, s, a, at, rng), producer), policy)
    return d


def test_tps_noise_free_picks_exact_argmax(rng):
    for seed in range(5):
        gen = small_gen(100 + seed, deltas=(0.0, 0.2, 0.4))
        inst, sources, cls = gen
        cfg = TpoConfig(1000, 100, 0.1, sources=tuple(sources))
        data = data_from(inst, inst.pi_ref, "online", 200, rng)
        choice = tps_select(data, cfg, cls, inst, exact=True)
        values = [v for _, v in choice.estimated_values]
        assert values[1] == pytest.approx(value_vs_ref(closed_form_policy(sources[0], inst), inst.r_star, inst))
        best = int(np.argmax(values))
        assert (choice.kind == "distilled") == (best == 0)
        if best:
            assert choice.source_id == best - 1


def test_tps_zero_count_source_chosen_first(rng):
    inst, sources, cls = small_gen(7, deltas=(0.0, 0.5))
    cfg = TpoConfig(1000, 100, 0.1, sources=tuple(sources))
    data = data_from(inst, closed_form_policy(sources[0], inst), source_tag(0), 300, rng)
    choice = tps_select(data, cfg, cls, inst)
    assert choice.kind == "source" and choice.source_id == 1
    assert dict(choice.estimated_values)[source_tag(1)] == math.inf


def test_tps_infinite_ties_go_to_lowest_source(rng):
    inst, _, cls = small_gen(8, deltas=())
    same = RewardTable(inst.r_star.values)
    cfg = TpoConfig(1000, 100, 0.1, sources=(same, same))
    data = data_from(inst, inst.optimal_policy(), "online", 50, rng)
    choice = tps_select(data, cfg, cls, inst)
    assert choice.kind == "source" and choice.source_id == 0  # both infinite: lowest id


# --- runs


def test_tpo_run_without_sources_completes():
    inst, _, cls = small_gen(9, deltas=())
    cfg = TpoConfig(400, 100, 0.2)
    res = tpo_run(cfg, cls, inst, 0)
    kinds = {r.policy_kind for r in res.regret_trace}
    assert kinds <= {"online", "distilled"} and len(res.regret_trace) == 400
    assert all(c.kind == "distilled" for c in res.selection_log)


def test_trace_invariants():
    inst, sources, cls = small_gen(10)
    cfg = TpoConfig(300, 100, 0.2, sources=tuple(sources))
    res = tpo_run(cfg, cls, inst, 1)
    steps = [r.step for r in res.regret_trace]
    assert steps == list(range(1, 301))
    for r in res.regret_trace:
        assert (r.block, r.inner) == block_indices(r.step, 100)
        assert (r.policy_kind == "online") == (r.inner <= cfg.online_steps)
        assert r.inst_regret >= -1e-10
    assert np.all(np.diff(res.cum_regret) >= 0)
    header = res.trace_csv().splitlines()[0]
    assert header == ",".join(TRACE_FIELDS)
    js = json.loads(json.dumps(res.to_json()))
    assert len(js["final_policy"]) == inst.num_states and js["selection_log"][0]["kind"] in ("source", "distilled")


def test_run_is_deterministic():
    inst, sources, cls = small_gen(11)
    cfg = TpoConfig(200, 100, 0.2, sources=tuple(sources))
    assert tpo_run(cfg, cls, inst, 3).trace_csv() == tpo_run(cfg, cls, inst, 3).trace_csv()
    assert tpo_run(cfg, cls, inst, 3).trace_csv() != tpo_run(cfg, cls, inst, 4).trace_csv()


def test_shared_prompt_stream_across_algorithms():
    inst, sources, cls = small_gen(12)
    cfg = TpoConfig(100, 100, 0.2, sources=tuple(sources))
    p = derive_seed(0, "prompts", 0)
    a = tpo_run(cfg, cls, inst, 1, prompt_seed=p)
    b = online_run(100, cls, inst, 2, prompt_seed=p)
    ea, eb = PreferenceEnv(inst, 1, p), PreferenceEnv(inst, 2, p)
    assert [ea.prompt() for _ in range(20)] == [eb.prompt() for _ in range(20)]
    assert len(a.regret_trace) == len(b.regret_trace)


def test_fixed_transfer_plays_source_policy():
    inst, sources, cls = small_gen(13)
    res = fixed_transfer_run(50, sources[1], 1, inst, 0)
    assert {r.category for r in res.regret_trace} == {"source:1"}
    assert res.inst_regret[0] == pytest.approx(source_gap(sources[1], inst), abs=1e-12)


def test_zero_gap_source_dominates_transfer_steps():
    """A source equal to r* (or the distilled policy) takes > 80% of transfer steps after block 1."""
    preset = TPS_PRESETS["desk"]
    for seed in range(20):
        gen = generate_instance(InstanceSpec(10, 4, class_size=20, deltas=(0.0, 0.3, 0.5)), 3000 + seed)
        cfg = TpoConfig(2000, 500, default_alpha(1.0, 0.1, 500), sources=tuple(gen.sources), **preset)
        res = tpo_run(cfg, gen.cls, gen.inst, seed)
        rows = [r for r in res.regret_trace if r.block > 1 and r.policy_kind != "online"]
        good = sum(r.category in ("source:0", "distilled") for r in rows)
        assert good / len(rows) > 0.8, seed


def test_source_validation():
    inst, _, cls = small_gen(14, deltas=())
    bad = RewardTable(np.full(inst.pi_ref.shape, 5.0))
    with pytest.raises(InvalidInputError):
        tpo_run(TpoConfig(100, 100, 0.2, sources=(bad,)), cls, inst, 0)
