import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from consistrad.corpus import CorpusSpec, generate_corpus
from consistrad.grpo import (
    Candidate,
    CandidateGroup,
    NonFiniteObjectiveError,
    TrainConfig,
    ascent_step,
    compute_advantages,
    evaluate_policy,
    generate,
    grpo_objective,
    grpo_value,
    log_likelihood,
    sample_group,
    standardize,
    surrogate_terms,
    train,
    warm_start,
    write_trace,
)
from consistrad.labels import N_CATEGORIES
from consistrad.policy import (
    N_ANS,
    N_FIND,
    PolicyParams,
    greedy_actions,
    head_probs,
    kl_divergence,
    kl_grad,
    sequence_logprob,
    target_actions,
)
from consistrad.protocol import parse_output
from consistrad.rewards import RewardBreakdown, RewardWeights

from oracles import central_difference

G_SMALL = 4


def with_rewards(group, rewards):
    for c, r in zip(group.candidates, rewards):
        c.reward = RewardBreakdown(0, 0, 0, 0, 0, total=float(r))
    return group


def random_instance(seed, G=G_SMALL, beta=0.03):
    rng = np.random.default_rng(seed)
    obs = rng.integers(3, size=N_CATEGORIES)
    old = PolicyParams.random(rng, 0.5)
    ref = PolicyParams.random(rng, 0.5)
    cur = old + PolicyParams.random(rng, 0.1)
    group = with_rewards(sample_group(old, obs, G, rng), rng.normal(size=G))
    group = compute_advantages(group, 1e-4)
    return cur, group, ref, TrainConfig(beta=beta, group_size=G)


# --- sampling ----------------------------------------------------------------

def test_degenerate_logits_give_identical_candidates():
    p = PolicyParams.zeros()
    p.finding[..., 1] = 1e6
    p.answer[..., 2] = 1e6
    group = sample_group(p, np.zeros(14, dtype=int), 8, 0)
    assert len({c.raw for c in group.candidates}) == 1
    assert np.all(group.finding_actions == 1) and np.all(group.answer_actions == 2)
    assert np.allclose(group.logprob_old, 0.0, atol=1e-12)


def test_uniform_logits_frequencies_within_three_sigma():
    G = 10000
    group = sample_group(PolicyParams.zeros(), np.arange(14) % 3, G, 123)
    f, a = group.finding_actions, group.answer_actions
    for actions, k in ((f, N_FIND), (a, N_ANS)):
        p = 1.0 / k
        sigma = math.sqrt(G * p * (1 - p))
        for c in range(N_CATEGORIES):
            counts = np.bincount(actions[:, c], minlength=k)
            assert np.all(np.abs(counts - G * p) <= 3 * sigma), (c, counts)


def test_sampling_is_seed_deterministic():
    p = PolicyParams.random(np.random.default_rng(1))
    obs = np.arange(14) % 3
    a, b = sample_group(p, obs, 8, 42), sample_group(p, obs, 8, 42)
    assert [c.raw for c in a.candidates] == [c.raw for c in b.candidates]
    assert np.array_equal(a.logprob_old, b.logprob_old)


def test_logprobs_are_exact_and_ratios_start_at_one():
    rng = np.random.default_rng(2)
    p = PolicyParams.random(rng)
    obs = rng.integers(3, size=14)
    group = sample_group(p, obs, 6, rng)
    pf, pa = head_probs(p, obs)
    for c in group.candidates:
        manual = sum(math.log(pf[k, c.finding_actions[k]]) + math.log(pa[k, c.finding_actions[k], c.answer_actions[k]])
                     for k in range(14))
        assert c.logprob_old == pytest.approx(manual, abs=1e-10)
    ratios = np.exp(sequence_logprob(p, obs, group.finding_actions, group.answer_actions) - group.logprob_old)
    assert np.array_equal(ratios, np.ones(6))
    for c in group.candidates:
        assert parse_output(c.raw).flags.tags_present


def test_group_requires_two():
    with pytest.raises(ValueError):
        sample_group(PolicyParams.zeros(), np.zeros(14, dtype=int), 1, 0)


def test_probabilities_sum_to_one():
    pf, pa = head_probs(PolicyParams.random(np.random.default_rng(3), 5.0), np.arange(14) % 3)
    assert np.abs(pf.sum(-1) - 1).max() < 1e-12
    assert np.abs(pa.sum(-1) - 1).max() < 1e-12


# --- advantages --------------------------------------------------------------

def test_advantages_two_point_example():
    assert standardize(np.array([0.0, 1.0]), 0.0).tolist() == [-1.0, 1.0]


def test_equal_rewards_zero_advantages():
    assert standardize(np.full(8, 2.5), 1e-4).tolist() == [0.0] * 8
    assert standardize(np.full(8, 2.5), 0.0).tolist() == [0.0] * 8


rewards_st = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=16)


@given(rewards_st, st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=1000, deadline=None)
def test_advantage_invariants(r, a, b):
    r = np.array(r)
    adv = standardize(r, 1e-4)
    assert abs(adv.sum()) < 1e-9
    if r.std() > 1e-6:
        exact = standardize(r, 0.0)
        assert exact.std() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(standardize(a * r + b, 0.0), exact, atol=1e-7)


def test_compute_advantages_records_group_stats():
    group = with_rewards(sample_group(PolicyParams.zeros(), np.zeros(14, dtype=int), 4, 0), [1, 2, 3, 4])
    group = compute_advantages(group, 0.0)
    assert group.reward_mean == 2.5
    assert group.reward_std == pytest.approx(math.sqrt(1.25))
    assert group.advantages.sum() == pytest.approx(0.0, abs=1e-12)


# --- KL ----------------------------------------------------------------------

def test_kl_log_two_on_a_two_action_head():
    q, p = PolicyParams.zeros(), PolicyParams.zeros()
    q.finding[0, 0] = [0.0, 0.0, -60.0, -60.0]
    p.finding[0, 0] = [60.0, 0.0, -60.0, -60.0]
    p.answer[...] = q.answer[...] = 0.0
    obs = np.zeros(14, dtype=int)
    assert kl_divergence(p, q, obs) == pytest.approx(math.log(2), abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=1000, deadline=None)
def test_kl_nonnegative_and_zero_at_identity(seed):
    rng = np.random.default_rng(seed)
    p, q = PolicyParams.random(rng, 2.0), PolicyParams.random(rng, 2.0)
    obs = rng.integers(3, size=14)
    assert kl_divergence(p, q, obs) >= 0.0
    assert kl_divergence(p, p, obs) == 0.0


def test_kl_matches_joint_enumeration_on_one_category():
    rng = np.random.default_rng(5)
    p, q = PolicyParams.random(rng), PolicyParams.random(rng)
    # make every category but 0 identical so the joint KL reduces to one factor
    p.finding[:, 1:] = q.finding[:, 1:]
    p.answer[:, 1:] = q.answer[:, 1:]
    obs = np.zeros(14, dtype=int)
    pf, pa = head_probs(p, obs)
    qf, qa = head_probs(q, obs)
    brute = sum(pf[0, f] * pa[0, f, a] * math.log(pf[0, f] * pa[0, f, a] / (qf[0, f] * qa[0, f, a]))
                for f in range(N_FIND) for a in range(N_ANS))
    assert kl_divergence(p, q, obs) == pytest.approx(brute, abs=1e-12)


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    p, q = PolicyParams.random(rng), PolicyParams.random(rng)
    obs = rng.integers(3, size=14)
    g = kl_grad(p, q, obs).flat()
    fd = central_difference(lambda v: kl_divergence(PolicyParams.from_flat(np.array(v)), q, obs), list(p.flat()))
    assert np.max(np.abs(g - fd)) < 1e-8


# --- objective ---------------------------------------------------------------

def test_hand_value_with_clipped_min():
    p = PolicyParams.zeros()
    obs = np.zeros(14, dtype=int)
    base = sample_group(p, obs, 2, 0)
    cands = []
    for c, ratio, adv in zip(base.candidates, (0.5, 1.5), (-1.0, 1.0)):
        cands.append(Candidate(c.finding_actions, c.answer_actions, c.rendered, c.raw,
                               logprob_old=c.logprob_old - math.log(ratio), advantage=adv))
    value, _ = grpo_objective(p, CandidateGroup(obs, cands), p, TrainConfig(clip_eps=0.2))
    assert value == pytest.approx(0.2, abs=1e-12)


def test_identity_point_value_is_zero():
    cur, group, _, cfg = random_instance(7)
    old = PolicyParams.zeros()
    group = compute_advantages(with_rewards(sample_group(old, group.observation, 6, 1), np.arange(6)), 1e-4)
    value, _ = grpo_objective(old, group, old, cfg)
    assert value == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(0.01, 5), min_size=1, max_size=20), st.lists(st.floats(-3, 3), min_size=1, max_size=20),
       st.floats(0.05, 0.9))
@settings(max_examples=1000, deadline=None)
def test_clip_dominance(ratios, advs, eps):
    n = min(len(ratios), len(advs))
    r, a = np.array(ratios[:n]), np.array(advs[:n])
    value, _ = surrogate_terms(r, a, eps)
    assert np.all(value <= r * a + 1e-15)


def _relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)


def test_gradient_check_random_instances():
    worst = 0.0
    for seed in range(100):
        cur, group, ref, cfg = random_instance(seed)
        _, g = grpo_objective(cur, group, ref, cfg)
        mask = PolicyParams.zeros()
        mask.finding[group.observation, np.arange(14)] = 1
        mask.answer[group.observation, np.arange(14)] = 1
        rows = mask.flat() > 0
        base = cur.flat()
        idx = np.flatnonzero(rows)

        def f(sub):
            v = base.copy()
            v[idx] = sub
            return grpo_value(PolicyParams.from_flat(v), group, ref, cfg)

        fd = np.array(central_difference(f, list(base[idx]), h=1e-5))
        worst = max(worst, float(_relative_error(g.flat()[idx], fd).max()))
        assert np.all(g.flat()[~rows] == 0.0)
    assert worst < 1e-5


def test_equal_rewards_give_zero_surrogate_update():
    for seed in range(50):
        cur, group, ref, _ = random_instance(seed)
        group = compute_advantages(with_rewards(group, [3.0] * G_SMALL), 1e-4)
        _, g = grpo_objective(cur, group, ref, TrainConfig(beta=0.0, group_size=G_SMALL))
        assert np.all(g.flat() == 0.0)


def test_update_direction_invariant_to_affine_rewards():
    for seed in range(50):
        cur, group, ref, cfg = random_instance(seed)
        r = np.random.default_rng(seed).normal(size=G_SMALL)
        g1 = grpo_objective(cur, compute_advantages(with_rewards(group, r), 0.0), ref, cfg)[1].flat()
        g2 = grpo_objective(cur, compute_advantages(with_rewards(group, 3 * r + 7), 0.0), ref, cfg)[1].flat()
        assert np.allclose(g1, g2, atol=1e-10)


def test_nonfinite_surrogate_names_candidate():
    cur, group, ref, cfg = random_instance(0)
    group.candidates[2].logprob_old = -1e6
    with pytest.raises(NonFiniteObjectiveError) as err:
        grpo_objective(cur, group, ref, cfg)
    assert err.value.candidate == 2


def test_ascent_step_never_decreases_objective():
    for seed in range(30):
        cur, group, ref, _ = random_instance(seed)
        cfg = TrainConfig(beta=1e4, learning_rate=5.0, group_size=G_SMALL)
        new, before = ascent_step(cur, group, ref, cfg)
        assert grpo_objective(new, group, ref, cfg)[0] >= before


# --- warm start --------------------------------------------------------------

@pytest.fixture(scope="module")
def clean_corpus():
    return generate_corpus(CorpusSpec(n_studies=200, p_uncertain=0.05, seed=0))


def test_warm_start_zero_epochs_is_identity(clean_corpus):
    p = PolicyParams.random(np.random.default_rng(0))
    out = warm_start(p, clean_corpus, epochs=0)
    assert np.array_equal(out.flat(), p.flat())


def test_warm_start_reaches_perfect_accuracy(clean_corpus):
    p = warm_start(PolicyParams.zeros(), clean_corpus, epochs=200)
    for s in clean_corpus:
        f, a = greedy_actions(p, np.asarray(s.observation))
        tf, ta = target_actions(s.labels)
        assert np.array_equal(f[0], tf) and np.array_equal(a[0], ta)


def test_warm_start_heldout_likelihood_is_monotone(clean_corpus):
    held = generate_corpus(CorpusSpec(n_studies=200, p_uncertain=0.05, seed=99))
    p = PolicyParams.zeros()
    prev = log_likelihood(p, held)
    for _ in range(60):
        p = warm_start(p, clean_corpus, epochs=1, lr=0.5)
        cur = log_likelihood(p, held)
        assert cur >= prev - 1e-12
        prev = cur


def test_warm_start_empty_corpus():
    with pytest.raises(ValueError):
        warm_start(PolicyParams.zeros(), [])


# --- training ----------------------------------------------------------------

def test_huge_beta_stays_at_reference(clean_corpus):
    ref = warm_start(PolicyParams.zeros(), clean_corpus)
    params, trace = train(TrainConfig(beta=1e6, iterations=100), clean_corpus, params=ref, ref=ref)
    for s in clean_corpus[:50]:
        assert kl_divergence(params, ref, np.asarray(s.observation)) < 1e-3
    assert max(row.kl for row in trace) < 1e-3


def test_answer_only_reward_learns_answers():
    corpus = generate_corpus(CorpusSpec(n_studies=200, seed=1))
    cfg = TrainConfig(weights=RewardWeights(0, 0, 1, 0, 0), iterations=500, seed=1)
    params, _ = train(cfg, corpus, params=PolicyParams.zeros(), ref=PolicyParams.zeros())
    test = generate_corpus(CorpusSpec(n_studies=300, seed=2))
    right = total = 0
    for raw, s in zip(generate(params, [t.observation for t in test], "greedy"), test):
        ans = parse_output(raw).answer_labels
        right += sum(x is y for x, y in zip(ans, s.labels))
        total += 14
    assert right / total >= 0.95


def test_trace_is_deterministic(clean_corpus, tmp_path):
    cfg = TrainConfig(iterations=30, seed=3)
    p1, t1 = train(cfg, clean_corpus)
    p2, t2 = train(cfg, clean_corpus)
    write_trace(t1, tmp_path / "a.jsonl")
    write_trace(t2, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert np.array_equal(p1.flat(), p2.flat())
    assert len(t1) == 30 and all(math.isfinite(r.kl) for r in t1)


def test_evaluate_policy_decodes(clean_corpus):
    p = warm_start(PolicyParams.zeros(), clean_corpus)
    greedy = evaluate_policy(p, clean_corpus[:50], decode="greedy")
    assert greedy.answer_micro_f1 == 1.0 and greedy.scs_micro == 1.0
    assert evaluate_policy(p, clean_corpus[:50], seed=4).to_dict() == evaluate_policy(p, clean_corpus[:50], seed=4).to_dict()
    with pytest.raises(ValueError):
        generate(p, [clean_corpus[0].observation], decode="beam")


def test_config_validation_lists_everything():
    with pytest.raises(ValueError) as err:
        TrainConfig(group_size=1, clip_eps=1.5, beta=-1)
    msg = str(err.value)
    assert "group_size" in msg and "clip_eps" in msg and "beta" in msg
    cfg = TrainConfig(iterations=7)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_checkpoint_round_trip(tmp_path):
    p = PolicyParams.random(np.random.default_rng(0))
    p.save(tmp_path / "ck.json")
    assert np.array_equal(PolicyParams.load(tmp_path / "ck.json").flat(), p.flat())
