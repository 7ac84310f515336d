"""Group Relative Policy Optimization on the toy report policy.

One iteration: draw a study, sample ``G`` candidates from the current
policy (which becomes ``pi_old``), score them with the composite reward,
standardize rewards within the group, then ascend

    J = 1/G sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - beta KL(pi || pi_ref)

with ``rho_i = pi(o_i|x) / pi_old(o_i|x)``. ``pi_ref`` is the warm-start
policy and stays frozen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import IdfTable, StudyRecord, build_idf
from .labeler import Labeler, default_lexicon
from .labels import NO_FINDING, LabelValue
from .metrics import MetricsReport, evaluate_outputs, multilabel_f1
from .policy import (
    N_ANS,
    N_FIND,
    PolicyParams,
    answer_vector,
    greedy_actions,
    head_probs,
    kl_divergence,
    kl_grad,
    logprob_grad,
    render_think,
    sample_actions,
    sequence_logprob,
    softmax,
    target_actions,
)
from .protocol import StructuredOutput, parse_output, render_output
from .rewards import DEFAULT_MATRIX, CfsScoringMatrix, RewardBreakdown, RewardWeights, score_group

log = logging.getLogger(__name__)


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, message: str, candidate: int | None = None):
        super().__init__(message)
        self.candidate = candidate


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.03
    adv_eps: float = 1e-4
    learning_rate: float = 0.5
    iterations: int = 500
    updates_per_group: int = 1
    seed: int = 0
    weights: RewardWeights = field(default_factory=RewardWeights)
    matrix: CfsScoringMatrix = DEFAULT_MATRIX
    warm_start_epochs: int = 200
    warm_start_lr: float = 1.0
    # Armijo backtracking on each group's objective; 0 disables it
    max_backtracks: int = 30

    def validate(self) -> list[str]:
        """Every violated constraint, not just the first."""
        problems = []
        if not (isinstance(self.group_size, int) and self.group_size >= 2):
            problems.append("group_size must be an integer >= 2")
        if not 0 < self.clip_eps < 1:
            problems.append("clip_eps must lie in (0, 1)")
        if not self.beta >= 0:
            problems.append("beta must be >= 0")
        if not self.adv_eps >= 0:
            problems.append("adv_eps must be >= 0")
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if not (isinstance(self.iterations, int) and self.iterations >= 0):
            problems.append("iterations must be an integer >= 0")
        if not (isinstance(self.updates_per_group, int) and self.updates_per_group >= 1):
            problems.append("updates_per_group must be an integer >= 1")
        if not (isinstance(self.warm_start_epochs, int) and self.warm_start_epochs >= 0):
            problems.append("warm_start_epochs must be an integer >= 0")
        if not self.warm_start_lr > 0:
            problems.append("warm_start_lr must be > 0")
        if not (isinstance(self.max_backtracks, int) and self.max_backtracks >= 0):
            problems.append("max_backtracks must be an integer >= 0")
        return problems

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        d["matrix"] = self.matrix.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "weights" in kw:
            kw["weights"] = RewardWeights.from_json(kw["weights"])
        if "matrix" in kw:
            kw["matrix"] = CfsScoringMatrix.from_json(kw["matrix"])
        return cls(**kw)


@dataclass
class Candidate:
    finding_actions: np.ndarray
    answer_actions: np.ndarray
    rendered: StructuredOutput
    raw: str
    logprob_old: float
    logprob_cur: float | None = None
    logprob_ref: float | None = None
    reward: RewardBreakdown | None = None
    advantage: float = 0.0


@dataclass
class CandidateGroup:
    observation: np.ndarray
    candidates: list[Candidate]
    reward_mean: float = 0.0
    reward_std: float = 0.0

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("a group needs at least 2 candidates")

    @property
    def finding_actions(self) -> np.ndarray:
        return np.stack([c.finding_actions for c in self.candidates])

    @property
    def answer_actions(self) -> np.ndarray:
        return np.stack([c.answer_actions for c in self.candidates])

    @property
    def advantages(self) -> np.ndarray:
        return np.array([c.advantage for c in self.candidates])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([c.reward.total for c in self.candidates])

    @property
    def logprob_old(self) -> np.ndarray:
        return np.array([c.logprob_old for c in self.candidates])


def render_candidate(f: np.ndarray, a: np.ndarray) -> tuple[str, StructuredOutput]:
    raw = render_output(render_think(f), answer_vector(a))
    return raw, parse_output(raw)


def sample_group(params_old: PolicyParams, obs: Sequence[int], G: int,
                 rng: np.random.Generator | int) -> CandidateGroup:
    """``G`` independent candidates from ``pi_old(.|obs)``, rendered and with exact log-probs."""
    if G < 2:
        raise ValueError("G must be >= 2")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    obs = np.asarray(obs, dtype=int)
    f, a = sample_actions(params_old, obs, G, rng)
    lp = sequence_logprob(params_old, obs, f, a)
    cands = []
    for i in range(G):
        raw, out = render_candidate(f[i], a[i])
        cands.append(Candidate(f[i], a[i], out, raw, float(lp[i]), float(lp[i])))
    return CandidateGroup(obs, cands)


def standardize(rewards: np.ndarray, adv_eps: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    centered = r - r.mean()
    std = r.std()  # population std
    # a constant group carries no signal; the mean can be off by an ulp, so
    # don't leave rounding residue behind as a spurious update
    if r.size == 0 or np.all(r == r[0]) or std + adv_eps == 0:
        return np.zeros_like(r)
    return centered / (std + adv_eps)


def compute_advantages(group: CandidateGroup, adv_eps: float = 1e-4) -> CandidateGroup:
    r = group.rewards
    adv = standardize(r, adv_eps)
    cands = [replace(c, advantage=float(A)) for c, A in zip(group.candidates, adv)]
    return replace(group, candidates=cands, reward_mean=float(r.mean()), reward_std=float(r.std()))


def surrogate_terms(ratio: np.ndarray, adv: np.ndarray, clip_eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-candidate clipped surrogate values and d(value)/d(ratio)."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    value = np.minimum(unclipped, clipped)
    # Gradient flows only where the unclipped branch is the one selected.
    dvalue = np.where(unclipped <= clipped, adv, 0.0)
    return value, dvalue


def _objective_parts(params: PolicyParams, group: CandidateGroup, ref: PolicyParams, cfg: TrainConfig):
    obs = group.observation
    adv = group.advantages
    lp_cur = sequence_logprob(params, obs, group.finding_actions, group.answer_actions)
    log_ratio = lp_cur - group.logprob_old
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_ratio)
        value_i, dratio = surrogate_terms(ratio, adv, cfg.clip_eps)
    bad = np.flatnonzero(~np.isfinite(value_i) | ~np.isfinite(ratio))
    if bad.size:
        raise NonFiniteObjectiveError(f"non-finite surrogate for candidate {bad[0]}", int(bad[0]))
    kl = kl_divergence(params, ref, obs) if cfg.beta else 0.0
    value = float(value_i.mean() - cfg.beta * kl)
    if not np.isfinite(value):
        raise NonFiniteObjectiveError("non-finite objective (KL term)")
    return value, ratio, dratio


def grpo_value(params: PolicyParams, group: CandidateGroup, ref: PolicyParams, cfg: TrainConfig) -> float:
    """Objective value alone (no gradient)."""
    return _objective_parts(params, group, ref, cfg)[0]


def grpo_objective(params: PolicyParams, group: CandidateGroup, ref: PolicyParams,
                   cfg: TrainConfig) -> tuple[float, PolicyParams]:
    """Objective value and its exact gradient with respect to ``params``."""
    value, ratio, dratio = _objective_parts(params, group, ref, cfg)
    obs = group.observation
    # d ratio_i / d theta = ratio_i * grad log pi(o_i)
    grad = logprob_grad(params, obs, group.finding_actions, group.answer_actions,
                        dratio * ratio / len(ratio))
    if cfg.beta:
        grad = grad + kl_grad(params, ref, obs) * (-cfg.beta)
    return value, grad


def ascent_step(params: PolicyParams, group: CandidateGroup, ref: PolicyParams,
                cfg: TrainConfig) -> tuple[PolicyParams, float]:
    """One gradient step on the group objective, halving the step until it is an Armijo ascent.

    A fixed step diverges when ``beta * curvature(KL)`` is large relative to
    ``1 / learning_rate``; backtracking keeps every update an ascent on J.
    Returns the new parameters and the objective value before the step.
    """
    value, grad = grpo_objective(params, group, ref, cfg)
    step = cfg.learning_rate
    if cfg.max_backtracks == 0:
        return params + grad * step, value
    g2 = float(grad.flat() @ grad.flat())
    for _ in range(cfg.max_backtracks + 1):
        cand = params + grad * step
        try:
            new_value = grpo_value(cand, group, ref, cfg)
        except NonFiniteObjectiveError:
            new_value = -np.inf
        if new_value >= value + 1e-4 * step * g2:
            return cand, value
        step *= 0.5
    return params, value


def _row_counts(studies: Sequence[StudyRecord]):
    from .corpus import N_EVIDENCE
    from .labels import N_CATEGORIES
    nf = np.zeros((N_EVIDENCE, N_CATEGORIES, N_FIND))
    na = np.zeros((N_EVIDENCE, N_CATEGORIES, N_FIND, N_ANS))
    cats = np.arange(N_CATEGORIES)
    for s in studies:
        if s.observation is None:
            raise ValueError(f"study {s.study_id} has no observation")
        obs = np.asarray(s.observation, dtype=int)
        f, a = target_actions(s.labels)
        nf[obs, cats, f] += 1
        na[obs, cats, f, a] += 1
    return nf, na


def log_likelihood(params: PolicyParams, studies: Sequence[StudyRecord]) -> float:
    """Mean per-study log-likelihood of the warm-start target actions."""
    if not studies:
        return 0.0
    total = 0.0
    for s in studies:
        f, a = target_actions(s.labels)
        total += float(sequence_logprob(params, np.asarray(s.observation), f, a)[0])
    return total / len(studies)


def warm_start(params: PolicyParams, corpus: Sequence[StudyRecord], epochs: int = 200,
               lr: float = 1.0) -> PolicyParams:
    """Supervised maximum-likelihood fit of both heads to the corpus' target actions.

    Full-batch gradient ascent where each (evidence, category[, finding])
    row is normalized by its own count, i.e. every softmax row ascends its
    own mean log-likelihood. Rows never seen in the corpus are untouched.
    """
    if not corpus:
        raise ValueError("warm start needs a non-empty corpus")
    nf, na = _row_counts(corpus)
    tf = nf.sum(axis=-1, keepdims=True)
    ta = na.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        emp_f = np.where(tf > 0, nf / tf, 0.0)
        emp_a = np.where(ta > 0, na / ta, 0.0)
    seen_f, seen_a = tf > 0, ta > 0
    out = params.copy()
    for _ in range(epochs):
        out.finding += lr * np.where(seen_f, emp_f - softmax(out.finding), 0.0)
        out.answer += lr * np.where(seen_a, emp_a - softmax(out.answer), 0.0)
    return out


@dataclass
class TraceRow:
    iteration: int
    study_id: str
    reward_mean: float
    reward_std: float
    r1: float
    r2: float
    r3: float
    r4: float
    r5: float
    kl: float
    objective: float
    scs_macro: float
    scs_micro: float

    def to_json(self) -> dict:
        return asdict(self)


def _group_scs(group: CandidateGroup, labeler: Labeler) -> tuple[float, float]:
    outs = [c.rendered for c in group.candidates]
    truths = [labeler.extract(o.think_text) for o in outs]
    preds = [o.answer_labels for o in outs]
    return multilabel_f1(preds, truths, "macro"), multilabel_f1(preds, truths, "micro")


def train(cfg: TrainConfig, corpus: Sequence[StudyRecord], params: PolicyParams | None = None,
          ref: PolicyParams | None = None, labeler: Labeler | None = None,
          idf: IdfTable | None = None,
          on_step: Callable[[TraceRow], None] | None = None) -> tuple[PolicyParams, list[TraceRow]]:
    """Run GRPO; returns the final parameters and the per-iteration trace.

    With no ``params``/``ref``, the policy is warm-started from zeros on the
    training split and that fit is frozen as the reference.
    """
    train_set = [s for s in corpus if s.split == "train"] or list(corpus)
    if not train_set:
        raise ValueError("empty training corpus")
    labeler = labeler or default_lexicon()
    idf = idf if idf is not None else build_idf(train_set)
    if params is None:
        params = warm_start(PolicyParams.zeros(), train_set, cfg.warm_start_epochs, cfg.warm_start_lr)
    ref = (ref if ref is not None else params).copy()
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for it in range(cfg.iterations):
        study = train_set[int(rng.integers(len(train_set)))]
        obs = np.asarray(study.observation, dtype=int)
        group = sample_group(params, obs, cfg.group_size, rng)
        rewards = score_group([c.rendered for c in group.candidates], study.labels,
                              study.findings_text, cfg.weights, labeler, idf, cfg.matrix)
        for c, r in zip(group.candidates, rewards):
            c.reward = r
        group = compute_advantages(group, cfg.adv_eps)
        value = 0.0
        for _ in range(cfg.updates_per_group):
            params, value = ascent_step(params, group, ref, cfg)
        if not params.is_finite():
            raise NonFiniteObjectiveError(f"parameters became non-finite at iteration {it}")
        comps = np.array([r.components for r in rewards]).mean(axis=0)
        s_mac, s_mic = _group_scs(group, labeler)
        row = TraceRow(it, study.study_id, group.reward_mean, group.reward_std, *map(float, comps),
                       kl=kl_divergence(params, ref, obs), objective=value,
                       scs_macro=s_mac, scs_micro=s_mic)
        trace.append(row)
        if on_step is not None:
            on_step(row)
        if it % 100 == 0:
            log.debug("iter %d reward %.4f kl %.5f", it, row.reward_mean, row.kl)
    return params, trace


def generate(params: PolicyParams, observations: Iterable[Sequence[int]], decode: str = "sample",
             seed: int = 0) -> list[str]:
    """Raw protocol strings for each observation (``decode`` is ``"sample"`` or ``"greedy"``)."""
    rng = np.random.default_rng(seed)
    out = []
    for obs in observations:
        obs = np.asarray(obs, dtype=int)
        if decode == "greedy":
            f, a = greedy_actions(params, obs)
        elif decode == "sample":
            f, a = sample_actions(params, obs, 1, rng)
        else:
            raise ValueError(f"unknown decode {decode!r}")
        out.append(render_candidate(f[0], a[0])[0])
    return out


def evaluate_policy(params: PolicyParams, studies: Sequence[StudyRecord], decode: str = "sample",
                    seed: int = 0, labeler: Labeler | None = None) -> MetricsReport:
    raws = generate(params, [s.observation for s in studies], decode, seed)
    outs = [parse_output(r) for r in raws]
    return evaluate_outputs(outs, [s.findings_text for s in studies], [s.labels for s in studies],
                            labeler)


def write_trace(trace: Iterable[TraceRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace:
            fh.write(json.dumps(row.to_json(), sort_keys=True) + "\n")
