"""Factorized categorical report policy.

Per category ``c`` with evidence symbol ``e``, the policy first picks a
*finding* action (which sentence, if any, goes into the think block) and
then an *answer* action conditioned on that finding::

    pi(o | x) = prod_c  softmax(finding[e, c])[f_c] * softmax(answer[e, c, f_c])[a_c]

All log-probabilities, KL divergences and their gradients are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import N_EVIDENCE, TEMPLATES
from .labels import CATEGORIES, N_CATEGORIES, NO_FINDING, LabelValue, LabelVector, Provenance

FINDING_ACTIONS = ("positive", "negative", "uncertain", "omit")
ANSWER_ACTIONS = (LabelValue.POSITIVE, LabelValue.NEGATIVE, LabelValue.UNCERTAIN)
N_FIND, N_ANS = len(FINDING_ACTIONS), len(ANSWER_ACTIONS)
OMIT = 3
FILLER_SENTENCE = "Frontal view of the chest."
CHECKPOINT_VERSION = 1
_CATS = np.arange(N_CATEGORIES)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


@dataclass
class PolicyParams:
    finding: np.ndarray  # (evidence, category, finding action)
    answer: np.ndarray   # (evidence, category, finding action, answer action)

    def __post_init__(self):
        self.finding = np.asarray(self.finding, dtype=float)
        self.answer = np.asarray(self.answer, dtype=float)
        if self.finding.shape != (N_EVIDENCE, N_CATEGORIES, N_FIND):
            raise ValueError(f"finding logits have shape {self.finding.shape}")
        if self.answer.shape != (N_EVIDENCE, N_CATEGORIES, N_FIND, N_ANS):
            raise ValueError(f"answer logits have shape {self.answer.shape}")

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls(np.zeros((N_EVIDENCE, N_CATEGORIES, N_FIND)),
                   np.zeros((N_EVIDENCE, N_CATEGORIES, N_FIND, N_ANS)))

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0) -> "PolicyParams":
        z = cls.zeros()
        return cls.from_flat(rng.normal(scale=scale, size=z.size))

    @property
    def size(self) -> int:
        return self.finding.size + self.answer.size

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.finding.copy(), self.answer.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.finding.ravel(), self.answer.ravel()])

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "PolicyParams":
        k = N_EVIDENCE * N_CATEGORIES * N_FIND
        return cls(v[:k].reshape(N_EVIDENCE, N_CATEGORIES, N_FIND),
                   v[k:].reshape(N_EVIDENCE, N_CATEGORIES, N_FIND, N_ANS))

    def __add__(self, other: "PolicyParams") -> "PolicyParams":
        return PolicyParams(self.finding + other.finding, self.answer + other.answer)

    def __mul__(self, k: float) -> "PolicyParams":
        return PolicyParams(self.finding * k, self.answer * k)

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.finding).all() and np.isfinite(self.answer).all())

    def to_json(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "finding_actions": list(FINDING_ACTIONS),
            "answer_actions": [a.name.lower() for a in ANSWER_ACTIONS],
            "categories": list(CATEGORIES),
            "finding": self.finding.tolist(),
            "answer": self.answer.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PolicyParams":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
        return cls(np.array(d["finding"]), np.array(d["answer"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def head_probs(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Finding probs (14, 4) and answer probs (14, 4, 3) for one observation."""
    obs = np.asarray(obs, dtype=int)
    return softmax(params.finding[obs, _CATS]), softmax(params.answer[obs, _CATS])


def sample_actions(params: PolicyParams, obs: np.ndarray, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` joint samples; returns finding and answer action arrays of shape (n, 14)."""
    pf, pa = head_probs(params, obs)
    u = rng.random((n, N_CATEGORIES))
    f = (u[..., None] > np.cumsum(pf, axis=-1)).sum(axis=-1).clip(max=N_FIND - 1)
    pa_sel = pa[_CATS, f]                                   # (n, 14, 3)
    v = rng.random((n, N_CATEGORIES))
    a = (v[..., None] > np.cumsum(pa_sel, axis=-1)).sum(axis=-1).clip(max=N_ANS - 1)
    return f, a


def greedy_actions(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pf, pa = head_probs(params, obs)
    f = pf.argmax(axis=-1)
    return f[None], pa[_CATS, f].argmax(axis=-1)[None]


def sequence_logprob(params: PolicyParams, obs: np.ndarray, f: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Exact log pi(o|x) for each row of (f, a); shape (n,)."""
    obs = np.asarray(obs, dtype=int)
    lf = log_softmax(params.finding[obs, _CATS])            # (14, 4)
    la = log_softmax(params.answer[obs, _CATS])             # (14, 4, 3)
    f, a = np.atleast_2d(f), np.atleast_2d(a)
    return lf[_CATS, f].sum(axis=-1) + la[_CATS, f, a].sum(axis=-1)


def logprob_grad(params: PolicyParams, obs: np.ndarray, f: np.ndarray, a: np.ndarray,
                 weights: np.ndarray) -> PolicyParams:
    """Gradient of ``sum_i weights[i] * log pi(o_i|x)``."""
    obs = np.asarray(obs, dtype=int)
    pf, pa = head_probs(params, obs)
    f, a = np.atleast_2d(f), np.atleast_2d(a)
    w = np.asarray(weights, dtype=float)
    g = PolicyParams.zeros()
    # finding head: sum_i w_i (onehot(f_ic) - p_c)
    onehot_f = np.zeros((len(w), N_CATEGORIES, N_FIND))
    np.put_along_axis(onehot_f, f[..., None], 1.0, axis=-1)
    g.finding[obs, _CATS] = np.einsum("i,icj->cj", w, onehot_f) - w.sum() * pf
    # answer head: only the row of the sampled finding action gets gradient
    ga = np.zeros((N_CATEGORIES, N_FIND, N_ANS))
    for i in range(len(w)):
        ga[_CATS, f[i]] -= w[i] * pa[_CATS, f[i]]
        ga[_CATS, f[i], a[i]] += w[i]
    g.answer[obs, _CATS] = ga
    return g


def kl_divergence(p: PolicyParams, q: PolicyParams, obs: np.ndarray) -> float:
    """Exact KL(pi_p(.|x) || pi_q(.|x)) of the joint factorized policy.

    Chain rule per category: KL(finding) + sum_f p(f) KL(answer | f).
    """
    obs = np.asarray(obs, dtype=int)
    lpf, lqf = log_softmax(p.finding[obs, _CATS]), log_softmax(q.finding[obs, _CATS])
    lpa, lqa = log_softmax(p.answer[obs, _CATS]), log_softmax(q.answer[obs, _CATS])
    pf, pa = np.exp(lpf), np.exp(lpa)
    kl_ans = (pa * (lpa - lqa)).sum(axis=-1)                # (14, 4)
    return float((pf * (lpf - lqf + kl_ans)).sum())


def kl_grad(p: PolicyParams, q: PolicyParams, obs: np.ndarray) -> PolicyParams:
    """Gradient of :func:`kl_divergence` with respect to ``p``."""
    obs = np.asarray(obs, dtype=int)
    lpf, lqf = log_softmax(p.finding[obs, _CATS]), log_softmax(q.finding[obs, _CATS])
    lpa, lqa = log_softmax(p.answer[obs, _CATS]), log_softmax(q.answer[obs, _CATS])
    pf, pa = np.exp(lpf), np.exp(lpa)
    h = lpa - lqa
    kl_ans = (pa * h).sum(axis=-1, keepdims=True)
    gterm = lpf - lqf + kl_ans[..., 0]
    g = PolicyParams.zeros()
    g.finding[obs, _CATS] = pf * (gterm - (pf * gterm).sum(axis=-1, keepdims=True))
    g.answer[obs, _CATS] = pf[..., None] * pa * (h - kl_ans)
    return g


def render_think(f: np.ndarray) -> str:
    """Think text for one row of finding actions, via the sentence templates."""
    sentences = []
    if f[NO_FINDING] == 0:
        sentences.append(TEMPLATES["No Finding"][0])
    for c, name in enumerate(CATEGORIES):
        if c != NO_FINDING and f[c] != OMIT:
            sentences.append(TEMPLATES[name][f[c]])
    return " ".join(sentences) or FILLER_SENTENCE


def answer_vector(a: np.ndarray) -> LabelVector:
    return LabelVector(tuple(ANSWER_ACTIONS[k] for k in a), Provenance.ANSWER_BLOCK)


def target_actions(labels: LabelVector) -> tuple[np.ndarray, np.ndarray]:
    """Actions that reproduce ``labels`` verbatim: the supervised warm-start targets."""
    slot = {LabelValue.POSITIVE: 0, LabelValue.NEGATIVE: 1, LabelValue.UNCERTAIN: 2}
    f = np.array([slot[v] for v in labels])
    if labels[NO_FINDING] is not LabelValue.POSITIVE:
        f[NO_FINDING] = OMIT
    a = np.array([ANSWER_ACTIONS.index(v) for v in labels])
    return f, a
