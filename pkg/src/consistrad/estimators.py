"""scikit-learn style wrappers over the labeler, reward engine and trainer.

These let the pieces sit in a ``Pipeline`` or be cloned with
``sklearn.base.clone``; constructor arguments are stored verbatim and all
fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import N_EVIDENCE, Evidence, IdfTable, StudyRecord, build_idf, generate_report
from .grpo import TrainConfig, evaluate_policy, generate, train, warm_start
from .labeler import Labeler, default_lexicon
from .labels import N_CATEGORIES, LabelVector
from .policy import PolicyParams
from .protocol import StructuredOutput, parse_output
from .rewards import DEFAULT_MATRIX, CfsScoringMatrix, RewardWeights, reward_total


def check_texts(X) -> list[str]:
    """Coerce a 1-d iterable of strings; rejects 2-d input and non-strings."""
    if isinstance(X, str):
        raise ValueError("expected a sequence of texts, got a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d sequence of texts, got shape {arr.shape}")
    bad = [i for i, t in enumerate(arr) if not isinstance(t, str)]
    if bad:
        raise TypeError(f"non-string entries at positions {bad[:5]}")
    return list(arr)


def check_observations(X) -> np.ndarray:
    """(n, 14) integer evidence matrix with entries in 0..2."""
    arr = np.asarray(X)
    if arr.ndim == 1 and arr.size == N_CATEGORIES:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != N_CATEGORIES:
        raise ValueError(f"observations must have shape (n, {N_CATEGORIES}), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("observations must be integer evidence codes")
        arr = arr.astype(int)
    if arr.size and (arr.min() < 0 or arr.max() >= N_EVIDENCE):
        raise ValueError(f"evidence codes must lie in 0..{N_EVIDENCE - 1}")
    return arr


def check_label_matrix(Y) -> np.ndarray:
    """(n, 14) float matrix whose entries are 1.0, 0.0 or -1.0."""
    arr = np.asarray(Y, dtype=float)
    if arr.ndim == 1 and arr.size == N_CATEGORIES:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != N_CATEGORIES:
        raise ValueError(f"label matrix must have shape (n, {N_CATEGORIES}), got {arr.shape}")
    ok = np.isin(arr, (1.0, 0.0, -1.0))
    if not ok.all():
        rows, cols = np.nonzero(~ok)
        raise ValueError(f"label values must be 1, 0 or -1; bad cell at ({rows[0]}, {cols[0]})")
    return arr


def _vectors(Y: np.ndarray) -> list[LabelVector]:
    return [LabelVector.from_values(row) for row in Y]


def _outputs(X) -> list[StructuredOutput]:
    return [x if isinstance(x, StructuredOutput) else parse_output(x) for x in X]


class RuleBasedLabeler(BaseEstimator, TransformerMixin):
    """Findings texts -> (n, 14) label matrix. Stateless; ``fit`` only validates."""

    def __init__(self, lexicon: Labeler | None = None):
        self.lexicon = lexicon

    def fit(self, X, y=None):
        check_texts(X)
        self.lexicon_ = self.lexicon or default_lexicon()
        self.n_features_out_ = N_CATEGORIES
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "lexicon_")
        texts = check_texts(X)
        return np.array([self.lexicon_.extract(t).as_floats() for t in texts]).reshape(-1, N_CATEGORIES)


class CompositeReward(BaseEstimator):
    """Scores raw protocol outputs against reference studies.

    ``fit`` learns the IDF table from reference findings texts. ``transform``
    returns an (n, 6) array of r1..r5 and the weighted total.
    """

    def __init__(self, weights: Sequence[float] = (0.2, 0.5, 1.0, 0.3, 0.5),
                 matrix: CfsScoringMatrix = DEFAULT_MATRIX, lexicon: Labeler | None = None):
        self.weights = weights
        self.matrix = matrix
        self.lexicon = lexicon

    def fit(self, reference_texts, y=None):
        self.idf_: IdfTable = build_idf(check_texts(reference_texts))
        self.weights_ = RewardWeights.from_sequence(self.weights)
        return self

    def breakdowns(self, X, reference_texts, reference_labels):
        check_is_fitted(self, "idf_")
        outs = _outputs(X)
        refs = check_texts(reference_texts)
        Y = check_label_matrix(reference_labels)
        if not (len(outs) == len(refs) == len(Y)):
            raise ValueError("outputs, reference texts and labels differ in length")
        labeler = self.lexicon or default_lexicon()
        return [reward_total(o, t, r, self.weights_, labeler, self.idf_, self.matrix)
                for o, r, t in zip(outs, refs, _vectors(Y))]

    def transform(self, X, reference_texts, reference_labels) -> np.ndarray:
        rows = [b.components + (b.total,) for b in self.breakdowns(X, reference_texts, reference_labels)]
        return np.array(rows, dtype=float).reshape(-1, 6)

    def score(self, X, reference_texts, reference_labels) -> float:
        """Mean total reward."""
        return float(self.transform(X, reference_texts, reference_labels)[:, 5].mean())


class GRPOReportGenerator(BaseEstimator):
    """Warm start plus GRPO on the toy policy.

    ``X`` is an (n, 14) evidence matrix, ``y`` an (n, 14) label matrix and
    ``reference_texts`` the findings texts (synthesized from ``y`` when
    omitted). ``predict`` returns raw ``<think>``/``<answer>`` strings.
    """

    def __init__(self, group_size: int = 8, clip_eps: float = 0.2, beta: float = 0.03,
                 adv_eps: float = 1e-4, learning_rate: float = 0.5, iterations: int = 500,
                 weights: Sequence[float] = (0.2, 0.5, 1.0, 0.3, 0.5),
                 warm_start_epochs: int = 200, decode: str = "sample", random_state: int = 0):
        self.group_size = group_size
        self.clip_eps = clip_eps
        self.beta = beta
        self.adv_eps = adv_eps
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.weights = weights
        self.warm_start_epochs = warm_start_epochs
        self.decode = decode
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(group_size=self.group_size, clip_eps=self.clip_eps, beta=self.beta,
                           adv_eps=self.adv_eps, learning_rate=self.learning_rate,
                           iterations=self.iterations, seed=self.random_state,
                           weights=RewardWeights.from_sequence(self.weights),
                           warm_start_epochs=self.warm_start_epochs)

    @staticmethod
    def _studies(X, y, reference_texts=None) -> list[StudyRecord]:
        obs = check_observations(X)
        Y = check_label_matrix(y)
        if len(obs) != len(Y):
            raise ValueError(f"X has {len(obs)} rows but y has {len(Y)}")
        vecs = _vectors(Y)
        texts = check_texts(reference_texts) if reference_texts is not None else [generate_report(v) for v in vecs]
        return [StudyRecord(f"s{i:06d}", t, v, tuple(Evidence(int(e)) for e in o))
                for i, (o, v, t) in enumerate(zip(obs, vecs, texts))]

    def fit(self, X, y, reference_texts=None):
        cfg = self._config()
        studies = self._studies(X, y, reference_texts)
        self.reference_policy_ = warm_start(PolicyParams.zeros(), studies, cfg.warm_start_epochs,
                                            cfg.warm_start_lr)
        self.policy_, self.trace_ = train(cfg, studies, params=self.reference_policy_,
                                          ref=self.reference_policy_)
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "policy_")
        return generate(self.policy_, check_observations(X), self.decode, self.random_state)

    def score(self, X, y, reference_texts=None) -> float:
        """Answer Micro-F1 of decoded outputs against ``y``."""
        check_is_fitted(self, "policy_")
        report = evaluate_policy(self.policy_, self._studies(X, y, reference_texts), self.decode,
                                 self.random_state)
        return report.answer_micro_f1


__all__ = [
    "CompositeReward",
    "GRPOReportGenerator",
    "RuleBasedLabeler",
    "check_label_matrix",
    "check_observations",
    "check_texts",
]
