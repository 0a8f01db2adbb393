"""Verification and clustering metrics.

Scores are similarities (higher means more likely same identity).  The
error-rate sweep walks midpoint thresholds between distinct scores, where
the false-accept rate falls and the false-reject rate rises, and linearly
interpolates at the sign change of their difference.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTrials,
    EmptyInput,
    InvalidConfig,
    LengthMismatch,
    NonFiniteValue,
    UnknownUtterance,
    ZeroVector,
)


@dataclass(eq=False)
class ScoredTrials:
    """Similarity scores with same-identity flags for a set of trial pairs."""

    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=bool)
        if self.scores.shape != self.targets.shape or self.scores.ndim != 1:
            raise LengthMismatch(
                f"scores {self.scores.shape} vs targets {self.targets.shape}"
            )
        if self.scores.size == 0:
            raise DegenerateTrials("no trials")
        if not np.all(np.isfinite(self.scores)):
            raise NonFiniteValue("non-finite trial score")
        n_t = int(self.targets.sum())
        if n_t == 0 or n_t == self.scores.size:
            raise DegenerateTrials("need both target and non-target trials")


@dataclass(frozen=True)
class DcfConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise InvalidConfig("p_target must be in (0, 1)")
        if self.c_miss <= 0.0 or self.c_fa <= 0.0:
            raise InvalidConfig("costs must be positive")


def _sweep(scored: ScoredTrials):
    """Thresholds (with sentinels beyond the extremes) and per-threshold rates."""
    tar = np.sort(scored.scores[scored.targets])
    non = np.sort(scored.scores[~scored.targets])
    all_scores = np.unique(scored.scores)
    mids = (all_scores[:-1] + all_scores[1:]) / 2.0
    thresholds = np.concatenate(
        ([all_scores[0] - 1.0], mids, [all_scores[-1] + 1.0])
    )
    # accept iff score >= threshold
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, far, frr


def eer(scored: ScoredTrials):
    """Equal error rate and its threshold, interpolated at the crossing.

    The difference frr - far is non-decreasing in the threshold and spans
    [-1, 1], so it has exactly one sign change.
    """
    thresholds, far, frr = _sweep(scored)
    d = frr - far
    idx = int(np.argmax(d >= 0.0))
    if d[idx] == 0.0:
        return float(frr[idx]), float(thresholds[idx])
    lo = idx - 1
    alpha = -d[lo] / (d[idx] - d[lo])
    value = frr[lo] + alpha * (frr[idx] - frr[lo])
    thr = thresholds[lo] + alpha * (thresholds[idx] - thresholds[lo])
    return float(value), float(thr)


def min_dcf(scored: ScoredTrials, config: DcfConfig = DcfConfig()):
    """Minimum normalized detection cost and the threshold attaining it."""
    thresholds, far, frr = _sweep(scored)
    cost = config.c_miss * config.p_target * frr + config.c_fa * (1.0 - config.p_target) * far
    norm = min(config.c_miss * config.p_target, config.c_fa * (1.0 - config.p_target))
    dcf = cost / norm
    idx = int(np.argmin(dcf))
    return float(dcf[idx]), float(thresholds[idx])


def score_trials(embeddings: dict, trials) -> ScoredTrials:
    """Cosine-score each trial pair from a sample_id -> embedding mapping."""
    scores = np.empty(len(trials))
    targets = np.empty(len(trials), dtype=bool)
    for i, t in enumerate(trials):
        for sid in (t.a, t.b):
            if sid not in embeddings:
                raise UnknownUtterance(f"no embedding for {sid}")
        a, b = np.asarray(embeddings[t.a]), np.asarray(embeddings[t.b])
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ZeroVector(f"zero embedding in trial ({t.a}, {t.b})")
        scores[i] = float(a @ b) / (na * nb)
        targets[i] = t.target
    return ScoredTrials(scores, targets)


# -- clustering agreement --------------------------------------------------

def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _check_label_pair(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size == 0:
        raise EmptyInput("empty labelings")
    if a.size != b.size:
        raise LengthMismatch(f"{a.size} vs {b.size} labels")
    return a, b


def nmi(a, b) -> float:
    """Mutual information normalized by the arithmetic mean of the entropies.

    Two zero-entropy labelings agree perfectly (1.0); if only one side is
    constant there is nothing to predict and the score is 0.0.
    """
    a, b = _check_label_pair(a, b)
    table = _contingency(a, b)
    n = table.sum()
    p = table / n
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    ha = float(-np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    hb = float(-np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mask = p > 0
    outer = np.outer(pa, pb)
    mi = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(outer[mask]))))
    return float(np.clip(2.0 * mi / (ha + hb), 0.0, 1.0))


def purity(pred, truth) -> float:
    """Fraction of samples in the majority truth class of their cluster."""
    pred, truth = _check_label_pair(pred, truth)
    table = _contingency(pred, truth)
    return float(table.max(axis=1).sum() / table.sum())


def metric_record(metric: str, value: float, iteration: int, modality: str,
                  config_hash: str) -> dict:
    """Uniform row shape for the metrics stream."""
    return {
        "metric": str(metric),
        "value": float(value),
        "iteration": int(iteration),
        "modality": str(modality),
        "config_hash": str(config_hash),
    }
