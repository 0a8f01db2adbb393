"""Loss-gated pseudo-label training with confidence-gated label correction.

Per-sample losses on clean views follow a two-component mixture in the log
domain: a low-loss component (labels the model agrees with) and a high-loss
component (likely wrong labels).  A two-Gaussian EM fit separates them; the
gate threshold is the point where the two weighted component densities are
equal.  Samples under the threshold train normally on their augmented view;
samples above it either get a soft corrected target (when the model is
confident on the clean view) or are skipped.

The margin-penalized classifier head and the correction loss both live here,
as does the two-modality agreement gate.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .errors import (
    DegenerateFit,
    DegenerateMeans,
    EmptyBatch,
    EmptyInput,
    InvalidConfig,
    InvalidLabel,
    NonDistribution,
    NonPositiveTemperature,
    NonPositiveVariance,
    TooFewSamples,
)

_VAR_FLOOR = 1e-6
_WEIGHT_FLOOR = 1e-6
_COS_CLAMP = 1.0 - 1e-7


# -- two-component mixture -------------------------------------------------

@dataclass(frozen=True)
class Gmm2:
    """Two-component univariate Gaussian mixture, components sorted by mean."""

    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w1, w2 = self.weights
        if abs(w1 + w2 - 1.0) > 1e-9:
            raise InvalidConfig(f"weights must sum to 1, got {w1 + w2}")
        if w1 < _WEIGHT_FLOOR or w2 < _WEIGHT_FLOOR:
            raise InvalidConfig(f"weights must be >= {_WEIGHT_FLOOR}")
        if self.variances[0] < _VAR_FLOOR or self.variances[1] < _VAR_FLOOR:
            raise NonPositiveVariance(f"variances must be >= {_VAR_FLOOR}")
        if self.means[0] > self.means[1]:
            raise InvalidConfig("components must be sorted by mean")


def gaussian_pdf(x, mean: float, var: float):
    """Univariate normal density; accepts scalars or arrays."""
    if var <= 0.0:
        raise NonPositiveVariance(f"variance must be > 0, got {var}")
    x = np.asarray(x, dtype=np.float64)
    z = (x - mean) ** 2 / (2.0 * var)
    out = np.exp(-z) / math.sqrt(2.0 * math.pi * var)
    return float(out) if out.ndim == 0 else out


def fit_gmm2(losses, max_iters: int = 500, tol: float = 1e-12,
             trace: list | None = None) -> Gmm2:
    """EM fit of a 2-component Gaussian mixture to log(losses).

    Initialization is deterministic: the lower and upper halves of the sorted
    values seed the two components.  Weights and variances are floored, and
    components are returned sorted by mean.  When ``trace`` is a list the
    per-iteration log-likelihood is appended to it.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if losses.size == 0:
        raise EmptyInput("no losses to fit")
    if losses.size < 4:
        raise TooFewSamples(f"need at least 4 losses, got {losses.size}")
    if np.any(losses <= 0.0):
        raise InvalidConfig("losses must be positive (log applied internally)")
    x = np.log(losses)
    if np.unique(x).size < 2:
        raise DegenerateFit("all losses identical")

    xs = np.sort(x)
    half = xs.size // 2
    mu = np.array([xs[:half].mean(), xs[half:].mean()])
    var = np.array([
        max(xs[:half].var(), _VAR_FLOOR), max(xs[half:].var(), _VAR_FLOOR),
    ])
    w = np.array([0.5, 0.5])

    prev_ll = -np.inf
    for _ in range(max_iters):
        # E step in the log domain
        log_p = (
            np.log(w)[None, :]
            - 0.5 * np.log(2.0 * np.pi * var)[None, :]
            - (x[:, None] - mu[None, :]) ** 2 / (2.0 * var)[None, :]
        )
        m = log_p.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(log_p - m).sum(axis=1, keepdims=True))
        r = np.exp(log_p - lse)
        ll = float(lse.sum())
        if trace is not None:
            trace.append(ll)
        # M step
        nk_ = r.sum(axis=0)
        w = np.maximum(nk_ / x.size, _WEIGHT_FLOOR)
        w = w / w.sum()
        mu = (r * x[:, None]).sum(axis=0) / nk_
        var = np.maximum(
            (r * (x[:, None] - mu[None, :]) ** 2).sum(axis=0) / nk_, _VAR_FLOOR
        )
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll

    order = np.argsort(mu)
    return Gmm2(
        weights=(float(w[order[0]]), float(w[order[1]])),
        means=(float(mu[order[0]]), float(mu[order[1]])),
        variances=(float(var[order[0]]), float(var[order[1]])),
    )


@dataclass(frozen=True)
class ThresholdResult:
    tau: float
    fallback: bool


def _weighted_pdfs(gmm: Gmm2, x: float):
    p1 = gmm.weights[0] * gaussian_pdf(x, gmm.means[0], gmm.variances[0])
    p2 = gmm.weights[1] * gaussian_pdf(x, gmm.means[1], gmm.variances[1])
    return p1, p2


def solve_threshold(gmm: Gmm2) -> ThresholdResult:
    """Point in [mean1, mean2] where the weighted component densities are equal.

    Solved in closed form (the log-density difference is quadratic), then
    polished by Newton steps so |p1(tau) - p2(tau)| < 1e-9.  When no root
    lies between the means (extremely lopsided weights) the midpoint is
    returned with fallback=True.
    """
    (w1, w2), (m1, m2), (v1, v2) = gmm.weights, gmm.means, gmm.variances
    if m1 == m2:
        raise DegenerateMeans("component means coincide")
    s1, s2 = math.sqrt(v1), math.sqrt(v2)
    rhs = math.log(w2 * s1 / (w1 * s2))
    a = 1.0 / (2.0 * v2) - 1.0 / (2.0 * v1)
    b = m1 / v1 - m2 / v2
    c = m2 * m2 / (2.0 * v2) - m1 * m1 / (2.0 * v1) - rhs

    candidates = []
    if abs(a) < 1e-14:
        if b != 0.0:
            candidates = [-c / b]
    else:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            root = math.sqrt(disc)
            candidates = [(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)]

    mid = 0.5 * (m1 + m2)
    inside = [t for t in candidates if m1 <= t <= m2]
    if not inside:
        return ThresholdResult(tau=mid, fallback=True)
    tau = min(inside, key=lambda t: abs(t - mid))

    for _ in range(50):
        p1, p2 = _weighted_pdfs(gmm, tau)
        f = p1 - p2
        if abs(f) < 1e-9:
            break
        d1 = -p1 * (tau - m1) / v1
        d2 = -p2 * (tau - m2) / v2
        df = d1 - d2
        if df == 0.0:
            break
        tau = tau - f / df
    return ThresholdResult(tau=float(tau), fallback=False)


# -- sharpening and distributions ------------------------------------------

def sharpen(p, temperature: float) -> np.ndarray:
    """Temperature-sharpen a distribution: softmax(log(p) / temperature)."""
    if not temperature > 0.0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise EmptyInput("empty distribution")
    if np.any(p < 0.0):
        raise NonDistribution("negative probabilities")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise NonDistribution(f"probabilities must sum to 1, got {sums}")
    with np.errstate(divide="ignore"):
        logs = np.log(p)
    z = logs / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- margin-penalized classifier head --------------------------------------

@dataclass(eq=False)
class AamConfig:
    """Additive-angular-margin softmax head over num_classes pseudo-labels."""

    weight: "nk.Tensor"          # (num_classes, embed_dim), trainable
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0.0:
            raise InvalidConfig("scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise InvalidConfig("margin must be in [0, pi/2)")

    @property
    def num_classes(self) -> int:
        return self.weight.data.shape[0]


def _cosines(embeddings, weight) -> "nk.Tensor":
    e = nk.l2_normalize(embeddings)
    w = nk.l2_normalize(weight)
    return nk.clip(nk.matmul(e, nk.transpose(w)), -_COS_CLAMP, _COS_CLAMP)


def aam_loss(embeddings, labels, config: AamConfig):
    """Per-sample margin losses and the margin-free posteriors.

    Returns (losses, probs): losses is a (B,) tensor of
    -log softmax(scale * cos(theta + margin at the label)), probs is a
    constant (B, num_classes) array softmax(scale * cos) used for gating.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise EmptyBatch("labels must be a non-empty 1-D array")
    if np.any(labels < 0) or np.any(labels >= config.num_classes):
        raise InvalidLabel(f"labels must lie in [0, {config.num_classes})")
    emb = nk.as_tensor(embeddings)
    if emb.data.ndim != 2 or emb.data.shape[0] != labels.size:
        raise EmptyBatch(
            f"embeddings {emb.data.shape} do not match {labels.size} labels"
        )

    cos = _cosines(emb, config.weight)
    cos_m, sin_m = math.cos(config.margin), math.sin(config.margin)
    target_cos = nk.take_per_row(cos, labels)
    sin_theta = nk.tsqrt(1.0 - nk.mul(target_cos, target_cos))
    margined = nk.mul(target_cos, cos_m) - nk.mul(sin_theta, sin_m)

    onehot = np.zeros((labels.size, config.num_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    adjusted = nk.add(cos, nk.scale_rows(nk.Tensor(onehot), margined - target_cos))
    log_probs = nk.log_softmax_temp(nk.mul(adjusted, config.scale), 1.0)
    losses = -nk.take_per_row(log_probs, labels)

    with nk.no_grad():
        probs = nk.softmax_temp(nk.mul(cos.detach(), config.scale), 1.0).data
    return losses, probs


def clean_forward(embeddings_data: np.ndarray, labels, config: AamConfig):
    """Stop-gradient pass over clean views: per-sample losses and posteriors."""
    with nk.no_grad():
        losses, probs = aam_loss(nk.Tensor(embeddings_data), labels, config)
    return losses.data, probs


def lc_loss(target_probs: np.ndarray, embeddings, config: AamConfig):
    """Per-sample cross-entropy from fixed corrected targets to the
    margin-free posterior of the (augmented) embeddings."""
    emb = nk.as_tensor(embeddings)
    t = np.asarray(target_probs, dtype=np.float64)
    if t.shape[0] != emb.data.shape[0]:
        raise EmptyBatch("targets do not match batch size")
    cos = _cosines(emb, config.weight)
    log_probs = nk.log_softmax_temp(nk.mul(cos, config.scale), 1.0)
    return nk.mul(nk.sum_axis(nk.mul(nk.Tensor(t), log_probs), 1), -1.0)


# -- the gate --------------------------------------------------------------

@dataclass(eq=False)
class GateState:
    """Threshold state for loss-gated training.

    tau1 lives in the log-loss domain; +inf admits every sample (the state
    of the first epoch, before any mixture has been fitted).  tau2 gates the
    correction branch on clean-view confidence.
    """

    tau1: float = math.inf
    tau2: float = 0.5
    sharpen_temp: float = 0.1
    loss_record: list = field(default_factory=list)
    last_fit: Gmm2 | None = None
    last_fallback: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau2 < 1.0:
            raise InvalidConfig(f"tau2 must be in (0, 1), got {self.tau2}")
        if not self.sharpen_temp > 0.0:
            raise NonPositiveTemperature("sharpen_temp must be > 0")


BRANCH_RELIABLE = "reliable"
BRANCH_CORRECTED = "corrected"
BRANCH_SKIPPED = "skipped"


@dataclass(eq=False)
class StepResult:
    loss: "nk.Tensor"            # scalar, mean over the full batch
    branches: list               # per-sample branch tag
    clean_losses: np.ndarray     # (B,) clean-view margin losses
    max_conf: np.ndarray         # (B,) max clean-view posterior
    num_contributing: int


def dlg_lc_step(clean_emb: np.ndarray, aug_emb, labels, gate: GateState,
                config: AamConfig) -> StepResult:
    """One gated training step.

    clean_emb carries no gradient; aug_emb is the tracked tensor.  Samples
    whose clean log-loss falls under tau1 contribute their augmented-view
    margin loss; the rest contribute a sharpened-clean-target correction
    loss when the clean posterior is confident enough, and nothing
    otherwise.  The batch mean keeps the full batch size as denominator.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.size
    if b == 0:
        raise EmptyBatch("empty batch")

    l_clean, p_clean = clean_forward(np.asarray(clean_emb), labels, config)
    gate.loss_record.extend(l_clean.tolist())
    max_conf = p_clean.max(axis=1)

    with np.errstate(divide="ignore"):
        log_l = np.log(l_clean)
    reliable = log_l < gate.tau1
    confident = max_conf > gate.tau2
    corrected = ~reliable & confident

    branches = [
        BRANCH_RELIABLE if reliable[i]
        else (BRANCH_CORRECTED if corrected[i] else BRANCH_SKIPPED)
        for i in range(b)
    ]

    terms = []
    if reliable.any():
        aug_losses, _ = aam_loss(aug_emb, labels, config)
        terms.append(nk.tsum(nk.mul(aug_losses, nk.Tensor(reliable.astype(float)))))
    if corrected.any():
        targets = sharpen(p_clean, gate.sharpen_temp)
        corr_losses = lc_loss(targets, aug_emb, config)
        terms.append(nk.tsum(nk.mul(corr_losses, nk.Tensor(corrected.astype(float)))))

    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = nk.add(total, t)
        loss = total / float(b)
    else:
        loss = nk.Tensor(0.0)
    return StepResult(
        loss=loss, branches=branches, clean_losses=l_clean,
        max_conf=max_conf, num_contributing=int(reliable.sum() + corrected.sum()),
    )


def refresh_threshold(gate: GateState) -> GateState:
    """Re-estimate tau1 from the losses recorded since the last refresh.

    A degenerate fit (identical losses, coincident means, or too few
    samples) falls back to the log of the 95th-percentile loss, flagged in
    last_fallback.  Clears the record either way.
    """
    if not gate.loss_record:
        raise EmptyInput("no recorded losses to refresh from")
    losses = np.asarray(gate.loss_record, dtype=np.float64)
    try:
        gmm = fit_gmm2(losses)
        result = solve_threshold(gmm)
        gate.tau1 = result.tau
        gate.last_fit = gmm
        gate.last_fallback = result.fallback
    except (DegenerateFit, DegenerateMeans, TooFewSamples):
        gate.tau1 = float(np.log(np.percentile(losses, 95.0)))
        gate.last_fit = None
        gate.last_fallback = True
    gate.loss_record.clear()
    return gate


# -- two-modality agreement gate -------------------------------------------

MM_RELIABLE = "reliable"
MM_HARD = "hard"
MM_SOFT = "soft"
MM_SKIPPED = "skipped"


@dataclass(frozen=True)
class MmDecision:
    kind: str
    hard_label: int | None
    use_audio: bool
    use_visual: bool


def mm_gate(log_l_audio, log_l_visual, p_audio, p_visual,
            tau1_audio: float, tau1_visual: float, tau2: float) -> list:
    """Per-sample routing for two modalities.

    Both clean losses under their thresholds: the pseudo-label is trusted
    as-is.  Otherwise, if the two modalities agree on the clean argmax,
    that shared class becomes a hard label for both.  Failing that, each
    modality falls back to its own confidence-gated soft correction; a
    sample neither modality is confident about is skipped.
    """
    log_l_audio = np.asarray(log_l_audio, dtype=np.float64)
    log_l_visual = np.asarray(log_l_visual, dtype=np.float64)
    p_audio = np.asarray(p_audio, dtype=np.float64)
    p_visual = np.asarray(p_visual, dtype=np.float64)
    decisions = []
    for i in range(log_l_audio.size):
        if log_l_audio[i] < tau1_audio and log_l_visual[i] < tau1_visual:
            decisions.append(MmDecision(MM_RELIABLE, None, True, True))
            continue
        arg_a = int(p_audio[i].argmax())
        arg_v = int(p_visual[i].argmax())
        if arg_a == arg_v:
            decisions.append(MmDecision(MM_HARD, arg_a, True, True))
            continue
        use_a = float(p_audio[i].max()) > tau2
        use_v = float(p_visual[i].max()) > tau2
        if use_a or use_v:
            decisions.append(MmDecision(MM_SOFT, None, use_a, use_v))
        else:
            decisions.append(MmDecision(MM_SKIPPED, None, False, False))
    return decisions


@dataclass(eq=False)
class MmStepResult:
    loss_audio: "nk.Tensor"
    loss_visual: "nk.Tensor"
    decisions: list
    clean_losses_audio: np.ndarray
    clean_losses_visual: np.ndarray
    num_contributing: int


def _masked_mean_terms(per_sample, mask: np.ndarray, b: int):
    if not mask.any():
        return None
    return nk.tsum(nk.mul(per_sample, nk.Tensor(mask.astype(float))))


def mm_dlg_lc_step(clean_audio: np.ndarray, aug_audio, clean_visual: np.ndarray,
                   aug_visual, labels, gate_audio: GateState,
                   gate_visual: GateState, aam_audio: AamConfig,
                   aam_visual: AamConfig) -> MmStepResult:
    """Two-modality gated step sharing one routing decision per sample."""
    labels = np.asarray(labels, dtype=np.int64)
    b = labels.size
    if b == 0:
        raise EmptyBatch("empty batch")
    if gate_audio.tau2 != gate_visual.tau2:
        raise InvalidConfig("modality gates must share tau2")

    l_a, p_a = clean_forward(np.asarray(clean_audio), labels, aam_audio)
    l_v, p_v = clean_forward(np.asarray(clean_visual), labels, aam_visual)
    gate_audio.loss_record.extend(l_a.tolist())
    gate_visual.loss_record.extend(l_v.tolist())

    with np.errstate(divide="ignore"):
        decisions = mm_gate(
            np.log(l_a), np.log(l_v), p_a, p_v,
            gate_audio.tau1, gate_visual.tau1, gate_audio.tau2,
        )

    kinds = np.array([d.kind for d in decisions])
    hard_labels = labels.copy()
    hard_mask = kinds == MM_HARD
    for i in np.flatnonzero(hard_mask):
        hard_labels[i] = decisions[i].hard_label
    pseudo_mask = kinds == MM_RELIABLE
    soft_a = np.array([d.kind == MM_SOFT and d.use_audio for d in decisions])
    soft_v = np.array([d.kind == MM_SOFT and d.use_visual for d in decisions])

    def modality_loss(aug_emb, aam, gate, p_clean, soft_mask):
        terms = []
        margin_mask = pseudo_mask | hard_mask
        if margin_mask.any():
            losses, _ = aam_loss(aug_emb, hard_labels, aam)
            terms.append(_masked_mean_terms(losses, margin_mask, b))
        if soft_mask.any():
            targets = sharpen(p_clean, gate.sharpen_temp)
            terms.append(_masked_mean_terms(lc_loss(targets, aug_emb, aam), soft_mask, b))
        terms = [t for t in terms if t is not None]
        if not terms:
            return nk.Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = nk.add(total, t)
        return total / float(b)

    loss_a = modality_loss(aug_audio, aam_audio, gate_audio, p_a, soft_a)
    loss_v = modality_loss(aug_visual, aam_visual, gate_visual, p_v, soft_v)
    contributing = int(
        (pseudo_mask | hard_mask).sum() + (soft_a | soft_v).sum()
    )
    return MmStepResult(
        loss_audio=loss_a, loss_visual=loss_v, decisions=decisions,
        clean_losses_audio=l_a, clean_losses_visual=l_v,
        num_contributing=contributing,
    )
