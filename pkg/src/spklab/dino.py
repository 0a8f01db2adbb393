"""Negative-pair-free self-distillation pretraining with cluster-aware positives.

A student and a momentum teacher share one architecture: an MLP encoder to an
embedding, then a three-layer projection head whose l2-normalized output meets
row-normalized prototypes.  Teacher outputs are centered (running mean of
logits) and sharpened (low temperature); the student matches them under a
higher temperature via cross-entropy from short views to long views, plus a
cosine-consistency term between long-view embeddings and every partner view.
The teacher trails the student by an exponential moving average whose momentum
ramps to 1.

After a warmup, embeddings are clustered every few epochs and long views are
drawn from cluster members instead of the anchor utterance, so positives span
a (putative) identity rather than one recording.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .clusterlab import kmeans, members_by_cluster
from .errors import (
    BatchLargerThanPopulation,
    EmptyBatch,
    InvalidConfig,
    ShapeMismatch,
)
from .numkit import Rng, ScheduleSpec
from .synthworld import (
    NUM_LONG_VIEWS,
    NUM_SHORT_VIEWS,
    WorldConfig,
    cluster_crop_views,
    crop_views,
)

NUM_VIEWS = NUM_LONG_VIEWS + NUM_SHORT_VIEWS


def repeat_probability(num_speakers: int, batch_size: int) -> float:
    """Probability that a uniformly drawn batch repeats at least one speaker.

    Computed in log space: p = 1 - prod_{i=0}^{N-1} (S - i) / S.
    """
    if num_speakers < 1:
        raise InvalidConfig(f"population must be >= 1, got {num_speakers}")
    if batch_size < 1:
        raise EmptyBatch(f"batch size must be >= 1, got {batch_size}")
    if batch_size > num_speakers:
        raise BatchLargerThanPopulation(
            f"batch of {batch_size} cannot be distinct over {num_speakers}"
        )
    log_none = sum(
        math.log1p(-i / num_speakers) for i in range(batch_size)
    )
    return -math.expm1(log_none)


# -- model -----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple = (64,)
    embed_dim: int = 48
    head_hidden: int = 128
    num_prototypes: int = 256

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.embed_dim,
                self.head_hidden, self.num_prototypes)
        if any(d < 1 for d in dims):
            raise InvalidConfig(f"all dims must be positive, got {dims}")


def init_params(config: EncoderConfig, rng: Rng) -> dict:
    """He-scaled encoder and head weights; row prototypes at unit-ish scale."""
    params = {}
    dims = [config.input_dim, *config.hidden_dims, config.embed_dim]
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = math.sqrt(2.0 / fan_in)
        params[f"enc_w{i}"] = nk.param(rng.child("enc", i).normal((fan_in, fan_out), std))
        params[f"enc_b{i}"] = nk.param(np.zeros(fan_out))
    head_dims = [config.embed_dim, config.head_hidden, config.head_hidden,
                 config.head_hidden]
    for i, (fan_in, fan_out) in enumerate(zip(head_dims[:-1], head_dims[1:])):
        std = math.sqrt(2.0 / fan_in)
        params[f"head_w{i}"] = nk.param(rng.child("head", i).normal((fan_in, fan_out), std))
        params[f"head_b{i}"] = nk.param(np.zeros(fan_out))
    params["proto"] = nk.param(
        rng.child("proto").normal((config.num_prototypes, config.head_hidden),
                                  1.0 / math.sqrt(config.head_hidden))
    )
    return params


def _num_enc_layers(params: dict) -> int:
    return sum(1 for k in params if k.startswith("enc_w"))


def encode(params: dict, x) -> "nk.Tensor":
    """Observation batch to embedding batch; hidden layers ReLU, output linear."""
    h = nk.as_tensor(x)
    n = _num_enc_layers(params)
    for i in range(n):
        h = nk.add(nk.matmul(h, params[f"enc_w{i}"]), params[f"enc_b{i}"])
        if i < n - 1:
            h = nk.relu(h)
    return h


def forward(params: dict, x):
    """Returns (embeddings, prototype logits); logits are cosines in [-1, 1]."""
    embed = encode(params, x)
    z = embed
    for i in range(3):
        z = nk.add(nk.matmul(z, params[f"head_w{i}"]), params[f"head_b{i}"])
        if i < 2:
            z = nk.relu(z)
    z = nk.l2_normalize(z)
    logits = nk.matmul(z, nk.transpose(nk.l2_normalize(params["proto"])))
    return embed, logits


def embed_all(params: dict, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embeddings for a full (N, d) array without building a tape."""
    out = []
    with nk.no_grad():
        for start in range(0, data.shape[0], batch_size):
            out.append(encode(params, data[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


def clone_params(params: dict) -> dict:
    return {k: nk.param(p.data.copy()) for k, p in params.items()}


def ema_update(teacher: dict, student: dict, momentum: float) -> None:
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_s, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise InvalidConfig(f"ema momentum must be in [0, 1], got {momentum}")
    for k, p in teacher.items():
        p.data *= momentum
        p.data += (1.0 - momentum) * student[k].data


# -- distillation losses ---------------------------------------------------

def teacher_probs(logits: np.ndarray, center: np.ndarray, temperature: float) -> np.ndarray:
    """Centered, sharpened teacher targets (constant, no gradient)."""
    with nk.no_grad():
        return nk.softmax_temp(nk.Tensor(logits - center[None, :]), temperature).data


def update_center(center: np.ndarray, teacher_logits: np.ndarray,
                  momentum: float) -> np.ndarray:
    """Running mean of teacher logits: c <- m * c + (1 - m) * batch_mean."""
    if not 0.0 <= momentum < 1.0:
        raise InvalidConfig(f"center momentum must be in [0, 1), got {momentum}")
    return momentum * center + (1.0 - momentum) * teacher_logits.mean(axis=0)


def dino_ce_loss(teacher: list, student_logits: list, student_temp: float,
                 include_self_pairs: bool = False) -> "nk.Tensor":
    """Mean cross-entropy from every teacher view to every other student view.

    teacher: list of (B, K) probability arrays for the long views.
    student_logits: list of (B, K) tensors for all views; the first
    len(teacher) entries are the same long views, and the matching
    teacher/student index pair is excluded unless include_self_pairs.
    """
    if len(teacher) != NUM_LONG_VIEWS or len(student_logits) != NUM_VIEWS:
        raise ShapeMismatch(
            f"expected {NUM_LONG_VIEWS} teacher and {NUM_VIEWS} student views"
        )
    b = teacher[0].shape[0]
    total = None
    count = 0
    for t, probs in enumerate(teacher):
        for s, logits in enumerate(student_logits):
            if s == t and not include_self_pairs:
                continue
            logq = nk.log_softmax_temp(logits, student_temp)
            term = nk.mul(nk.tsum(nk.mul(nk.Tensor(probs), logq)), -1.0 / b)
            total = term if total is None else nk.add(total, term)
            count += 1
    return total / float(count)


def _row_cosine(a, b) -> "nk.Tensor":
    return nk.sum_axis(nk.mul(nk.l2_normalize(a), nk.l2_normalize(b)), 1)


def consistency_loss(embeddings: list) -> "nk.Tensor":
    """Mean (1 - cosine) between each long-view embedding and every partner."""
    if len(embeddings) != NUM_VIEWS:
        raise ShapeMismatch(f"expected {NUM_VIEWS} view embeddings")
    b = embeddings[0].data.shape[0]
    total = None
    count = 0
    for i in range(NUM_LONG_VIEWS):
        for j in range(NUM_VIEWS):
            if i == j:
                continue
            cos = _row_cosine(embeddings[i], embeddings[j])
            term = nk.mul(nk.tsum(cos), -1.0 / b) + 1.0
            total = term if total is None else nk.add(total, term)
            count += 1
    return total / float(count)


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class DinoHyper:
    epochs: int = 12
    batch_size: int = 32
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    consistency_weight: float = 1.0
    center_momentum: float = 0.9
    ema_start: float = 0.996
    ema_end: float = 1.0
    lr_peak: float = 0.05
    lr_end: float = 1e-5
    lr_warmup_frac: float = 0.13
    momentum: float = 0.9
    weight_decay: float = 5e-5
    ca_warmup_epochs: int = 6
    ca_every: int = 2
    ca_clusters: int = 30

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not (self.teacher_temp > 0.0 and self.student_temp > 0.0):
            raise InvalidConfig("temperatures must be positive")
        if self.teacher_temp >= self.student_temp:
            raise InvalidConfig("teacher temperature must be below student's")
        if not 0.0 <= self.center_momentum < 1.0:
            raise InvalidConfig("center momentum must be in [0, 1)")
        if not 0.0 <= self.ema_start <= self.ema_end <= 1.0:
            raise InvalidConfig("need 0 <= ema_start <= ema_end <= 1")
        if self.ca_every < 1 or self.ca_clusters < 1:
            raise InvalidConfig("ca_every and ca_clusters must be >= 1")


@dataclass(eq=False)
class Stage1Result:
    teacher_params: dict
    student_params: dict
    epoch_losses: list
    ca_epochs: list = field(default_factory=list)
    final_assignments: np.ndarray | None = None


def train_stage1(views, world_config: WorldConfig, enc_config: EncoderConfig,
                 hyper: DinoHyper, rng: Rng, modality: str = "audio") -> Stage1Result:
    """Self-distillation over truth-free views of one modality."""
    if not views:
        raise EmptyBatch("no training views")
    bases = np.stack([getattr(v, modality) for v in views])
    n = bases.shape[0]
    if bases.shape[1] != enc_config.input_dim:
        raise ShapeMismatch(
            f"views have dim {bases.shape[1]}, encoder expects {enc_config.input_dim}"
        )

    student = init_params(enc_config, rng.child("init"))
    teacher = clone_params(student)
    center = np.zeros(enc_config.num_prototypes)
    opt = nk.SgdMomentum(student, momentum=hyper.momentum,
                         weight_decay=hyper.weight_decay)

    steps_per_epoch = max(1, math.ceil(n / hyper.batch_size))
    # epochs == 0 is allowed (checkpoint equals the initialization); the
    # schedule specs still need a positive span.
    total_steps = max(1, hyper.epochs * steps_per_epoch)
    lr_spec = ScheduleSpec(hyper.lr_peak, hyper.lr_end, total_steps)
    ema_spec = ScheduleSpec(hyper.ema_start, hyper.ema_end, total_steps)

    clusters = None          # list of member-index lists, or None before warmup
    assignment = None
    epoch_losses = []
    ca_epochs = []
    step = 0
    for epoch in range(hyper.epochs):
        if epoch >= hyper.ca_warmup_epochs and (
            (epoch - hyper.ca_warmup_epochs) % hyper.ca_every == 0
        ):
            emb = embed_all(teacher, bases)
            km = kmeans(emb, min(hyper.ca_clusters, n), rng.child("cluster", epoch))
            assignment = km.assignments
            clusters = members_by_cluster(assignment, km.centroids.shape[0])
            ca_epochs.append(epoch)

        order = rng.child("order", epoch).permutation(n)
        running = 0.0
        for b0 in range(0, n, hyper.batch_size):
            batch_idx = order[b0:b0 + hyper.batch_size]
            crop_rng = rng.child("crops", epoch, b0)
            view_stacks = _batch_views(
                bases, batch_idx, world_config, clusters, assignment, crop_rng
            )

            with nk.no_grad():
                t_logits = [
                    forward(teacher, view_stacks[i])[1].data
                    for i in range(NUM_LONG_VIEWS)
                ]
            t_probs = [
                teacher_probs(tl, center, hyper.teacher_temp) for tl in t_logits
            ]

            s_embeds, s_logits = [], []
            for i in range(NUM_VIEWS):
                e, lo = forward(student, view_stacks[i])
                s_embeds.append(e)
                s_logits.append(lo)

            ce = dino_ce_loss(t_probs, s_logits, hyper.student_temp)
            cons = consistency_loss(s_embeds)
            loss = nk.add(ce, nk.mul(cons, hyper.consistency_weight))

            opt.zero_grad()
            loss.backward()
            opt.step(nk.warmup_cosine_schedule(step, lr_spec, hyper.lr_warmup_frac))
            ema_update(teacher, student, nk.cosine_schedule(step, ema_spec))
            for tl in t_logits:
                center = update_center(center, tl, hyper.center_momentum)
            running += loss.item() * len(batch_idx)
            step += 1
        epoch_losses.append(running / n)

    return Stage1Result(
        teacher_params=teacher, student_params=student,
        epoch_losses=epoch_losses, ca_epochs=ca_epochs,
        final_assignments=assignment,
    )


def _batch_views(bases, batch_idx, world_config, clusters, assignment, rng):
    """Stacked view batches: cluster-aware long views once clusters exist."""
    per_view = [[] for _ in range(NUM_VIEWS)]
    for j, idx in enumerate(batch_idx):
        anchor = bases[idx]
        sample_rng = rng.child(j)
        if clusters is None:
            cs = crop_views(anchor, world_config, sample_rng)
        else:
            partners = [bases[m] for m in clusters[assignment[idx]]]
            cs = cluster_crop_views(anchor, partners, world_config, sample_rng)
        for i, v in enumerate(cs.long_views + cs.short_views):
            per_view[i].append(v)
    return [np.stack(v) for v in per_view]
