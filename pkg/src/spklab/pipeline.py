"""End-to-end runs: pretraining, pseudo-label iterations, artifacts.

The pipeline owns the output directory layout:

    config.json                 frozen snapshot of the run configuration
    world.json                  observations and trial lists
    truth.json                  identity sidecar (optional, evaluation only)
    checkpoints/*.npz           encoder weights per stage and iteration
    labels/iteration_NNN.json   pseudo-label store per iteration
    loss_records/*.csv          per-sample clean log-losses and gate branches
    report.jsonl                one row per training epoch or evaluation
    plots/*.csv                 tabular plot data derived from the above

Every artifact schema carries a ``version`` field.  Training consumes
observations only; identity truth feeds metrics and never the loops, so a
run with no truth sidecar produces bit-identical checkpoints and labels.
Every random draw descends from the run seed through named child streams,
which makes a finished directory reproducible from (config, seed) apart
from wall-clock timings.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .clusterlab import joint_embed, kmeans
from .config import RunConfig, config_hash, save_config_snapshot
from .dino import embed_all, encode, init_params, train_stage1
from .errors import InvalidConfig, MissingArtifact
from .evalkit import eer, min_dcf, nmi, purity, score_trials
from .lossgate import (
    AamConfig, GateState, dlg_lc_step, mm_dlg_lc_step, refresh_threshold,
)
from .numkit import Rng, ScheduleSpec, exp_decay_schedule
from .synthworld import (
    World, clean_aug_pair, corrupt_labels, gen_world, save_truth, save_world,
)

REPORT_VERSION = 1
LABELS_VERSION = 1
CHECKPOINT_VERSION = 1

LOSS_RECORD_FIELDS = ("epoch", "sample_id", "log_loss", "branch",
                      "tau1", "max_conf")

_REPORT_KEYS = (
    "version", "iteration", "epoch", "stage", "modality", "loss",
    "loss_ce", "loss_cons", "loss_clean", "selection_rate",
    "selected_precision", "tau1", "eer", "min_dcf", "nmi", "purity",
    "wall_time",
)


def _report_row(iteration, epoch, stage, modality, wall_time, **vals):
    row = dict.fromkeys(_REPORT_KEYS)
    row.update(version=REPORT_VERSION, iteration=iteration, epoch=epoch,
               stage=stage, modality=modality, wall_time=wall_time)
    for key, val in vals.items():
        if key not in row:
            raise KeyError(f"unknown report field {key!r}")
        row[key] = None if val is None else (
            val if isinstance(val, str) else float(val))
    return row


# -- on-disk artifact helpers ----------------------------------------------

def ensure_layout(out_dir: str) -> None:
    for sub in ("checkpoints", "labels", "loss_records"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)


def save_checkpoint(path: str, groups: dict, meta: dict) -> None:
    """Store named parameter groups plus a JSON meta blob in one npz file."""
    arrays = {"meta": np.array(json.dumps(
        {"version": CHECKPOINT_VERSION, **meta}, sort_keys=True))}
    for prefix, params in groups.items():
        for name, value in params.items():
            data = value.data if isinstance(value, nk.Tensor) else value
            arrays[f"{prefix}.{name}"] = np.asarray(data, dtype=np.float64)
    np.savez(path, **arrays)


@dataclass
class Checkpoint:
    groups: dict
    meta: dict


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise MissingArtifact(f"no checkpoint at {path}")
    with np.load(path) as npz:
        meta = json.loads(str(npz["meta"][()]))
        groups = {}
        for key in npz.files:
            if key == "meta":
                continue
            prefix, name = key.split(".", 1)
            groups.setdefault(prefix, {})[name] = npz[key]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"unsupported checkpoint version: {meta.get('version')}")
    return Checkpoint(groups=groups, meta=meta)


def checkpoint_path(out_dir: str, stage: str, iteration: int,
                    modality: str) -> str:
    name = ("stage1" if stage == "stage1"
            else f"iteration_{iteration:03d}") + f"_{modality}.npz"
    return os.path.join(out_dir, "checkpoints", name)


def save_label_store(path: str, iteration: int, modality: str,
                     sample_ids, labels, num_clusters: int,
                     run_hash: str) -> None:
    doc = {
        "version": LABELS_VERSION,
        "iteration": iteration,
        "modality": modality,
        "num_clusters": num_clusters,
        "config_hash": run_hash,
        "sample_ids": list(sample_ids),
        "labels": [int(x) for x in labels],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_label_store(path: str) -> dict:
    if not os.path.exists(path):
        raise MissingArtifact(f"no label store at {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != LABELS_VERSION:
        raise InvalidConfig(f"unsupported label store version: {doc.get('version')}")
    doc["labels"] = np.asarray(doc["labels"], dtype=np.int64)
    return doc


def labels_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, "labels", f"iteration_{iteration:03d}.json")


def append_report(out_dir: str, rows) -> None:
    with open(os.path.join(out_dir, "report.jsonl"), "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_report(out_dir: str) -> list:
    path = os.path.join(out_dir, "report.jsonl")
    if not os.path.exists(path):
        raise MissingArtifact(f"no report at {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def rewrite_report(out_dir: str, rows) -> None:
    path = os.path.join(out_dir, "report.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def loss_record_path(out_dir: str, iteration: int) -> str:
    return os.path.join(out_dir, "loss_records",
                        f"iteration_{iteration:03d}.csv")


def write_loss_records(path: str, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_RECORD_FIELDS)
        for rec in records:
            writer.writerow([rec[0], rec[1], repr(float(rec[2])), rec[3],
                             repr(float(rec[4])), repr(float(rec[5]))])


def read_loss_records(path: str) -> list:
    if not os.path.exists(path):
        raise MissingArtifact(f"no loss record at {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != LOSS_RECORD_FIELDS:
            raise InvalidConfig(f"unexpected loss record header: {header}")
        for row in reader:
            out.append((int(row[0]), row[1], float(row[2]), row[3],
                        float(row[4]), float(row[5])))
    return out


# -- label quality ----------------------------------------------------------

def majority_map(labels: np.ndarray, truth: np.ndarray) -> dict:
    """Cluster id to the identity holding the plurality of its members."""
    labels = np.asarray(labels, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    mapping = {}
    for c in np.unique(labels):
        members = truth[labels == c]
        ids, counts = np.unique(members, return_counts=True)
        mapping[int(c)] = int(ids[np.argmax(counts)])
    return mapping


def label_correctness(labels: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample flag: does the label's majority identity match the truth?"""
    mapping = majority_map(labels, truth)
    mapped = np.array([mapping[int(c)] for c in labels], dtype=np.int64)
    return mapped == np.asarray(truth, dtype=np.int64)


def _norm_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


# -- stage-2 training core --------------------------------------------------

@dataclass
class Stage2Result:
    params_audio: dict
    init_audio: dict
    aam_audio: AamConfig
    params_visual: dict | None
    init_visual: dict | None
    aam_visual: AamConfig | None
    records: list                 # loss-record tuples
    epoch_rows: list              # per-epoch summary dicts (no report framing)
    gate_audio: GateState
    gate_visual: GateState | None


def _gate_pair(config: RunConfig):
    """Initial tau1 and effective tau2 for the configured selection mode."""
    mode = config.selection_mode
    if mode == "fixed":
        tau1 = float(config.gate.fixed_tau)
    else:
        tau1 = math.inf
    if mode == "dlg_lc":
        tau2 = config.gate.tau2
    else:
        # a tau2 this close to 1 never passes, which turns the correction
        # branch off while keeping one code path for every mode
        tau2 = 1.0 - 1e-9
    return tau1, tau2


def _refreshes(config: RunConfig) -> bool:
    return config.selection_mode in ("dlg", "dlg_lc")


def _fresh_aam(config: RunConfig, num_classes: int, embed_dim: int,
               rng: Rng) -> AamConfig:
    std = 1.0 / math.sqrt(embed_dim)
    weight = nk.param(rng.normal((num_classes, embed_dim), std))
    return AamConfig(weight=weight, scale=config.aam.scale,
                     margin=config.aam.margin)


def train_stage2(world: World, labels: np.ndarray, config: RunConfig,
                 num_classes: int, rng: Rng,
                 truth_correct: np.ndarray | None = None,
                 init_audio: dict | None = None,
                 init_visual: dict | None = None) -> Stage2Result:
    """AAM training on pseudo-labels behind the configured selection gate.

    Labels arrive already noised if the run injects noise.  truth_correct
    is evaluation-only telemetry (per-sample label correctness); it shapes
    reporting and never the gradients.  init_* seed the encoders when warm
    starting; otherwise fresh parameters are drawn from this stage's stream.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = world.num_samples
    if labels.shape != (n,):
        raise InvalidConfig("labels must cover every sample")
    mm = config.modality_mode == "audio_visual"
    s2 = config.stage2

    params_a = (init_audio if init_audio is not None
                else init_params(config.encoder_audio, rng.child("init", "audio")))
    init_a = {k: t.data.copy() for k, t in params_a.items()}
    aam_a = _fresh_aam(config, num_classes, config.encoder_audio.embed_dim,
                       rng.child("aam", "audio"))
    tau1, tau2 = _gate_pair(config)
    gate_a = GateState(tau1=tau1, tau2=tau2,
                       sharpen_temp=config.gate.sharpen_temp)

    params_v = init_v = aam_v = gate_v = None
    if mm:
        params_v = (init_visual if init_visual is not None
                    else init_params(config.encoder_visual,
                                     rng.child("init", "visual")))
        init_v = {k: t.data.copy() for k, t in params_v.items()}
        aam_v = _fresh_aam(config, num_classes,
                           config.encoder_visual.embed_dim,
                           rng.child("aam", "visual"))
        gate_v = GateState(tau1=tau1, tau2=tau2,
                           sharpen_temp=config.gate.sharpen_temp)

    trainable = {**{f"a.{k}": v for k, v in params_a.items()},
                 "a.aam": aam_a.weight}
    if mm:
        trainable.update({f"v.{k}": v for k, v in params_v.items()},
                         **{"v.aam": aam_v.weight})
    opt = nk.SgdMomentum(trainable, momentum=s2.momentum,
                         weight_decay=s2.weight_decay)

    steps_per_epoch = max(1, math.ceil(n / s2.batch_size))
    lr_spec = ScheduleSpec(s2.lr_start, s2.lr_end,
                           max(1, s2.epochs * steps_per_epoch))
    refreshing = _refreshes(config)

    records = []
    epoch_rows = []
    step = 0
    for epoch in range(s2.epochs):
        order = rng.child("order", epoch).permutation(n)
        loss_sum = 0.0
        clean_sum = 0.0
        reliable = 0
        reliable_correct = 0
        for start in range(0, n, s2.batch_size):
            batch = order[start:start + s2.batch_size]
            b = batch.size
            clean_a = np.empty((b, world.audio.shape[1]))
            aug_a = np.empty_like(clean_a)
            if mm:
                clean_v = np.empty((b, world.visual.shape[1]))
                aug_v = np.empty_like(clean_v)
            for j, idx in enumerate(batch):
                vr = rng.child("views", epoch, int(idx))
                clean_a[j], aug_a[j] = clean_aug_pair(
                    world.audio[idx], world.config, vr.child("audio"))
                if mm:
                    clean_v[j], aug_v[j] = clean_aug_pair(
                        world.visual[idx], world.config, vr.child("visual"))
            batch_labels = labels[batch]

            with nk.no_grad():
                emb_clean_a = encode(params_a, clean_a).data
            emb_aug_a = encode(params_a, aug_a)
            opt.zero_grad()
            if mm:
                with nk.no_grad():
                    emb_clean_v = encode(params_v, clean_v).data
                emb_aug_v = encode(params_v, aug_v)
                res = mm_dlg_lc_step(emb_clean_a, emb_aug_a, emb_clean_v,
                                     emb_aug_v, batch_labels, gate_a, gate_v,
                                     aam_a, aam_v)
                total = nk.add(res.loss_audio, res.loss_visual)
                branches = [d.kind for d in res.decisions]
                clean_losses = res.clean_losses_audio
                max_conf = np.full(b, math.nan)
                rel_mask = np.array([k == "reliable" for k in branches])
            else:
                res = dlg_lc_step(emb_clean_a, emb_aug_a, batch_labels,
                                  gate_a, aam_a)
                total = res.loss
                branches = res.branches
                clean_losses = res.clean_losses
                max_conf = res.max_conf
                rel_mask = np.array([k == "reliable" for k in branches])
            total.backward()
            opt.step(exp_decay_schedule(step, lr_spec))
            step += 1

            loss_sum += float(total.data) * b
            clean_sum += float(clean_losses.sum())
            reliable += int(rel_mask.sum())
            if truth_correct is not None:
                reliable_correct += int(truth_correct[batch[rel_mask]].sum())
            with np.errstate(divide="ignore"):
                log_clean = np.log(clean_losses)
            for j, idx in enumerate(batch):
                records.append((epoch, world.sample_ids[idx],
                                float(log_clean[j]), branches[j],
                                float(gate_a.tau1), float(max_conf[j])))

        sel_prec = (reliable_correct / reliable
                    if truth_correct is not None and reliable else None)
        epoch_rows.append({
            "epoch": epoch,
            "loss": loss_sum / n,
            "loss_clean": clean_sum / n,
            "selection_rate": reliable / n,
            "selected_precision": sel_prec,
            "tau1": float(gate_a.tau1),
        })
        if refreshing:
            refresh_threshold(gate_a)
            if mm:
                refresh_threshold(gate_v)
        else:
            gate_a.loss_record.clear()
            if mm:
                gate_v.loss_record.clear()

    return Stage2Result(
        params_audio=params_a, init_audio=init_a, aam_audio=aam_a,
        params_visual=params_v, init_visual=init_v, aam_visual=aam_v,
        records=records, epoch_rows=epoch_rows,
        gate_audio=gate_a, gate_visual=gate_v,
    )


# -- evaluation -------------------------------------------------------------

def evaluate_trials(embeddings: np.ndarray, world: World):
    """EER and minDCF over the trial list for precomputed embeddings."""
    by_id = {sid: embeddings[i] for i, sid in enumerate(world.sample_ids)}
    scored = score_trials(by_id, world.trials)
    return eer(scored)[0], min_dcf(scored)[0]


def evaluate_checkpoint_trials(params: dict, world: World):
    """Score the trial list on held-out test segments."""
    emb = embed_all(params, world.test_audio)
    return evaluate_trials(emb, world)


def _cluster_rows(assignments: np.ndarray, world: World, with_truth: bool):
    if with_truth and world.truth_available:
        truth = world.truth_labels()
        return nmi(assignments, truth), purity(assignments, truth)
    return None, None


# -- pipeline stages --------------------------------------------------------

@dataclass
class StageOutput:
    rows: list
    labels: np.ndarray


def run_stage1(config: RunConfig, world: World, out_dir: str,
               with_truth: bool = True, t0: float | None = None) -> StageOutput:
    """Self-distilled pretraining plus the iteration-0 clustering.

    Writes stage-1 checkpoints and labels/iteration_000.json, and returns
    the report rows for iteration 0 (training epochs plus evaluation).
    """
    ensure_layout(out_dir)
    t0 = time.perf_counter() if t0 is None else t0
    rng = Rng(config.seed).child("stage1")
    run_hash = config_hash(config)
    mm = config.modality_mode == "audio_visual"
    views = world.train_views()

    rows = []
    res_a = train_stage1(views, world.config, config.encoder_audio,
                         config.dino, rng.child("audio"), modality="audio")
    for epoch, loss in enumerate(res_a.epoch_losses):
        rows.append(_report_row(0, epoch, "stage1", "audio",
                                time.perf_counter() - t0, loss=loss))
    res_v = None
    if mm:
        res_v = train_stage1(views, world.config, config.encoder_visual,
                             config.dino, rng.child("visual"),
                             modality="visual")
        for epoch, loss in enumerate(res_v.epoch_losses):
            rows.append(_report_row(0, epoch, "stage1", "visual",
                                    time.perf_counter() - t0, loss=loss))

    save_checkpoint(
        checkpoint_path(out_dir, "stage1", 0, "audio"),
        {"params": res_a.teacher_params, "student": res_a.student_params},
        {"stage": "stage1", "iteration": 0, "modality": "audio",
         "config_hash": run_hash})
    if mm:
        save_checkpoint(
            checkpoint_path(out_dir, "stage1", 0, "visual"),
            {"params": res_v.teacher_params, "student": res_v.student_params},
            {"stage": "stage1", "iteration": 0, "modality": "visual",
             "config_hash": run_hash})

    emb_a = embed_all(res_a.teacher_params, world.audio)
    audio_points = _norm_rows(emb_a)
    km_audio = kmeans(audio_points, config.num_clusters, rng.child("labels", "audio"))
    if mm:
        emb_v = embed_all(res_v.teacher_params, world.visual)
        joint_points = joint_embed(emb_a, emb_v)
        km_joint = kmeans(joint_points, config.num_clusters,
                          rng.child("labels", "joint"))
        labels0 = km_joint.assignments
        store_modality = "joint"
    else:
        labels0 = km_audio.assignments
        store_modality = "audio"

    save_label_store(labels_path(out_dir, 0), 0, store_modality,
                     world.sample_ids, labels0, config.num_clusters, run_hash)

    epoch_after = config.dino.epochs
    eer_val, dcf_val = evaluate_checkpoint_trials(res_a.teacher_params, world)
    nmi_a, pur_a = _cluster_rows(km_audio.assignments, world, with_truth)
    rows.append(_report_row(0, epoch_after, "eval", "audio",
                            time.perf_counter() - t0, eer=eer_val,
                            min_dcf=dcf_val, nmi=nmi_a, purity=pur_a))
    if mm:
        nmi_j, pur_j = _cluster_rows(labels0, world, with_truth)
        rows.append(_report_row(0, epoch_after, "eval", "joint",
                                time.perf_counter() - t0, nmi=nmi_j,
                                purity=pur_j))
    return StageOutput(rows=rows, labels=labels0)


def _warm_init(out_dir: str, iteration: int, modality: str):
    """Previous iteration's encoder weights as fresh trainable tensors."""
    if iteration == 1:
        path = checkpoint_path(out_dir, "stage1", 0, modality)
    else:
        path = checkpoint_path(out_dir, "stage2", iteration - 1, modality)
    ck = load_checkpoint(path)
    return {k: nk.param(v.copy()) for k, v in ck.groups["params"].items()
            if k.startswith("enc_")}


def run_iteration(config: RunConfig, world: World, iteration: int,
                  labels_in: np.ndarray, out_dir: str,
                  with_truth: bool = True,
                  t0: float | None = None) -> StageOutput:
    """One pseudo-label round: train on labels_in, re-cluster, evaluate.

    labels_in comes from the previous stage's clustering (stage 1 for
    iteration 1).  Encoders are freshly initialized unless warm_start is
    set.  Writes the iteration checkpoint, label store, and loss records.
    """
    if iteration < 1:
        raise InvalidConfig("iterations are numbered from 1")
    ensure_layout(out_dir)
    t0 = time.perf_counter() if t0 is None else t0
    rng = Rng(config.seed).child("iter", iteration)
    run_hash = config_hash(config)
    mm = config.modality_mode == "audio_visual"

    labels_train = np.asarray(labels_in, dtype=np.int64)
    if config.label_noise_rate > 0.0:
        labels_train, _ = corrupt_labels(labels_train, config.label_noise_rate,
                                         config.num_clusters, rng.child("noise"))

    truth_correct = None
    if with_truth and world.truth_available:
        truth_correct = label_correctness(labels_train, world.truth_labels())

    init_a = init_v = None
    if config.stage2.warm_start:
        init_a = _warm_init(out_dir, iteration, "audio")
        if mm:
            init_v = _warm_init(out_dir, iteration, "visual")

    res = train_stage2(world, labels_train, config, config.num_clusters,
                       rng.child("train"), truth_correct=truth_correct,
                       init_audio=init_a, init_visual=init_v)

    rows = []
    for er in res.epoch_rows:
        rows.append(_report_row(
            iteration, er["epoch"], "stage2", "joint" if mm else "audio",
            time.perf_counter() - t0, loss=er["loss"],
            loss_clean=er["loss_clean"], selection_rate=er["selection_rate"],
            selected_precision=er["selected_precision"], tau1=er["tau1"]))

    groups = {"params": res.params_audio, "init": res.init_audio,
              "aam": {"weight": res.aam_audio.weight}}
    save_checkpoint(
        checkpoint_path(out_dir, "stage2", iteration, "audio"), groups,
        {"stage": "stage2", "iteration": iteration, "modality": "audio",
         "config_hash": run_hash, "selection_mode": config.selection_mode})
    if mm:
        save_checkpoint(
            checkpoint_path(out_dir, "stage2", iteration, "visual"),
            {"params": res.params_visual, "init": res.init_visual,
             "aam": {"weight": res.aam_visual.weight}},
            {"stage": "stage2", "iteration": iteration, "modality": "visual",
             "config_hash": run_hash, "selection_mode": config.selection_mode})
    write_loss_records(loss_record_path(out_dir, iteration), res.records)

    emb_a = embed_all(res.params_audio, world.audio)
    audio_points = _norm_rows(emb_a)
    km_audio = kmeans(audio_points, config.num_clusters,
                      rng.child("cluster", "audio"))
    if mm:
        emb_v = embed_all(res.params_visual, world.visual)
        km_joint = kmeans(joint_embed(emb_a, emb_v), config.num_clusters,
                          rng.child("cluster", "joint"))
        labels_out = km_joint.assignments
        store_modality = "joint"
    else:
        labels_out = km_audio.assignments
        store_modality = "audio"
    save_label_store(labels_path(out_dir, iteration), iteration,
                     store_modality, world.sample_ids, labels_out,
                     config.num_clusters, run_hash)

    epoch_after = config.stage2.epochs
    eer_val, dcf_val = evaluate_checkpoint_trials(res.params_audio, world)
    nmi_a, pur_a = _cluster_rows(km_audio.assignments, world, with_truth)
    rows.append(_report_row(iteration, epoch_after, "eval", "audio",
                            time.perf_counter() - t0, eer=eer_val,
                            min_dcf=dcf_val, nmi=nmi_a, purity=pur_a))
    if mm:
        nmi_j, pur_j = _cluster_rows(labels_out, world, with_truth)
        rows.append(_report_row(iteration, epoch_after, "eval", "joint",
                                time.perf_counter() - t0, nmi=nmi_j,
                                purity=pur_j))
    return StageOutput(rows=rows, labels=labels_out)


@dataclass
class RunResult:
    out_dir: str
    rows: list
    run_hash: str


def run_full(config: RunConfig, out_dir: str, with_truth: bool = True,
             truth_path: str | None = None) -> RunResult:
    """World generation, stage 1, and every pseudo-label iteration."""
    os.makedirs(out_dir, exist_ok=True)
    ensure_layout(out_dir)
    t0 = time.perf_counter()
    world = gen_world(config.world, config.num_target_trials,
                      config.num_nontarget_trials)
    save_world(world, os.path.join(out_dir, "world.json"))
    if with_truth:
        save_truth(world, truth_path or os.path.join(out_dir, "truth.json"))
    save_config_snapshot(config, os.path.join(out_dir, "config.json"))

    stage1 = run_stage1(config, world, out_dir, with_truth=with_truth, t0=t0)
    rows = list(stage1.rows)
    labels = stage1.labels
    for iteration in range(1, config.num_iterations + 1):
        out = run_iteration(config, world, iteration, labels, out_dir,
                            with_truth=with_truth, t0=t0)
        rows.extend(out.rows)
        labels = out.labels
    rewrite_report(out_dir, rows)
    return RunResult(out_dir=out_dir, rows=rows, run_hash=config_hash(config))


# -- label-noise probe ------------------------------------------------------

def run_noise_probe(config: RunConfig, out_dir: str | None = None) -> dict:
    """Controlled noise harness: train stage 2 on corrupted identity labels.

    The probe bypasses pretraining and clustering: the label space is the
    identity space, config.label_noise_rate of the labels are flipped, and
    one stage-2 round runs with the configured selection mode.  Returns the
    final-epoch gate telemetry plus trial metrics.  The truth labels serve
    only as the noise-free reference; training sees the corrupted copy.
    """
    world = gen_world(config.world, config.num_target_trials,
                      config.num_nontarget_trials)
    rng = Rng(config.seed).child("probe")
    truth = world.truth_labels()
    noisy, _flipped = corrupt_labels(truth, config.label_noise_rate,
                                     config.world.num_identities,
                                     rng.child("noise"))
    correct = noisy == truth

    res = train_stage2(world, noisy, config, config.world.num_identities,
                       rng.child("train"), truth_correct=correct)
    eer_val, dcf_val = evaluate_checkpoint_trials(res.params_audio, world)

    last = res.epoch_rows[-1]
    final_epoch = last["epoch"]
    rel = [r for r in res.records
           if r[0] == final_epoch and r[3] == "reliable"]
    rel_idx = [world.row(r[1]) for r in rel]
    reliable_precision = (float(correct[rel_idx].mean())
                          if rel_idx else None)
    out = {
        "eer": eer_val,
        "min_dcf": dcf_val,
        "full_precision": float(correct.mean()),
        "reliable_precision": reliable_precision,
        "selection_rate": last["selection_rate"],
        "tau1": last["tau1"],
    }
    if out_dir is not None:
        ensure_layout(out_dir)
        write_loss_records(loss_record_path(out_dir, 1), res.records)
    return out
