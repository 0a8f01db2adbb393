"""Command line front end.

Subcommands mirror the pipeline stages so a run can happen in one shot or
be decomposed:

    gen-world   materialize a synthetic world into the output directory
    pretrain    stage-1 self-distillation plus the iteration-0 clustering
    iterate     one more pseudo-label round on top of the latest labels
    run         gen-world + pretrain + every configured iteration
    eval        score the newest checkpoint on the held-out trial list
    report      derive plot tables (CSV) from report.jsonl and loss records

Identity truth stays opt-in: pass --truth-sidecar <path> to write (or read)
the sidecar and unlock purity/NMI/selected-precision reporting.  Without it
the run produces observation-only artifacts and identical model weights.

Exit codes: 0 success, 1 invalid configuration, 2 missing inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys

import numpy as np

from .config import RunConfig, config_hash, load_run_config, save_config_snapshot
from .errors import MissingArtifact, SpkLabError
from .pipeline import (
    append_report, evaluate_checkpoint_trials, labels_path, load_checkpoint,
    load_label_store, read_report, run_full, run_iteration, run_stage1,
)
from .evalkit import nmi, purity
from .synthworld import gen_world, load_world, save_truth, save_world

EXIT_OK = 0
EXIT_BAD_CONFIG = 1
EXIT_MISSING = 2


def _resolve_config(args, prefer_snapshot: bool) -> RunConfig:
    """Explicit --config wins; resuming commands fall back to the snapshot."""
    snapshot = os.path.join(args.out, "config.json")
    if args.config is not None:
        config = load_run_config(args.config)
    elif prefer_snapshot and os.path.exists(snapshot):
        config = load_run_config(snapshot)
    else:
        config = RunConfig()
    if args.seed is not None:
        # one flag reseeds the whole replicate: the world draw and the run
        config = dataclasses.replace(
            config, seed=args.seed,
            world=dataclasses.replace(config.world, seed=args.seed))
    return config


def _load_world_dir(out_dir: str, truth_path: str | None):
    world_path = os.path.join(out_dir, "world.json")
    if not os.path.exists(world_path):
        raise MissingArtifact(f"no world at {world_path}; run gen-world first")
    if truth_path is not None and not os.path.exists(truth_path):
        raise MissingArtifact(f"no truth sidecar at {truth_path}")
    return load_world(world_path, truth_path)


def _latest_labels(out_dir: str) -> int | None:
    pat = re.compile(r"iteration_(\d{3})\.json$")
    best = None
    labels_dir = os.path.join(out_dir, "labels")
    if os.path.isdir(labels_dir):
        for name in os.listdir(labels_dir):
            m = pat.fullmatch(name)
            if m:
                k = int(m.group(1))
                best = k if best is None else max(best, k)
    return best


def _latest_checkpoint(out_dir: str):
    """Newest stage-2 audio checkpoint, else stage 1, else None."""
    ck_dir = os.path.join(out_dir, "checkpoints")
    pat = re.compile(r"iteration_(\d{3})_audio\.npz$")
    best = None
    if os.path.isdir(ck_dir):
        for name in os.listdir(ck_dir):
            m = pat.fullmatch(name)
            if m:
                k = int(m.group(1))
                if best is None or k > best[0]:
                    best = (k, os.path.join(ck_dir, name))
    if best is not None:
        return best[1]
    stage1 = os.path.join(ck_dir, "stage1_audio.npz")
    if os.path.exists(stage1):
        return stage1
    return None


def _store_labels_in_world_order(store: dict, world) -> np.ndarray:
    labels = np.empty(world.num_samples, dtype=np.int64)
    for sid, lab in zip(store["sample_ids"], store["labels"]):
        labels[world.row(sid)] = lab
    return labels


# -- subcommands -----------------------------------------------------------

def cmd_gen_world(args) -> int:
    config = _resolve_config(args, prefer_snapshot=False)
    world = gen_world(config.world, config.num_target_trials,
                      config.num_nontarget_trials)
    os.makedirs(args.out, exist_ok=True)
    save_world(world, os.path.join(args.out, "world.json"))
    save_config_snapshot(config, os.path.join(args.out, "config.json"))
    if args.truth_sidecar is not None:
        parent = os.path.dirname(os.path.abspath(args.truth_sidecar))
        os.makedirs(parent, exist_ok=True)
        save_truth(world, args.truth_sidecar)
    print(json.dumps({"out": args.out, "num_samples": world.num_samples,
                      "config_hash": config_hash(config)}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = _resolve_config(args, prefer_snapshot=True)
    world = _load_world_dir(args.out, args.truth_sidecar)
    out = run_stage1(config, world, args.out,
                     with_truth=args.truth_sidecar is not None)
    append_report(args.out, out.rows)
    final = out.rows[-1]
    print(json.dumps({"stage": "stage1", "eer": final.get("eer"),
                      "nmi": final.get("nmi")}))
    return EXIT_OK


def cmd_iterate(args) -> int:
    config = _resolve_config(args, prefer_snapshot=True)
    world = _load_world_dir(args.out, args.truth_sidecar)
    latest = _latest_labels(args.out)
    if latest is None:
        raise MissingArtifact(
            f"no label store under {args.out}/labels; run pretrain first")
    store = load_label_store(labels_path(args.out, latest))
    labels = _store_labels_in_world_order(store, world)
    iteration = latest + 1
    out = run_iteration(config, world, iteration, labels, args.out,
                        with_truth=args.truth_sidecar is not None)
    append_report(args.out, out.rows)
    final = out.rows[-1]
    print(json.dumps({"iteration": iteration, "eer": final.get("eer"),
                      "nmi": final.get("nmi")}))
    return EXIT_OK


def cmd_run(args) -> int:
    config = _resolve_config(args, prefer_snapshot=False)
    result = run_full(config, args.out,
                      with_truth=args.truth_sidecar is not None,
                      truth_path=args.truth_sidecar)
    evals = [r for r in result.rows
             if r["stage"] == "eval" and r["modality"] == "audio"]
    final = evals[-1]
    print(json.dumps({"out": args.out, "config_hash": result.run_hash,
                      "iterations": config.num_iterations,
                      "eer": final["eer"], "min_dcf": final["min_dcf"],
                      "nmi": final["nmi"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    world = _load_world_dir(args.out, args.truth_sidecar)
    ck_path = _latest_checkpoint(args.out)
    if ck_path is None:
        raise MissingArtifact(
            f"no checkpoint under {args.out}/checkpoints; train first")
    ck = load_checkpoint(ck_path)
    eer_val, dcf_val = evaluate_checkpoint_trials(ck.groups["params"], world)
    doc = {
        "checkpoint": os.path.basename(ck_path),
        "stage": ck.meta.get("stage"),
        "iteration": ck.meta.get("iteration"),
        "eer": eer_val,
        "min_dcf": dcf_val,
    }
    latest = _latest_labels(args.out)
    if world.truth_available and latest is not None:
        store = load_label_store(labels_path(args.out, latest))
        labels = _store_labels_in_world_order(store, world)
        truth = world.truth_labels()
        doc["labels_iteration"] = latest
        doc["nmi"] = nmi(labels, truth)
        doc["purity"] = purity(labels, truth)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_table(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def cmd_report(args) -> int:
    rows = read_report(args.out)
    plots_dir = os.path.join(args.out, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written = []

    for modality in ("audio", "joint"):
        evals = [r for r in rows
                 if r["stage"] == "eval" and r["modality"] == modality]
        if not evals:
            continue
        path = os.path.join(plots_dir, f"metrics_{modality}.csv")
        _write_table(path, ("iteration", "eer", "min_dcf", "nmi", "purity"),
                     [(r["iteration"], r["eer"], r["min_dcf"], r["nmi"],
                       r["purity"]) for r in evals])
        written.append(path)

    for modality in ("audio", "visual"):
        s1 = [r for r in rows
              if r["stage"] == "stage1" and r["modality"] == modality]
        if not s1:
            continue
        path = os.path.join(plots_dir, f"stage1_loss_{modality}.csv")
        _write_table(path, ("epoch", "loss"),
                     [(r["epoch"], r["loss"]) for r in s1])
        written.append(path)

    s2 = [r for r in rows if r["stage"] == "stage2"]
    if s2:
        path = os.path.join(plots_dir, "stage2_loss.csv")
        _write_table(path, ("iteration", "epoch", "loss", "loss_clean",
                            "selection_rate", "selected_precision", "tau1"),
                     [(r["iteration"], r["epoch"], r["loss"], r["loss_clean"],
                       r["selection_rate"], r["selected_precision"], r["tau1"])
                      for r in s2])
        written.append(path)

    # histogram source tables: copy the recorded log-loss strings verbatim
    # so downstream plotting sees exactly what training wrote
    records_dir = os.path.join(args.out, "loss_records")
    if os.path.isdir(records_dir):
        for name in sorted(os.listdir(records_dir)):
            m = re.fullmatch(r"iteration_(\d{3})\.csv", name)
            if not m:
                continue
            out_path = os.path.join(plots_dir, f"loss_hist_iteration_{m.group(1)}.csv")
            with open(os.path.join(records_dir, name), encoding="utf-8") as fh:
                lines = fh.read().splitlines()
            header = lines[0].split(",")
            e_col = header.index("epoch")
            l_col = header.index("log_loss")
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write("epoch,log_loss\n")
                for line in lines[1:]:
                    cells = line.split(",")
                    fh.write(f"{cells[e_col]},{cells[l_col]}\n")
            written.append(out_path)

    print(json.dumps({"plots": [os.path.basename(p) for p in written]}))
    return EXIT_OK


# -- argument plumbing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spklab",
        description="Self-supervised speaker lab: pretraining, gated "
                    "pseudo-label iterations, evaluation, reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="run output directory")
        if needs_config:
            p.add_argument("--config", default=None,
                           help="run configuration (.toml or .json)")
            p.add_argument("--seed", type=int, default=None,
                           help="replicate seed; overrides the run seed and "
                                "the world seed together")
        p.add_argument("--truth-sidecar", default=None, metavar="PATH",
                       help="identity sidecar file; enables purity/NMI/"
                            "selected-precision reporting")
        p.set_defaults(func=func)
        return p

    add("gen-world", cmd_gen_world,
        "generate a synthetic world and config snapshot")
    add("pretrain", cmd_pretrain,
        "stage-1 pretraining plus initial clustering")
    add("iterate", cmd_iterate,
        "run the next pseudo-label training round")
    add("run", cmd_run, "full pipeline: world, pretrain, all iterations")
    add("eval", cmd_eval, "score the newest checkpoint on the trial list",
        needs_config=False)
    p_rep = sub.add_parser("report", help="derive plot CSVs from the report")
    p_rep.add_argument("--out", required=True, help="run output directory")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SpkLabError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
