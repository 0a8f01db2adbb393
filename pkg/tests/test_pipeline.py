"""End-to-end pipeline artifacts: determinism, persistence, gating wiring."""

import dataclasses
import json
import math
import os

import numpy as np
import pytest

from spklab.config import RunConfig, Stage2Hyper, config_hash
from spklab.dino import DinoHyper
from spklab.errors import InvalidConfig, MissingArtifact
from spklab.numkit import Rng
from spklab.pipeline import (
    Checkpoint,
    _gate_pair,
    append_report,
    checkpoint_path,
    label_correctness,
    labels_path,
    load_checkpoint,
    load_label_store,
    loss_record_path,
    majority_map,
    read_loss_records,
    read_report,
    rewrite_report,
    run_full,
    run_iteration,
    run_noise_probe,
    run_stage1,
    save_checkpoint,
    save_label_store,
    train_stage2,
    write_loss_records,
)
from spklab.synthworld import WorldConfig, gen_world


def _small_config(**over) -> RunConfig:
    """Few identities, short schedules: a full run in about a second."""
    base = dict(
        world=WorldConfig(num_identities=6, utterances_per_identity=12,
                          seed=5),
        dino=DinoHyper(epochs=2, batch_size=32),
        stage2=Stage2Hyper(epochs=2, batch_size=32),
        num_iterations=1,
        num_clusters=6,
        num_target_trials=60,
        num_nontarget_trials=60,
        seed=5,
    )
    base.update(over)
    return dataclasses.replace(RunConfig(), **base)


def _checkpoint_arrays(path):
    ck = load_checkpoint(path)
    return {f"{g}.{k}": v for g, group in sorted(ck.groups.items())
            for k, v in sorted(group.items())}


def _strip_wall_time(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


# -- artifact round-trips ---------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "ck.npz")
    groups = {"params": {"w": np.arange(6.0).reshape(2, 3)},
              "aam": {"weight": np.ones((4, 2))}}
    save_checkpoint(path, groups, {"stage": "stage2", "iteration": 2})
    ck = load_checkpoint(path)
    assert isinstance(ck, Checkpoint)
    assert ck.meta["stage"] == "stage2"
    assert ck.meta["version"] == 1
    np.testing.assert_array_equal(ck.groups["params"]["w"],
                                  groups["params"]["w"])
    np.testing.assert_array_equal(ck.groups["aam"]["weight"],
                                  groups["aam"]["weight"])


def test_checkpoint_missing_and_bad_version(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(str(tmp_path / "absent.npz"))
    path = str(tmp_path / "old.npz")
    np.savez(path, meta=np.array(json.dumps({"version": 99})))
    with pytest.raises(InvalidConfig):
        load_checkpoint(path)


def test_label_store_round_trip(tmp_path):
    path = str(tmp_path / "labels.json")
    ids = ["u0", "u1", "u2"]
    save_label_store(path, 4, "audio", ids, np.array([0, 2, 1]), 3, "cafe")
    doc = load_label_store(path)
    assert doc["iteration"] == 4
    assert doc["modality"] == "audio"
    assert doc["num_clusters"] == 3
    assert doc["config_hash"] == "cafe"
    assert doc["sample_ids"] == ids
    np.testing.assert_array_equal(doc["labels"], [0, 2, 1])
    with pytest.raises(MissingArtifact):
        load_label_store(str(tmp_path / "absent.json"))


def test_report_append_read_rewrite(tmp_path):
    out = str(tmp_path)
    rows = [{"version": 1, "stage": "stage1", "epoch": 0, "loss": 1.5},
            {"version": 1, "stage": "eval", "epoch": 1, "eer": 0.25}]
    append_report(out, rows[:1])
    append_report(out, rows[1:])
    assert read_report(out) == rows
    rewrite_report(out, rows[::-1])
    assert read_report(out) == rows[::-1]
    with pytest.raises(MissingArtifact):
        read_report(str(tmp_path / "nope"))


def test_loss_records_round_trip_exact(tmp_path):
    path = str(tmp_path / "rec.csv")
    records = [
        (0, "utt_000", math.log(0.123456789012345), "reliable", 1.75, 0.93),
        (1, "utt_001", -math.inf, "corrected", math.inf, 1 / 3),
    ]
    write_loss_records(path, records)
    back = read_loss_records(path)
    assert back == records
    with pytest.raises(MissingArtifact):
        read_loss_records(str(tmp_path / "absent.csv"))


def test_loss_records_header_checked(tmp_path):
    path = str(tmp_path / "rec.csv")
    path_obj = tmp_path / "rec.csv"
    path_obj.write_text("epoch,sample,oops\n")
    with pytest.raises(InvalidConfig):
        read_loss_records(path)


# -- label quality helpers --------------------------------------------------

def test_majority_map_and_correctness():
    labels = np.array([0, 0, 0, 1, 1, 1])
    truth = np.array([4, 4, 7, 7, 7, 4])
    assert majority_map(labels, truth) == {0: 4, 1: 7}
    np.testing.assert_array_equal(
        label_correctness(labels, truth),
        [True, True, False, True, True, False])


# -- selection-mode wiring --------------------------------------------------

def test_gate_pair_modes():
    inf = math.inf
    assert _gate_pair(_small_config(selection_mode="none")) == (inf, 1.0 - 1e-9)
    assert _gate_pair(_small_config(selection_mode="dlg")) == (inf, 1.0 - 1e-9)
    cfg = _small_config(selection_mode="dlg_lc")
    assert _gate_pair(cfg) == (inf, cfg.gate.tau2)
    fixed = _small_config(selection_mode="fixed")
    assert _gate_pair(fixed) == (fixed.gate.fixed_tau, 1.0 - 1e-9)


def test_mode_none_selects_everything():
    config = _small_config(selection_mode="none",
                           stage2=Stage2Hyper(epochs=1, batch_size=32))
    world = gen_world(config.world, 10, 10)
    labels = world.truth_labels()
    res = train_stage2(world, labels, config, config.world.num_identities,
                       Rng(0).child("t"))
    assert res.epoch_rows[0]["selection_rate"] == 1.0
    assert math.isinf(res.epoch_rows[0]["tau1"])
    assert all(rec[3] == "reliable" for rec in res.records)


def test_stage2_zero_epochs_returns_init(tmp_path):
    config = _small_config(stage2=Stage2Hyper(epochs=0))
    world = gen_world(config.world, 10, 10)
    labels = np.zeros(world.num_samples, dtype=np.int64)
    res = train_stage2(world, labels, config, config.num_clusters,
                       Rng(1).child("t"))
    assert res.records == []
    assert res.epoch_rows == []
    for name, tensor in res.params_audio.items():
        np.testing.assert_array_equal(tensor.data, res.init_audio[name])


def test_train_stage2_rejects_partial_labels():
    config = _small_config()
    world = gen_world(config.world, 10, 10)
    with pytest.raises(InvalidConfig):
        train_stage2(world, np.zeros(3, dtype=np.int64), config,
                     config.num_clusters, Rng(0))


# -- stage drivers ----------------------------------------------------------

def test_run_full_layout_and_report(tmp_path):
    config = _small_config()
    out = str(tmp_path / "run")
    result = run_full(config, out)
    for name in ("config.json", "world.json", "truth.json", "report.jsonl"):
        assert os.path.exists(os.path.join(out, name))
    assert os.path.exists(checkpoint_path(out, "stage1", 0, "audio"))
    assert os.path.exists(checkpoint_path(out, "stage2", 1, "audio"))
    assert os.path.exists(labels_path(out, 0))
    assert os.path.exists(labels_path(out, 1))
    assert os.path.exists(loss_record_path(out, 1))
    assert result.run_hash == config_hash(config)

    rows = read_report(out)
    assert rows == result.rows
    stages = {r["stage"] for r in rows}
    assert stages == {"stage1", "stage2", "eval"}
    evals = [r for r in rows if r["stage"] == "eval"]
    assert [r["iteration"] for r in evals] == [0, 1]
    for r in evals:
        assert 0.0 <= r["eer"] <= 1.0
        assert r["nmi"] is not None and r["purity"] is not None
    assert all(r["wall_time"] >= 0.0 for r in rows)


def test_run_full_zero_iterations(tmp_path):
    config = _small_config(num_iterations=0)
    out = str(tmp_path / "run")
    run_full(config, out)
    assert os.path.exists(checkpoint_path(out, "stage1", 0, "audio"))
    assert os.path.exists(labels_path(out, 0))
    assert not os.path.exists(checkpoint_path(out, "stage2", 1, "audio"))
    assert not os.path.exists(labels_path(out, 1))
    stages = {r["stage"] for r in read_report(out)}
    assert stages == {"stage1", "eval"}


def test_run_full_bit_identical_repeat(tmp_path):
    config = _small_config()
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    run_full(config, out_a)
    run_full(config, out_b)

    for stage, it in (("stage1", 0), ("stage2", 1)):
        arrays_a = _checkpoint_arrays(checkpoint_path(out_a, stage, it, "audio"))
        arrays_b = _checkpoint_arrays(checkpoint_path(out_b, stage, it, "audio"))
        assert arrays_a.keys() == arrays_b.keys()
        for key in arrays_a:
            np.testing.assert_array_equal(arrays_a[key], arrays_b[key])
    for it in (0, 1):
        with open(labels_path(out_a, it)) as fa, open(labels_path(out_b, it)) as fb:
            assert fa.read() == fb.read()
    with open(loss_record_path(out_a, 1)) as fa, \
         open(loss_record_path(out_b, 1)) as fb:
        assert fa.read() == fb.read()
    assert (_strip_wall_time(read_report(out_a))
            == _strip_wall_time(read_report(out_b)))


def test_truth_sidecar_never_changes_training(tmp_path):
    config = _small_config()
    out_a = str(tmp_path / "with_truth")
    out_b = str(tmp_path / "without")
    run_full(config, out_a, with_truth=True)
    run_full(config, out_b, with_truth=False)

    assert os.path.exists(os.path.join(out_a, "truth.json"))
    assert not os.path.exists(os.path.join(out_b, "truth.json"))
    for stage, it in (("stage1", 0), ("stage2", 1)):
        arrays_a = _checkpoint_arrays(checkpoint_path(out_a, stage, it, "audio"))
        arrays_b = _checkpoint_arrays(checkpoint_path(out_b, stage, it, "audio"))
        for key in arrays_a:
            np.testing.assert_array_equal(arrays_a[key], arrays_b[key])
    for it in (0, 1):
        with open(labels_path(out_a, it)) as fa, open(labels_path(out_b, it)) as fb:
            assert fa.read() == fb.read()

    rows_a = read_report(out_a)
    rows_b = read_report(out_b)
    truth_only = {"nmi", "purity", "selected_precision"}
    for ra, rb in zip(rows_a, rows_b):
        for key in ra:
            if key in truth_only or key == "wall_time":
                continue
            assert ra[key] == rb[key]
    evals_b = [r for r in rows_b if r["stage"] == "eval"]
    assert all(r["nmi"] is None and r["purity"] is None for r in evals_b)
    assert all(r["eer"] is not None for r in evals_b)


def test_iterations_use_fresh_inits(tmp_path):
    config = _small_config(num_iterations=2)
    out = str(tmp_path / "run")
    run_full(config, out)
    init_1 = _checkpoint_arrays(checkpoint_path(out, "stage2", 1, "audio"))
    init_2 = _checkpoint_arrays(checkpoint_path(out, "stage2", 2, "audio"))
    assert any(not np.array_equal(init_1[k], init_2[k])
               for k in init_1 if k.startswith("init."))


def test_warm_start_reuses_previous_encoder(tmp_path):
    config = _small_config(
        stage2=Stage2Hyper(epochs=0, warm_start=True))
    out = str(tmp_path / "run")
    world = gen_world(config.world, 10, 10)
    stage1 = run_stage1(config, world, out)
    run_iteration(config, world, 1, stage1.labels, out)
    teacher = _checkpoint_arrays(checkpoint_path(out, "stage1", 0, "audio"))
    init = _checkpoint_arrays(checkpoint_path(out, "stage2", 1, "audio"))
    for key, value in init.items():
        if key.startswith("init.enc_"):
            np.testing.assert_array_equal(
                value, teacher["params." + key.removeprefix("init.")])


def test_iteration_numbering_validated(tmp_path):
    config = _small_config()
    world = gen_world(config.world, 10, 10)
    with pytest.raises(InvalidConfig):
        run_iteration(config, world, 0,
                      np.zeros(world.num_samples, dtype=np.int64),
                      str(tmp_path))


def test_label_noise_stays_in_memory(tmp_path):
    config = _small_config(label_noise_rate=0.4)
    out = str(tmp_path / "run")
    world = gen_world(config.world, 10, 10)
    stage1 = run_stage1(config, world, out)
    before = open(labels_path(out, 0)).read()
    run_iteration(config, world, 1, stage1.labels, out)
    assert open(labels_path(out, 0)).read() == before
    # the training itself must differ from the clean-label run
    out_clean = str(tmp_path / "clean")
    clean_cfg = _small_config(label_noise_rate=0.0)
    stage1_c = run_stage1(clean_cfg, world, out_clean)
    run_iteration(clean_cfg, world, 1, stage1_c.labels, out_clean)
    noisy_ck = _checkpoint_arrays(checkpoint_path(out, "stage2", 1, "audio"))
    clean_ck = _checkpoint_arrays(checkpoint_path(out_clean, "stage2", 1, "audio"))
    assert any(not np.array_equal(noisy_ck[k], clean_ck[k])
               for k in noisy_ck if k.startswith("params."))


# -- noise probe ------------------------------------------------------------

def test_noise_probe_reports_gate_telemetry(tmp_path):
    config = _small_config(
        label_noise_rate=0.3,
        stage2=Stage2Hyper(epochs=3, batch_size=32),
    )
    out = str(tmp_path / "probe")
    result = run_noise_probe(config, out)
    assert set(result) == {"eer", "min_dcf", "full_precision",
                           "reliable_precision", "selection_rate", "tau1"}
    assert result["full_precision"] == pytest.approx(0.7, abs=0.05)
    assert 0.0 < result["selection_rate"] <= 1.0
    assert 0.0 <= result["eer"] <= 1.0
    assert os.path.exists(loss_record_path(out, 1))
