"""World generation tests: determinism, truth hiding, noise structure, io."""

import dataclasses

import numpy as np
import pytest

from spklab import synthworld as sw
from spklab.errors import (
    DegenerateTrials,
    InsufficientIdentities,
    InvalidConfig,
    InvalidRate,
    TruthUnavailable,
    UnknownUtterance,
)
from spklab.numkit import Rng


def small_config(**overrides):
    base = dict(
        num_identities=6,
        utterances_per_identity=8,
        obs_dim_audio=16,
        obs_dim_visual=12,
        seed=42,
    )
    base.update(overrides)
    return sw.WorldConfig(**base)


# -- config validation -----------------------------------------------------

def test_config_rejects_bad_values():
    with pytest.raises(InvalidConfig):
        small_config(num_identities=1)
    with pytest.raises(InvalidConfig):
        small_config(modality_correlation=1.5)
    with pytest.raises(InvalidConfig):
        small_config(content_noise_std_long=0.5, content_noise_std_short=0.1)
    with pytest.raises(InvalidConfig):
        small_config(obs_dim_visual=32, obs_dim_audio=16)
    with pytest.raises(InvalidConfig):
        small_config(channel_noise_std=-0.1)


# -- generation ------------------------------------------------------------

def test_gen_world_shapes_and_counts():
    cfg = small_config()
    w = sw.gen_world(cfg, num_target_trials=30, num_nontarget_trials=40)
    n = cfg.num_identities * cfg.utterances_per_identity
    assert w.num_samples == n
    assert w.audio.shape == (n, cfg.obs_dim_audio)
    assert w.visual.shape == (n, cfg.obs_dim_visual)
    assert len(w.trials) == 70
    assert len(set(w.sample_ids)) == n
    counts = np.bincount(w.identities, minlength=cfg.num_identities)
    assert counts.tolist() == [cfg.utterances_per_identity] * cfg.num_identities


def test_gen_world_deterministic():
    cfg = small_config()
    w1 = sw.gen_world(cfg)
    w2 = sw.gen_world(cfg)
    assert np.array_equal(w1.audio, w2.audio)
    assert np.array_equal(w1.visual, w2.visual)
    assert np.array_equal(w1.identities, w2.identities)
    assert w1.sample_ids == w2.sample_ids
    assert w1.trials == w2.trials


def test_gen_world_seed_changes_everything():
    w1 = sw.gen_world(small_config(seed=1))
    w2 = sw.gen_world(small_config(seed=2))
    assert not np.array_equal(w1.audio, w2.audio)


def test_sample_order_not_grouped_by_identity():
    w = sw.gen_world(small_config(num_identities=10, utterances_per_identity=20))
    ids = w.identities
    adjacent_same = int(np.sum(ids[:-1] == ids[1:]))
    # sorted order would give 10 * 19 = 190 adjacent-equal pairs
    assert adjacent_same < 60


def test_utterances_scatter_around_their_centroid():
    cfg = small_config(channel_noise_std=0.2)
    w = sw.gen_world(cfg)
    d = cfg.obs_dim_audio
    dists = np.linalg.norm(w.audio - w.audio_centroids[w.identities], axis=1)
    # E||noise|| ~ std * sqrt(d); allow generous slack
    assert np.mean(dists) == pytest.approx(0.2 * np.sqrt(d), rel=0.25)
    # every utterance sits closest to its own centroid at this noise level
    all_d = np.linalg.norm(w.audio[:, None, :] - w.audio_centroids[None], axis=2)
    assert np.array_equal(all_d.argmin(axis=1), w.identities)


def test_mixing_matrix_has_orthonormal_rows():
    w = sw.gen_world(small_config())
    m = w.mixing
    assert m.shape == (12, 16)
    assert np.allclose(m @ m.T, np.eye(12), atol=1e-10)


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
def test_modality_correlation_matches_pearson_oracle(rho):
    cfg = sw.WorldConfig(
        num_identities=400, utterances_per_identity=1,
        obs_dim_audio=32, obs_dim_visual=24,
        modality_correlation=rho, seed=7,
    )
    w = sw.gen_world(cfg, num_target_trials=0, num_nontarget_trials=10)
    x = (w.audio_centroids @ w.mixing.T).ravel()
    y = w.visual_centroids.ravel()
    r = float(np.corrcoef(x, y)[0, 1])
    assert r == pytest.approx(rho, abs=0.05)


# -- truth hiding ----------------------------------------------------------

def test_train_views_expose_no_identity():
    w = sw.gen_world(small_config())
    views = w.train_views()
    assert len(views) == w.num_samples
    v = views[0]
    assert set(f.name for f in dataclasses.fields(v)) == {"sample_id", "audio", "visual"}
    assert not hasattr(v, "identity")
    assert not hasattr(v, "identities")


def test_identity_lookup_and_unknown_sample():
    w = sw.gen_world(small_config())
    sid = w.sample_ids[5]
    assert w.identity_of(sid) == int(w.identities[5])
    with pytest.raises(UnknownUtterance):
        w.row("nope")


# -- trials ----------------------------------------------------------------

def test_trials_respect_truth():
    w = sw.gen_world(small_config(), num_target_trials=50, num_nontarget_trials=50)
    for t in w.trials:
        same = w.identity_of(t.a) == w.identity_of(t.b)
        assert same == t.target
        if t.target:
            assert t.a != t.b


def test_trials_degenerate_cases():
    cfg = small_config(utterances_per_identity=1)
    with pytest.raises(DegenerateTrials):
        sw.gen_world(cfg, num_target_trials=5, num_nontarget_trials=0)
    # non-targets still fine with one utterance each
    w = sw.gen_world(cfg, num_target_trials=0, num_nontarget_trials=5)
    assert len(w.trials) == 5


# -- crops and augmentation ------------------------------------------------

def test_crop_views_counts_and_noise_ordering():
    cfg = small_config(content_noise_std_long=0.05, content_noise_std_short=0.5)
    w = sw.gen_world(cfg)
    base = w.audio[0]
    rng = Rng(3).child("crops")
    long_err, short_err = [], []
    for i in range(30):
        cs = sw.crop_views(base, cfg, rng.child(i))
        assert len(cs.long_views) == 2
        assert len(cs.short_views) == 4
        long_err += [np.linalg.norm(v - base) for v in cs.long_views]
        short_err += [np.linalg.norm(v - base) for v in cs.short_views]
    assert np.mean(long_err) < np.mean(short_err)


def test_crop_views_deterministic():
    cfg = small_config()
    base = np.zeros(cfg.obs_dim_audio)
    a = sw.crop_views(base, cfg, Rng(9).child("c"))
    b = sw.crop_views(base, cfg, Rng(9).child("c"))
    for x, y in zip(a.long_views + a.short_views, b.long_views + b.short_views):
        assert np.array_equal(x, y)


def test_cropset_counts_enforced():
    v = [np.zeros(3)]
    with pytest.raises(InvalidConfig):
        sw.CropSet(long_views=v, short_views=v * 4)
    with pytest.raises(InvalidConfig):
        sw.CropSet(long_views=v * 2, short_views=v * 3)


def test_cluster_crops_draw_longs_from_partners():
    cfg = small_config(
        channel_noise_std=0.0, content_noise_std_long=0.0,
        content_noise_std_short=0.0, augment_noise_std=0.0,
    )
    anchor = np.full(cfg.obs_dim_audio, 1.0)
    partners = [np.full(cfg.obs_dim_audio, float(k)) for k in range(5)]
    rng = Rng(1).child("cc")
    seen = set()
    for i in range(40):
        cs = sw.cluster_crop_views(anchor, partners, cfg, rng.child(i))
        for v in cs.long_views:
            seen.add(float(v[0]))
        for v in cs.short_views:
            assert np.array_equal(v, anchor)
    assert seen <= {0.0, 1.0, 2.0, 3.0, 4.0}
    assert len(seen) >= 3


def test_cluster_crops_empty_partner_list_falls_back_to_anchor():
    cfg = small_config(content_noise_std_long=0.0, content_noise_std_short=0.0)
    anchor = np.arange(cfg.obs_dim_audio, dtype=float)
    cs = sw.cluster_crop_views(anchor, [], cfg, Rng(0).child("x"))
    for v in cs.long_views:
        assert np.array_equal(v, anchor)


def test_clean_aug_pair_noise_levels():
    cfg = small_config(
        content_noise_std_long=0.0, content_noise_std_short=0.0,
        augment_noise_std=0.7,
    )
    base = np.zeros(cfg.obs_dim_audio)
    clean, aug = sw.clean_aug_pair(base, cfg, Rng(5).child("p"))
    assert np.array_equal(clean, base)
    assert np.linalg.norm(aug) > 0.0


# -- label corruption ------------------------------------------------------

def test_corrupt_labels_exact_count_and_mask():
    rng = Rng(11).child("corrupt")
    labels = np.arange(100) % 7
    out, mask = sw.corrupt_labels(labels, 0.3, 7, rng)
    assert int(mask.sum()) == 30
    changed = out != labels
    assert np.array_equal(changed, mask)
    assert np.all((out >= 0) & (out < 7))


def test_corrupt_labels_rate_zero_and_one():
    rng = Rng(12).child("corrupt")
    labels = np.array([0, 1, 2, 3, 4])
    same, mask0 = sw.corrupt_labels(labels, 0.0, 5, rng.child(0))
    assert np.array_equal(same, labels) and not mask0.any()
    flipped, mask1 = sw.corrupt_labels(labels, 1.0, 5, rng.child(1))
    assert mask1.all()
    assert np.all(flipped != labels)


def test_corrupt_labels_deterministic():
    labels = np.arange(50) % 4
    a, _ = sw.corrupt_labels(labels, 0.5, 4, Rng(3).child("c"))
    b, _ = sw.corrupt_labels(labels, 0.5, 4, Rng(3).child("c"))
    assert np.array_equal(a, b)


def test_corrupt_labels_validates():
    rng = Rng(0).child("c")
    with pytest.raises(InvalidRate):
        sw.corrupt_labels(np.array([0, 1]), 1.5, 2, rng)
    with pytest.raises(InvalidRate):
        sw.corrupt_labels(np.array([0, 1]), -0.1, 2, rng)
    with pytest.raises(InsufficientIdentities):
        sw.corrupt_labels(np.array([0, 0]), 0.5, 1, rng)
    with pytest.raises(InvalidRate):
        sw.corrupt_labels(np.array([0, 9]), 0.5, 4, rng)


# -- serialization ---------------------------------------------------------

def test_world_roundtrip_bit_exact(tmp_path):
    w = sw.gen_world(small_config(), num_target_trials=20, num_nontarget_trials=20)
    wp, tp = str(tmp_path / "world.json"), str(tmp_path / "truth.json")
    sw.save_world(w, wp)
    sw.save_truth(w, tp)
    back = sw.load_world(wp, tp)
    assert np.array_equal(back.audio, w.audio)
    assert np.array_equal(back.visual, w.visual)
    assert np.array_equal(back.identities, w.identities)
    assert np.array_equal(back.mixing, w.mixing)
    assert back.sample_ids == w.sample_ids
    assert back.trials == w.trials
    assert back.config == w.config


def test_load_without_sidecar_hides_truth(tmp_path):
    w = sw.gen_world(small_config())
    wp = str(tmp_path / "world.json")
    sw.save_world(w, wp)
    blind = sw.load_world(wp)
    assert not blind.truth_available
    assert blind.identities is None
    with pytest.raises(TruthUnavailable):
        blind.identity_of(blind.sample_ids[0])
    with pytest.raises(TruthUnavailable):
        blind.truth_labels()
    # training data identical either way
    assert np.array_equal(blind.audio, w.audio)


def test_world_file_contains_no_identities(tmp_path):
    w = sw.gen_world(small_config())
    wp = str(tmp_path / "world.json")
    sw.save_world(w, wp)
    import json
    doc = json.load(open(wp))
    assert "identities" not in doc
    assert set(doc) == {
        "version", "config", "sample_ids", "audio", "visual", "test_audio", "trials",
    }
