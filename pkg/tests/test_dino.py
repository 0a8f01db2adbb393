"""Self-distillation tests: repeat probability, loss oracles, training behavior."""

import math
from fractions import Fraction

import numpy as np
import pytest

from spklab import dino
from spklab import numkit as nk
from spklab.errors import (
    BatchLargerThanPopulation,
    EmptyBatch,
    InvalidConfig,
    ShapeMismatch,
)
from spklab.evalkit import purity
from spklab.numkit import Rng
from spklab.synthworld import WorldConfig, gen_world


# -- repeat probability ----------------------------------------------------

def test_repeat_probability_reference_population():
    # large-population reference points, rounded to 3 decimals
    s = 5994
    expected = {16: 0.020, 32: 0.080, 64: 0.286, 128: 0.745, 256: 0.996}
    for n, want in expected.items():
        assert round(dino.repeat_probability(s, n), 3) == want


def test_repeat_probability_exact_fraction_oracle():
    for s in (3, 7, 20):
        for n in range(1, s + 1):
            exact = 1 - math.prod(Fraction(s - i, s) for i in range(n))
            got = dino.repeat_probability(s, n)
            assert got == pytest.approx(float(exact), rel=1e-12, abs=1e-15)


def test_repeat_probability_edges():
    assert dino.repeat_probability(10, 1) == pytest.approx(0.0, abs=1e-15)
    assert dino.repeat_probability(1, 1) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(BatchLargerThanPopulation):
        dino.repeat_probability(10, 11)
    with pytest.raises(EmptyBatch):
        dino.repeat_probability(10, 0)
    with pytest.raises(InvalidConfig):
        dino.repeat_probability(0, 1)


def test_repeat_probability_monotone_in_batch_size():
    vals = [dino.repeat_probability(100, n) for n in range(1, 101)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    # strictly below 1 while representable; the tail rounds to 1.0 in float64
    assert vals[30] < 1.0
    assert vals[-1] <= 1.0


# -- model mechanics -------------------------------------------------------

def _tiny_enc():
    return dino.EncoderConfig(
        input_dim=6, hidden_dims=(8,), embed_dim=5, head_hidden=7,
        num_prototypes=9,
    )


def test_init_params_shapes_and_determinism():
    cfg = _tiny_enc()
    p1 = dino.init_params(cfg, Rng(3).child("m"))
    p2 = dino.init_params(cfg, Rng(3).child("m"))
    assert p1["enc_w0"].data.shape == (6, 8)
    assert p1["enc_w1"].data.shape == (8, 5)
    assert p1["head_w0"].data.shape == (5, 7)
    assert p1["proto"].data.shape == (9, 7)
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)


def test_forward_shapes_and_logit_range():
    cfg = _tiny_enc()
    params = dino.init_params(cfg, Rng(0).child("m"))
    x = np.random.default_rng(1).normal(size=(4, 6))
    emb, logits = dino.forward(params, x)
    assert emb.data.shape == (4, 5)
    assert logits.data.shape == (4, 9)
    # logits are cosines between unit vectors
    assert np.all(np.abs(logits.data) <= 1.0 + 1e-12)


def test_embed_all_matches_forward():
    cfg = _tiny_enc()
    params = dino.init_params(cfg, Rng(2).child("m"))
    x = np.random.default_rng(4).normal(size=(10, 6))
    batched = dino.embed_all(params, x, batch_size=3)
    whole, _ = dino.forward(params, x)
    assert np.allclose(batched, whole.data, atol=1e-12)


def test_teacher_probs_rows_sum_one_and_sharpen():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 9))
    center = rng.normal(size=9)
    sharp = dino.teacher_probs(logits, center, 0.04)
    soft = dino.teacher_probs(logits, center, 0.5)
    assert np.allclose(sharp.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(sharp.max(axis=1) >= soft.max(axis=1) - 1e-12)
    # centering shifts logits before the softmax
    want = np.exp((logits - center) / 0.5)
    want = want / want.sum(axis=1, keepdims=True)
    assert np.allclose(soft, want, atol=1e-12)


def test_update_center_geometric_series_oracle():
    # constant batch mean mu from zero start: after k updates,
    # center = (1 - m^k) * mu
    mu = np.array([1.0, -2.0, 0.5])
    logits = np.tile(mu, (4, 1))
    center = np.zeros(3)
    m = 0.9
    for k in range(1, 8):
        center = dino.update_center(center, logits, m)
        assert np.allclose(center, (1 - m ** k) * mu, atol=1e-12)


def test_ema_update_endpoints_and_mix():
    cfg = _tiny_enc()
    student = dino.init_params(cfg, Rng(1).child("s"))
    teacher = dino.clone_params(student)
    for p in teacher.values():
        p.data += 1.0
    frozen = {k: p.data.copy() for k, p in teacher.items()}

    dino.ema_update(teacher, student, 1.0)
    for k in teacher:
        assert np.array_equal(teacher[k].data, frozen[k])

    dino.ema_update(teacher, student, 0.5)
    for k in teacher:
        assert np.allclose(
            teacher[k].data, 0.5 * frozen[k] + 0.5 * student[k].data, atol=1e-12
        )

    dino.ema_update(teacher, student, 0.0)
    for k in teacher:
        assert np.allclose(teacher[k].data, student[k].data, atol=1e-12)


# -- loss oracles ----------------------------------------------------------

def _random_views(rng, b=3, k=7):
    teacher = []
    for _ in range(2):
        p = np.abs(rng.normal(size=(b, k))) + 0.1
        teacher.append(p / p.sum(axis=1, keepdims=True))
    student = [nk.Tensor(rng.normal(size=(b, k))) for _ in range(6)]
    return teacher, student


def _ce_oracle(teacher, student, temp, include_self):
    total, count = 0.0, 0
    b = teacher[0].shape[0]
    for t, probs in enumerate(teacher):
        for s, logits in enumerate(student):
            if s == t and not include_self:
                continue
            z = logits.data / temp
            z = z - z.max(axis=1, keepdims=True)
            logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total += float(-(probs * logq).sum() / b)
            count += 1
    return total / count


def test_dino_ce_loss_matches_double_loop_oracle():
    rng = np.random.default_rng(6)
    teacher, student = _random_views(rng)
    got = dino.dino_ce_loss(teacher, student, 0.1).item()
    assert got == pytest.approx(_ce_oracle(teacher, student, 0.1, False), abs=1e-10)


def test_dino_ce_loss_self_pair_flag():
    rng = np.random.default_rng(7)
    teacher, student = _random_views(rng)
    with_self = dino.dino_ce_loss(teacher, student, 0.1, include_self_pairs=True).item()
    assert with_self == pytest.approx(
        _ce_oracle(teacher, student, 0.1, True), abs=1e-10
    )
    # two extra terms change the mean
    without = dino.dino_ce_loss(teacher, student, 0.1).item()
    assert with_self != pytest.approx(without, abs=1e-6)


def test_dino_ce_loss_view_count_enforced():
    rng = np.random.default_rng(8)
    teacher, student = _random_views(rng)
    with pytest.raises(ShapeMismatch):
        dino.dino_ce_loss(teacher[:1], student, 0.1)
    with pytest.raises(ShapeMismatch):
        dino.dino_ce_loss(teacher, student[:5], 0.1)


def test_consistency_loss_matches_loop_oracle():
    rng = np.random.default_rng(9)
    embeds = [nk.Tensor(rng.normal(size=(4, 5))) for _ in range(6)]
    got = dino.consistency_loss(embeds).item()

    def cos(x, y):
        return x @ y / (np.linalg.norm(x) * np.linalg.norm(y))

    total, count = 0.0, 0
    for i in range(2):
        for j in range(6):
            if i == j:
                continue
            rows = [1 - cos(embeds[i].data[r], embeds[j].data[r]) for r in range(4)]
            total += float(np.mean(rows))
            count += 1
    assert got == pytest.approx(total / count, abs=1e-10)


def test_consistency_loss_zero_for_identical_views():
    x = nk.Tensor(np.random.default_rng(10).normal(size=(3, 4)))
    val = dino.consistency_loss([x] * 6).item()
    assert val == pytest.approx(0.0, abs=1e-12)


def test_total_loss_gradcheck():
    cfg = dino.EncoderConfig(
        input_dim=3, hidden_dims=(4,), embed_dim=3, head_hidden=5,
        num_prototypes=6,
    )
    rng = np.random.default_rng(11)
    views = [rng.normal(size=(2, 3)) for _ in range(6)]
    teacher = []
    for _ in range(2):
        p = np.abs(rng.normal(size=(2, 6))) + 0.1
        teacher.append(p / p.sum(axis=1, keepdims=True))

    def f(params):
        embeds, logits = [], []
        for v in views:
            e, lo = dino.forward(params, v)
            embeds.append(e)
            logits.append(lo)
        ce = dino.dino_ce_loss(teacher, logits, 0.1)
        cons = dino.consistency_loss(embeds)
        return nk.add(ce, cons)

    worst = 0.0
    for seed in range(3):
        params = dino.init_params(cfg, Rng(800 + seed).child("gc"))
        worst = max(worst, nk.grad_check(f, params, epsilon=1e-5))
    assert worst < 1e-5


# -- training --------------------------------------------------------------

def _tiny_world():
    # mild noise keeps this fixture trainable in ten epochs
    return gen_world(WorldConfig(
        num_identities=5, utterances_per_identity=10,
        obs_dim_audio=12, obs_dim_visual=8, seed=21,
        channel_noise_std=0.25, content_noise_std_long=0.1,
        content_noise_std_short=0.3, augment_noise_std=0.3,
    ))


def _tiny_hyper(**overrides):
    base = dict(
        epochs=10, batch_size=16, lr_peak=0.2, lr_end=1e-4,
        ca_warmup_epochs=5, ca_every=2, ca_clusters=5,
    )
    base.update(overrides)
    return dino.DinoHyper(**base)


def _tiny_train(hyper=None, seed=99):
    world = _tiny_world()
    enc = dino.EncoderConfig(
        input_dim=12, hidden_dims=(24,), embed_dim=12, head_hidden=32,
        num_prototypes=64,
    )
    hyper = hyper or _tiny_hyper()
    result = dino.train_stage1(
        world.train_views(), world.config, enc, hyper, Rng(seed).child("s1")
    )
    return world, result


def test_train_stage1_deterministic():
    _, r1 = _tiny_train()
    _, r2 = _tiny_train()
    for k in r1.teacher_params:
        assert np.array_equal(r1.teacher_params[k].data, r2.teacher_params[k].data)
    assert r1.epoch_losses == r2.epoch_losses


def test_train_stage1_zero_lr_leaves_teacher_at_init():
    world = _tiny_world()
    enc = dino.EncoderConfig(
        input_dim=12, hidden_dims=(24,), embed_dim=12, head_hidden=32,
        num_prototypes=64,
    )
    hyper = _tiny_hyper(epochs=2, lr_peak=0.0, lr_end=0.0)
    rng = Rng(5).child("s1")
    init = dino.init_params(enc, rng.child("init"))
    result = dino.train_stage1(world.train_views(), world.config, enc, hyper, rng)
    for k in init:
        assert np.allclose(result.teacher_params[k].data, init[k].data, atol=1e-12)


def test_train_stage1_loss_decreases():
    # epoch 0 reads artificially low (teacher still equals student), and the
    # cluster-aware switch mid-run changes the objective, so the meaningful
    # trend is a clear decline from the peak to the final epoch
    _, result = _tiny_train()
    losses = result.epoch_losses
    assert losses[-1] < 0.75 * max(losses)
    assert np.mean(losses[-3:]) < np.mean(losses[1:4])


def test_train_stage1_cluster_refreshes_happen():
    _, result = _tiny_train()
    assert result.ca_epochs == [5, 7, 9]
    assert result.final_assignments is not None
    assert len(result.final_assignments) == 50


def test_train_stage1_embeddings_cluster_by_identity():
    from spklab.clusterlab import kmeans as km
    world, result = _tiny_train()
    emb = dino.embed_all(result.teacher_params, world.audio)
    res = km(emb, 5, Rng(1).child("eval-km"), restarts=8)
    assert purity(res.assignments, world.identities) >= 0.9


def test_train_stage1_rejects_empty_and_mismatched():
    world = _tiny_world()
    enc = dino.EncoderConfig(input_dim=7)
    with pytest.raises(EmptyBatch):
        dino.train_stage1([], world.config, enc, _tiny_hyper(), Rng(0).child("x"))
    with pytest.raises(ShapeMismatch):
        dino.train_stage1(
            world.train_views(), world.config, enc, _tiny_hyper(), Rng(0).child("x")
        )


def test_dino_hyper_validation():
    with pytest.raises(InvalidConfig):
        _tiny_hyper(teacher_temp=0.2, student_temp=0.1)
    with pytest.raises(InvalidConfig):
        _tiny_hyper(epochs=-1)
    with pytest.raises(InvalidConfig):
        _tiny_hyper(batch_size=0)
    with pytest.raises(InvalidConfig):
        _tiny_hyper(ema_start=0.9, ema_end=0.8)
    # zero epochs is legal: training then returns the initialization
    _tiny_hyper(epochs=0)
