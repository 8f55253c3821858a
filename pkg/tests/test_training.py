import math

import numpy as np
import pytest

from aff import numerics as nx
from aff import training as tr
from aff.errors import ConfigError, SchemaError, TrainingError
from aff.fusion import MixerConfig
from aff.training import (ArcFaceLayer, ClassifierHead, QueryEncoder, TrainConfig, arcface_forward,
                          arcface_loss, build_state, joint_step, loss_gradients, momentum_update,
                          sgd_update, train)

from oracles import random_batch

SMALL = MixerConfig(dim=8, hidden=12, depth=2, heads=2)


def cosine_cross_entropy(f, w, y):
    """Softmax cross-entropy on raw cosine logits, written out directly."""
    cos = [float(np.dot(f, r) / (np.linalg.norm(f) * np.linalg.norm(r))) for r in w]
    return math.log(sum(math.exp(c) for c in cos)) - cos[y]


# ArcFace


def test_single_class_loss_is_exactly_zero():
    rng = np.random.default_rng(0)
    for _ in range(5):
        head = ClassifierHead(rng.standard_normal((1, 6)))
        loss, grads = arcface_loss(rng.standard_normal(6), head, 0)
        assert loss == 0.0
        assert not np.any(grads["feature"])


def test_cosine_example_without_margin():
    head = ClassifierHead(np.eye(2), scale=1.0, margin=0.0)
    loss, _ = arcface_loss(np.array([1.0, 0.0]), head, 0)
    assert abs(loss - math.log1p(math.exp(-1.0))) <= 1e-6
    assert abs(loss - 0.313262) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_no_margin_unit_scale_is_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    f, w = rng.standard_normal(7), rng.standard_normal((5, 7))
    y = int(rng.integers(0, 5))
    loss, _ = arcface_loss(f, ClassifierHead(w, scale=1.0, margin=0.0), y)
    assert abs(loss - cosine_cross_entropy(f, w, y)) <= 1e-9


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_loss_invariant_to_feature_rescaling(c):
    rng = np.random.default_rng(1)
    f, head = rng.standard_normal(8), ClassifierHead(rng.standard_normal((6, 8)))
    assert abs(arcface_loss(c * f, head, 2)[0] - arcface_loss(f, head, 2)[0]) <= 1e-9


def test_margin_lowers_target_logit():
    rng = np.random.default_rng(2)
    f, w = rng.standard_normal(8), rng.standard_normal((6, 8))
    plain = arcface_loss(f, ClassifierHead(w, 32.0, 0.0), 1)[0]
    assert arcface_loss(f, ClassifierHead(w, 32.0, 0.3), 1)[0] > plain


def test_target_logit_decreases_with_angle_past_pi():
    # close to antipodal the margin would wrap past pi; the loss must still grow with the angle
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    losses = []
    for theta in np.linspace(2.6, 3.1, 11):
        losses.append(arcface_loss(np.array([np.cos(theta), np.sin(theta)]), ClassifierHead(w, 4.0, 0.3), 0)[0])
    assert np.all(np.isfinite(losses))


def test_arcface_gradient_check_at_default_scale_and_margin():
    report = nx.grad_check(ArcFaceLayer(dim=6, num_classes=5, scale=32.0, margin=0.3, rng=0), trials=10, seed=3)
    assert report.passed(1e-5), report.per_param


def test_arcface_input_errors():
    with pytest.raises(SchemaError):
        arcface_forward(np.ones((1, 3)), np.ones((2, 3)), np.array([2]), 32.0, 0.3)
    with pytest.raises(ConfigError):
        ClassifierHead(np.ones((2, 3)), scale=0.0)
    with pytest.raises(ConfigError):
        ClassifierHead(np.ones((2, 3)), margin=2.0)


# momentum head


def test_momentum_zero_copies_exactly():
    rng = np.random.default_rng(0)
    q, m = ClassifierHead(rng.standard_normal((4, 3))), ClassifierHead(rng.standard_normal((4, 3)))
    momentum_update(q, m, 0.0)
    assert np.array_equal(q.prototypes, m.prototypes)


def test_momentum_half_arithmetic():
    q, m = ClassifierHead(np.full((1, 1), 2.0)), ClassifierHead(np.full((1, 1), 4.0))
    assert momentum_update(q, m, 0.5).prototypes[0, 0] == 3.0


@pytest.mark.parametrize("alpha", [0.5, 0.9, 0.99])
def test_geometric_contraction_under_constant_target(alpha):
    rng = np.random.default_rng(4)
    target = ClassifierHead(rng.standard_normal((5, 4)))
    q = ClassifierHead(rng.standard_normal((5, 4)))
    dist = np.linalg.norm(q.prototypes - target.prototypes)
    for _ in range(30):
        momentum_update(q, target, alpha)
        new = np.linalg.norm(q.prototypes - target.prototypes)
        assert new == pytest.approx(alpha * dist, rel=1e-12)
        dist = new


def test_dyadic_contraction_is_bit_exact():
    target = ClassifierHead(np.full((2, 2), 1.0))
    q = ClassifierHead(np.full((2, 2), 5.0))
    for step in range(1, 20):
        momentum_update(q, target, 0.5)
        assert np.array_equal(q.prototypes - 1.0, np.full((2, 2), 4.0 * 0.5 ** step))


def test_momentum_errors():
    q = ClassifierHead(np.ones((2, 3)))
    with pytest.raises(SchemaError):
        momentum_update(q, ClassifierHead(np.ones((3, 3))), 0.5)
    with pytest.raises(ConfigError):
        momentum_update(q, ClassifierHead(np.ones((2, 3))), 1.0)


# steps and loops


def fresh_state(seed=0, mode="joint", **kw):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, size=8, query_dim=6)
    cfg = TrainConfig(seed=seed, mode=mode, lr=0.05, epochs=1, batch_size=4, **kw)
    return build_state(batch, 4, cfg, SMALL, dtype=np.float64), batch, cfg


def test_compatibility_loss_never_touches_mixer_or_query_head():
    state, batch, _ = fresh_state()
    _, g = loss_gradients(state, batch, "comp", "joint")
    assert all(not np.any(v) for v in g["mixer"].values())
    assert not np.any(g["query_head"])
    assert not np.any(g["mixer_head"])
    assert any(np.any(v) for v in g["encoder"].values())


def test_discriminative_loss_never_touches_encoder():
    state, batch, _ = fresh_state()
    _, g = loss_gradients(state, batch, "disc", "joint")
    assert all(not np.any(v) for v in g["encoder"].values())
    assert not np.any(g["query_head"])
    assert np.any(g["mixer_head"])


def test_coupled_mode_shares_the_head():
    state, batch, _ = fresh_state(mode="coupled")
    _, g = loss_gradients(state, batch, "comp", "coupled")
    assert np.any(g["mixer_head"])
    assert all(not np.any(v) for v in g["mixer"].values())


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    enc = QueryEncoder(6, 8, 5, rng=5, dtype=np.float64)
    x = rng.standard_normal((4, 6))
    up = rng.standard_normal((4, 8))
    enc.forward(x)
    g = enc.backward(up)
    for k, arr in enc.params.items():
        num = nx.numerical_gradient(lambda: float(np.sum(up * enc.forward(x))), arr)
        assert nx.relative_error(g[k], num) <= 1e-5


def test_weight_decay_with_zero_gradient():
    p = np.random.default_rng(0).standard_normal((3, 4))
    expected = p * (1.0 - 0.1 * 0.01)
    sgd_update(p, np.zeros_like(p), 0.1, 0.01)
    assert np.array_equal(p, expected)


def test_zero_learning_rate_step_changes_nothing():
    state, batch, cfg = fresh_state()
    before = {k: v.copy() for k, v in state.mixer.params.items()}
    enc_before = {k: v.copy() for k, v in state.encoder.params.items()}
    heads = state.mixer_head.prototypes.copy(), state.query_head.prototypes.copy()
    d, c = joint_step(state, batch, cfg, 0.0)
    assert math.isfinite(d) and math.isfinite(c)
    for k, v in before.items():
        assert np.array_equal(state.mixer.params[k], v)
    for k, v in enc_before.items():
        assert np.array_equal(state.encoder.params[k], v)
    assert np.array_equal(state.mixer_head.prototypes, heads[0])
    assert np.array_equal(state.query_head.prototypes, heads[1])


def test_query_head_starts_as_copy_and_only_moves_by_momentum():
    state, batch, cfg = fresh_state(momentum=0.9)
    assert np.array_equal(state.query_head.prototypes, state.mixer_head.prototypes)
    old_q = state.query_head.prototypes.copy()
    joint_step(state, batch, cfg, 0.05)
    np.testing.assert_allclose(state.query_head.prototypes,
                               0.9 * old_q + 0.1 * state.mixer_head.prototypes, rtol=0, atol=1e-15)


def test_missing_labels_rejected():
    state, batch, cfg = fresh_state()
    batch.labels[:] = -1
    with pytest.raises(SchemaError):
        joint_step(state, batch, cfg, 0.01)


def test_one_epoch_on_eight_items():
    batch = random_batch(np.random.default_rng(6), size=8, query_dim=6)
    result = train(batch, TrainConfig(epochs=1, batch_size=4), SMALL, 4)
    assert len(result.report.disc_loss) == 1 and len(result.report.comp_loss) == 1
    assert all(math.isfinite(v) and v >= 0 for v in result.report.disc_loss + result.report.comp_loss)


def test_training_is_deterministic():
    batch = random_batch(np.random.default_rng(7), size=12, query_dim=6)
    cfg = TrainConfig(epochs=3, batch_size=5, lr=0.05, seed=4)
    a = train(batch, cfg, SMALL, 4).report.to_dict(timing=False)
    b = train(batch, cfg, SMALL, 4).report.to_dict(timing=False)
    assert a == b


def test_learning_rate_decays_linearly_per_step(monkeypatch):
    seen = []
    real = tr.joint_step

    def spy(state, batch, config, lr, *args):
        seen.append(lr)
        return real(state, batch, config, lr, *args)

    monkeypatch.setattr(tr, "joint_step", spy)
    batch = random_batch(np.random.default_rng(8), size=10, query_dim=6)
    train(batch, TrainConfig(epochs=2, batch_size=4, lr=0.3), SMALL, 4)
    # 3 steps per epoch, 6 in total
    np.testing.assert_allclose(seen, [0.3 * (1 - t / 6) for t in range(6)], rtol=0, atol=1e-15)


def test_two_stage_freezes_mixer_in_second_stage():
    batch = random_batch(np.random.default_rng(9), size=8, query_dim=6)
    cfg = TrainConfig(epochs=2, batch_size=4, lr=0.05, mode="two-stage")
    result = train(batch, cfg, SMALL, 4)
    assert len(result.report.disc_loss) == 2 and len(result.report.comp_loss) == 2
    # the query head is a fixed copy of the frozen mixer head after stage two
    assert np.array_equal(result.state.query_head.prototypes, result.state.mixer_head.prototypes)


def test_baseline_mixer_trains():
    batch = random_batch(np.random.default_rng(10), size=8, query_dim=6)
    result = train(batch, TrainConfig(epochs=1, batch_size=4, mixer="mlp"), SMALL, 4)
    assert result.mixer.kind == "mlp"


def test_divergence_reports_epoch():
    batch = random_batch(np.random.default_rng(11), size=8, query_dim=6)
    batch.query_views[3, 0] = np.nan
    with pytest.raises(TrainingError) as err:
        train(batch, TrainConfig(epochs=2, batch_size=4), SMALL, 4)
    assert err.value.epoch == 0


def test_config_validation():
    for bad in ({"mode": "other"}, {"momentum": 1.0}, {"lr": -1.0}, {"batch_size": 0}, {"mixer": "cnn"}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_encoder_is_smaller_than_mixer():
    from aff.config import default_config
    from aff.synth import generate
    cfg = default_config()
    ds = generate(cfg.data)
    state = build_state(ds.train, ds.num_classes, cfg.train, cfg.model.mixer(), cfg.model.encoder_hidden)
    assert state.encoder.num_parameters() < state.mixer.num_parameters()
