import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalar_oracle import loss_fixture_errors
from styleagnostic import numcore as nc
from styleagnostic.network import StageCNNConfig, build_model
from styleagnostic.numcore import SGD, Tape, Tensor, backward, cosine_lr, precision
from styleagnostic.stylestats import content_randomize, style_randomize
from styleagnostic.training import (
    VARIANTS,
    BatchSampler,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    adversarial_loss,
    consistency_loss,
    content_loss,
    one_hot,
    style_loss,
    train,
)

LN7 = 1.945910149055313


@pytest.fixture(autouse=True)
def float64():
    with precision(np.float64):
        yield


def micro_model(seed=0, stage=1, norm="layer"):
    cfg = StageCNNConfig(channels=(2, 3), num_classes=3, input_shape=(3, 4, 4), randomization_stage=stage, norm=norm)
    return build_model(cfg, seed=seed)


def small_model(seed=0):
    cfg = StageCNNConfig(channels=(4, 6, 8), num_classes=3, input_shape=(3, 8, 8), randomization_stage=1)
    return build_model(cfg, seed=seed)


def toy_data(seed, n=24, k=3, size=8):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    x = rng.normal(0, 0.3, (n, 3, size, size)) + y[:, None, None, None] * 0.5
    return x, y


# loss values ------------------------------------------------------------------------

def test_uniform_prediction_cross_entropy_is_ln_k():
    logp = Tensor(np.full((5, 7), -math.log(7)))
    y = one_hot(np.arange(5) % 7, 7)
    assert abs(content_loss(logp, y).item() - LN7) < 1e-6
    assert abs(style_loss(logp, y).item() - LN7) < 1e-6


def test_adversarial_loss_at_uniform_equals_bound():
    logp = Tensor(np.full((4, 7), -math.log(7)))
    assert abs(adversarial_loss(logp, 0.3).item() - 0.3 * LN7) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.floats(0.0, 5.0), st.integers(0, 2**31 - 1))
def test_adversarial_loss_never_below_bound(k, n, lam, seed):
    logits = np.random.default_rng(seed).normal(0, 4, (n, k))
    logp = nc.log_softmax(Tensor(logits), axis=1)
    assert adversarial_loss(logp, lam).item() >= lam * math.log(k) - 1e-9


def test_content_loss_rejects_bad_labels():
    logp = Tensor(np.log(np.full((2, 3), 1 / 3)))
    with pytest.raises(ValueError, match="one-hot"):
        content_loss(logp, np.array([[1, 1, 0], [0, 0, 1]]))
    with pytest.raises(ValueError, match="shape"):
        content_loss(logp, np.eye(4)[:2])


def test_one_hot():
    np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


# independent scalar reimplementation ---------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_losses_match_scalar_reimplementation(seed):
    errs = loss_fixture_errors(seed)
    assert max(errs.values()) < 1e-6, errs


# gradients through the micro network ----------------------------------------------------

def _fixed_randomization(seed, n):
    rng = np.random.default_rng(1000 + seed)
    return rng.permutation(n), rng.uniform(0, 1, n)


def _micro_batch(seed, n=4):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, (n, 3, 4, 4))), one_hot(rng.integers(0, 3, n), 3)


@pytest.mark.parametrize("seed", range(10))
def test_content_loss_gradient_finite_difference(seed):
    model = micro_model(seed)
    x, y = _micro_batch(seed)
    perm, alpha = _fixed_randomization(seed, 4)

    def f():
        z = model.features(x)
        return content_loss(model.content_head(style_randomize(z, nc.take(z, perm, axis=0), alpha)), y)

    params = model.param_groups["f_all"] + model.param_groups["c_all"]
    errs = nc.check_gradients(f, params)
    assert max(errs) < 1e-4, errs


@pytest.mark.parametrize("seed", range(10))
def test_style_loss_gradient_finite_difference(seed):
    model = micro_model(seed)
    x, y = _micro_batch(seed)
    perm, _ = _fixed_randomization(seed, 4)

    def f():
        z = model.features(x).detach()
        return style_loss(model.style_head(content_randomize(z, nc.take(z, perm, axis=0))), y)

    errs = nc.check_gradients(f, model.param_groups["s_all"])
    assert max(errs) < 1e-4, errs


@pytest.mark.parametrize("seed", range(10))
def test_adversarial_loss_gradient_finite_difference(seed):
    model = micro_model(seed)
    x, _ = _micro_batch(seed)
    perm, _ = _fixed_randomization(seed, 4)

    def f():
        z = model.features(x)
        return adversarial_loss(model.style_head(content_randomize(z, nc.take(z, perm, axis=0))), 0.5)

    errs = nc.check_gradients(f, model.param_groups["f_affine"])
    assert max(errs) < 1e-4, errs


@pytest.mark.parametrize("seed", range(10))
def test_consistency_loss_gradient_finite_difference(seed):
    model = micro_model(seed)
    x, _ = _micro_batch(seed)
    perm, alpha = _fixed_randomization(seed, 4)

    def f():
        # a large weight keeps the value well above round-off for the difference quotient
        return consistency_loss(model, x, perm, alpha, 10.0)

    params = model.param_groups["f_all"] + model.param_groups["c_all"]
    errs = nc.check_gradients(f, params)
    assert max(errs) < 1e-4, errs


def test_consistency_loss_zero_without_style_change():
    model = micro_model(3)
    x, _ = _micro_batch(3)
    assert consistency_loss(model, x, np.arange(4), np.ones(4), 1.0).item() < 1e-20


# optimization schedule ----------------------------------------------------------------------

def test_parameter_partition_over_100_steps():
    model = small_model(1)
    x, y = toy_data(1)
    xu, _ = toy_data(2, n=12)
    trainer = Trainer(model, TrainConfig(total_iters=100, batch_size=8, lambda_adv=0.5, lambda_unl=0.1,
                                         check_partition=True, seed=4))
    names = trainer.group_names
    expect = {
        "content": names["f_all"] | names["c_all"],
        "style": names["s_all"],
        "adversarial": names["f_affine"],
    }
    sampler = BatchSampler(len(x), 8, trainer.data_rng)
    rng = np.random.default_rng(9)
    for it in range(100):
        idx = sampler.next()
        report = trainer.step(x[idx], y[idx], xu[rng.choice(len(xu), 8, replace=False)] if it % 2 else None)
        for phase, want in expect.items():
            assert report.changed[phase] == want, (it, phase)


def test_adversarial_optimizer_has_no_weight_decay():
    trainer = Trainer(small_model(), TrainConfig(weight_decay=1e-3))
    assert trainer.opt_adv.weight_decay == 0.0
    assert trainer.opt_content.weight_decay == 1e-3


def test_baseline_equals_plain_supervised_training():
    x, y = toy_data(5)
    cfg = TrainConfig.for_variant("baseline", total_iters=30, batch_size=8, seed=11)
    trained = train(small_model(7), x, y, cfg).model

    # reference: hand-written cross-entropy SGD loop over the same batches
    ref = small_model(7)
    params = ref.param_groups["f_all"] + ref.param_groups["c_all"]
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    data_ss = np.random.SeedSequence(cfg.seed).spawn(3)[0]
    sampler = BatchSampler(len(x), cfg.batch_size, np.random.default_rng(data_ss))
    for it in range(cfg.total_iters):
        idx = sampler.next()
        with Tape() as tape:
            logp = ref.content_head(ref.features(Tensor(x[idx])))
            loss = -nc.mean(nc.sum(logp * one_hot(y[idx], 3), axis=1))
            opt.zero_grad()
            backward(loss, tape, wrt=params)
            opt.step(cosine_lr(cfg.lr, it, cfg.total_iters))

    got, want = trained.state_arrays(), ref.state_arrays()
    for name in want:
        np.testing.assert_array_equal(got[name], want[name], err_msg=name)


@pytest.mark.parametrize("variant", ["baseline", "no_ASBL"])
def test_variants_without_style_learning_leave_style_head_alone(variant):
    model = small_model(2)
    init = {n: a.copy() for n, a in model.state_arrays().items() if n.startswith("s.")}
    x, y = toy_data(3)
    cfg = TrainConfig.for_variant(variant, total_iters=5, batch_size=8, lambda_adv=1.0)
    trainer = Trainer(model, cfg)
    assert not trainer.uses_style_head
    for _ in range(5):
        report = trainer.step(x[:8], y[:8])
        assert report.loss_s is None and report.loss_adv is None
        assert set(report.grad_norms) == {"content"}
    assert all(p.grad is None for p in model.param_groups["s_all"])
    for n, a in init.items():
        np.testing.assert_array_equal(model.state_arrays()[n], a)


def test_variant_configs():
    assert TrainConfig.for_variant("full", lambda_adv=0.2).lambda_adv == 0.2
    nocbl = TrainConfig.for_variant("no_CBL", lambda_adv=0.2)
    assert not nocbl.use_sr and nocbl.train_style and nocbl.lambda_adv == 0.2
    noasbl = TrainConfig.for_variant("no_ASBL", lambda_adv=0.2)
    assert noasbl.use_sr and not noasbl.train_style and noasbl.lambda_adv == 0.0
    with pytest.raises(ValueError, match="unknown variant"):
        TrainConfig.for_variant("everything")
    assert set(VARIANTS) == {"full", "no_CBL", "no_ASBL", "baseline"}


def test_no_cbl_feeds_unrandomized_features():
    model = small_model(4)
    x, y = toy_data(4)
    trainer = Trainer(model, TrainConfig.for_variant("no_CBL", total_iters=1, batch_size=8))
    with nc.no_grad():
        logp = model.content_head(model.features(Tensor(x[:8])))
    expected = content_loss(logp, one_hot(y[:8], 3)).item()
    assert trainer.step(x[:8], y[:8]).loss_c == pytest.approx(expected, abs=1e-12)


def test_training_is_deterministic(tmp_path):
    x, y = toy_data(6)
    xu, _ = toy_data(7, n=16)
    cfg = TrainConfig(total_iters=12, batch_size=8, seed=3, trace_every=4)
    a = train(small_model(1), x, y, cfg, unlabeled=xu, trace_path=tmp_path / "a.jsonl")
    b = train(small_model(1), x, y, cfg, unlabeled=xu, trace_path=tmp_path / "b.jsonl")
    for name, arr in a.model.state_arrays().items():
        np.testing.assert_array_equal(arr, b.model.state_arrays()[name])
    assert a.trace == b.trace
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


def test_trace_records(tmp_path):
    x, y = toy_data(6)
    cfg = TrainConfig(total_iters=10, batch_size=8, trace_every=4)
    res = train(small_model(1), x, y, cfg, trace_path=tmp_path / "t.jsonl",
                callback=lambda tr, rep: {"seen": rep.iteration})
    lines = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert [l["iteration"] for l in lines] == [0, 4, 8, 9]
    assert lines == res.trace
    assert all(l["seen"] == l["iteration"] for l in lines)
    assert lines[0]["lr"] == cfg.lr


def test_unlabeled_consistency_reported_only_with_unlabeled_data():
    x, y = toy_data(8)
    trainer = Trainer(small_model(), TrainConfig(batch_size=8))
    assert trainer.step(x[:8], y[:8]).loss_unl is None
    rep = trainer.step(x[:8], y[:8], x[8:16])
    assert rep.loss_unl is not None and rep.loss_unl >= 0


def test_unlabeled_adds_adversarial_term():
    x, y = toy_data(8)
    cfg = TrainConfig(batch_size=8, lambda_adv=1.0, lambda_unl=0.0)
    plain = Trainer(small_model(), cfg).step(x[:8], y[:8])
    both = Trainer(small_model(), cfg).step(x[:8], y[:8], x[8:16])
    # two terms, each bounded below by lambda ln K
    assert both.loss_adv >= 2 * math.log(3) - 1e-9
    assert plain.loss_adv < both.loss_adv


def test_divergence_raises():
    x, y = toy_data(9)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        Trainer(small_model(), TrainConfig(batch_size=8)).step(x[:8], y[:8])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_adv=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="empty"):
        train(small_model(), np.zeros((0, 3, 8, 8)), np.zeros(0, int), TrainConfig())


def test_training_reduces_content_loss():
    x, y = toy_data(10, n=48)
    res = train(small_model(3), x, y, TrainConfig(total_iters=60, batch_size=16, trace_every=59, lr=0.05))
    assert res.trace[-1]["loss_c"] < res.trace[0]["loss_c"]
