import math

import numpy as np
import pytest

from _cases import run_freeze_case
from snakesim import data, nncore, trainer
from snakesim.accounting import flop_estimate
from snakesim.errors import ConfigurationError, DimensionError, InputError
from snakesim.trainer import KDConfig, LayerAssignment, TrainConfig


def test_lr_for_cycle():
    assert trainer.lr_for_cycle(0.05, 0, 0.7) == 0.05
    assert trainer.lr_for_cycle(0.1, 2, 0.5) == 0.025
    with pytest.raises(InputError):
        trainer.lr_for_cycle(0.1, -1, 0.5)


def test_assignment_validation():
    assert LayerAssignment({3}, 5).updated_set == {1, 3, 5}
    assert LayerAssignment.full(4).updated_set == {1, 2, 3, 4}
    for bad in ({1}, {5}, set()):
        with pytest.raises(InputError):
            LayerAssignment(bad, 5)


def test_kd_loss_uniform():
    z = np.zeros((3, 4))
    assert trainer.kd_loss(z, z, 1.0) == pytest.approx(math.log(4), abs=1e-12)


def test_kd_loss_sharp_teacher():
    z = np.full((2, 3), -50.0)
    z[:, 0] = 50.0
    assert trainer.kd_loss(z, z, 1.0) == pytest.approx(0.0, abs=1e-12)


def kd_oracle(s, t, T):
    total = 0.0
    for srow, trow in zip(s.tolist(), t.tolist()):
        es = [math.exp(v / T) for v in srow]
        et = [math.exp(v / T) for v in trow]
        zs, zt = sum(es), sum(et)
        total += -sum((b / zt) * math.log(a / zs) for a, b in zip(es, et))
    return T * T * total / len(s)


@pytest.mark.parametrize("seed", range(5))
def test_kd_loss_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    s, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    T = float(rng.uniform(0.5, 4))
    assert trainer.kd_loss(s, t, T) == pytest.approx(kd_oracle(s, t, T), abs=1e-12)


def test_kd_grad_finite_difference():
    rng = np.random.default_rng(7)
    s, t, T = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), 2.0
    g = trainer.kd_grad(s, t, T)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        fd = (trainer.kd_loss(sp, t, T) - trainer.kd_loss(sm, t, T)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_kd_loss_rejects_bad_input():
    with pytest.raises(DimensionError):
        trainer.kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)
    with pytest.raises(InputError):
        trainer.kd_loss(np.zeros((2, 3)), np.zeros((2, 3)), 0.0)


def test_should_activate_kd_examples():
    assert not trainer.should_activate_kd([[5, 5, 5], [5, 5, 5], [5, 5, 5]], 0.01)
    assert trainer.should_activate_kd([[10, 0], [0, 10]], 0.5)
    with pytest.raises(InputError):
        trainer.should_activate_kd([[1, 1]], 0.1)


def test_should_activate_kd_iid_blobs_mostly_off():
    off = 0
    for seed in range(100):
        ds = data.make_blobs(4, 1000, 16, 2.0, seed)
        p = data.partition_iid(ds, 9, seed)
        off += not trainer.should_activate_kd(p.histograms(ds), 0.1)
    assert off / 100 >= 0.95


def small_setup(seed=0, n=20, n_layers=4):
    rng = np.random.default_rng(seed)
    g = nncore.mlp_graph(3, 5, 3, n_layers)
    p = nncore.init_params(g, rng)
    shard = data.Dataset(rng.normal(size=(n, 3)), rng.integers(0, 3, n), n_classes=3)
    return g, p, shard


def test_zero_lr_single_sample():
    g, p, shard = small_setup(n=1)
    res = trainer.train_local(p, g, LayerAssignment({2}, 4), shard, TrainConfig(base_lr=0.0), cycle=0)
    assert len(res.train_loss) == 1 and res.steps == 1
    assert trainer.apply_result(p, res).digest() == p.digest()


def test_empty_shard_is_rejected():
    g, p, shard = small_setup()
    with pytest.raises(ConfigurationError):
        trainer.train_local(p, g, LayerAssignment({2}, 4), shard.subset([]), TrainConfig(), 0)


def test_teacher_required_iff_kd():
    g, p, shard = small_setup()
    a = LayerAssignment({2}, 4)
    with pytest.raises(InputError):
        trainer.train_local(p, g, a, shard, TrainConfig(kd=KDConfig()), 0)
    with pytest.raises(InputError):
        trainer.train_local(p, g, a, shard, TrainConfig(), 0, teacher=p)


def test_mismatched_assignment_rejected():
    g, p, shard = small_setup()
    with pytest.raises(InputError):
        trainer.train_local(p, g, LayerAssignment({2}, 5), shard, TrainConfig(), 0)


@pytest.mark.parametrize("seed", range(50))
def test_frozen_layers_untouched(seed):
    before, after, merged = run_freeze_case(seed)
    assert before == after == merged


def test_result_holds_only_parameters():
    g, p, shard = small_setup()
    res = trainer.train_local(p, g, LayerAssignment({3}, 4), shard, TrainConfig(epochs=2), 0, seed=1)
    assert set(res.updated_params) == {1, 3, 4}
    for w, b in res.updated_params.values():
        assert w.shape[0] != len(shard) or w.shape[1] != shard.dim
    assert len(res.train_loss) == 2 and all(math.isfinite(v) for v in res.train_loss)
    assert res.n_samples == len(shard)


def test_training_is_seeded():
    g, p, shard = small_setup()
    a, cfg = LayerAssignment({2}, 4), TrainConfig(epochs=3)
    r1 = trainer.train_local(p, g, a, shard, cfg, 0, seed=5)
    r2 = trainer.train_local(p, g, a, shard, cfg, 0, seed=5)
    assert trainer.apply_result(p, r1).digest() == trainer.apply_result(p, r2).digest()
    assert r1.train_loss == r2.train_loss


def test_truncated_run_is_a_prefix():
    g, p, shard = small_setup()
    a, cfg = LayerAssignment({2}, 4), TrainConfig(epochs=3)
    full = trainer.train_local(p, g, a, shard, cfg, 0, seed=2)
    part = trainer.train_local(p, g, a, shard, cfg, 0, seed=2, epochs=2)
    assert part.epochs_completed == 2
    assert part.train_loss == full.train_loss[:2]


def test_every_step_is_clipped(monkeypatch):
    calls = []
    real = nncore.clip_global_norm

    def spy(grads, max_norm):
        calls.append(max_norm)
        return real(grads, max_norm)

    monkeypatch.setattr(nncore, "clip_global_norm", spy)
    g, p, shard = small_setup(n=10)
    res = trainer.train_local(p, g, LayerAssignment({2}, 4), shard, TrainConfig(batch_size=3, clip_norm=0.7), 0)
    assert calls == [0.7] * res.steps == [0.7] * 4


def test_same_lr_within_cycle():
    g, p, shard = small_setup()
    cfg = TrainConfig(base_lr=0.2, cycle_decay=0.5)
    lrs = {trainer.train_local(p, g, LayerAssignment({m}, 4), shard, cfg, 2).lr for m in (2, 3)}
    assert lrs == {0.05}


def test_separable_blobs_are_learned():
    rng = np.random.default_rng(0)
    centers = np.array([[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    y = np.repeat([0, 1], 100)
    x = centers[y] + rng.normal(0, 0.5, size=(200, 3))
    # oracle: the hyperplane between the true centers separates the sample exactly
    assert np.all((x[:, 0] > 0) == (y == 1))
    shard = data.Dataset(x, y)
    g = nncore.mlp_graph(3, 8, 2, 3)
    p = nncore.init_params(g, np.random.default_rng(1))
    res = trainer.train_local(p, g, LayerAssignment.full(3), shard, TrainConfig(epochs=5), 0, seed=3)
    logits, _ = nncore.forward(trainer.apply_result(p, res), g, x)
    assert np.mean(logits.argmax(1) == y) >= 0.90


def test_large_kd_weight_pulls_towards_teacher():
    g, p, shard = small_setup(seed=4, n=16)
    teacher = nncore.init_params(g, np.random.default_rng(99))
    a = LayerAssignment({2, 3}, 4)
    t_logits, _ = nncore.forward(teacher, g, shard.features)

    def kl(params):
        s, _ = nncore.forward(params, g, shard.features)
        pt = nncore.softmax(t_logits)
        return float((pt * (np.log(pt) - nncore.log_softmax(s))).sum(1).mean())

    cfg = TrainConfig(batch_size=16, base_lr=0.01, kd=KDConfig(weight=1e6, temperature=1.0))
    res = trainer.train_local(p, g, a, shard, cfg, 0, teacher=teacher)
    assert res.steps == 1
    assert kl(trainer.apply_result(p, res)) < kl(p)


def test_teacher_is_not_modified():
    g, p, shard = small_setup()
    teacher = p.copy()
    digest = teacher.digest()
    trainer.train_local(p, g, LayerAssignment({2}, 4), shard, TrainConfig(kd=KDConfig()), 0, teacher=teacher)
    assert teacher.digest() == digest


def test_smaller_updated_set_fewer_weight_flops():
    g, p, shard = small_setup(n_layers=6)
    cfg = TrainConfig(batch_size=5)
    narrow = trainer.train_local(p, g, LayerAssignment({4}, 6), shard, cfg, 0)
    wide = trainer.train_local(p, g, LayerAssignment({2, 3, 4}, 6), shard, cfg, 0)
    assert narrow.flops.bwd_w < wide.flops.bwd_w
    per_batch = flop_estimate(g, 5, [1, 4, 6])
    assert narrow.flops.bwd_w == 4 * per_batch.bwd_w


@pytest.mark.parametrize("seed", range(10))
def test_loss_finite_with_bounded_clip(seed):
    g, p, shard = small_setup(seed=seed)
    cfg = TrainConfig(epochs=3, base_lr=1.0, clip_norm=5.0)
    res = trainer.train_local(p, g, LayerAssignment({2, 3}, 4), shard, cfg, 0, seed=seed)
    assert all(math.isfinite(v) for v in res.train_loss)


def test_quantized_frozen_training_runs():
    g, p, shard = small_setup(n_layers=5)
    cfg = TrainConfig(quantize_frozen=True, optimizer="adam", base_lr=0.001)
    res = trainer.train_local(p, g, LayerAssignment({3}, 5), shard, cfg, 0)
    assert set(res.updated_params) == {1, 3, 5}
    assert p.storage == ["full-precision"] * 5
