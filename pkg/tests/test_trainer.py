import math

import numpy as np
import pytest

from fdloss.augment import AugmentConfig
from fdloss.autodiff import backward
from fdloss.checkpoint import load_model
from fdloss.data import Dataset, make_two_patch
from fdloss.distance import DistanceSpec
from fdloss.errors import ConfigError, TrainingError
from fdloss.layers import ArchSpec, build
from fdloss.trainer import (
    EnsembleConfig,
    accuracy,
    compute_joint_loss,
    init_models,
    joint_loss,
    train,
)

ARCH = ArchSpec("tiny", 1, (16, 16, 1), 2)


def _cfg(**kw):
    base = dict(arch=ARCH, m=2, epochs=2, learning_rate=1e-3, batch_size=16, augment=AugmentConfig(), rng_seed=0)
    base.update(kw)
    return EnsembleConfig(**base)


@pytest.fixture(scope="module")
def two_patch():
    return make_two_patch(20, 16, seed=0)


def _zero(models):
    for mdl in models:
        for t in mdl.params.values():
            t.data[...] = 0.0


# [DERIVED] zero weights give uniform logits over two classes
def test_joint_loss_uniform_logits(rng):
    cfg = _cfg(distance_enabled=False)
    models = init_models(cfg)
    _zero(models)
    x = rng.uniform(size=(3, 16, 16, 1))
    assert joint_loss(models, x, np.array([0, 1, 1]), cfg).item() == pytest.approx(2 * math.log(2), abs=1e-12)


# [DERIVED] zero taps: cosine term 0, exp term 1, weighted by beta
def test_joint_loss_zero_taps_distance(rng):
    cfg = _cfg()
    models = init_models(cfg)
    _zero(models)
    x = rng.uniform(size=(2, 16, 16, 1))
    assert joint_loss(models, x, np.array([0, 1]), cfg).item() == pytest.approx(2 * math.log(2) + 10, abs=1e-9)


def test_distance_disabled_is_ce_sum(rng):
    cfg = _cfg(distance_enabled=False)
    models = init_models(cfg)
    x, y = rng.uniform(size=(4, 16, 16, 1)), np.array([0, 1, 0, 1])
    jl = compute_joint_loss(models, x, y, cfg)
    assert jl.distance is None
    assert jl.total.item() == jl.ce[0].item() + jl.ce[1].item()


def test_distance_gradient_reaches_first_layer(rng):
    cfg = _cfg()
    models = init_models(cfg)
    x = rng.uniform(size=(4, 16, 16, 1))
    jl = compute_joint_loss(models, x, np.array([0, 1, 0, 1]), cfg)
    backward(jl.distance)
    for mdl in models:
        assert np.any(mdl.params["conv1.weight"].grad != 0)
        assert mdl.params["fc.weight"].grad is None or not np.any(mdl.params["fc.weight"].grad)


def test_zero_learning_rate_keeps_params(two_patch):
    cfg = _cfg(learning_rate=0.0, epochs=1)
    before = [mdl.state() for mdl in init_models(cfg)]
    res = train(cfg, two_patch)
    for state, mdl in zip(before, res.models):
        for name, value in state.items():
            np.testing.assert_array_equal(mdl.params[name].data, value)


def test_same_seed_same_record(two_patch):
    a, b = train(_cfg(), two_patch), train(_cfg(), two_patch)
    assert [e.log_line() for e in a.record.epochs] == [e.log_line() for e in b.record.epochs]
    for ma, mb in zip(a.models, b.models):
        for name in ma.params:
            np.testing.assert_array_equal(ma.params[name].data, mb.params[name].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises(two_patch):
    cfg = _cfg(epochs=1)
    models = init_models(cfg)
    models[0].params["fc.bias"].data[0] = np.inf
    with pytest.raises(TrainingError, match="epoch 1 batch 0"):
        train(cfg, two_patch, models=models)


def test_init_strategies():
    same = init_models(_cfg(init_strategy="same", distance_enabled=True))
    np.testing.assert_array_equal(same[0].params["conv1.weight"].data, same[1].params["conv1.weight"].data)
    diff = init_models(_cfg(init_strategy="different"))
    assert not np.array_equal(diff[0].params["conv1.weight"].data, diff[1].params["conv1.weight"].data)
    fresh = init_models(_cfg(init_strategy="none"))
    assert not np.array_equal(fresh[0].params["conv1.weight"].data, fresh[1].params["conv1.weight"].data)
    with pytest.raises(ConfigError):
        _cfg(seeds=(3, 3))


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(m=1)
    with pytest.raises(ConfigError):
        _cfg(init_strategy="random")
    with pytest.raises(ConfigError):
        _cfg(learning_rate=-1.0)
    assert _cfg(m=1, distance_enabled=False).m == 1


def test_checkpoint_reload_matches_val(two_patch, tmp_path):
    res = train(_cfg(), two_patch, out_dir=tmp_path)
    xval, yval = two_patch.split("val")
    best = res.record.epochs[res.record.best_epoch - 1]
    for i, path in enumerate(res.checkpoints):
        assert accuracy(load_model(path), xval, yval) == best.val_acc[i]


def test_best_epoch_selection(two_patch):
    rec = train(_cfg(epochs=3), two_patch).record
    accs = [e.mean_val_acc for e in rec.epochs]
    assert rec.best_val_acc == max(accs)
    assert rec.best_epoch == 1 + min(
        (i for i, a in enumerate(accs) if a == max(accs)), key=lambda i: np.mean(rec.epochs[i].val_ce)
    )


def test_pair_of_singles(two_patch):
    """With the distance loss off, members train as if alone."""
    joint = train(_cfg(seeds=(4, 9), distance_enabled=False), two_patch)
    for i, seed in enumerate((4, 9)):
        alone = train(_cfg(m=1, seeds=(seed,), distance_enabled=False), two_patch)
        per_epoch = [e.ce[i] for e in joint.record.epochs]
        np.testing.assert_array_equal(per_epoch, [e.ce[0] for e in alone.record.epochs])


def test_workers_match_serial(two_patch):
    a = train(_cfg(workers=1), two_patch)
    b = train(_cfg(workers=2), two_patch)
    assert [e.log_line() for e in a.record.epochs] == [e.log_line() for e in b.record.epochs]


def test_empty_split_rejected():
    ds = make_two_patch(5, 16, seed=0)
    empty = Dataset(ds.images, ds.labels, {**ds.splits, "val": np.array([], dtype=int)})
    with pytest.raises(ConfigError):
        train(_cfg(), empty)


def test_shape_mismatch_rejected(two_patch):
    with pytest.raises(ConfigError):
        train(_cfg(arch=ArchSpec("tiny", 1, (8, 8, 1), 2)), two_patch)


def test_log_schema(two_patch, tmp_path):
    train(_cfg(m=3, seeds=(1, 2, 3)), two_patch, out_dir=tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 2
    keys = [f.split("=")[0] for f in lines[0].split()]
    assert keys == [
        "epoch", "ce_0", "ce_1", "ce_2", "distance", "pair_0_1", "pair_0_2", "pair_1_2",
        "val_acc_0", "val_acc_1", "val_acc_2", "val_acc_mean", "val_ce_0", "val_ce_1", "val_ce_2", "best_epoch",
    ]
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "format=fdloss-ensemble-1" in manifest and "model_2=model_2.ckpt" in manifest


def test_config_hash_tracks_settings():
    assert _cfg().hash() == _cfg().hash()
    assert _cfg().hash() != _cfg(distance=DistanceSpec(alpha=2.0)).hash()


def test_distance_changes_training(two_patch):
    on = train(_cfg(), two_patch)
    off = train(_cfg(distance_enabled=False), two_patch)
    assert on.record.epochs[0].distance > 0 and off.record.epochs[0].distance == 0
    assert not np.array_equal(on.models[0].params["conv1.weight"].data, off.models[0].params["conv1.weight"].data)


def test_build_guard():
    with pytest.raises(ConfigError):
        build(ArchSpec("tiny", 1, (4, 4, 1), 2))


@pytest.mark.parametrize("kind", ["cosine_plus_euclidean", "cosine_only", "euclidean_only"])
def test_joint_loss_nonnegative(kind, rng):
    cfg = _cfg(distance=DistanceSpec(kind))
    models = init_models(cfg)
    for _ in range(5):
        x = rng.uniform(size=(3, 16, 16, 1))
        assert joint_loss(models, x, rng.integers(0, 2, 3), cfg).item() >= 0
