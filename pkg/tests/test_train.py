import numpy as np
import pytest

from nac.arch import parse_notation
from nac.data import AugmentPolicy, Dataset, synthetic_blobs
from nac.engine.graph import build_graph
from nac.errors import ConfigError
from nac.fmstat import StatCollector
from nac.train import TrainConfig, Trainer, evaluate, single_threaded


def separable_two_class(n=40, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = np.where(labels[:, None, None, None] == 1, 0.8, 0.2) + rng.normal(0, 0.05, size=(n, 1, 4, 4))
    return Dataset(np.clip(images, 0, 1), labels, 2)


def test_loss_decreases_monotonically_for_50_steps():
    data = separable_two_class()
    net = parse_notation("2/1/1", num_classes=2, dropout_keep_prob=1.0)
    g = build_graph(net, (1, 4, 4), 2, seed=0, dtype=np.float64)
    trainer = Trainer(g, TrainConfig(batch_size=len(data), learning_rate=0.01, schedule="constant"), seed=0)
    losses = [trainer.train_epoch(data) for _ in range(50)]
    assert np.all(np.diff(losses) < 0)


def test_presets_match_documented_hyperparameters():
    c, f = TrainConfig.candidate(), TrainConfig.final()
    assert (c.batch_size, c.momentum, c.learning_rate, c.decay_factor, c.decay_period_epochs) == (50, 0.9, 0.04, 0.999, 2.0)
    assert (f.batch_size, f.learning_rate, f.min_learning_rate, f.decay_period_epochs) == (64, 0.05, 0.001, 20.0)
    assert (f.weight_decay, f.clip_norm) == (3e-4, 5.0)
    assert f.augment.random_crop_pad and f.augment.random_flip


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="step")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def _blobs():
    return synthetic_blobs(classes=4, n_per_class=15, hw=8, seed=1)


def test_resume_reproduces_next_epoch(tmp_path):
    data = _blobs()
    net = parse_notation("4/2-1/3", num_classes=4)
    cfg = TrainConfig.final(batch_size=16, augment=AugmentPolicy(random_crop_pad=1, random_flip=True))
    with single_threaded():
        full = Trainer(build_graph(net, data.image_shape, 4, seed=3), cfg, seed=4)
        uninterrupted = full.fit(data, 3)
        first = Trainer(build_graph(net, data.image_shape, 4, seed=3), cfg, seed=4)
        first.fit(data, 2)
        first.save(tmp_path / "ck.nacw")
        resumed = Trainer(build_graph(net, data.image_shape, 4, seed=99), cfg, seed=123)
        resumed.load(tmp_path / "ck.nacw")
        assert resumed.epoch == 2
        resumed.fit(data, 1)
    assert abs(resumed.history[-1]["train_loss"] - uninterrupted[-1]["train_loss"]) < 1e-5


def test_collector_accumulates_all_steps():
    data = _blobs()
    g = build_graph(parse_notation("4/2/2", num_classes=4), data.image_shape, 4)
    col = StatCollector(g.blocks)
    Trainer(g, TrainConfig.candidate(batch_size=20), seed=0).fit(data, 2, collector=col)
    assert all(r.sample_count == 2 * len(data) for r in col.records.values())
    assert all(len(r.history) == 2 for r in col.records.values())


def test_evaluate_reports_error_rate():
    data = _blobs()
    g = build_graph(parse_notation("4/1/2", num_classes=4), data.image_shape, 4)
    loss, err = evaluate(g, data)
    assert np.isfinite(loss) and 0.0 <= err <= 1.0
