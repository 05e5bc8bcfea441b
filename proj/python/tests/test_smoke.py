import os
from pathlib import Path

import numpy as np
import pytest

import chandiv

ROOT = Path(os.environ.get("CHANDIV_SOURCE_DIR", Path(__file__).resolve().parents[2]))

TINY = """
backbone.stage_channels = 4
backbone.attention = chandiv
backbone.num_classes = 2
backbone.input_shape = 3,8,8
train.epochs = 1
train.batch_size = 16
data.synth_train = 32
data.synth_eval = 16
data.synth_classes = 2
"""


def reference_block(x, kernel, bias):
    c = x.shape[0]
    flat = x.reshape(c, -1)
    gap = flat.mean(axis=1)
    a = np.exp(gap - gap.max())
    a /= a.sum()
    g = -flat @ flat.T
    j = np.exp(g - g.max(axis=1, keepdims=True))
    j /= j.sum(axis=1, keepdims=True)
    y = np.concatenate([a[:, None], j], axis=1) @ kernel + bias
    return x * y[:, None, None] + x


def test_block_matches_numpy_reference():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (4, 3, 3))
    kernel = rng.uniform(-0.5, 0.5, 5)
    out = chandiv.chandiv_forward(x, kernel, 0.1)
    assert out.shape == x.shape
    np.testing.assert_allclose(out, reference_block(x, kernel, 0.1), atol=1e-12)


def test_zero_parameters_are_identity():
    x = np.random.default_rng(1).normal(size=(3, 4, 5))
    assert np.array_equal(chandiv.chandiv_forward(x, np.zeros(4)), x)


def test_normalizations():
    x = np.random.default_rng(2).normal(size=(6, 2, 2))
    assert abs(chandiv.channel_significance(x).sum() - 1) < 1e-12
    np.testing.assert_allclose(chandiv.channel_relation(x).sum(axis=1), 1, atol=1e-12)


def test_bad_shape_raises():
    with pytest.raises(ValueError):
        chandiv.chandiv_forward(np.zeros((4, 3, 3)), np.zeros(3))


def test_config_round_trip_and_unknown_key():
    cfg = chandiv.Config.from_text(TINY)
    assert chandiv.Config.from_text(cfg.to_text()).to_text() == cfg.to_text()
    with pytest.raises(chandiv.ConfigError, match="train.nope"):
        cfg.set("train.nope", "1")


def test_network_forward_cam_and_report():
    cfg = chandiv.Config.from_text(TINY)
    net = chandiv.build_network(cfg, seed=3)
    batch = np.random.default_rng(3).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    assert net.forward(batch).shape == (2, 2)
    rows = net.report()
    assert sum(r["params"] for r in rows) == net.trainable_count()
    cam = chandiv.compute_cam(net, batch[0])
    assert cam["values"].shape == (8, 8)
    assert 0.0 <= cam["values"].min() and cam["values"].max() <= 1.0


def test_cifar_bytes():
    record = bytes([7]) + bytes(range(256)) * 12
    images, labels = chandiv.load_cifar10_bytes(record)
    assert images.shape == (1, 3, 32, 32) and list(labels) == [7]
    with pytest.raises(chandiv.FormatError):
        chandiv.load_cifar10_bytes(record[:-1])


def test_train_and_evaluate(tmp_path):
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY)
    code, out, err = chandiv.train(config, out=tmp_path / "run", seed=0)
    assert code == 0, err
    assert "best_eval_top1=" in out
    code, out, err = chandiv.evaluate(tmp_path / "run" / "checkpoint.ckpt")
    assert code == 0 and out.startswith("top1="), err


def test_inspect_shipped_config():
    code, out, _ = chandiv.inspect(ROOT / "configs" / "cifar10_mini.cfg")
    assert code == 0
    assert "total_params=" in out


def test_command_exit_code_for_unknown_key(tmp_path):
    config = tmp_path / "bad.cfg"
    config.write_text(TINY + "model.depth = 3\n")
    code, _, err = chandiv.inspect(config)
    assert code == 2 and "model.depth" in err
