import math

import numpy as np
import pytest

from vlhmm.brown import BlockPartition, EmissionSupport
from vlhmm.config import ConfigError, TrainConfig, read_config_file, rng_stream, write_config_file
from vlhmm.corpus import Vocab
from vlhmm.hmm import FilterState
from vlhmm.params import ModelConfig, init_params
from vlhmm.trainer import (AdamW, DivergedError, OptimizerState, PlateauSchedule, Trainer, adamw_update,
                           check_points, clip_grad_norm, sample_dropout_mask, train_step)


def test_adamw_reference_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    opt = OptimizerState()
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    adamw_update(p, g, opt, lr, wd, (b1, b2), eps)
    # After one step the bias-corrected update is lr * sign(g) (up to eps).
    expected = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * np.array([0.5, 0.1]) / (np.abs([0.5, 0.1]) + eps)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-12)
    adamw_update(p, g, opt, lr, wd, (b1, b2), eps)
    assert opt.step == 2


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)


def test_dropout_mask_balance_and_frequency():
    rng = np.random.default_rng(0)
    m = sample_dropout_mask(3, 12, 0.5, rng)
    assert m.active_per_block(4).tolist() == [2, 2, 2]
    assert sample_dropout_mask(3, 12, 0.0, rng).b.all()
    g = rng.gumbel(size=(100_000, 4))  # same draw the sampler uses, vectorized
    freq = np.zeros(4)
    top = np.argsort(-g, axis=1, kind="stable")[:, :2]
    np.add.at(freq, top.ravel(), 1)
    np.testing.assert_allclose(freq / 100_000, 0.5, atol=0.01)
    counts = np.zeros(12)
    for _ in range(2000):
        counts += sample_dropout_mask(3, 12, 0.25, rng).b
    np.testing.assert_allclose(counts / 2000, 0.75, atol=0.03)


def test_plateau_schedule():
    s = PlateauSchedule(1.0, patience=2, factor=4.0)
    assert s.observe(10.0)
    assert not s.observe(11.0)
    assert not s.observe(12.0)
    assert s.lr == 0.25
    state = s.state_dict()
    t = PlateauSchedule(1.0, 2, 4.0)
    t.load_state_dict(state)
    assert t.lr == 0.25 and t.best == 10.0


def test_check_points():
    assert check_points(8, 4) == [1, 3, 5, 7]
    assert check_points(2, 4) == [0, 0, 1, 1]


def _tiny():
    cfg = ModelConfig(8, 6, 2, 8)
    part = BlockPartition(np.arange(6) % 2, 2)
    return cfg, part, EmissionSupport.from_partition(part, 8)


def test_repeated_batch_loss_decreases():
    cfg, part, sup = _tiny()
    params = init_params(cfg, 0)
    opt = AdamW(lr=1e-3, weight_decay=0.0)
    X = np.random.default_rng(0).integers(0, 6, size=(4, 10))
    losses = [train_step(params, cfg, sup, X, None, None, opt, None)[0] for _ in range(20)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_divergence_detected():
    cfg, part, sup = _tiny()
    params = init_params(cfg, 0)
    params["E_x"][:] = np.nan
    with pytest.raises(DivergedError, match="diverged"):
        train_step(params, cfg, sup, np.zeros((1, 3), dtype=int), None, None, AdamW(lr=0.1), None)


def test_config_validation_and_files(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(num_states=10, num_blocks=4)
    with pytest.raises(ConfigError):
        TrainConfig(support="uniform", dropout=0.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(num_states=16, num_blocks=4, record_timing=False)
    write_config_file(tmp_path / "c.cfg", cfg)
    assert TrainConfig.from_dict(read_config_file(tmp_path / "c.cfg")) == cfg


def test_rng_streams_independent():
    a = rng_stream(0, "init").random()
    assert a == rng_stream(0, "init").random()
    assert a != rng_stream(0, "dropout").random()


def test_trainer_records_four_checks_per_epoch():
    vocab = Vocab(tuple(f"w{i}" for i in range(6)) + ("<unk>", "<eos>"))
    rng = np.random.default_rng(0)
    train, valid = rng.integers(0, 6, 2000), rng.integers(0, 6, 300)
    part = BlockPartition(np.arange(8) % 2, 2)
    cfg = TrainConfig(num_states=8, num_blocks=2, hidden=8, batch_size=4, segment_len=10, epochs=2,
                      record_timing=False)
    t = Trainer(cfg, vocab, part, train, valid)
    records = t.run()
    assert [r["check"] for r in records] == list(range(1, 9))
    assert records[-1]["epoch_fraction"] == 2.0
    assert all(math.isfinite(r["valid_ppl"]) and r["ms_per_batch"] is None for r in records)
    assert records[-1]["valid_ppl"] < records[0]["valid_ppl"]
