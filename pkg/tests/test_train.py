import json
import os

import numpy as np
import pytest

from salshift.convert import binarize, verify_equivalence
from salshift.data import PlantedShiftSpec, gen_planted, save_dataset
from salshift.model import Checkpoint, build_model, convert_network, state_dict
from salshift.tensor import Rng
from salshift.train import TrainConfig, Trainer, evaluate, load_data, steps_per_epoch, train

CONFIG = os.path.join(os.path.dirname(__file__), os.pardir, "configs", "planted.json")


def planted_config(**overrides) -> TrainConfig:
    with open(CONFIG) as fh:
        d = json.load(fh)
    d.update(overrides)
    return TrainConfig.from_dict(d)


@pytest.fixture(scope="module")
def trained():
    cfg = planted_config()
    return cfg, train(cfg)


def test_config_round_trip():
    cfg = planted_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_config_errors():
    with pytest.raises(ValueError, match="unknown config keys"):
        planted_config(learning_rate=0.1)
    with pytest.raises(ValueError):
        planted_config(batch=0)
    with pytest.raises(ValueError, match="kind"):
        planted_config(data={})
    with pytest.raises(ValueError, match="unknown data kind"):
        load_data({"kind": "imagenet"})


def test_alpha_reaches_final_temperature_on_last_step(trained):
    cfg, ckpt = trained
    steps = cfg.epochs * steps_per_epoch(cfg.data["n"], cfg.batch)
    assert steps == 2000 and ckpt.meta["step"] == 2000
    assert ckpt.meta["schedule"]["t"] == pytest.approx(cfg.tf, rel=1e-9)


def test_planted_table_recovered(trained):
    cfg, ckpt = trained
    net = ckpt.build()
    table = binarize(net.sal_layers()[0]).table.entries
    planted = PlantedShiftSpec(**{k: v for k, v in cfg.data.items() if k not in ("kind", "n", "n_test")}).planted_table
    assert (table == planted).mean() >= 0.9
    x, y = load_data(cfg.data, "test")
    assert evaluate(convert_network(net), x, y) == 1.0


def test_soft_to_hard_gap_is_small_after_annealing(trained):
    _, ckpt = trained
    sal = ckpt.build().sal_layers()[0]
    assert verify_equivalence(sal, binarize(sal), input_hw=(3, 3)) <= 1e-4


def test_zero_epochs_checkpoint_is_initialisation():
    cfg = planted_config(epochs=0)
    ckpt = train(cfg)
    ref = state_dict(build_model(cfg.model_spec(), Rng(cfg.seed)))
    assert ckpt.meta["step"] == 0
    assert all(np.array_equal(ckpt.arrays[k], ref[k]) for k in ref)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = planted_config(epochs=4, checkpoint_every=2, data={"kind": "planted", "n": 256, "seed": 1})
    full = train(cfg, str(tmp_path)).to_bytes()
    resumed = train(cfg, resume=Checkpoint.load(tmp_path / "model_epoch2.ckpt"))
    assert resumed.meta["epoch"] == 4
    assert resumed.to_bytes() == full


def test_periodic_checkpoints(tmp_path):
    cfg = planted_config(epochs=2, checkpoint_every=1, data={"kind": "planted", "n": 64})
    train(cfg, str(tmp_path))
    assert sorted(os.listdir(tmp_path)) == ["model.ckpt", "model_epoch1.ckpt", "model_epoch2.ckpt"]


def test_trainer_rejects_empty_data():
    with pytest.raises(ValueError, match="empty"):
        train(planted_config(), data=(np.zeros((0, 8, 3, 3), np.float32), np.zeros(0, np.int64)))


def test_attention_is_exempt_from_weight_decay():
    tr = Trainer(planted_config(weight_decay=0.1), 64)
    assert id(tr.net.sal_layers()[0].attention) in tr.optimizer._no_decay


def test_file_data_kind(tmp_path):
    x, y = gen_planted(PlantedShiftSpec(), 40)
    save_dataset(str(tmp_path / "d.bin"), x, y)
    xs, ys = load_data({"kind": "file", "path": str(tmp_path / "d.bin")})
    assert np.array_equal(xs, x) and np.array_equal(ys, y)
