"""Training loop: minibatch momentum SGD with one temperature step per iteration.

A single global seed drives weight init, shuffling and augmentation, and the
full generator state is stored in every checkpoint, so resuming from an
epoch-boundary checkpoint reproduces an uninterrupted run bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Tuple

import numpy as np

from . import data as data_mod
from .model import Checkpoint, ModelSpec, Network, build_model, load_state_dict, network_checkpoint
from .nn import SGD, SgdConfig, softmax_cross_entropy
from .sal import TemperatureSchedule, alpha_for
from .tensor import Rng, Tensor, get_default_dtype

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Everything a training run depends on; round-trips through JSON.

    ``data`` selects the dataset: ``{"kind": "planted", "n": ..., "C": ...}``
    (any :class:`~salshift.data.PlantedShiftSpec` field), ``{"kind":
    "cifar", "path": ..., "count": ..., "normalize": ..., "augment": ...}``
    or ``{"kind": "file", "path": ...}`` for a saved dataset container.
    ``alpha=None`` derives the decay so that t reaches tf on the last step.
    """

    model: dict
    data: dict
    epochs: int = 10
    batch: int = 128
    seed: int = 0
    lr0: float = 0.1
    momentum: float = 0.9
    drop_every: int = 100
    drop_factor: float = 10.0
    weight_decay: float = 0.0
    t0: float = 6.7
    tf: float = 0.02
    alpha: Optional[float] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if "kind" not in self.data:
            raise ValueError("data section needs a 'kind' key (planted, cifar or file)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.lr0, self.momentum, self.drop_every, self.drop_factor, self.weight_decay)

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model).validate()


# --------------------------------------------------------------------------
# data


def load_data(spec: dict, split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Arrays for a data section; ``split='test'`` picks the held-out part."""
    kind = spec["kind"]
    opts = {k: v for k, v in spec.items() if k not in ("kind", "n", "n_test", "augment")}
    if kind == "planted":
        pspec = data_mod.PlantedShiftSpec(**opts)
        if split == "train":
            return data_mod.gen_planted(pspec, int(spec.get("n", 1000)))
        return data_mod.gen_planted(pspec, int(spec.get("n_test", 1000)), seed=pspec.seed + 1)
    if kind == "cifar":
        return data_mod.load_cifar10(spec["path"], spec.get("count"), spec.get("normalize", "unit"),
                                     train=(split == "train"), seed=spec.get("subset_seed"))
    if kind == "file":
        key = "path" if split == "train" else "test_path"
        return data_mod.load_dataset(spec.get(key, spec["path"]))
    raise ValueError(f"unknown data kind {kind!r}")


def steps_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


# --------------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the network, optimizer and generator of one run."""

    def __init__(self, config: TrainConfig, n_train: int, net: Optional[Network] = None):
        self.config = config
        self.n_train = n_train
        self.rng = Rng(config.seed)
        total = max(config.epochs * steps_per_epoch(n_train, config.batch), 1)
        alpha = config.alpha if config.alpha is not None else alpha_for(config.t0, config.tf, total)
        self.schedule = TemperatureSchedule(config.t0, config.tf, alpha)
        self.net = net if net is not None else build_model(config.model_spec(), self.rng, self.schedule)
        self.net.schedule = self.schedule
        for layer in self.net.sal_layers():
            layer.schedule = self.schedule
        attention = self.net.attention_parameters()
        self.optimizer = SGD(self.net.parameters(), config.sgd(), no_decay=attention)
        self.epoch = 0
        self.step = 0
        self.augment = bool(config.data.get("augment", False))

    # one pass over the data
    def run_epoch(self, x: np.ndarray, y: np.ndarray) -> float:
        cfg = self.config
        self.net.train()
        order = self.rng.permutation(len(x))
        total, seen = 0.0, 0
        for start in range(0, len(x), cfg.batch):
            idx = order[start : start + cfg.batch]
            xb = x[idx]
            if self.augment:
                xb = data_mod.augment(xb, self.rng)
            self.schedule.step()
            logits = self.net(Tensor(xb.astype(get_default_dtype(), copy=False)))
            loss = softmax_cross_entropy(logits, y[idx])
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step(self.epoch)
            self.step += 1
            total += float(loss.item()) * len(idx)
            seen += len(idx)
        self.epoch += 1
        return total / max(seen, 1)

    def fit(self, x: np.ndarray, y: np.ndarray, epochs: Optional[int] = None,
            on_epoch: Optional[Callable[["Trainer", float], None]] = None) -> "Trainer":
        end = self.config.epochs if epochs is None else self.epoch + epochs
        while self.epoch < end:
            loss = self.run_epoch(x, y)
            log.info("epoch %d step %d loss %.5f t %.5g", self.epoch, self.step, loss, self.schedule.t)
            if on_epoch is not None:
                on_epoch(self, loss)
        return self

    # checkpoints
    def checkpoint(self) -> Checkpoint:
        extra = {}
        names = {id(p): n for n, p in self.net.named_parameters()}
        for p, v in zip(self.optimizer.params, self.optimizer.velocity):
            extra["opt.velocity." + names[id(p)]] = v
        meta = {"epoch": self.epoch, "step": self.step, "rng": self.rng.state,
                "config": self.config.to_dict(), "n_train": self.n_train}
        return network_checkpoint(self.net, meta, extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> "Trainer":
        """Resume a run; ``config`` may extend ``epochs`` but should otherwise match."""
        meta = ckpt.meta
        if "config" not in meta:
            raise ValueError("checkpoint has no training state to resume from")
        config = config or TrainConfig.from_dict(meta["config"])
        net = build_model(ckpt.model_spec(), Rng(0), ckpt.schedule())
        trainer = cls(config, meta["n_train"], net)
        trainer.schedule.t = float(meta["schedule"]["t"])
        trainer.schedule.alpha = float(meta["schedule"]["alpha"])
        load_state_dict(net, {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")})
        names = {id(p): n for n, p in net.named_parameters()}
        for i, p in enumerate(trainer.optimizer.params):
            trainer.optimizer.velocity[i][...] = ckpt.arrays["opt.velocity." + names[id(p)]]
        trainer.rng.state = meta["rng"]
        trainer.epoch = int(meta["epoch"])
        trainer.step = int(meta["step"])
        return trainer


def train(config: TrainConfig, out_dir: Optional[str] = None, resume: Optional[Checkpoint] = None,
          data: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Checkpoint:
    """Run (or resume) training and return the final checkpoint.

    With ``out_dir`` the final checkpoint is written to ``model.ckpt`` there,
    plus ``model_epochN.ckpt`` every ``checkpoint_every`` epochs.
    """
    x, y = data if data is not None else load_data(config.data, "train")
    if len(x) == 0:
        raise ValueError("training set is empty")
    trainer = Trainer.from_checkpoint(resume, config) if resume is not None else Trainer(config, len(x))
    log.info("alpha %.8f over %d steps", trainer.schedule.alpha,
             config.epochs * steps_per_epoch(len(x), config.batch))

    def periodic(tr: Trainer, _loss: float) -> None:
        if out_dir and config.checkpoint_every and tr.epoch % config.checkpoint_every == 0:
            tr.checkpoint().save(os.path.join(out_dir, f"model_epoch{tr.epoch}.ckpt"))

    trainer.fit(x, y, on_epoch=periodic)
    ckpt = trainer.checkpoint()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt.save(os.path.join(out_dir, "model.ckpt"))
    return ckpt


def predict_logits(net: Network, x: np.ndarray, batch: int = 256) -> np.ndarray:
    net.eval()
    outs = [net(Tensor(x[i : i + batch].astype(get_default_dtype(), copy=False))).data
            for i in range(0, len(x), batch)]
    net.train()
    if not outs:
        return np.zeros((0, net.spec.classes), dtype=get_default_dtype())
    return np.concatenate(outs)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    """Top-1 accuracy in [0, 1]."""
    if len(x) == 0:
        raise ValueError("evaluation set is empty")
    return float((predict_logits(net, x, batch).argmax(axis=1) == np.asarray(y)).mean())
