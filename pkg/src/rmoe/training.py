"""Adam with L2 decay, early stopping and the two-phase protocol."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import make_batch
from .models import BaseModel, LrModel, Model, PlainMoeModel, RmoeModel, param_hash
from .tensor import Rng, seed_split

log = logging.getLogger(__name__)

BASE_LR = 0.005
RMOE_LR = 0.0005
BASE_L2 = 1e-5
RMOE_L2 = 1e-5
BASE_L2_GRID = (1e-4, 1e-5, 1e-6, 1e-7)
RMOE_L2_GRID = (0.75, 1.0, 1.25, 1.5)
EXPERT_GRID = (1, 5, 10, 20, 50, 100)
HIDDEN_GRID = (32, 64, 128, 256, 512)


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = BASE_LR
    l2: float = BASE_L2
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 1
    seed: int = 0
    val_fraction: float = 0.1
    decoupled_l2: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.l2 < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and l2 >= 0 required")

    @classmethod
    def for_rmoe(cls, **kw) -> "TrainConfig":
        kw.setdefault("lr", RMOE_LR)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, l2: float = 0.0,
              decoupled: bool = False) -> None:
    """In-place Adam update of every tensor named in ``grads``.

    Coupled L2 adds ``l2 * theta`` to the gradient before the moment
    updates; ``decoupled=True`` instead shrinks ``theta`` by ``lr * l2``
    directly (AdamW).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        theta, g = params[name], grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if l2 and not decoupled:
            g = g + l2 * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if l2 and decoupled:
            theta -= lr * l2 * theta
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def early_stop_check(val_losses, patience: int) -> bool:
    """True once ``patience`` epochs have passed without beating the best loss."""
    if not len(val_losses):
        raise ValueError("no validation losses yet")
    best = int(np.argmin(val_losses))
    return len(val_losses) - 1 - best >= patience


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    initial_val_loss: float = float("nan")

    def __len__(self):
        return len(self.epochs)

    @property
    def val_losses(self) -> list:
        return [e["val_loss"] for e in self.epochs]

    @property
    def train_losses(self) -> list:
        return [e["train_loss"] for e in self.epochs]

    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch - 1]["val_loss"] if self.epochs else self.initial_val_loss

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for e in self.epochs:
                w.writerow([e["epoch"], f"{e['train_loss']:.6f}", f"{e['val_loss']:.6f}",
                            f"{e['seconds']:.3f}"])


def dataset_loss(model: Model, sequences: list, target_indices, batch_size: int = 256) -> float:
    """Mean over sequences of each sequence's mean per-step BCE."""
    total = 0.0
    for i in range(0, len(sequences), batch_size):
        chunk = sequences[i:i + batch_size]
        total += model.loss(make_batch(chunk, target_indices)) * len(chunk)
    return total / len(sequences)


def fit(model: Model, train: list, val: list, target_indices, cfg: TrainConfig,
        epoch_hook=None) -> TrainHistory:
    """Minibatch Adam with early stopping; restores the best-validation parameters.

    ``epoch_hook(model, epoch)`` runs after every epoch (used for invariant
    checks).
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    history = TrainHistory()
    history.initial_val_loss = dataset_loss(model, val, target_indices, cfg.eval_batch_size)
    if cfg.max_epochs == 0:
        return history
    rng = Rng(seed_split(cfg.seed, 0xE90C))
    state = AdamState()
    names = model.trainable()
    best_loss, best_params = math.inf, None
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        running = 0.0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train[j] for j in order[i:i + cfg.batch_size]]
            loss, grads = model.loss_and_grads(make_batch(chunk, target_indices))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}")
            adam_step(model.params, {k: grads[k] for k in names}, state, cfg.lr, cfg.l2,
                      cfg.decoupled_l2)
            running += loss * len(chunk)
        val_loss = dataset_loss(model, val, target_indices, cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in epoch {epoch}")
        history.epochs.append({"epoch": epoch, "train_loss": running / len(train),
                               "val_loss": val_loss, "seconds": time.perf_counter() - t0,
                               "param_hash": param_hash(model.params)})
        log.info("epoch %d train %.5f val %.5f", epoch, running / len(train), val_loss)
        if epoch_hook is not None:
            epoch_hook(model, epoch)
        if val_loss < best_loss:
            best_loss, history.best_epoch = val_loss, epoch
            best_params = {k: model.params[k].copy() for k in names}
        if early_stop_check(history.val_losses, cfg.patience):
            break
    history.stopped_epoch = len(history.epochs)
    for k, v in best_params.items():
        np.copyto(model.params[k], v)
    return history


def train_base(train: list, val: list, vocab, cfg: TrainConfig, emb_dim: int = 64,
               hidden: int = 512):
    model = BaseModel.init(vocab.n_inputs, vocab.n_targets, emb_dim, hidden, cfg.seed)
    return model, fit(model, train, val, vocab.target_indices, cfg)


def train_lr(train: list, val: list, vocab, cfg: TrainConfig):
    model = LrModel.init(vocab.n_inputs, vocab.n_targets, cfg.seed)
    return model, fit(model, train, val, vocab.target_indices, cfg)


def train_rmoe(base: BaseModel, train: list, val: list, vocab, cfg: TrainConfig,
               n_experts: int, hidden: int, combine: str = "prob_sum", frozen: bool = True):
    """Phase two: fit the mixture on top of ``base``.

    The base is deep-copied, so the caller's model is never touched. With
    ``frozen=False`` the base is trained jointly (a control, not the method).
    """
    base = copy.deepcopy(base)
    model = RmoeModel.init(base, n_experts, hidden, cfg.seed, combine)
    if not frozen:
        model.unfreeze_base()
    reference = model.base_hash()

    def check(m, epoch):
        if m.frozen and m.base_hash() != reference:
            raise FreezeViolation(f"base parameters changed during epoch {epoch}")

    history = fit(model, train, val, vocab.target_indices, cfg, epoch_hook=check)
    check(model, history.stopped_epoch)
    return model, history


def train_moe_ablation(train: list, val: list, vocab, cfg: TrainConfig, n_experts: int,
                       hidden: int, emb_dim: int = 64):
    model = PlainMoeModel.init(vocab.n_inputs, vocab.n_targets, n_experts, hidden, emb_dim,
                               cfg.seed)
    return model, fit(model, train, val, vocab.target_indices, cfg)
