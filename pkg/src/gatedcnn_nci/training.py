"""Adam, the training loop with early stopping, and random hyper-parameter search."""

from __future__ import annotations

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .model import Model, ModelConfig, ModelParams, init_params
from .tensor import Tape, Tensor, scale
from .text import NoteRecord

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, note_id: str, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step} (note {note_id!r})")
        self.epoch, self.step, self.note_id = epoch, step, note_id


def derive_rng(root_seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named subsystem of a seeded run."""
    return np.random.default_rng([int(root_seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())])


def derive_seed(root_seed: int, stream: str) -> int:
    return int(derive_rng(root_seed, stream).integers(0, 2**31 - 1))


# -- Adam -------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _as_list(params) -> list[Tensor]:
    if isinstance(params, ModelParams):
        return list(params)
    return list(params)


def adam_step(params, state: OptimizerState) -> None:
    """Bias-corrected Adam update from each tensor's ``.grad``, in place; grads are then zeroed."""
    tensors = _as_list(params)
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in tensors]
        state.v = [np.zeros_like(p.values) for p in tensors]
    if len(state.m) != len(tensors):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors, got {len(tensors)}")
    if state.t >= np.iinfo(np.int64).max:
        raise OverflowError("Adam step counter overflow")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step_size = state.lr / bc1
    inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
    for p, m, v in zip(tensors, state.m, state.v):
        if m.shape != p.values.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {p.values.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        g *= g
        v *= state.beta2
        v += (1.0 - state.beta2) * g
        # p -= lr * m_hat / (sqrt(v_hat) + eps), reusing the gradient buffer
        np.sqrt(v, out=g)
        g *= inv_sqrt_bc2
        g += state.eps
        np.divide(m, g, out=g)
        g *= step_size
        p.values -= g
        p.zero_grad()


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    tensors = _as_list(params)
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in tensors))
    if norm > max_norm:
        factor = max_norm / norm
        for p in tensors:
            p.grad *= factor
    return norm


# -- training loop ----------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 1
    max_epochs: int = 30
    patience: int = 10
    clip_norm: float | None = 5.0
    threshold: float = 0.5
    k: int = 5
    seed: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    best_epoch: int
    best_dev_micro_f1: float


def evaluate_model(model: Model, notes: Sequence[NoteRecord], k: int = 5, threshold: float = 0.5) -> dict:
    scores = model.predict_proba([n.token_ids for n in notes])
    gold = np.zeros_like(scores, dtype=np.int8)
    for r, note in enumerate(notes):
        gold[r, list(note.code_ids)] = 1
    return metrics.evaluate(metrics.PredictionSet(scores, gold), k=min(k, model.config.n_codes), threshold=threshold)


def train(
    config: ModelConfig,
    train_notes: Sequence[NoteRecord],
    dev_notes: Sequence[NoteRecord],
    groups: Sequence[Sequence[int]],
    run: TrainConfig,
    embeddings: np.ndarray | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Per-example (or micro-batched) Adam on the summed BCE, early-stopped on dev micro-F1."""
    if not train_notes or not dev_notes:
        raise ValueError("train and dev splits must be non-empty")
    if run.batch_size < 1:
        raise ValueError("batch_size must be >= 1")

    params = init_params(config, derive_rng(run.seed, "init"), embeddings)
    model = Model(config, params, [tuple(g) for g in groups])
    state = OptimizerState(lr=run.lr)
    shuffle_rng = derive_rng(run.seed, "shuffle")
    dropout_rng = derive_rng(run.seed, "dropout")

    log: list[dict] = []
    best_f1, best_epoch, since_best = -1.0, 0, 0
    best_params = params.copy()
    step = 0
    for epoch in range(1, run.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_notes))
        total = 0.0
        for start in range(0, len(order), run.batch_size):
            batch = order[start:start + run.batch_size]
            for idx in batch:
                note = train_notes[idx]
                with Tape() as tape:
                    loss = model.loss(note.token_ids, note.code_ids, training=True, rng=dropout_rng)
                    if len(batch) > 1:
                        loss = scale(loss, 1.0 / len(batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, step, note.id, value)
                total += value * len(batch)
                tape.backward(loss)
            if run.clip_norm is not None:
                clip_grad_norm(params, run.clip_norm)
            adam_step(params, state)
            step += 1

        dev = evaluate_model(model, dev_notes, run.k, run.threshold)
        record = {"epoch": epoch, "train_loss": total / len(train_notes), **{f"dev_{k}": v for k, v in dev.items()}}
        log.append(record)
        logger.info("epoch %d loss %.4f dev micro-F1 %.4f", epoch, record["train_loss"], dev["micro_f1"])
        if on_epoch is not None:
            on_epoch(record)
        if dev["micro_f1"] > best_f1:
            best_f1, best_epoch, since_best = dev["micro_f1"], epoch, 0
            best_params = params.copy()
        else:
            since_best += 1
            if since_best >= run.patience:
                break

    return TrainResult(Model(config, best_params, model.groups), log, best_epoch, best_f1)


# -- random search ----------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    lr_range: tuple[float, float] = (1e-6, 1e-2)
    kernel_sizes: tuple[int, ...] = (2, 3, 5, 9)
    n_layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    hidden_dims: tuple[int, ...] = (100, 200, 300, 400, 500, 600)

    def sample(self, rng: np.random.Generator) -> dict:
        hidden = [h for h in self.hidden_dims if h % 4 == 0]
        if not hidden:
            raise ValueError("search space is empty: no hidden dimension is divisible by 4")
        lo, hi = self.lr_range
        return {
            "lr": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            "kernel_size": int(rng.choice(self.kernel_sizes)),
            "n_layers": int(rng.choice(self.n_layers)),
            "hidden": int(rng.choice(hidden)),
        }


@dataclass
class SearchResult:
    best: dict
    trials: list[dict]


def trial_config(base: ModelConfig, sample: dict) -> ModelConfig:
    return dataclasses.replace(
        base,
        kernel_size=sample["kernel_size"],
        n_layers=sample["n_layers"],
        d_g=sample["hidden"] // 4,
        dilations=(),
        d_v=None,
    )


def random_search(
    space: SearchSpace,
    budget: int,
    epochs_per_trial: int,
    seed: int,
    base: ModelConfig,
    train_notes: Sequence[NoteRecord],
    dev_notes: Sequence[NoteRecord],
    groups: Sequence[Sequence[int]],
    run: TrainConfig,
    embeddings: np.ndarray | None = None,
    include_base: bool = False,
) -> SearchResult:
    """Sample ``budget`` configurations, train each briefly, rank by dev micro-F1.

    All trials share ``run.seed`` for initialisation and shuffling, so with
    ``include_base`` the first trial reproduces a plain ``train`` of ``base``
    at ``run.lr``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = derive_rng(seed, "search")
    samples = []
    if include_base:
        samples.append({"lr": run.lr, "kernel_size": base.kernel_size, "n_layers": base.n_layers, "hidden": 4 * base.d_g})
    while len(samples) < budget:
        samples.append(space.sample(rng))

    trials = []
    for i, sample in enumerate(samples):
        config = trial_config(base, sample) if not (include_base and i == 0) else base
        trial_run = dataclasses.replace(run, lr=sample["lr"], max_epochs=epochs_per_trial)
        result = train(config, train_notes, dev_notes, groups, trial_run, embeddings)
        trials.append({
            "trial": i,
            **sample,
            "d_g": config.d_g,
            "param_count": result.model.params.count(),
            "best_epoch": result.best_epoch,
            "dev_micro_f1": result.best_dev_micro_f1,
        })
        logger.info("trial %d %s -> dev micro-F1 %.4f", i, sample, result.best_dev_micro_f1)
    best = max(trials, key=lambda r: (r["dev_micro_f1"], -r["trial"]))
    return SearchResult(best, trials)
