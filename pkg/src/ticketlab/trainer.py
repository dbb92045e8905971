"""Masked fine-tuning and per-category evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Category, SynthDataset
from .model import ModelConfig, ParamSet, forward_batch
from .pruning import DivergenceError, PruneMask, apply_mask
from .tensor import NonFiniteError, Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    total_steps: int = 500
    optimizer: str = "adam"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # "weights": zero pruned weights after each step (default);
    # "gradients": zero pruned gradients before the step instead
    remask: str = "weights"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.remask not in ("weights", "gradients"):
            raise ValueError(f"unknown remask mode {self.remask!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> np.ndarray:
    """[steps, batch] example indices: seeded reshuffle every epoch."""
    rng = np.random.default_rng([seed, 0xBA7C])
    need = steps * batch_size
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n))
        have += n
    return np.concatenate(chunks)[:need].reshape(steps, batch_size)


def _batch(data: SynthDataset, idx: np.ndarray):
    L = int(data.lengths[idx].max())
    return data.tokens[idx, :L], data.lengths[idx], data.regions[idx], data.answers[idx]


def loss_and_grads(params: ParamSet, model_config: ModelConfig, data: SynthDataset, idx):
    tokens, lengths, regions, answers = _batch(data, idx)
    tape = Tape()
    logits = forward_batch(params, model_config, tokens, lengths, regions, tape)
    loss = T.cross_entropy(logits, answers)
    return loss.item(), T.backward(tape, loss)


def train(params: ParamSet, mask: PruneMask, data: SynthDataset, config: TrainConfig,
          model_config: ModelConfig, *, steps: int | None = None) -> tuple[ParamSet, list[float]]:
    """Minibatch training that keeps pruned positions at exactly 0.0.

    The mask is applied before the first step, so the initial values at
    pruned positions never matter.  Under adam the moments of pruned
    coordinates are zeroed each step as well.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    steps = config.total_steps if steps is None else steps
    start = apply_mask(params, mask)
    names = start.names
    sizes = [start[n].size for n in names]
    # one flat buffer; the working ParamSet holds views into it
    w = np.concatenate([start[n].reshape(-1) for n in names])
    keep = np.concatenate([mask[n].reshape(-1) if n in mask else np.ones(start[n].size)
                           for n in names])
    drop = keep == 0
    views, off = [], 0
    for n, size in zip(names, sizes):
        views.append((n, w[off: off + size].reshape(start[n].shape), start.is_prunable(n)))
        off += size
    p = ParamSet(views)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate
    order = batch_order(len(data), min(config.batch_size, len(data)), steps, config.seed)
    losses: list[float] = []
    for step in range(steps):
        try:
            loss, grads = loss_and_grads(p, model_config, data, order[step])
        except NonFiniteError as e:
            raise DivergenceError(f"non-finite forward value at step {step}: {e}", step=step) from e
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        losses.append(loss)
        g = np.concatenate([grads[n].reshape(-1) for n in names])
        if config.remask == "gradients":
            np.putmask(g, drop, 0.0)
        if config.optimizer == "sgd":
            w -= lr * g
        else:
            t = step + 1
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            w -= (lr / (1 - b1**t)) * m / (np.sqrt(v / (1 - b2**t)) + config.eps)
        if config.remask == "weights":
            np.putmask(w, drop, 0.0)
            if config.optimizer == "adam":
                np.putmask(m, drop, 0.0)
                np.putmask(v, drop, 0.0)
        if step % 500 == 0:
            log.debug("step %d loss %.4f", step, loss)
    p = p.copy()
    return p, losses


def format_loss_history(losses) -> str:
    return "".join(f"{i},{x!r}\n" for i, x in enumerate(losses))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    correct: tuple[int, int, int]
    counts: tuple[int, int, int]

    def accuracy(self, cat: Category) -> float:
        n = self.counts[cat]
        return self.correct[cat] / n if n else 0.0

    @property
    def yesno(self) -> float:
        return self.accuracy(Category.YESNO)

    @property
    def number(self) -> float:
        return self.accuracy(Category.NUMBER)

    @property
    def other(self) -> float:
        return self.accuracy(Category.OTHER)

    @property
    def overall(self) -> float:
        n = sum(self.counts)
        return sum(self.correct) / n if n else 0.0

    def as_row(self) -> dict[str, float]:
        return {"yesno": self.yesno, "number": self.number, "other": self.other,
                "overall": self.overall}


def score_predictions(predictions, answers, categories) -> EvalResult:
    predictions = np.asarray(predictions)
    answers = np.asarray(answers)
    categories = np.asarray(categories)
    hit = predictions == answers
    correct = tuple(int(np.count_nonzero(hit & (categories == c))) for c in Category)
    counts = tuple(int(np.count_nonzero(categories == c)) for c in Category)
    return EvalResult(correct, counts)


def predict(params: ParamSet, model_config: ModelConfig, data: SynthDataset,
            batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        tokens, lengths, regions, _ = _batch(data, idx)
        logits = forward_batch(params, model_config, tokens, lengths, regions).data
        out.append(np.argmax(logits, axis=1))  # first maximum wins ties
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ParamSet, mask: PruneMask | None, data: SynthDataset,
             model_config: ModelConfig) -> EvalResult:
    if mask is not None:
        params = apply_mask(params, mask)
    return score_predictions(predict(params, model_config, data), data.answers, data.categories)
