"""Mask algebra and iterative magnitude pruning with rewinding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Mapping

import numpy as np

from .model import ParamSet

log = logging.getLogger(__name__)


class MaskError(ValueError):
    """Mask keys or shapes do not line up with the parameter set."""


class ScheduleError(ValueError):
    """Pruning request is outside [0, full sparsity]."""


class CheckpointError(ValueError):
    """Rewind source does not match the parameter layout."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None, round: int | None = None):
        super().__init__(message)
        self.step = step
        self.round = round


def round_half_up(x: float) -> int:
    # Python's round() is banker's rounding; counts should not depend on parity
    return int(math.floor(x + 0.5 + 1e-9))


class PruneMask(Mapping[str, np.ndarray]):
    """Binary keep-mask (1.0 keep, 0.0 pruned) per prunable parameter."""

    def __init__(self, masks: Mapping[str, np.ndarray]):
        self._m = {}
        for name, m in masks.items():
            m = np.asarray(m, dtype=np.float64)
            if not np.all((m == 0.0) | (m == 1.0)):
                raise MaskError(f"{name}: mask values must be exactly 0.0 or 1.0")
            self._m[name] = m

    @classmethod
    def ones(cls, params: ParamSet) -> PruneMask:
        return cls({n: np.ones_like(params[n]) for n in params.prunable_names()})

    @classmethod
    def zeros(cls, params: ParamSet) -> PruneMask:
        return cls({n: np.zeros_like(params[n]) for n in params.prunable_names()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self._m[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._m)

    def __len__(self) -> int:
        return len(self._m)

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self._m.values()))

    @property
    def surviving(self) -> int:
        return int(sum(np.count_nonzero(m) for m in self._m.values()))

    @property
    def pruned(self) -> int:
        return self.total - self.surviving

    @property
    def sparsity(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def check(self, params: ParamSet) -> None:
        expected = params.prunable_names()
        if list(self._m) != expected:
            missing = sorted(set(expected) - set(self._m))
            extra = sorted(set(self._m) - set(expected))
            raise MaskError(f"mask keys mismatch (missing={missing[:3]}, extra={extra[:3]})")
        for n in expected:
            if self._m[n].shape != params[n].shape:
                raise MaskError(f"{n}: mask shape {self._m[n].shape} != param {params[n].shape}")

    def flat(self) -> np.ndarray:
        return np.concatenate([m.reshape(-1) for m in self._m.values()])

    def _unflat(self, flat: np.ndarray) -> PruneMask:
        out, i = {}, 0
        for n, m in self._m.items():
            out[n] = flat[i: i + m.size].reshape(m.shape).astype(np.float64)
            i += m.size
        return PruneMask(out)

    def equals(self, other: PruneMask) -> bool:
        return list(self) == list(other) and all(np.array_equal(self[n], other[n]) for n in self)

    def __le__(self, other: PruneMask) -> bool:
        return list(self) == list(other) and all(np.all(self[n] <= other[n]) for n in self)

    def __repr__(self) -> str:
        return f"PruneMask({len(self)} tensors, sparsity={self.sparsity:.4f})"


class PruneMode(str, Enum):
    FRACTION_OF_REMAINING = "fraction_of_remaining"
    FRACTION_OF_ORIGINAL = "fraction_of_original"


@dataclass(frozen=True)
class ImpSchedule:
    rate: float = 0.10
    mode: PruneMode = PruneMode.FRACTION_OF_REMAINING
    target_sparsity: float = 0.5
    retrain_steps_per_round: int = 400
    # stop the last round at the target count instead of overshooting it
    clip_to_target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", PruneMode(self.mode))
        if not 0 < self.rate < 1:
            raise ScheduleError(f"rate must lie in (0, 1), got {self.rate}")
        if not 0 < self.target_sparsity < 1:
            raise ScheduleError(f"target_sparsity must lie in (0, 1), got {self.target_sparsity}")
        if self.retrain_steps_per_round < 1:
            raise ScheduleError("retrain_steps_per_round must be >= 1")

    def pruned_after(self, k: int, total: int) -> int:
        """Cumulative pruned count after ``k`` rounds, rounded once from the closed form."""
        if self.mode is PruneMode.FRACTION_OF_REMAINING:
            frac = 1.0 - (1.0 - self.rate) ** k
        else:
            frac = min(1.0, k * self.rate)
        count = min(total, round_half_up(frac * total))
        return min(count, self.target_count(total)) if self.clip_to_target else count

    def target_count(self, total: int) -> int:
        return round_half_up(self.target_sparsity * total)

    def n_rounds(self, total: int) -> int:
        need = self.target_count(total)
        k = 0
        while self.pruned_after(k, total) < need:
            k += 1
        return k

    def describe(self) -> str:
        return (f"imp rate={self.rate} mode={self.mode.value} target={self.target_sparsity} "
                f"steps/round={self.retrain_steps_per_round}"
                + (" clipped" if self.clip_to_target else ""))


def _pool(params: ParamSet, mask: PruneMask) -> tuple[np.ndarray, np.ndarray]:
    mask.check(params)
    mags = np.concatenate([np.abs(params[n]).reshape(-1) for n in mask])
    return mags, mask.flat()


def prune_to_count(params: ParamSet, mask: PruneMask, n_pruned_total: int) -> PruneMask:
    """Extend ``mask`` until exactly ``n_pruned_total`` prunable weights are zeroed.

    Candidates are the surviving weights ranked by |w| over all prunable
    tensors pooled; ties go to the earlier (tensor order, flat index).
    """
    mags, keep = _pool(params, mask)
    already = int(keep.size - np.count_nonzero(keep))
    if n_pruned_total > keep.size:
        raise ScheduleError(f"cannot prune {n_pruned_total} of {keep.size} weights")
    n_new = n_pruned_total - already
    if n_new <= 0:
        return PruneMask({k: v.copy() for k, v in mask.items()})
    alive = np.flatnonzero(keep)
    order = alive[np.argsort(mags[alive], kind="stable")]
    new_keep = keep.copy()
    new_keep[order[:n_new]] = 0.0
    return mask._unflat(new_keep)


def prune_step(params: ParamSet, mask: PruneMask, fraction: float,
               mode: PruneMode | str = PruneMode.FRACTION_OF_REMAINING) -> PruneMask:
    """Prune the lowest-|w| surviving weights, globally across prunable tensors."""
    mode = PruneMode(mode)
    if fraction < 0:
        raise ScheduleError(f"negative prune fraction {fraction}")
    total, surviving = mask.total, mask.surviving
    if mode is PruneMode.FRACTION_OF_REMAINING:
        if fraction > 1:
            raise ScheduleError(f"fraction {fraction} of remaining exceeds 1")
        n = round_half_up(fraction * surviving)
    else:
        n = round_half_up(fraction * total)
        if n > surviving:
            raise ScheduleError(
                f"pruning {fraction} of original ({n}) exceeds {surviving} surviving weights")
    return prune_to_count(params, mask, mask.pruned + n)


def complement_mask(mask: PruneMask) -> PruneMask:
    return PruneMask({n: 1.0 - m for n, m in mask.items()})


def random_mask(params: ParamSet, sparsity: float, seed: int) -> PruneMask:
    """Exactly round(sparsity * N) zeros placed uniformly over the pooled prunable weights."""
    if not 0 <= sparsity <= 1:
        raise ScheduleError(f"sparsity must lie in [0, 1], got {sparsity}")
    base = PruneMask.ones(params)
    n_zero = round_half_up(sparsity * base.total)
    keep = np.ones(base.total)
    keep[np.random.default_rng(seed).permutation(base.total)[:n_zero]] = 0.0
    return base._unflat(keep)


def random_mask_like(params: ParamSet, mask: PruneMask, seed: int) -> PruneMask:
    """Random mask with exactly as many zeros as ``mask``."""
    base = PruneMask.ones(params)
    keep = np.ones(base.total)
    keep[np.random.default_rng(seed).permutation(base.total)[: mask.pruned]] = 0.0
    return base._unflat(keep)


def apply_mask(params: ParamSet, mask: PruneMask) -> ParamSet:
    mask.check(params)
    out = params.copy()
    for n, m in mask.items():
        # assignment, not multiplication: a pruned negative weight must not become -0.0
        out[n] = np.where(m != 0, out[n], 0.0)
    return out


def rewind(params: ParamSet, init) -> ParamSet:
    """Fresh copy of the saved weights (a ParamSet or anything with ``.params``).

    ``params`` only supplies the layout to verify against.
    """
    saved = getattr(init, "params", init)
    if saved.names != params.names:
        a, b = params.names, saved.names
        first = next((x for x, y in zip(a, b) if x != y), None) or (a[len(b):] or b[len(a):])[0]
        raise CheckpointError(f"rewind source parameter names differ at {first!r}")
    for n in params:
        if saved[n].shape != params[n].shape:
            raise CheckpointError(f"{n}: saved shape {saved[n].shape} != {params[n].shape}")
    return saved.copy()


@dataclass
class ImpRound:
    round: int
    sparsity: float
    pruned: int
    final_loss: float


TrainFn = Callable[[ParamSet, PruneMask, object, int], ParamSet]


def run_imp(init, schedule: ImpSchedule, train_fn: TrainFn, data, *,
            first_trained: ParamSet | None = None,
            on_round: Callable[[int, PruneMask, ParamSet], None] | None = None,
            history: list[ImpRound] | None = None) -> PruneMask:
    """Train, prune, rewind until the schedule's target sparsity is reached.

    ``train_fn(params, mask, data, steps)`` returns trained params; it may
    also return ``(params, losses)``.  ``first_trained`` reuses an already
    fine-tuned dense model for round 1.  ``on_round`` sees each new mask and
    the trained weights it was ranked on.
    """
    init_params = getattr(init, "params", init)
    mask = PruneMask.ones(init_params)
    need = schedule.target_count(mask.total)
    k = 0
    while mask.pruned < need:
        k += 1
        current = apply_mask(rewind(init_params, init), mask)
        losses: list[float] = []
        if k == 1 and first_trained is not None:
            trained = first_trained
        else:
            try:
                out = train_fn(current, mask, data, schedule.retrain_steps_per_round)
            except DivergenceError as e:
                raise DivergenceError(f"IMP round {k}: {e}", step=e.step, round=k) from e
            trained, losses = out if isinstance(out, tuple) else (out, [])
        if losses and not np.isfinite(losses[-1]):
            raise DivergenceError(f"IMP round {k}: non-finite loss", round=k)
        new = prune_to_count(trained, mask, schedule.pruned_after(k, mask.total))
        if not new <= mask:
            raise AssertionError("pruning revived a weight")
        mask = new
        log.info("IMP round %d: sparsity %.4f", k, mask.sparsity)
        if history is not None:
            history.append(ImpRound(k, mask.sparsity, mask.pruned,
                                    float(losses[-1]) if losses else float("nan")))
        if on_round is not None:
            on_round(k, mask, trained)
    return mask
