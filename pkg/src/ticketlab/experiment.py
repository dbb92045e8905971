"""Ticket-finding protocol and the sparsity sweep.

Protocol for one sparsity level:

1. initialise the model and save it as the rewind point;
2. fine-tune it densely;
3. run IMP from that fine-tune to get the low-magnitude mask, take its
   complement as the high-magnitude mask and draw a random mask of the
   same size;
4. rewind every variant to the saved weights;
5. fine-tune and evaluate each variant once per seed, re-drawing the
   classifier head and the batch order from that seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import DataConfig, Splits, generate_dataset, split_by_scene
from .model import ModelConfig, ParamSet, init_model, reinit_classifier
from .pruning import (DivergenceError, ImpRound, ImpSchedule, PruneMask, PruneMode,
                      complement_mask, random_mask_like, rewind, run_imp)
from .report import (DISCLAIMER, ExperimentReport, RunRow, SweepReport, SweepRow, Variant)
from .trainer import EvalResult, TrainConfig, evaluate, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSettings:
    seed: int = 0
    n_examples: int = 6000
    noise_std: float = 0.05
    projection_seed: int = 0


@dataclass(frozen=True)
class PretrainSettings:
    """Dense training that produces the rewind point; ``steps=0`` rewinds to raw init.

    Uses its own corpus and answer head (both seeded by ``data_seed``) and
    its own learning rate; other optimizer settings come from the ``train``
    section.  Afterwards the head is redrawn from the init seed, so the
    rewind point is a trained body under a randomly initialised classifier.
    """

    steps: int = 1500
    learning_rate: float = 1e-3
    data_seed: int = 1000
    n_examples: int = 6000

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("pretrain steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("pretrain learning_rate must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)
    imp: ImpSchedule = field(default_factory=ImpSchedule)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    init_seed: int = 1
    random_mask_seed: int = 1234
    workers: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imp"]["mode"] = self.imp.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        parts = {
            "model": ModelConfig, "train": TrainConfig, "data": DataSettings, "imp": ImpSchedule,
            "pretrain": PretrainSettings,
        }
        kw = {}
        for k, v in d.items():
            kw[k] = parts[k](**v) if k in parts else v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **sections) -> ExperimentConfig:
        """``with_overrides(train={"total_steps": 10})`` replaces individual fields."""
        out = self
        for name, values in sections.items():
            if values:
                out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out

    def data_config(self) -> DataConfig:
        return DataConfig.for_model(self.model, noise_std=self.data.noise_std,
                                    projection_seed=self.data.projection_seed)


def load_splits(cfg: ExperimentConfig) -> Splits:
    ds = generate_dataset(cfg.data.seed, cfg.data.n_examples, cfg.data_config())
    return split_by_scene(ds, cfg.data.seed)


def rewind_point(cfg: ExperimentConfig) -> ParamSet:
    """The weights every subnetwork is rewound to."""
    params = init_model(cfg.model, cfg.init_seed)
    if cfg.pretrain.steps == 0:
        return params
    # pretrain under a head no run seed will draw, so the restored head is genuinely fresh
    params = reinit_classifier(params, cfg.model, cfg.pretrain.data_seed)
    corpus = generate_dataset(cfg.pretrain.data_seed, cfg.pretrain.n_examples, cfg.data_config())
    tc = replace(cfg.train, total_steps=cfg.pretrain.steps, seed=cfg.init_seed,
                 learning_rate=cfg.pretrain.learning_rate)
    params, losses = train(params, PruneMask.ones(params), corpus, tc, cfg.model)
    log.info("pretrained %d steps, final loss %.4f", cfg.pretrain.steps, losses[-1])
    return reinit_classifier(params, cfg.model, cfg.init_seed)


def mask_digest(mask: PruneMask | None) -> str:
    if mask is None:
        return "none"
    h = hashlib.sha256()
    for n, m in mask.items():
        h.update(n.encode())
        h.update(np.packbits(m.reshape(-1).astype(np.uint8)).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# single fine-tune job; module level so worker processes can pickle it


@dataclass
class _Job:
    key: tuple
    start: ParamSet
    mask: PruneMask
    train_cfg: TrainConfig


def _run_job(job: _Job, cfg: ExperimentConfig, splits: Splits):
    try:
        params, losses = train(job.start, job.mask, splits.train, job.train_cfg, cfg.model)
    except DivergenceError as e:
        return job.key, None, None, f"diverged at step {e.step}"
    return job.key, params, evaluate(params, job.mask, splits.test, cfg.model), ""


def _run_all(jobs: list[_Job], cfg: ExperimentConfig, splits: Splits) -> dict:
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(_run_job, j, cfg, splits) for j in jobs]
            done = [f.result() for f in futures]
    else:
        done = [_run_job(j, cfg, splits) for j in jobs]
    return {key: (params, result, err) for key, params, result, err in done}


class Lab:
    """Shared state for one experiment: data, rewind point and a fine-tune cache.

    Identical fine-tunes (same start weights, mask and train config) are
    computed once; results are a pure function of that key.
    """

    def __init__(self, cfg: ExperimentConfig, init: ParamSet | None = None,
                 splits: Splits | None = None):
        self.cfg = cfg
        self.splits = splits if splits is not None else load_splits(cfg)
        self.init = init if init is not None else rewind_point(cfg)
        self.init_digest = self.init.digest()
        self._cache: dict[tuple, tuple] = {}
        self.imp_history: list[ImpRound] = []

    def imp_train_config(self) -> TrainConfig:
        return replace(self.cfg.train, seed=self.cfg.init_seed)

    def dense_finetune(self) -> ParamSet:
        ones = PruneMask.ones(self.init)
        return self.finetune_many([(self.init, ones, self.imp_train_config())])[0][0]

    def train_fn(self):
        cfg = self.cfg

        def fn(params, mask, data, steps):
            return train(params, mask, data, self.imp_train_config(), cfg.model, steps=steps)
        return fn

    def low_magnitude(self, schedule: ImpSchedule, on_round=None) -> PruneMask:
        self.imp_history = []
        return run_imp(self.init, schedule, self.train_fn(), self.splits.train,
                       first_trained=self.dense_finetune(), on_round=on_round,
                       history=self.imp_history)

    def start_point(self, seed: int) -> tuple[ParamSet, str]:
        """Rewound weights with the classifier redrawn from ``seed``."""
        rewound = rewind(self.init, self.init)
        return reinit_classifier(rewound, self.cfg.model, seed), rewound.digest()

    def finetune_many(self, specs) -> list[tuple[ParamSet | None, EvalResult | None, str]]:
        """Fine-tune and evaluate each (start, mask, train_cfg); cached by content."""
        keyed = []
        for start, mask, tc in specs:
            key = (start.digest(), mask_digest(mask), tuple(sorted(asdict(tc).items())))
            keyed.append((key, start, mask, tc))
        todo, seen = [], set()
        for key, start, mask, tc in keyed:
            if key not in self._cache and key not in seen:
                seen.add(key)
                todo.append(_Job(key, start, mask, tc))
        self._cache.update(_run_all(todo, self.cfg, self.splits))
        return [self._cache[k] for k, *_ in keyed]

    def evaluate_variants(self, masks: dict[Variant, PruneMask], seeds: list[int]) -> list[RunRow]:
        specs, meta = [], []
        for seed in seeds:
            start, rewound_digest = self.start_point(seed)
            tc = replace(self.cfg.train, seed=seed)
            for variant, mask in masks.items():
                specs.append((start, mask, tc))
                meta.append((variant, seed, mask.surviving, rewound_digest))
        results = self.finetune_many(specs)
        rows = []
        for (variant, seed, surviving, digest), (_, result, err) in zip(meta, results):
            rows.append(RunRow(variant, seed, result, "ok" if result is not None else "failed",
                               surviving, digest, err))
        order = list(masks)
        rows.sort(key=lambda r: (order.index(r.variant), seeds.index(r.seed)))
        return rows


def compare_subnetworks(sparsity: float, seeds: list[int], cfg: ExperimentConfig, *,
                        checkpoint_dir=None, lab: Lab | None = None) -> ExperimentReport:
    """Dense / low-magnitude / high-magnitude / random at one sparsity, per seed."""
    if not 0 < sparsity < 1:
        raise ValueError(f"sparsity must lie in (0, 1), got {sparsity}")
    if not seeds:
        raise ValueError("need at least one seed")
    lab = lab or Lab(cfg)
    # clipped so the ticket sits exactly at the target and its complement has equal size
    schedule = replace(cfg.imp, target_sparsity=sparsity, clip_to_target=True)
    report = ExperimentReport(sparsity=sparsity, seeds=list(seeds), init_digest=lab.init_digest)
    report.metadata = {
        "config": cfg.to_dict(),
        "schedule": schedule.describe(),
        "seed_policy": "run seed redraws classifier head and batch order",
        "split": "single held-out test split (no test-dev/test-std analog)",
        "answer_classes": cfg.model.n_answers,
    }
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "init.ckpt",
                        Checkpoint(cfg.model, lab.init, None,
                                   {"phase": "init", "seed": cfg.init_seed, "global_sparsity": 0.0}))
    ones = PruneMask.ones(lab.init)
    try:
        low = lab.low_magnitude(schedule)
    except DivergenceError as e:
        log.error("IMP failed: %s", e)
        report.notes.append(f"IMP failed: {e}")
        report.rows = [RunRow(v, s, None, "failed", note=str(e)) for v in Variant for s in seeds]
        return report
    masks = {
        Variant.DENSE: ones,
        Variant.LOW: low,
        Variant.HIGH: complement_mask(low),
        Variant.RANDOM: random_mask_like(lab.init, low, cfg.random_mask_seed),
    }
    report.metadata["imp_rounds"] = [asdict(r) for r in lab.imp_history]
    report.metadata["sparsity_actual"] = {v.value: m.sparsity for v, m in masks.items()}
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "low_magnitude.ckpt",
                        Checkpoint(cfg.model, lab.init, low,
                                   {"phase": "rewound", "seed": cfg.init_seed,
                                    "global_sparsity": low.sparsity,
                                    "schedule": schedule.describe()}))
    report.rows = lab.evaluate_variants(masks, list(seeds))
    return report


def sweep(targets: list[float], seeds: list[int], cfg: ExperimentConfig, *,
          mode: PruneMode | str = PruneMode.FRACTION_OF_ORIGINAL, nested: bool = True,
          lab: Lab | None = None) -> SweepReport:
    """Low-magnitude accuracy across sparsity targets.

    With ``nested`` (default) one IMP trajectory is run to the largest
    target and the first mask reaching each target is reused; otherwise
    each target gets its own IMP run.  As in ``compare_subnetworks`` the
    final round is clipped, so a lone target of 0.5 in remaining mode
    reproduces the compare ticket.
    """
    if not targets or list(targets) != sorted(targets) or not all(0 < t < 1 for t in targets):
        raise ValueError("targets must be sorted ascending within (0, 1)")
    lab = lab or Lab(cfg)
    mode = PruneMode(mode)
    base = replace(cfg.imp, mode=mode, clip_to_target=True)
    total = PruneMask.ones(lab.init).total
    masks: dict[float, PruneMask] = {}
    notes = []
    try:
        if nested:
            def grab(k, mask, trained):
                for t in targets:
                    if t not in masks and mask.pruned >= replace(
                            base, target_sparsity=t).target_count(total):
                        masks[t] = mask
            lab.low_magnitude(replace(base, target_sparsity=max(targets)), on_round=grab)
        else:
            for t in targets:
                masks[t] = lab.low_magnitude(replace(base, target_sparsity=t))
    except DivergenceError as e:
        notes.append(f"IMP failed: {e}")
    rows = []
    for t in targets:
        if t not in masks:
            rows.append(SweepRow(t, float("nan"), [], "failed"))
            continue
        got = lab.evaluate_variants({Variant.LOW: masks[t]}, list(seeds))
        ok = [r.result.overall for r in got if r.status == "ok"]
        rows.append(SweepRow(t, masks[t].sparsity, ok, "ok" if ok else "failed"))
    return SweepReport(rows, list(seeds), mode.value, nested, notes=[DISCLAIMER, *notes])
