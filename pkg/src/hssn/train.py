"""Seeded triplet training, learning-rate schedules and the cross-validated experiment."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .data import FoldSplit, ImageCache, build_triplets, complete_outfits, kfold_split, outfit_ids
from .evaluate import EvalPairSet, compute_map, rank_pairs
from .exceptions import ConfigurationError, ContractError, InsufficientDataError, NumericalError
from .losses import LossParams, hybrid_loss
from .model import Model, ModelConfig, build_model, embed, forward, save_checkpoint
from .tensor import zero_grad

logger = logging.getLogger(__name__)

PAPER_BASE_LR = 8e-5


# optimiser -------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = PAPER_BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping, **kwargs) -> "AdamState":
        m = {n: np.zeros_like(p.data) for n, p in params.items()}
        v = {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(m, v, **kwargs)


def adam_step(params: Mapping, grads: Mapping, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)
    return params, state


def clip_grad_norm(params: Sequence, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; return the original norm."""
    total = math.sqrt(sum(float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel())) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = np.float32(max_norm / total)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# schedules -------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    kind: str = "step_decay"
    base_lr: float = PAPER_BASE_LR
    drop_factor: float = 0.5
    every_n_epochs: int = 10
    gamma: float = 0.95

    def __post_init__(self):
        if self.kind not in ("step_decay", "exponential_decay"):
            raise ConfigurationError(f"schedule kind must be step_decay or exponential_decay, got {self.kind!r}")
        if self.base_lr <= 0:
            raise ConfigurationError("schedule base_lr must be positive")
        if not 0 < self.drop_factor <= 1 or not 0 < self.gamma <= 1:
            raise ConfigurationError("drop_factor and gamma must lie in (0, 1]")
        if self.every_n_epochs < 1:
            raise ConfigurationError("every_n_epochs must be positive")


STEP_DECAY = Schedule("step_decay", drop_factor=0.5, every_n_epochs=10)
EXPONENTIAL_DECAY = Schedule("exponential_decay", gamma=0.95)


def lr_at(schedule: Schedule, epoch: int) -> float:
    if schedule.kind == "step_decay":
        return schedule.base_lr * schedule.drop_factor ** (epoch // schedule.every_n_epochs)
    return schedule.base_lr * schedule.gamma**epoch


# training --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    # None -> 4 x number of complete training outfits
    triplets_per_epoch: Optional[int] = None
    seed: int = 0
    k_folds: int = 5
    loss: LossParams = field(default_factory=LossParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "k_folds"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.triplets_per_epoch is not None and self.triplets_per_epoch < 1:
            raise ConfigurationError("triplets_per_epoch must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (train-mode batch norm)")
        if self.clip_norm < 0:
            raise ConfigurationError("clip_norm must be >= 0")


@dataclass
class TrainResult:
    model: Model
    checkpoint: Optional[Path]
    log: List[dict]


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _batches(triplets: list, size: int) -> list:
    batches = [triplets[i : i + size] for i in range(0, len(triplets), size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = batches[-2] + batches.pop()
    return batches


def train_step(model: Model, cache: ImageCache, batch, loss: LossParams, state: AdamState, clip_norm: float, where=""):
    """Forward the three branches, back-propagate the mean hybrid loss and update."""
    params = model.params
    zero_grad(params.values())
    outs_a = forward(model, cache.stack([t.anchor for t in batch]), "train")
    outs_p = forward(model, cache.stack([t.positive for t in batch]), "train")
    outs_n = forward(model, cache.stack([t.negative for t in batch]), "train")
    total = None
    trip_terms, style_terms = [], []
    for a, p, n in zip(outs_a, outs_p, outs_n):
        value, parts = hybrid_loss(a, p, n, loss)
        total = value if total is None else total + value
        trip_terms.append(parts.triplet)
        style_terms.append(parts.style)
    mean = total * (1.0 / len(batch))
    if not np.isfinite(mean.item()):
        bad = "triplet" if not np.all(np.isfinite(trip_terms)) else "style"
        for tap, col in zip(model.config.tap_indices, np.asarray(style_terms, dtype=np.float64).T):
            if not np.all(np.isfinite(col)):
                bad = f"style[tap {tap}]"
                break
        raise NumericalError(f"non-finite loss in {where}: term {bad}")
    mean.backward()
    clip_grad_norm(list(params.values()), clip_norm)
    adam_step(params, {n: p.grad for n, p in params.items()}, state)
    return mean.item(), trip_terms, style_terms


def train(cfg: TrainConfig, records, fold: FoldSplit, cache: Optional[ImageCache] = None) -> TrainResult:
    """Train a fresh model on ``fold.train_outfits``.

    Triplets are redrawn every epoch from a seed mixed with the epoch index.
    One JSON line per epoch goes to ``cfg.log_path``; checkpoints
    ``epoch_{n}.ckpt`` and ``final.ckpt`` go to ``cfg.checkpoint_dir``.
    """
    records = list(records)
    pool = [o for o in complete_outfits(records) if o in set(fold.train_outfits)]
    if len(pool) < 2:
        raise InsufficientDataError(f"fold {fold.fold_index}: {len(pool)} complete training outfits, need >= 2")
    model = build_model(cfg.model, cfg.seed)
    state = AdamState.for_params(model.params, lr=cfg.schedule.base_lr)
    cache = cache or ImageCache(records, cfg.model.input_shape)
    n_triplets = cfg.triplets_per_epoch or 4 * len(pool)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_fh = None
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(cfg.log_path, "w", encoding="utf-8", newline="\n")
    log = []
    try:
        for epoch in range(cfg.epochs):
            state.lr = lr_at(cfg.schedule, epoch)
            triplets = build_triplets(records, pool, n_triplets, epoch_seed(cfg.seed, epoch))
            totals, trips, styles = [], [], []
            for b, batch in enumerate(_batches(triplets, cfg.batch_size)):
                value, trip_terms, style_terms = train_step(
                    model, cache, batch, cfg.loss, state, cfg.clip_norm, where=f"epoch {epoch} batch {b}"
                )
                totals.append(value * len(batch))
                trips.extend(trip_terms)
                styles.extend(style_terms)
            entry = {
                "epoch": epoch,
                "lr": state.lr,
                "mean_total": float(np.sum(totals) / len(triplets)),
                "mean_triplet_term": float(np.mean(trips)),
                "mean_style_terms": [float(x) for x in np.mean(styles, axis=0)] if styles and styles[0] else [],
            }
            log.append(entry)
            logger.info("epoch %d lr %.3g total %.5f", epoch, state.lr, entry["mean_total"])
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if ckpt_dir:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch}.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    final = save_checkpoint(model, ckpt_dir / "final.ckpt") if ckpt_dir else None
    return TrainResult(model, final, log)


# evaluation over folds --------------------------------------------------------------


def fold_pairset(model: Model, records, outfits, cache: Optional[ImageCache] = None, batch: int = 64) -> EvalPairSet:
    """Embed (eval mode) the typeA/typeB pair of every complete outfit in ``outfits``."""
    cache = cache or ImageCache(records, model.config.input_shape)
    wanted = set(outfits)
    complete = {o: items for o, items in complete_outfits(records).items() if o in wanted}
    pairs = [(items["typeA"].item_id, items["typeB"].item_id) for items in complete.values()]
    ids = [i for pair in pairs for i in pair]
    embeddings = {}
    for s in range(0, len(ids), batch):
        chunk = ids[s : s + batch]
        for item, vec in zip(chunk, embed(model, cache.stack(chunk))):
            embeddings[item] = vec
    return EvalPairSet(pairs, embeddings)


def evaluate_fold(model: Model, records, fold: FoldSplit, cache=None):
    ranks = rank_pairs(fold_pairset(model, records, fold.test_outfits, cache))
    return ranks, compute_map(ranks, normalize=True)


# experiment --------------------------------------------------------------------------


def improvement_pct(baseline: float, hybrid: float) -> float:
    return 100.0 * (hybrid - baseline) / baseline


@dataclass
class ExperimentTable:
    seeds: List[int]
    baseline: List[float]
    hybrid: List[float]
    # (model, seed, fold, schedule) -> MAP for every run
    runs: Dict[tuple, float] = field(default_factory=dict)
    chosen_schedule: Dict[tuple, str] = field(default_factory=dict)

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline))

    @property
    def hybrid_mean(self) -> float:
        return float(np.mean(self.hybrid))

    def improvement(self) -> List[float]:
        return [improvement_pct(b, h) for b, h in zip(self.baseline, self.hybrid)]

    def improvement_mean(self) -> float:
        return improvement_pct(self.baseline_mean, self.hybrid_mean)

    def rows(self) -> List[list]:
        header = ["Model"] + [f"Seed {s}" for s in self.seeds] + ["Mean"]
        return [
            header,
            ["Siamese baseline (w2=0)"] + [f"{x:.4f}" for x in self.baseline] + [f"{self.baseline_mean:.4f}"],
            ["Hybrid style siamese"] + [f"{x:.4f}" for x in self.hybrid] + [f"{self.hybrid_mean:.4f}"],
            ["Improvement (%)"] + [f"{x:+.2f}" for x in self.improvement()] + [f"{self.improvement_mean():+.2f}"],
        ]

    def format(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "baseline": self.baseline,
            "hybrid": self.hybrid,
            "baseline_mean": self.baseline_mean,
            "hybrid_mean": self.hybrid_mean,
            "improvement_pct": self.improvement(),
            "improvement_pct_mean": self.improvement_mean(),
            "chosen_schedule": {f"{m}/seed{s}": k for (m, s), k in sorted(self.chosen_schedule.items())},
            "runs": [
                {"model": m, "seed": s, "fold": f, "schedule": k, "map": v} for (m, s, f, k), v in sorted(self.runs.items())
            ],
        }


def _run_one(job):
    cfg, records, fold, label, schedule_name = job
    cache = ImageCache(records, cfg.model.input_shape)
    result = train(cfg, records, fold, cache)
    _, score = evaluate_fold(result.model, records, fold, cache)
    return (label, cfg.seed, fold.fold_index, schedule_name), score


def run_experiment(
    cfg: TrainConfig,
    records,
    seeds: Sequence[int],
    k: Optional[int] = None,
    schedules: Optional[Mapping[str, Schedule]] = None,
    hybrid_loss_params: Optional[LossParams] = None,
    jobs: int = 1,
) -> ExperimentTable:
    """Cross-validated comparison of the hybrid loss against the plain triplet baseline.

    For every seed the outfits are split into ``k`` folds; each fold trains
    both models under every schedule (by default step and exponential decay
    built from ``cfg.schedule``) and scores normalised MAP on the held
    out outfits. Per model and seed the schedule with the best fold-mean
    MAP is kept.
    """
    records = list(records)
    k = k or cfg.k_folds
    # both schedule kinds share the configured base rate and decay constants
    schedules = dict(schedules or {kind: replace(cfg.schedule, kind=kind) for kind in ("step_decay", "exponential_decay")})
    hybrid_params = hybrid_loss_params or cfg.loss
    if hybrid_params.w2 <= 0:
        logger.warning("hybrid configuration has w2 <= 0; both arms reduce to the baseline")
    variants = {
        "baseline": replace(hybrid_params, w1=hybrid_params.w1 or 1.0, w2=0.0),
        "hybrid": hybrid_params,
    }
    outfits = outfit_ids(records)
    jobs_list = []
    for seed in seeds:
        for fold in kfold_split(outfits, k, seed):
            for label, lp in variants.items():
                for sname, sched in schedules.items():
                    run_cfg = replace(cfg, seed=seed, loss=lp, schedule=sched, checkpoint_dir=None, log_path=None)
                    jobs_list.append((run_cfg, records, fold, label, sname))
    runs = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, score in pool.map(_run_one, jobs_list):
                runs[key] = score
    else:
        for job in jobs_list:
            key, score = _run_one(job)
            runs[key] = score
            logger.info("%s seed %d fold %d %s: MAP %.4f", *key, score)

    table = ExperimentTable(list(seeds), [], [], runs)
    for label, column in (("baseline", table.baseline), ("hybrid", table.hybrid)):
        for seed in seeds:
            per_schedule = {
                sname: float(np.mean([v for (m, s, _, kname), v in runs.items() if m == label and s == seed and kname == sname]))
                for sname in schedules
            }
            best = max(sorted(per_schedule), key=lambda n: per_schedule[n])
            table.chosen_schedule[(label, seed)] = best
            column.append(per_schedule[best])
    return table
