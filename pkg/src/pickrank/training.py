"""Optimization loop, checkpointing, model selection, gradient verification.

Training is single-process and fully seeded: batch order, positive-candidate
choice for multi-relevant samples, and parameter init all derive from the
run seed, so two runs with the same seed produce identical loss curves.
Batches never contain two samples that share a relevant candidate (those
would be false negatives in the contrastive denominator).
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone
from .corpus import Dataset, Sample
from .errors import DataError, NumericError
from .metrics import Report
from .model import (
    BaselineModel,
    ModelConfig,
    batch_loss,
    build_model,
    save_checkpoint,
)
from .phrases import ChunkerBackend
from .pipeline import FeatureBundle, build_features, evaluate_features

logger = logging.getLogger(__name__)

DESK_SCALE_SAMPLES = 1000
DESK_SCALE_BATCH = 32
FULL_SCALE_BATCH = 128


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.0e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int | None = None  # None: 32 below 1000 train samples, else 128
    max_epochs: int = 10
    seed: int = 0
    eval_every_epoch: bool = True
    eval_split: str = "val"

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise DataError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise DataError(f"max_epochs must be >= 1, got {self.max_epochs}")


def resolve_batch_size(config: TrainConfig, n_train_samples: int) -> int:
    if config.batch_size is not None:
        return config.batch_size
    return DESK_SCALE_BATCH if n_train_samples < DESK_SCALE_SAMPLES else FULL_SCALE_BATCH


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metrics: dict | None
    checkpoint_path: Path | None = None
    state_dict: dict | None = None  # kept in memory when no out_dir is given


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)
    model: torch.nn.Module | None = None
    stopped_early: bool = False
    seconds: float = 0.0

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]


def make_batches(samples: list[Sample], batch_size: int, rng: random.Random) -> list[list[Sample]]:
    """Seeded shuffle, then greedy packing that keeps each batch free of
    samples sharing a relevant (environment, candidate) pair."""
    remaining = list(samples)
    rng.shuffle(remaining)
    batches: list[list[Sample]] = []
    while remaining:
        batch: list[Sample] = []
        used: set[tuple[str, str]] = set()
        deferred: list[Sample] = []
        for s in remaining:
            keys = {(s.env_id, r) for r in s.relevant_ids}
            if len(batch) < batch_size and not (keys & used):
                batch.append(s)
                used |= keys
            else:
                deferred.append(s)
        batches.append(batch)
        remaining = deferred
    return batches


def _positive_ids(samples: list[Sample], rng: random.Random) -> list[str]:
    return [rng.choice(sorted(s.relevant_ids)) for s in samples]


def _batch_tensors(batch: list[Sample], positives: list[str], bundle: FeatureBundle):
    qfs = [bundle.queries[s.sample_id] for s in batch]
    phrases = torch.from_numpy(np.stack([q.phrases for q in qfs]))
    mask = torch.from_numpy(np.stack([q.mask for q in qfs]))
    h_instruction = torch.from_numpy(np.stack([q.h_instruction for q in qfs]))
    h_t, h_c, h_strip = [], [], []
    for s, pos in zip(batch, positives):
        ef = bundle.envs[s.env_id]
        idx = ef.candidate_ids.index(pos)
        h_t.append(ef.h_t[idx])
        h_c.append(ef.h_c[idx])
        if ef.h_strip is not None:
            h_strip.append(ef.h_strip[idx])
    return (
        phrases,
        mask,
        h_instruction,
        torch.from_numpy(np.stack(h_t)),
        torch.from_numpy(np.stack(h_c)),
        torch.from_numpy(np.stack(h_strip)) if h_strip else None,
    )


def train(
    train_config: TrainConfig,
    model_config: ModelConfig,
    dataset: Dataset,
    backbone: Backbone,
    out_dir: str | Path | None = None,
    chunker: ChunkerBackend | None = None,
    stop_when=None,
    log_file: str | Path | None = None,
) -> TrainResult:
    """Run the full loop; returns per-epoch records plus the final model.

    ``stop_when`` is an optional predicate over the just-finished
    :class:`EpochRecord`; returning True ends training after that epoch.
    """
    train_samples = dataset.split_samples("train")
    if not train_samples:
        raise DataError("train split has no samples")
    eval_samples = dataset.split_samples(train_config.eval_split) if train_config.eval_every_epoch else []
    if train_config.eval_every_epoch and not eval_samples:
        raise DataError(
            f"eval split {train_config.eval_split!r} has no samples; "
            "pick another split or disable per-epoch evaluation"
        )

    torch.manual_seed(train_config.seed)
    batch_rng = random.Random(train_config.seed + 1)
    positive_rng = random.Random(train_config.seed + 2)

    model = build_model(model_config)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
    )

    all_samples = {s.sample_id: s for s in train_samples + eval_samples}
    bundle = build_features(backbone, dataset, list(all_samples.values()), model_config, chunker)

    batch_size = resolve_batch_size(train_config, len(train_samples))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_file, "a", encoding="utf-8") if log_file else None

    result = TrainResult(model=model)
    started = time.monotonic()
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            model.train()
            losses = []
            for batch in make_batches(train_samples, batch_size, batch_rng):
                positives = _positive_ids(batch, positive_rng)
                phrases, mask, h_i, h_t, h_c, h_strip = _batch_tensors(batch, positives, bundle)
                if isinstance(model, BaselineModel):
                    scores = model(h_i, h_t, h_strip)
                else:
                    scores = model(phrases, mask, h_i, h_t, h_c)
                loss = batch_loss(scores, model_config.temperature)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} (batch of {len(batch)}); "
                        f"score range [{float(scores.min())}, {float(scores.max())}]"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))

            val_report: Report | None = None
            if eval_samples:
                val_report = evaluate_features(model, bundle, eval_samples)
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_metrics=_report_to_metrics(val_report),
            )
            if out_dir is not None:
                record.checkpoint_path = out_dir / f"epoch_{epoch:04d}.ckpt"
                save_checkpoint(
                    record.checkpoint_path,
                    model,
                    epoch=epoch,
                    val_metrics=record.val_metrics,
                    rng_state={"torch": torch.get_rng_state(), "batch": batch_rng.getstate(), "positive": positive_rng.getstate()},
                )
            else:
                record.state_dict = {k: v.detach().clone() for k, v in model.state_dict().items()}
            result.records.append(record)

            line = {"epoch": epoch, "train_loss": record.train_loss}
            if record.val_metrics:
                line.update(
                    {
                        "val_mrr": record.val_metrics["mrr"],
                        "val_recall_at_1": record.val_metrics["recall_at"]["1"],
                        "val_recall_at_5": record.val_metrics["recall_at"]["5"],
                        "val_recall_at_10": record.val_metrics["recall_at"]["10"],
                        "val_recall_at_20": record.val_metrics["recall_at"]["20"],
                    }
                )
            logger.info("epoch %d: %s", epoch, line)
            if log_fh:
                log_fh.write(json.dumps(line, sort_keys=True) + "\n")
                log_fh.flush()

            if stop_when is not None and stop_when(record):
                result.stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.monotonic() - started
    model.eval()
    return result


def _report_to_metrics(report: Report | None) -> dict | None:
    if report is None:
        return None
    return report.as_dict()


def select_model(records: list[EpochRecord]) -> EpochRecord:
    """Checkpoint with maximum validation recall@10; ties go to the earliest epoch."""
    if not records:
        raise DataError("select_model: empty checkpoint series")
    scored = [r for r in records if r.val_metrics is not None]
    if not scored:
        raise DataError("select_model: no checkpoint carries validation metrics")
    best = scored[0]
    for r in scored[1:]:
        if r.val_metrics["recall_at"]["10"] > best.val_metrics["recall_at"]["10"]:
            best = r
    return best


def grad_check(model: torch.nn.Module, batch: dict, epsilon: float = 1e-5, temperature: float = 1.0) -> float:
    """Max relative error between analytic parameter gradients and central
    finite differences; runs in float64 on a copy of the inputs."""
    if epsilon <= 0:
        raise DataError(f"grad_check: epsilon must be > 0, got {epsilon}")
    model = model.double()
    tensors = {k: (v.double() if torch.is_floating_point(v) else v) for k, v in batch.items()}

    def forward() -> torch.Tensor:
        if "phrases" in tensors:
            scores = model(
                tensors["phrases"], tensors["mask"], tensors["h_instruction"], tensors["h_t"], tensors["h_c"]
            )
        else:
            scores = model(tensors["h_instruction"], tensors["h_t"], tensors["h_strip"])
        return batch_loss(scores, temperature)

    model.zero_grad()
    loss = forward()
    loss.backward()
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in model.named_parameters()}

    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            grad = analytic[name].view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + epsilon
                up = forward().item()
                flat[i] = original - epsilon
                down = forward().item()
                flat[i] = original
                fd = (up - down) / (2 * epsilon)
                a = grad[i].item()
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
                worst = max(worst, rel)
    return worst
