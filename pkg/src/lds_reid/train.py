"""Training loop: PK sampling, branch expansion, multi-branch losses, Adam with
a single cosine decay and an initial backbone freeze."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .augment import AugmentConfig, homologous_expand
from .data import Dataset, iterations_per_epoch, sample_pk_batch
from .evaluation import evaluate_model
from .losses import LossConfig, total_loss
from .model import MultiBranchModel, images_to_tensor, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    P: int = 8
    K: int = 4
    iterations_per_epoch: Optional[int] = None
    max_iterations: Optional[int] = None
    base_lr: float = 3.5e-4
    min_lr: Optional[float] = None
    freeze_iterations: int = 100
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    homologous: bool = True
    seed: int = 0
    debug_checks: bool = True
    eval_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100.0
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.freeze_iterations < 0:
            raise ValueError("freeze_iterations must be >= 0")
        if not self.base_lr > self.min_lr >= 0:
            raise ValueError(f"need base_lr > min_lr >= 0, got {self.base_lr}, {self.min_lr}")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must both be >= 2")
        if self.iterations_per_epoch is not None and self.iterations_per_epoch < 1:
            raise ValueError("iterations_per_epoch must be >= 1")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class TrainHistory:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def lr(self) -> list:
        return [r["lr"] for r in self.iterations]

    def epoch_records(self, epoch: int) -> list:
        return [r for r in self.iterations if r["epoch"] == epoch]

    def to_records(self) -> list:
        return ([{"type": "iteration", **r} for r in self.iterations]
                + [{"type": "epoch", **r} for r in self.epochs])


def lr_schedule(config: TrainConfig, iteration: int, total_iterations: int) -> float:
    """One cosine decay from base_lr at t=0 to min_lr at t=T, no restarts."""
    if not 0 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {total_iterations}]")
    if total_iterations == 0:
        return config.base_lr
    cos = math.cos(math.pi * iteration / total_iterations)
    return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + cos)


def _param_groups(model: MultiBranchModel, weight_decay: float) -> list:
    decay, no_decay = [], []
    for module in model.modules():
        is_norm = isinstance(module, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d))
        for p in module.parameters(recurse=False):
            (no_decay if is_norm else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def set_backbone_frozen(model: MultiBranchModel, frozen: bool):
    for b in model.branches:
        for p in b.backbone.parameters():
            p.requires_grad_(not frozen)
        b.backbone.train(not frozen)


def make_branch_batch(batch, augment_config: AugmentConfig, rng: np.random.Generator,
                      homologous: bool = True) -> list:
    """Expand every sample of ``batch`` into S copies; return S tensors."""
    per_branch = [[] for _ in range(augment_config.num_branches)]
    for sample, sample_rng in zip(batch.samples, rng.spawn(len(batch))):
        expanded = homologous_expand(sample.pixels, augment_config, sample_rng, homologous)
        for k, im in enumerate(expanded.images):
            per_branch[k].append(im)
    return [images_to_tensor(ims, augment_config) for ims in per_branch]


def train_lds(model: MultiBranchModel, dataset: Dataset, config: TrainConfig,
              augment_config: AugmentConfig, loss_config: LossConfig,
              run_dir=None, eval_sets: Optional[tuple] = None, run_config: Optional[dict] = None,
              eval_metric: str = "cosine", on_step: Optional[Callable] = None):
    """Train ``model`` in place and return ``(model, history)``.

    Each iteration draws a PK batch from a generator seeded by (seed,
    iteration), so batches do not depend on anything that ran before.
    """
    if augment_config.num_branches != model.num_branches:
        raise ValueError("branch plan length does not match the model")
    history = TrainHistory()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "ep0.pt", model, run_config or {}, epoch=0, iteration=0)
    if config.epochs == 0:
        return model, history

    torch.manual_seed(config.seed)
    ipe = config.iterations_per_epoch or iterations_per_epoch(dataset, config.P, config.K)
    total = config.epochs * ipe
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)
    optimizer = torch.optim.Adam(_param_groups(model, config.weight_decay),
                                 lr=config.base_lr, betas=config.betas)
    model.train()
    frozen = config.freeze_iterations > 0
    set_backbone_frozen(model, frozen)
    history_file = open(run_dir / "history.jsonl", "w") if run_dir is not None else None

    try:
        it = 0
        for epoch in range(1, config.epochs + 1):
            if it >= total:
                break
            for _ in range(ipe):
                if it >= total:
                    break
                if frozen and it >= config.freeze_iterations:
                    frozen = False
                    set_backbone_frozen(model, False)
                lr = lr_schedule(config, it, total)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                rng = np.random.default_rng([config.seed, it])
                batch = sample_pk_batch(dataset, config.P, config.K, rng)
                inputs = make_branch_batch(batch, augment_config, rng, config.homologous)
                labels = torch.from_numpy(batch.labels)
                outputs = model(inputs)
                bundle = total_loss(outputs, labels, loss_config, model.roles)

                bad = bundle.nonfinite_terms()
                if bad:
                    raise TrainingError(f"non-finite loss at iteration {it}: {', '.join(bad)}")
                if config.debug_checks:
                    bundle.check_identities(1e-9)

                optimizer.zero_grad(set_to_none=True)
                bundle.total.backward()
                optimizer.step()

                record = {"iteration": it, "epoch": epoch, "lr": lr, "frozen": frozen,
                          **bundle.as_dict()}
                history.iterations.append(record)
                if history_file is not None:
                    history_file.write(json.dumps({"type": "iteration", **record}) + "\n")
                if on_step is not None:
                    on_step(it, bundle, model)
                it += 1

            summary = _epoch_summary(history.epoch_records(epoch), epoch)
            if eval_sets is not None and config.eval_every and epoch % config.eval_every == 0:
                report = evaluate_model(model, eval_sets[0], eval_sets[1], augment_config, eval_metric)
                summary["metrics"] = report.to_json()
                model.train()
                set_backbone_frozen(model, frozen)
            history.epochs.append(summary)
            log.info("epoch %d: loss %.4f kl %.4f", epoch, summary["mean_total"], summary["mean_kl"])
            if history_file is not None:
                history_file.write(json.dumps({"type": "epoch", **summary}) + "\n")
                history_file.flush()
            if run_dir is not None:
                save_checkpoint(run_dir / f"ep{epoch}.pt", model, run_config or {},
                                epoch=epoch, iteration=it)
    finally:
        if history_file is not None:
            history_file.close()
    model.eval()
    return model, history


def _epoch_summary(records: list, epoch: int) -> dict:
    totals = [r["total"] for r in records]
    kls = [np.mean([b["mutual_kl"] for b in r["branches"]]) for r in records]
    return {"epoch": epoch, "iterations": len(records),
            "mean_total": float(np.mean(totals)) if totals else float("nan"),
            "mean_kl": float(np.mean(kls)) if kls else float("nan")}
