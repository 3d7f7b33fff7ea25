"""Glue between a RunConfig and the data/model/train/eval modules."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch

from .config import RunConfig, from_dict
from .data import generate_toy_dataset, load_market_format
from .evaluation import MetricsReport, evaluate_model
from .model import MultiBranchModel, build_model, load_branch_weights, read_checkpoint
from .train import TrainHistory, train_lds


def load_datasets(config: RunConfig, root: Optional[str] = None) -> tuple:
    root = root or config.data.root
    if root is not None:
        return load_market_format(root)
    return generate_toy_dataset(config.data.toy, config.data.toy_seed)


def new_model(config: RunConfig, num_classes: int) -> MultiBranchModel:
    torch.manual_seed(config.train.seed)
    return build_model(config.model, num_classes, config.augment.branch_plan,
                       config.loss.scale, config.loss.margin)


def train_run(config: RunConfig, run_dir=None, data_root: Optional[str] = None,
              datasets: Optional[tuple] = None, evaluate: bool = True):
    """Train from scratch and optionally evaluate; returns (model, history, report)."""
    train, query, gallery = datasets if datasets is not None else load_datasets(config, data_root)
    model = new_model(config, train.num_identities)
    snapshot = config.to_dict()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2) + "\n")
    model, history = train_lds(model, train, config.train, config.augment, config.loss,
                               run_dir=run_dir, eval_sets=(query, gallery), run_config=snapshot,
                               eval_metric=config.eval.metric)
    report = None
    if evaluate and len(query) and len(gallery):
        report = evaluate_model(model, query, gallery, config.augment, config.eval.metric,
                                config.eval.batch_size)
        if run_dir is not None:
            write_metrics(run_dir / "metrics.json", report)
    return model, history, report


def write_metrics(path, report: MetricsReport) -> str:
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return text


def load_trained(checkpoint) -> tuple:
    payload = read_checkpoint(checkpoint)
    config = from_dict(RunConfig, payload["config"])
    model = build_model(config.model, payload["num_classes"], config.augment.branch_plan,
                        config.loss.scale, config.loss.margin)
    load_branch_weights(model, payload)
    model.eval()
    return model, config


def history_kl_by_epoch(history: TrainHistory) -> list:
    return [e["mean_kl"] for e in history.epochs]
