"""Multi-branch network: per branch a backbone, global average pooling, a BN
neck and a cosine classifier. Branches share nothing but the label space."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import normalize_image

CHECKPOINT_FORMAT = "lds-reid-checkpoint"
CHECKPOINT_VERSION = 1

BACKBONES: dict = {}


def register_backbone(name: str):
    """Register a factory ``f(**kwargs) -> nn.Module``. The module must expose
    ``out_channels`` and map B x 3 x H x W to a B x C x h x w feature map."""
    def wrap(factory: Callable):
        BACKBONES[name] = factory
        return factory
    return wrap


def build_backbone(name: str, **kwargs) -> nn.Module:
    if name not in BACKBONES:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    return BACKBONES[name](**kwargs)


@register_backbone("small_cnn")
class SmallCNN(nn.Module):
    def __init__(self, channels: Sequence[int] = (32, 64, 128, 128), in_channels: int = 3):
        super().__init__()
        layers = []
        prev = in_channels
        for c in channels:
            layers += [
                nn.Conv2d(prev, c, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
            ]
            prev = c
        self.body = nn.Sequential(*layers)
        self.out_channels = prev
        self.downsampling = 2 ** len(channels)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return self.body(x)


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, num_classes: int, scale: float = 16.0, margin: float = 0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        nn.init.normal_(self.weight, std=0.01)
        self.scale = scale
        self.margin = margin

    def forward(self, embedding):
        return F.normalize(embedding, dim=1) @ F.normalize(self.weight, dim=1).t()


@dataclass
class BranchOutput:
    feature_map: torch.Tensor
    embedding: torch.Tensor
    cosine: torch.Tensor
    scale: float

    @property
    def logits(self) -> torch.Tensor:
        return self.scale * self.cosine


class Branch(nn.Module):
    def __init__(self, backbone: nn.Module, num_classes: int, scale: float = 16.0,
                 margin: float = 0.25):
        super().__init__()
        self.backbone = backbone
        dim = backbone.out_channels
        self.neck = nn.BatchNorm1d(dim)
        # BN neck without a trainable shift
        self.neck.bias.requires_grad_(False)
        self.head = ClassifierHead(dim, num_classes, scale, margin)

    @property
    def embedding_dim(self) -> int:
        return self.neck.num_features

    def forward(self, x) -> BranchOutput:
        if self.training and x.shape[0] < 2:
            raise ValueError("training-mode forward needs a batch of at least 2 (batch statistics)")
        fmap = self.backbone(x)
        pooled = fmap.mean(dim=(2, 3))
        emb = self.neck(pooled)
        return BranchOutput(fmap, emb, self.head(emb), self.head.scale)


def roles_for_plan(plan: Sequence[str]) -> list:
    """Map a branch plan to roles; the first untouched branch is the master."""
    roles = []
    for op in plan:
        if op == "identity":
            roles.append("master" if "master" not in roles else "servant:general")
        elif op == "erase":
            roles.append("servant:occlude")
        else:
            roles.append("servant:scale")
    if "master" not in roles:
        roles[0] = "master"
    return roles


class MultiBranchModel(nn.Module):
    def __init__(self, branches: Sequence[Branch], roles: Optional[Sequence[str]] = None):
        super().__init__()
        self.branches = nn.ModuleList(branches)
        self.roles = list(roles) if roles is not None else ["master"] + ["servant"] * (len(branches) - 1)
        if len(self.roles) != len(self.branches):
            raise ValueError("one role per branch required")
        dims = {b.embedding_dim for b in self.branches}
        classes = {b.head.weight.shape[0] for b in self.branches}
        if len(dims) != 1 or len(classes) != 1:
            raise ValueError("all branches must share embedding dimension and class count")

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def embedding_dim(self) -> int:
        return self.branches[0].embedding_dim

    def backbone_parameters(self):
        for b in self.branches:
            yield from b.backbone.parameters()

    def forward(self, inputs: Sequence[torch.Tensor]) -> list:
        return forward_multibranch(self, inputs)


@dataclass
class ModelConfig:
    backbone: str = "small_cnn"
    backbone_kwargs: dict = field(default_factory=dict)


def build_model(config: ModelConfig, num_classes: int, plan: Sequence[str],
                scale: float = 16.0, margin: float = 0.25) -> MultiBranchModel:
    branches = [Branch(build_backbone(config.backbone, **config.backbone_kwargs),
                       num_classes, scale, margin) for _ in plan]
    return MultiBranchModel(branches, roles_for_plan(plan))


def forward_branch(branch: Branch, images: torch.Tensor) -> BranchOutput:
    return branch(images)


def forward_multibranch(model: MultiBranchModel, inputs: Sequence[torch.Tensor]) -> list:
    if len(inputs) != model.num_branches:
        raise ValueError(f"model has {model.num_branches} branches but got {len(inputs)} inputs")
    return [b(x) for b, x in zip(model.branches, inputs)]


@torch.no_grad()
def extract_concat_features(model: MultiBranchModel, images: torch.Tensor) -> torch.Tensor:
    """Concatenate BN-neck embeddings of every branch for one normalized batch.

    All branches see the same image; no scene simulation at test time.
    """
    was_training = model.training
    model.eval()
    try:
        feats = [b(images).embedding for b in model.branches]
    finally:
        model.train(was_training)
    return torch.cat(feats, dim=1)


def images_to_tensor(images: Sequence[np.ndarray], augment_config=None) -> torch.Tensor:
    arr = np.stack([normalize_image(im, augment_config) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: MultiBranchModel, config: dict, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "roles": list(model.roles),
        "num_classes": int(model.branches[0].head.weight.shape[0]),
        "branches": {str(i): b.state_dict() for i, b in enumerate(model.branches)},
        **extra,
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists() and path.with_suffix(".pt").exists():
        path = path.with_suffix(".pt")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an lds-reid checkpoint")
    if payload.get("version", 0) > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported")
    return payload


def load_branch_weights(model: MultiBranchModel, payload: dict):
    if len(payload["branches"]) != model.num_branches:
        raise ValueError("checkpoint branch count does not match the model")
    for i, b in enumerate(model.branches):
        b.load_state_dict(payload["branches"][str(i)])
    return model
