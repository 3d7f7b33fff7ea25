"""Per-branch losses and their combination across branches.

Each branch is trained with a soft-margin batch-hard triplet loss on its
embedding and an additive-margin softmax on cosine logits. Branches are tied
together by KL terms between their class distributions, with peer
distributions treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

KL_MODES = ("mutual", "master_servant", "none")
KL_DIRECTIONS = ("forward", "reverse")
PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    triplet_margin: float = 0.0
    scale: float = 16.0
    margin: float = 0.25
    kl_mode: str = "mutual"
    kl_direction: str = "forward"
    triplet_on_normalized: bool = False
    prob_floor: float = PROB_FLOOR

    def __post_init__(self):
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not abs(self.triplet_margin) < float("inf"):
            raise ValueError("triplet_margin must be finite")


def _check_pk_labels(labels: torch.Tensor):
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ValueError(f"batch-hard mining needs >= 2 identities, got only label {uniq.tolist()}")
    lonely = uniq[counts < 2]
    if len(lonely):
        raise ValueError(f"label {int(lonely[0])} appears once in the batch; it has no positive")


def euclidean_dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    diff = x.unsqueeze(1) - y.unsqueeze(0)
    return diff.pow(2).sum(-1).clamp_min(1e-12).sqrt()


def triplet_soft_margin_batch_hard(embeddings: torch.Tensor, labels: torch.Tensor,
                                   margin: float = 0.0) -> torch.Tensor:
    """Mean over anchors of softplus(margin + hardest positive - hardest negative)."""
    _check_pk_labels(labels)
    dist = euclidean_dist(embeddings, embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).amax(1)
    hardest_neg = dist.masked_fill(same, float("inf")).amin(1)
    return F.softplus(margin + hardest_pos - hardest_neg).mean()


def cosine_matrix(embeddings: torch.Tensor, weight: torch.Tensor, strict: bool = True) -> torch.Tensor:
    if strict:
        if bool((embeddings.detach().norm(dim=1) == 0).any()):
            raise ValueError("zero-norm embedding cannot be normalized")
        if bool((weight.detach().norm(dim=1) == 0).any()):
            raise ValueError("zero-norm classifier weight row cannot be normalized")
    return F.normalize(embeddings, dim=1) @ F.normalize(weight, dim=1).t()


def am_softmax_from_cosine(cosine: torch.Tensor, labels: torch.Tensor,
                           scale: float, margin: float) -> torch.Tensor:
    if cosine.shape[1] < 2:
        raise ValueError("AM-softmax needs at least 2 classes")
    onehot = F.one_hot(labels, cosine.shape[1]).to(cosine.dtype)
    # cross_entropy subtracts the max logit internally
    return F.cross_entropy(scale * (cosine - margin * onehot), labels)


def am_softmax_loss(embeddings: torch.Tensor, labels: torch.Tensor, weight: torch.Tensor,
                    scale: float = 16.0, margin: float = 0.25) -> torch.Tensor:
    return am_softmax_from_cosine(cosine_matrix(embeddings, weight), labels, scale, margin)


def class_probabilities(embeddings: torch.Tensor, weight: torch.Tensor,
                        scale: float = 16.0) -> torch.Tensor:
    """Softmax over scaled cosine logits. No margin is applied here."""
    return torch.softmax(scale * cosine_matrix(embeddings, weight), dim=1)


def kl_rows(p: torch.Tensor, q: torch.Tensor, floor: float = PROB_FLOOR) -> torch.Tensor:
    """Row-wise KL(p || q) with 0 log 0 = 0 and q floored at ``floor``."""
    terms = p * (p.clamp_min(floor).log() - q.clamp_min(floor).log())
    return torch.where(p > 0, terms, torch.zeros_like(terms)).sum(-1)


def _kl_to_peers(distributions, theta: int, peers: Sequence[int], direction: str,
                 floor: float) -> torch.Tensor:
    p = distributions[theta]
    total = 0.0
    for s in peers:
        q = distributions[s].detach()
        kl = kl_rows(p, q, floor) if direction == "forward" else kl_rows(q, p, floor)
        total = total + kl.mean()
    return total / len(peers)


def mutual_kl_loss(distributions, theta: int, direction: str = "forward",
                   floor: float = PROB_FLOOR) -> torch.Tensor:
    """Average over peers s != theta of the batch-mean KL(p_theta || p_s).

    ``distributions`` is a sequence (or S x N x M tensor) of per-branch class
    distributions. Peers are detached, so no gradient reaches other branches.
    """
    S = len(distributions)
    if S < 2:
        raise ValueError(f"mutual KL needs at least 2 branches, got {S}")
    peers = [s for s in range(S) if s != theta]
    return _kl_to_peers(distributions, theta, peers, direction, floor)


def master_servant_kl_loss(distributions, roles: Sequence[str], direction: str = "forward",
                           floor: float = PROB_FLOOR) -> list:
    """Per-branch KL terms where servants only talk to the master."""
    masters = [i for i, r in enumerate(roles) if r == "master"]
    if len(masters) != 1:
        raise ValueError(f"master-servant learning needs exactly one master, got {len(masters)}")
    if len(roles) != len(distributions):
        raise ValueError("roles and distributions differ in length")
    if len(roles) < 2:
        raise ValueError("master-servant learning needs at least 2 branches")
    master = masters[0]
    out = []
    for theta in range(len(roles)):
        peers = [s for s in range(len(roles)) if s != theta] if theta == master else [master]
        out.append(_kl_to_peers(distributions, theta, peers, direction, floor))
    return out


@dataclass
class BranchLoss:
    triplet: torch.Tensor
    classification: torch.Tensor
    conquer: torch.Tensor
    mutual_kl: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in
                ("triplet", "classification", "conquer", "mutual_kl", "total")}


@dataclass
class LossBundle:
    branches: list = field(default_factory=list)
    total: Optional[torch.Tensor] = None

    def as_dict(self) -> dict:
        return {"total": float(self.total.detach()), "branches": [b.as_dict() for b in self.branches]}

    def nonfinite_terms(self) -> list:
        bad = []
        for k, b in enumerate(self.branches):
            for name, value in b.as_dict().items():
                if not torch.isfinite(torch.tensor(value)):
                    bad.append(f"branch {k} {name}")
        if not torch.isfinite(self.total.detach()):
            bad.append("total")
        return bad

    def check_identities(self, tol: float = 1e-9):
        """Assert conquer = triplet + cls, branch total = kl + conquer, total = sum."""
        d = self.as_dict()
        for k, b in enumerate(d["branches"]):
            if abs(b["conquer"] - (b["triplet"] + b["classification"])) > tol:
                raise AssertionError(f"branch {k}: conquer != triplet + classification")
            if abs(b["total"] - (b["mutual_kl"] + b["conquer"])) > tol:
                raise AssertionError(f"branch {k}: total != mutual_kl + conquer")
        if abs(d["total"] - sum(b["total"] for b in d["branches"])) > tol:
            raise AssertionError("total != sum of branch totals")


def total_loss(outputs: Sequence, labels: torch.Tensor, config: LossConfig,
               roles: Optional[Sequence[str]] = None) -> LossBundle:
    """Combine per-branch losses of ``outputs`` (objects with ``embedding`` and
    ``cosine`` tensors) into a LossBundle.

    Sums are carried out in float64 so the bundle identities hold to round-off.
    """
    S = len(outputs)
    probs = [torch.softmax(config.scale * o.cosine, dim=1) for o in outputs]
    if S == 1 or config.kl_mode == "none":
        kls = [torch.zeros((), dtype=torch.float64) for _ in range(S)]
    elif config.kl_mode == "mutual":
        kls = [mutual_kl_loss(probs, k, config.kl_direction, config.prob_floor) for k in range(S)]
    else:
        if roles is None:
            raise ValueError("master_servant KL mode needs branch roles")
        kls = master_servant_kl_loss(probs, roles, config.kl_direction, config.prob_floor)

    branches = []
    for o, kl in zip(outputs, kls):
        emb = F.normalize(o.embedding, dim=1) if config.triplet_on_normalized else o.embedding
        trip = triplet_soft_margin_batch_hard(emb, labels, config.triplet_margin).double()
        cls = am_softmax_from_cosine(o.cosine, labels, config.scale, config.margin).double()
        conquer = trip + cls
        kl = torch.as_tensor(kl).double()
        branches.append(BranchLoss(trip, cls, conquer, kl, kl + conquer))
    total = branches[0].total
    for b in branches[1:]:
        total = total + b.total
    return LossBundle(branches, total)
