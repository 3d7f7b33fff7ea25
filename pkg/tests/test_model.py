import numpy as np
import pytest
import torch
import torch.nn as nn

from lds_reid.augment import AugmentConfig
from lds_reid.evaluation import extract_features
from lds_reid.losses import LossConfig, total_loss
from lds_reid.model import (
    ModelConfig,
    MultiBranchModel,
    SmallCNN,
    build_model,
    extract_concat_features,
    forward_branch,
    forward_multibranch,
    load_branch_weights,
    read_checkpoint,
    register_backbone,
    roles_for_plan,
    save_checkpoint,
)

PLAN = ["identity", "erase", "scale"]


def make(plan=PLAN, M=5, seed=0, **backbone_kwargs):
    torch.manual_seed(seed)
    return build_model(ModelConfig(backbone_kwargs=backbone_kwargs), M, plan)


def batch(n=6, h=32, w=16, seed=0):
    return torch.randn(n, 3, h, w, generator=torch.Generator().manual_seed(seed))


def test_branch_shapes():
    m = make(channels=(8, 16, 32, 64))
    out = forward_branch(m.branches[0], batch())
    assert out.embedding.shape == (6, 64)
    assert out.logits.shape == (6, 5)
    assert out.feature_map.shape == (6, 64, 2, 1)


def test_default_backbone_dims():
    m = make()
    assert m.embedding_dim == 128
    assert SmallCNN().downsampling == 16


def test_embedding_is_bn_of_pooled_map():
    m = make(channels=(8, 16))
    br = m.branches[0].eval()
    out = br(batch())
    pooled = out.feature_map.mean(dim=(2, 3))
    assert torch.allclose(out.embedding, br.neck(pooled), atol=1e-6)


def test_batch_of_one_in_training_mode():
    m = make(channels=(8, 16))
    with pytest.raises(ValueError, match="at least 2"):
        m.branches[0].train()(batch(1))
    m.branches[0].eval()(batch(1))


def test_zero_head_gives_uniform_probabilities():
    m = make(channels=(8, 16))
    br = m.branches[0].eval()
    nn.init.zeros_(br.head.weight)
    out = br(torch.zeros(2, 3, 32, 16))
    p = torch.softmax(out.logits, 1)
    assert torch.allclose(p, torch.full_like(p, 1 / 5))


def test_identical_inputs_identical_rows():
    m = make(channels=(8, 16)).train()
    x = batch(4)
    x[1] = x[0]
    out = m.branches[0](x)
    assert torch.equal(out.embedding[0], out.embedding[1])
    assert torch.equal(out.cosine[0], out.cosine[1])


def test_multibranch_single():
    m = make(plan=["identity"], channels=(8, 16)).eval()
    x = batch()
    a = forward_multibranch(m, [x])[0]
    b = forward_branch(m.branches[0], x)
    assert torch.equal(a.embedding, b.embedding)


def test_multibranch_symmetry_and_mismatch():
    m = make(plan=["identity"] * 3, channels=(8, 16)).eval()
    for b in m.branches[1:]:
        b.load_state_dict(m.branches[0].state_dict())
    x = batch()
    outs = m([x, x, x])
    assert all(torch.equal(outs[0].logits, o.logits) for o in outs[1:])
    with pytest.raises(ValueError, match="3 branches"):
        m([x, x])


def test_lds_outputs_differ():
    from lds_reid.augment import homologous_expand
    from lds_reid.model import images_to_tensor
    cfg = AugmentConfig(target_size=(32, 16), crop_padding=2)
    rng = np.random.default_rng(0)
    dists = []
    for seed in range(3):
        m = make(plan=PLAN, channels=(8, 16), seed=seed).eval()
        for b in m.branches[1:]:
            b.load_state_dict(m.branches[0].state_dict())
        imgs = [rng.integers(0, 256, (32, 16, 3), dtype=np.uint8) for _ in range(6)]
        per = [homologous_expand(im, cfg, rng).images for im in imgs]
        inputs = [images_to_tensor([p[k] for p in per], cfg) for k in range(3)]
        outs = m(inputs)
        dists.append(float((outs[0].logits - outs[1].logits).abs().mean().detach()
                           + (outs[0].logits - outs[2].logits).abs().mean().detach()))
    assert np.mean(dists) > 0


def test_concat_features():
    m = make(channels=(8, 16, 32, 64))
    x = batch()
    f = extract_concat_features(m, x)
    assert f.shape == (6, 3 * 64)
    m.eval()
    for k, b in enumerate(m.branches):
        assert torch.allclose(f[:, 64 * k:64 * (k + 1)], b(x).embedding)
    one = make(plan=["identity"], channels=(8, 16))
    assert torch.equal(extract_concat_features(one, x), one.eval().branches[0](x).embedding)


def test_concat_permutation_isometry_and_decomposition():
    m = make(channels=(8, 16))
    x = batch(5)
    f = extract_concat_features(m, x).double()
    perm = MultiBranchModel([m.branches[2], m.branches[0], m.branches[1]])
    g = extract_concat_features(perm, x).double()
    assert torch.allclose(torch.cdist(f, f), torch.cdist(g, g), atol=1e-9)
    d = 16
    per_branch = sum(torch.cdist(f[:, k * d:(k + 1) * d], f[:, k * d:(k + 1) * d]) ** 2 for k in range(3))
    assert torch.allclose(torch.cdist(f, f) ** 2, per_branch, atol=1e-9)


def test_eval_pipeline_feeds_identical_images(small_toy):
    m = make(channels=(8, 16), M=8)
    seen = []
    for b in m.branches:
        b.register_forward_pre_hook(lambda mod, args: seen.append(args[0].clone()))
    extract_features(m, small_toy[1], AugmentConfig(target_size=(32, 16)))
    for k in range(0, len(seen), 3):
        assert torch.equal(seen[k], seen[k + 1]) and torch.equal(seen[k], seen[k + 2])


def _double_model(plan=PLAN):
    m = make(plan=plan, channels=(4, 8), M=4).double().train()
    return m


def _loss_for(m, xs, labels, which=None):
    outs = m(xs)
    b = total_loss(outs, labels, LossConfig(), m.roles)
    return b.total if which is None else b.branches[which].total


def test_gradient_flow_every_branch_parameter():
    m = _double_model()
    g = torch.Generator().manual_seed(1)
    xs = [torch.randn(8, 3, 16, 8, generator=g, dtype=torch.float64) for _ in range(3)]
    labels = torch.arange(8) // 2
    _loss_for(m, xs, labels).backward()
    for name, p in m.named_parameters():
        if p.requires_grad:
            assert p.grad is not None and p.grad.abs().sum() > 0, name
    # finite-difference spot check; a branch's gradient comes from its own
    # loss only, peers enter that loss as constants
    params = dict(m.named_parameters())
    for k, name in [(0, "branches.0.backbone.body.0.weight"), (1, "branches.1.neck.weight"),
                    (2, "branches.2.head.weight")]:
        p = params[name]
        idx = (0,) * p.dim()
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + 1e-5
            up = _loss_for(m, xs, labels, which=k).item()
            p[idx] = orig - 1e-5
            down = _loss_for(m, xs, labels, which=k).item()
            p[idx] = orig
        numeric = (up - down) / 2e-5
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8), name


def test_stop_gradient_through_kl():
    m = _double_model()
    g = torch.Generator().manual_seed(2)
    xs = [torch.randn(8, 3, 16, 8, generator=g, dtype=torch.float64) for _ in range(3)]
    labels = torch.arange(8) // 2
    loss0 = _loss_for(m, xs, labels, which=0)
    assert loss0.requires_grad
    loss0.backward()
    for k in (1, 2):
        for p in m.branches[k].parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
    # the peer still influences the value of branch 0's KL term
    with torch.no_grad():
        before = total_loss(m(xs), labels, LossConfig()).branches[0].mutual_kl.item()
        m.branches[1].head.weight.add_(0.5)
        after = total_loss(m(xs), labels, LossConfig()).branches[0].mutual_kl.item()
    assert before != after


def test_roles():
    assert roles_for_plan(PLAN) == ["master", "servant:occlude", "servant:scale"]
    assert roles_for_plan(["identity", "identity"]) == ["master", "servant:general"]
    assert roles_for_plan(["erase", "scale"])[0] == "master"


def test_registry_accepts_custom_backbone():
    @register_backbone("tiny_test")
    class Tiny(nn.Module):
        out_channels = 6

        def __init__(self):
            super().__init__()
            self.conv = nn.Conv2d(3, 6, 3, stride=4)

        def forward(self, x):
            return self.conv(x)

    torch.manual_seed(0)
    m = build_model(ModelConfig(backbone="tiny_test"), 3, ["identity", "erase"])
    assert extract_concat_features(m, batch()).shape == (6, 12)
    with pytest.raises(KeyError):
        build_model(ModelConfig(backbone="nope"), 3, ["identity"])


def test_checkpoint_roundtrip(tmp_path):
    m = make(channels=(8, 16))
    path = save_checkpoint(tmp_path / "ep1.pt", m, {"name": "x"}, epoch=1)
    payload = read_checkpoint(tmp_path / "ep1")
    assert payload["version"] == 1 and payload["config"] == {"name": "x"}
    assert payload["roles"] == m.roles and set(payload["branches"]) == {"0", "1", "2"}
    other = make(channels=(8, 16), seed=9)
    load_branch_weights(other, payload)
    x = batch()
    assert torch.equal(extract_concat_features(m, x), extract_concat_features(other, x))
    assert path.exists()
